//! Little-endian binary formats for model weights (`PHSW`) and feature
//! stores (`PHSF`).
//!
//! Tensors are written as `u32 rank`, `rank × u32 dims`, then the f64
//! payload in row-major order.
//!
//! Weight file: magic, `u32` version, the model config (`patch_size,
//! embed_dim, num_heads, head_dim, num_layers, num_registers, ffn_hidden` as
//! `u32`, `eps` as f64, `image_height, image_width, channels` as `u32`), then
//! tensors in this order: patch projection, patch bias, CLS token, register
//! tokens, positional table; for each layer `ln1 γ, ln1 β, W_Q, b_Q, W_K, b_K,
//! W_V, b_V, W_O, b_O, ln2 γ, ln2 β, FFN W1, FFN b1, FFN W2, FFN b2`; final
//! layer norm `γ, β`.
//!
//! Store file: magic, `u32` version, 32-byte model fingerprint, `u64` record
//! count, then per record `u32` id length, UTF-8 id, feature tensor, `u8`
//! cache flag, and when set the cached state: `u32` registers, grid height,
//! grid width, head count, per head attention, values and CLS contribution,
//! and finally the CLS input row.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use phs_core::numerics::{Matrix, Vector};
use phs_core::retrieval::{FeatureRecord, FeatureStore, Fingerprint};
use phs_core::vit::{AttentionState, LayerWeights, ModelConfig, ModelWeights};
use sha2::{Digest, Sha256};

use crate::error::{PhsError, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PHSW";
pub const STORE_MAGIC: &[u8; 4] = b"PHSF";
pub const FORMAT_VERSION: u32 = 1;

type LE = LittleEndian;

fn fmt_err(msg: impl Into<String>) -> PhsError {
    PhsError::Format(msg.into())
}

/// Maps truncation to a format error rather than an IO error.
fn rd<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| fmt_err(format!("truncated or unreadable payload: {e}")))
}

fn write_u32(out: &mut Vec<u8>, v: usize) {
    out.write_u32::<LE>(u32::try_from(v).expect("dimension fits in u32")).unwrap();
}

fn write_tensor(out: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    write_u32(out, dims.len());
    for &d in dims {
        write_u32(out, d);
    }
    for &v in data {
        out.write_f64::<LE>(v).unwrap();
    }
}

fn write_matrix(out: &mut Vec<u8>, m: &Matrix) {
    write_tensor(out, &[m.rows(), m.cols()], m.as_slice());
}

fn write_vector(out: &mut Vec<u8>, v: &Vector) {
    write_tensor(out, &[v.dim()], v.as_slice());
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    Ok(rd(r.read_u32::<LE>())? as usize)
}

/// Payloads above this many values are rejected before allocation.
const MAX_TENSOR_LEN: usize = 1 << 28;

fn read_tensor(r: &mut impl Read, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let found = read_u32(r)?;
    if found != rank {
        return Err(fmt_err(format!("expected rank-{rank} tensor, found rank {found}")));
    }
    let dims = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_TENSOR_LEN)
        .ok_or_else(|| fmt_err(format!("tensor dims {dims:?} too large")))?;
    let mut data = vec![0.0; len];
    rd(r.read_f64_into::<LE>(&mut data))?;
    Ok((dims, data))
}

fn read_matrix(r: &mut impl Read, rows: usize, cols: usize, what: &'static str) -> Result<Matrix> {
    let (dims, data) = read_tensor(r, 2)?;
    if dims != [rows, cols] {
        return Err(phs_core::Error::DimensionMismatch {
            context: what,
            expected: rows * cols,
            actual: dims[0] * dims[1],
        }
        .into());
    }
    Ok(Matrix::new(rows, cols, data)?)
}

fn read_any_matrix(r: &mut impl Read) -> Result<Matrix> {
    let (dims, data) = read_tensor(r, 2)?;
    Ok(Matrix::new(dims[0], dims[1], data)?)
}

fn read_vector(r: &mut impl Read, dim: usize, what: &'static str) -> Result<Vector> {
    let v = read_any_vector(r)?;
    if v.dim() != dim {
        return Err(phs_core::Error::DimensionMismatch {
            context: what,
            expected: dim,
            actual: v.dim(),
        }
        .into());
    }
    Ok(v)
}

fn read_any_vector(r: &mut impl Read) -> Result<Vector> {
    let (_, data) = read_tensor(r, 1)?;
    Ok(Vector::new(data)?)
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    rd(r.read_exact(&mut found))?;
    if &found != magic {
        return Err(fmt_err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = rd(r.read_u32::<LE>())?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    Ok(())
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        _ => Err(fmt_err("trailing bytes after payload")),
    }
}

/// Serialized weight file bytes.
pub fn encode_weights(w: &ModelWeights) -> Vec<u8> {
    let c = &w.config;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.write_u32::<LE>(FORMAT_VERSION).unwrap();
    for v in [c.patch_size, c.embed_dim, c.num_heads, c.head_dim, c.num_layers, c.num_registers, c.ffn_hidden] {
        write_u32(&mut out, v);
    }
    out.write_f64::<LE>(c.eps).unwrap();
    for v in [c.image_height, c.image_width, c.channels] {
        write_u32(&mut out, v);
    }
    write_matrix(&mut out, &w.patch_projection);
    write_vector(&mut out, &w.patch_bias);
    write_vector(&mut out, &w.cls_token);
    write_matrix(&mut out, &w.register_tokens);
    write_matrix(&mut out, &w.positional);
    for l in &w.layers {
        write_vector(&mut out, &l.ln1_gamma);
        write_vector(&mut out, &l.ln1_beta);
        for (m, b) in [(&l.w_q, &l.b_q), (&l.w_k, &l.b_k), (&l.w_v, &l.b_v), (&l.w_o, &l.b_o)] {
            write_matrix(&mut out, m);
            write_vector(&mut out, b);
        }
        write_vector(&mut out, &l.ln2_gamma);
        write_vector(&mut out, &l.ln2_beta);
        write_matrix(&mut out, &l.ffn_w1);
        write_vector(&mut out, &l.ffn_b1);
        write_matrix(&mut out, &l.ffn_w2);
        write_vector(&mut out, &l.ffn_b2);
    }
    write_vector(&mut out, &w.final_ln_gamma);
    write_vector(&mut out, &w.final_ln_beta);
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let r = &mut &bytes[..];
    read_header(r, WEIGHTS_MAGIC)?;
    let mut ints = [0usize; 7];
    for v in &mut ints {
        *v = read_u32(r)?;
    }
    let eps = rd(r.read_f64::<LE>())?;
    let config = ModelConfig {
        patch_size: ints[0],
        embed_dim: ints[1],
        num_heads: ints[2],
        head_dim: ints[3],
        num_layers: ints[4],
        num_registers: ints[5],
        ffn_hidden: ints[6],
        eps,
        image_height: read_u32(r)?,
        image_width: read_u32(r)?,
        channels: read_u32(r)?,
    };
    let mut w = ModelWeights::zeros(config)?;
    let (d, f) = (config.embed_dim, config.ffn_hidden);
    w.patch_projection = read_matrix(r, config.patch_dim(), d, "patch projection")?;
    w.patch_bias = read_vector(r, d, "patch bias")?;
    w.cls_token = read_vector(r, d, "CLS token")?;
    w.register_tokens = read_matrix(r, config.num_registers, d, "register tokens")?;
    w.positional = read_matrix(r, config.seq_len(), d, "positional table")?;
    for l in &mut w.layers {
        *l = LayerWeights {
            ln1_gamma: read_vector(r, d, "ln1 gamma")?,
            ln1_beta: read_vector(r, d, "ln1 beta")?,
            w_q: read_matrix(r, d, d, "W_Q")?,
            b_q: read_vector(r, d, "b_Q")?,
            w_k: read_matrix(r, d, d, "W_K")?,
            b_k: read_vector(r, d, "b_K")?,
            w_v: read_matrix(r, d, d, "W_V")?,
            b_v: read_vector(r, d, "b_V")?,
            w_o: read_matrix(r, d, d, "W_O")?,
            b_o: read_vector(r, d, "b_O")?,
            ln2_gamma: read_vector(r, d, "ln2 gamma")?,
            ln2_beta: read_vector(r, d, "ln2 beta")?,
            ffn_w1: read_matrix(r, d, f, "FFN W1")?,
            ffn_b1: read_vector(r, f, "FFN b1")?,
            ffn_w2: read_matrix(r, f, d, "FFN W2")?,
            ffn_b2: read_vector(r, d, "FFN b2")?,
        };
    }
    w.final_ln_gamma = read_vector(r, d, "final gamma")?;
    w.final_ln_beta = read_vector(r, d, "final beta")?;
    expect_eof(r)?;
    w.validate()?;
    Ok(w)
}

/// SHA-256 of the serialized weight file.
pub fn fingerprint(w: &ModelWeights) -> Fingerprint {
    fingerprint_bytes(&encode_weights(w))
}

pub fn fingerprint_bytes(bytes: &[u8]) -> Fingerprint {
    Fingerprint(Sha256::digest(bytes).into())
}

pub fn save_weights(path: &Path, w: &ModelWeights) -> Result<()> {
    fs::write(path, encode_weights(w)).map_err(|e| PhsError::io(path, e))
}

/// Loads weights and the fingerprint of the file they came from.
pub fn load_weights(path: &Path) -> Result<(ModelWeights, Fingerprint)> {
    let bytes = fs::read(path).map_err(|e| PhsError::io(path, e))?;
    Ok((decode_weights(&bytes)?, fingerprint_bytes(&bytes)))
}

fn write_state(out: &mut Vec<u8>, s: &AttentionState) {
    write_u32(out, s.num_registers);
    write_u32(out, s.grid_height);
    write_u32(out, s.grid_width);
    write_u32(out, s.num_heads());
    for i in 0..s.num_heads() {
        write_matrix(out, &s.attention[i]);
        write_matrix(out, &s.values[i]);
        write_vector(out, &s.cls_contributions[i]);
    }
    write_vector(out, &s.cls_input);
}

fn read_state(r: &mut impl Read) -> Result<AttentionState> {
    let num_registers = read_u32(r)?;
    let grid_height = read_u32(r)?;
    let grid_width = read_u32(r)?;
    let heads = read_u32(r)?;
    if heads > 4096 {
        return Err(fmt_err(format!("implausible head count {heads}")));
    }
    let (mut attention, mut values, mut cls_contributions) = (vec![], vec![], vec![]);
    for _ in 0..heads {
        attention.push(read_any_matrix(r)?);
        values.push(read_any_matrix(r)?);
        cls_contributions.push(read_any_vector(r)?);
    }
    Ok(AttentionState {
        num_registers,
        grid_height,
        grid_width,
        attention,
        values,
        cls_contributions,
        cls_input: read_any_vector(r)?,
    })
}

pub fn encode_store(store: &FeatureStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    out.write_u32::<LE>(FORMAT_VERSION).unwrap();
    out.extend_from_slice(&store.fingerprint.0);
    out.write_u64::<LE>(store.len() as u64).unwrap();
    for rec in store.records() {
        write_u32(&mut out, rec.image_id.len());
        out.extend_from_slice(rec.image_id.as_bytes());
        write_vector(&mut out, &rec.feature);
        match &rec.cached {
            Some(s) => {
                out.push(1);
                write_state(&mut out, s);
            }
            None => out.push(0),
        }
    }
    out
}

/// Decodes a store, verifying that it was built with `expected`.
pub fn decode_store(bytes: &[u8], expected: &Fingerprint) -> Result<FeatureStore> {
    let r = &mut &bytes[..];
    read_header(r, STORE_MAGIC)?;
    let mut fp = [0u8; 32];
    rd(r.read_exact(&mut fp))?;
    let found = Fingerprint(fp);
    if &found != expected {
        return Err(PhsError::FingerprintMismatch {
            expected: *expected,
            found,
        });
    }
    let count = rd(r.read_u64::<LE>())?;
    let mut store = FeatureStore::new(found);
    for _ in 0..count {
        let len = read_u32(r)?;
        if len > r.len() {
            return Err(fmt_err("record id runs past end of file"));
        }
        let mut id = vec![0u8; len];
        rd(r.read_exact(&mut id))?;
        let image_id = String::from_utf8(id).map_err(|_| fmt_err("record id is not UTF-8"))?;
        let feature = read_any_vector(r)?;
        let cached = match rd(r.read_u8())? {
            0 => None,
            1 => Some(read_state(r)?),
            flag => return Err(fmt_err(format!("bad cache flag {flag}"))),
        };
        store.push(FeatureRecord {
            image_id,
            feature,
            cached,
        })?;
    }
    expect_eof(r)?;
    Ok(store)
}

pub fn save_store(path: &Path, store: &FeatureStore) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| PhsError::io(path, e))?;
    f.write_all(&encode_store(store)).map_err(|e| PhsError::io(path, e))
}

pub fn load_store(path: &Path, expected: &Fingerprint) -> Result<FeatureStore> {
    let bytes = fs::read(path).map_err(|e| PhsError::io(path, e))?;
    decode_store(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use phs_core::vit::gen_toy_model;

    #[test]
    fn weights_round_trip_bit_exact() {
        let w = gen_toy_model(7, ModelConfig::toy()).unwrap();
        let bytes = encode_weights(&w);
        assert_eq!(&bytes[..4], b"PHSW");
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(encode_weights(&back), bytes);
    }

    #[test]
    fn corrupt_weights_are_rejected() {
        let w = gen_toy_model(7, ModelConfig::toy()).unwrap();
        let mut bytes = encode_weights(&w);
        assert!(matches!(decode_weights(&bytes[..bytes.len() - 3]), Err(PhsError::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_weights(&bytes), Err(PhsError::Format(m)) if m.contains("PHSW")));
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let a = gen_toy_model(1, ModelConfig::toy()).unwrap();
        let b = gen_toy_model(2, ModelConfig::toy()).unwrap();
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }
}
