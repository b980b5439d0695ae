//! Hand-constructed one-layer model for the quadrant corpus.
//!
//! Token features (d = 64, all sign-paired so every token has zero mean):
//!
//! | dims    | content                                |
//! |---------|----------------------------------------|
//! | 0..4    | matched-filter response per category   |
//! | 4..8    | negated category responses             |
//! | 8..12   | matched-filter response per distractor |
//! | 12..16  | negated distractor responses           |
//! | 16..20  | quadrant one-hot (positional)          |
//! | 20..24  | negated quadrant one-hot               |
//!
//! CLS and register tokens are zero, so the CLS query is the bias `b_Q`.
//! Head `q` reads the quadrant-`q` indicator through `W_K` and attends almost
//! only to that quadrant's patches. Every head copies dims 0..16 into its
//! value slot, and `W_O` sums the slots of all heads into each of the four
//! output slices. The FFN is zero, so the feature is the normalized sum of
//! per-quadrant texture responses.

use phs_core::numerics::{Matrix, Vector};
use phs_core::vit::{ModelConfig, ModelWeights};

use crate::corpus::{texture_value, CATEGORY_TEXTURES, DISTRACTOR_TEXTURES};
use crate::error::Result;

/// Matched-filter gain: a texture of amplitude `a` responds with `GAIN · a`.
pub const GAIN: f64 = 6.0;
/// Magnitude of the quadrant indicator.
pub const QUADRANT_SIGNAL: f64 = 4.0;
/// CLS query magnitude on the quadrant key.
pub const QUERY_GAIN: f64 = 10.0;

pub fn quadrant_config() -> ModelConfig {
    ModelConfig {
        patch_size: 8,
        embed_dim: 64,
        num_heads: 4,
        head_dim: 16,
        num_layers: 1,
        num_registers: 1,
        ffn_hidden: 256,
        eps: 1e-6,
        image_height: 32,
        image_width: 32,
        channels: 1,
    }
}

fn set(m: &mut Matrix, r: usize, c: usize, v: f64) {
    m.row_mut(r)[c] = v;
}

pub fn quadrant_model() -> Result<ModelWeights> {
    let c = quadrant_config();
    let mut w = ModelWeights::zeros(c)?;
    let (d, dk, p) = (c.embed_dim, c.head_dim, c.patch_size);

    let mut proj = Matrix::zeros(c.patch_dim(), d);
    let textures = CATEGORY_TEXTURES.iter().map(|t| (0, t)).chain(DISTRACTOR_TEXTURES.iter().map(|t| (8, t)));
    for (j, (base, t)) in textures.enumerate() {
        let col = base + j % 4;
        for pix in 0..p * p {
            let v = GAIN * texture_value(*t, pix / p, pix % p) / (p * p) as f64;
            set(&mut proj, pix, col, v);
            set(&mut proj, pix, col + 4, -v);
        }
    }
    w.patch_projection = proj;

    let (gh, gw) = (c.grid_height(), c.grid_width());
    let mut pos = Matrix::zeros(c.seq_len(), d);
    for t in 0..c.num_patches() {
        let (r, col) = (t / gw, t % gw);
        let q = (r / (gh / 2)) * 2 + col / (gw / 2);
        let row = 1 + c.num_registers + t;
        set(&mut pos, row, 16 + q, QUADRANT_SIGNAL);
        set(&mut pos, row, 20 + q, -QUADRANT_SIGNAL);
    }
    w.positional = pos;

    let layer = &mut w.layers[0];
    let mut b_q = vec![0.0; d];
    for q in 0..c.num_heads {
        set(&mut layer.w_k, 16 + q, q * dk, 1.0);
        b_q[q * dk] = QUERY_GAIN;
        for i in 0..16 {
            set(&mut layer.w_v, i, q * dk + i, 1.0);
            for slice in 0..c.num_heads {
                set(&mut layer.w_o, q * dk + i, slice * dk + i, 1.0);
            }
        }
    }
    layer.b_q = Vector::new(b_q)?;
    w.validate()?;
    Ok(w)
}
