// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy Vision Transformer: patchify, embed, pre-norm attention layers that
//! expose per-head attention, and CLS feature extraction.
//!
//! Token layout is fixed as `[CLS][registers][patches]`. Patch `(r, c)` of
//! the `grid_h × grid_w` grid is token `1 + R + r·grid_w + c`.
//!
//! Linear layers store weights as `in × out` matrices and act on row
//! vectors: `y = x·W + b`.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::numerics::{
    affine, gelu_matrix_in_place, layer_norm, layer_norm_rows, matmul, softmax_rows, Matrix, Vector,
};

/// Standard deviation of generated toy weights.
pub const TOY_WEIGHT_STD: f64 = 0.02;

/// Model geometry and hyperparameters. Input size is fixed per model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_layers: usize,
    pub num_registers: usize,
    pub ffn_hidden: usize,
    pub eps: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
}

impl ModelConfig {
    /// Default test configuration: 32×32 gray input, 8-pixel patches,
    /// `d = 16`, four heads, two layers, one register.
    pub fn toy() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 16,
            num_heads: 4,
            head_dim: 4,
            num_layers: 2,
            num_registers: 1,
            ffn_hidden: 64,
            eps: crate::numerics::DEFAULT_EPS,
            image_height: 32,
            image_width: 32,
            channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::BadParam(format!("model config: {msg}")));
        if self.embed_dim != self.num_heads * self.head_dim {
            return bad("embed_dim must equal num_heads * head_dim");
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return bad("need at least one head of positive width");
        }
        if self.num_layers == 0 {
            return bad("need at least one layer");
        }
        if self.patch_size == 0 || self.channels == 0 || self.ffn_hidden == 0 {
            return bad("patch_size, channels and ffn_hidden must be positive");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.image_height == 0
            || self.image_width == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return Err(Error::BadGeometry(format!(
                "{}x{} input not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid_height(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    /// `1 + R + N`.
    pub fn seq_len(&self) -> usize {
        1 + self.num_registers + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gamma: Vector,
    pub ln1_beta: Vector,
    pub w_q: Matrix,
    pub b_q: Vector,
    pub w_k: Matrix,
    pub b_k: Vector,
    pub w_v: Matrix,
    pub b_v: Vector,
    pub w_o: Matrix,
    pub b_o: Vector,
    pub ln2_gamma: Vector,
    pub ln2_beta: Vector,
    pub ffn_w1: Matrix,
    pub ffn_b1: Vector,
    pub ffn_w2: Matrix,
    pub ffn_b2: Vector,
}

impl LayerWeights {
    /// All-zero layer with unit layer-norm gains.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let f = config.ffn_hidden;
        Self {
            ln1_gamma: Vector::filled(d, 1.0),
            ln1_beta: Vector::zeros(d),
            w_q: Matrix::zeros(d, d),
            b_q: Vector::zeros(d),
            w_k: Matrix::zeros(d, d),
            b_k: Vector::zeros(d),
            w_v: Matrix::zeros(d, d),
            b_v: Vector::zeros(d),
            w_o: Matrix::zeros(d, d),
            b_o: Vector::zeros(d),
            ln2_gamma: Vector::filled(d, 1.0),
            ln2_beta: Vector::zeros(d),
            ffn_w1: Matrix::zeros(d, f),
            ffn_b1: Vector::zeros(f),
            ffn_w2: Matrix::zeros(f, d),
            ffn_b2: Vector::zeros(d),
        }
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        let d = config.embed_dim;
        let f = config.ffn_hidden;
        let vectors: [(&Vector, usize, &'static str); 10] = [
            (&self.ln1_gamma, d, "ln1_gamma"),
            (&self.ln1_beta, d, "ln1_beta"),
            (&self.b_q, d, "b_q"),
            (&self.b_k, d, "b_k"),
            (&self.b_v, d, "b_v"),
            (&self.b_o, d, "b_o"),
            (&self.ln2_gamma, d, "ln2_gamma"),
            (&self.ln2_beta, d, "ln2_beta"),
            (&self.ffn_b1, f, "ffn_b1"),
            (&self.ffn_b2, d, "ffn_b2"),
        ];
        for (v, want, name) in vectors {
            if v.dim() != want {
                return Err(Error::dims(name, want, v.dim()));
            }
        }
        let matrices: [(&Matrix, usize, usize, &'static str); 6] = [
            (&self.w_q, d, d, "w_q"),
            (&self.w_k, d, d, "w_k"),
            (&self.w_v, d, d, "w_v"),
            (&self.w_o, d, d, "w_o"),
            (&self.ffn_w1, d, f, "ffn_w1"),
            (&self.ffn_w2, f, d, "ffn_w2"),
        ];
        for (m, r, c, name) in matrices {
            check_matrix(m, r, c, name)?;
        }
        Ok(())
    }
}

fn check_matrix(m: &Matrix, rows: usize, cols: usize, name: &'static str) -> Result<()> {
    if m.rows() != rows {
        return Err(Error::dims(name, rows, m.rows()));
    }
    if m.cols() != cols {
        return Err(Error::dims(name, cols, m.cols()));
    }
    Ok(())
}

/// Full parameter set of a toy ViT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `P²C × d`.
    pub patch_projection: Matrix,
    pub patch_bias: Vector,
    pub cls_token: Vector,
    /// `R × d`.
    pub register_tokens: Matrix,
    /// `(1 + R + N) × d`.
    pub positional: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gamma: Vector,
    pub final_ln_beta: Vector,
}

impl ModelWeights {
    /// Every weight zero, every layer-norm gain one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(Self {
            patch_projection: Matrix::zeros(config.patch_dim(), d),
            patch_bias: Vector::zeros(d),
            cls_token: Vector::zeros(d),
            register_tokens: Matrix::zeros(config.num_registers, d),
            positional: Matrix::zeros(config.seq_len(), d),
            layers: (0..config.num_layers)
                .map(|_| LayerWeights::zeros(&config))
                .collect(),
            final_ln_gamma: Vector::filled(d, 1.0),
            final_ln_beta: Vector::zeros(d),
            config,
        })
    }

    /// Checks every tensor shape against `config`.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.embed_dim;
        check_matrix(&self.patch_projection, c.patch_dim(), d, "patch_projection")?;
        check_matrix(&self.register_tokens, c.num_registers, d, "register_tokens")?;
        check_matrix(&self.positional, c.seq_len(), d, "positional")?;
        for (v, name) in [
            (&self.patch_bias, "patch_bias"),
            (&self.cls_token, "cls_token"),
            (&self.final_ln_gamma, "final_ln_gamma"),
            (&self.final_ln_beta, "final_ln_beta"),
        ] {
            if v.dim() != d {
                return Err(Error::dims(name, d, v.dim()));
            }
        }
        if self.layers.len() != c.num_layers {
            return Err(Error::dims("layers", c.num_layers, self.layers.len()));
        }
        self.layers.iter().try_for_each(|l| l.validate(c))
    }

    pub fn last_layer(&self) -> &LayerWeights {
        self.layers.last().expect("validated model has at least one layer")
    }
}

/// `(1 + R + N) × d` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub num_registers: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn num_patches(&self) -> usize {
        self.len() - 1 - self.num_registers
    }

    pub fn cls(&self) -> Vector {
        Vector::from(self.tokens.row(0))
    }
}

/// Last-layer attention captured for one image: everything needed to
/// recompute the CLS output of that layer under a different head mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionState {
    pub num_registers: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    /// `A_i`, one `(1+R+N)²` matrix per head.
    pub attention: Vec<Matrix>,
    /// `V_i`, one `(1+R+N) × d_k` matrix per head.
    pub values: Vec<Matrix>,
    /// `(A_i V_i)[0]`, one `d_k` vector per head.
    pub cls_contributions: Vec<Vector>,
    /// Input of the captured layer at the CLS position.
    pub cls_input: Vector,
}

impl AttentionState {
    pub fn num_heads(&self) -> usize {
        self.attention.len()
    }

    pub fn seq_len(&self) -> usize {
        self.attention.first().map_or(0, Matrix::rows)
    }

    pub fn num_patches(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn head_dim(&self) -> usize {
        self.values.first().map_or(0, Matrix::cols)
    }

    /// CLS attention row of head `i`.
    pub fn cls_row(&self, head: usize) -> &[f64] {
        self.attention[head].row(0)
    }

    /// CLS attention of head `i` restricted to patch columns.
    pub fn cls_patch_row(&self, head: usize) -> &[f64] {
        &self.cls_row(head)[1 + self.num_registers..]
    }

    pub fn cls_self_mass(&self, head: usize) -> f64 {
        self.cls_row(head)[0]
    }

    pub fn register_mass(&self, head: usize) -> f64 {
        self.cls_row(head)[1..1 + self.num_registers].iter().sum()
    }

    /// `(A_i V_i)[0]` recomputed from the cached attention and values.
    pub fn recompute_contribution(&self, head: usize) -> Vector {
        let row = Matrix::new(1, self.seq_len(), self.cls_row(head).to_vec())
            .expect("cached attention is finite");
        let out = matmul(&row, &self.values[head]).expect("cached shapes agree");
        Vector::from(out.row(0))
    }

    /// Structural consistency of the cached tensors.
    pub fn validate(&self, num_heads: usize, head_dim: usize, embed_dim: usize) -> Result<()> {
        let t = 1 + self.num_registers + self.num_patches();
        for (list_len, name) in [
            (self.attention.len(), "attention heads"),
            (self.values.len(), "value heads"),
            (self.cls_contributions.len(), "cls contributions"),
        ] {
            if list_len != num_heads {
                return Err(Error::dims(name, num_heads, list_len));
            }
        }
        for i in 0..num_heads {
            check_matrix(&self.attention[i], t, t, "cached attention")?;
            check_matrix(&self.values[i], t, head_dim, "cached values")?;
            if self.cls_contributions[i].dim() != head_dim {
                return Err(Error::dims(
                    "cached contribution",
                    head_dim,
                    self.cls_contributions[i].dim(),
                ));
            }
        }
        if self.cls_input.dim() != embed_dim {
            return Err(Error::dims("cached cls_input", embed_dim, self.cls_input.dim()));
        }
        Ok(())
    }
}

/// Per-head modification of one attention layer, applied to every token.
///
/// `head_scale[i]` multiplies `head_i` before concatenation. Heads flagged in
/// `identity_heads` use the identity attention matrix. `output_scale[j]`, when
/// present, multiplies output slice `j` (columns `j·d_k..(j+1)·d_k`) of the
/// projected concat before the projection bias is added.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGate {
    pub head_scale: Vec<f64>,
    pub identity_heads: Vec<bool>,
    pub output_scale: Option<Vec<f64>>,
}

impl HeadGate {
    pub fn passthrough(num_heads: usize) -> Self {
        Self {
            head_scale: alloc::vec![1.0; num_heads],
            identity_heads: alloc::vec![false; num_heads],
            output_scale: None,
        }
    }

    fn validate(&self, num_heads: usize) -> Result<()> {
        if self.head_scale.len() != num_heads {
            return Err(Error::dims("HeadGate head_scale", num_heads, self.head_scale.len()));
        }
        if self.identity_heads.len() != num_heads {
            return Err(Error::dims(
                "HeadGate identity_heads",
                num_heads,
                self.identity_heads.len(),
            ));
        }
        if let Some(s) = &self.output_scale {
            if s.len() != num_heads {
                return Err(Error::dims("HeadGate output_scale", num_heads, s.len()));
            }
        }
        Ok(())
    }
}

/// Splits an image into `N` flattened `P·P·C` patches in row-major grid
/// order; each patch is flattened row-major as `(y, x, channel)`.
pub fn patchify(img: &ImageTensor, patch: usize) -> Result<Matrix> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::BadGeometry(format!(
            "{h}x{w} image not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Matrix::zeros(gh * gw, patch * patch * c);
    for r in 0..gh {
        for col in 0..gw {
            let row = out.row_mut(r * gw + col);
            let mut i = 0;
            for y in r * patch..(r + 1) * patch {
                for x in col * patch..(col + 1) * patch {
                    for ch in 0..c {
                        row[i] = img.get(y, x, ch);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Projects patches and assembles `[CLS][registers][patches]` plus
/// positional rows.
pub fn embed(patches: &Matrix, weights: &ModelWeights) -> Result<TokenSequence> {
    let c = &weights.config;
    if patches.cols() != c.patch_dim() {
        return Err(Error::dims("embed patch width", c.patch_dim(), patches.cols()));
    }
    if patches.rows() != c.num_patches() {
        return Err(Error::dims("embed patch count", c.num_patches(), patches.rows()));
    }
    let projected = affine(patches, &weights.patch_projection, &weights.patch_bias)?;
    let d = c.embed_dim;
    let r = c.num_registers;
    let mut tokens = Matrix::zeros(c.seq_len(), d);
    tokens.row_mut(0).copy_from_slice(weights.cls_token.as_slice());
    for i in 0..r {
        tokens
            .row_mut(1 + i)
            .copy_from_slice(weights.register_tokens.row(i));
    }
    for t in 0..patches.rows() {
        tokens.row_mut(1 + r + t).copy_from_slice(projected.row(t));
    }
    Ok(TokenSequence {
        tokens: tokens.add(&weights.positional)?,
        num_registers: r,
    })
}

/// One pre-norm block: `y = x + MHA(LN1(x))`, `z = y + FFN(LN2(y))`.
///
/// With `capture`, returns the block's vanilla attention state. A `gate`
/// changes the block output but never the captured state.
pub fn attention_layer_forward(
    tokens: &TokenSequence,
    layer: &LayerWeights,
    config: &ModelConfig,
    capture: bool,
    gate: Option<&HeadGate>,
) -> Result<(TokenSequence, Option<AttentionState>)> {
    let d = config.embed_dim;
    let (h, dk) = (config.num_heads, config.head_dim);
    let x = &tokens.tokens;
    if x.cols() != d {
        return Err(Error::dims("attention input width", d, x.cols()));
    }
    if let Some(g) = gate {
        g.validate(h)?;
    }
    let t = x.rows();
    let xn = layer_norm_rows(x, &layer.ln1_gamma, &layer.ln1_beta, config.eps)?;
    let q = affine(&xn, &layer.w_q, &layer.b_q)?;
    let k = affine(&xn, &layer.w_k, &layer.b_k)?;
    let v = affine(&xn, &layer.w_v, &layer.b_v)?;
    let inv_sqrt_dk = 1.0 / libm::sqrt(dk as f64);

    let mut concat = Matrix::zeros(t, d);
    let mut attention = Vec::with_capacity(h);
    let mut values = Vec::with_capacity(h);
    let mut contributions = Vec::with_capacity(h);
    for i in 0..h {
        let qi = q.column_block(i * dk, dk);
        let ki = k.column_block(i * dk, dk);
        let vi = v.column_block(i * dk, dk);
        let mut scores = matmul(&qi, &ki.transpose())?;
        scores.scale(inv_sqrt_dk);
        let a = softmax_rows(&scores);
        let head = matmul(&a, &vi)?;
        let contribution = Vector::from(head.row(0));
        let mut head = match gate {
            Some(g) if g.identity_heads[i] => vi.clone(),
            _ => head,
        };
        if let Some(g) = gate {
            head.scale(g.head_scale[i]);
        }
        for r in 0..t {
            concat.row_mut(r)[i * dk..(i + 1) * dk].copy_from_slice(head.row(r));
        }
        if capture {
            attention.push(a);
            values.push(vi);
            contributions.push(contribution);
        }
    }

    let mut mha = matmul(&concat, &layer.w_o)?;
    if let Some(scales) = gate.and_then(|g| g.output_scale.as_ref()) {
        for r in 0..t {
            let row = mha.row_mut(r);
            for (j, s) in scales.iter().enumerate() {
                row[j * dk..(j + 1) * dk].iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    mha.add_row_bias(&layer.b_o)?;
    let y = x.add(&mha)?;
    let z = y.add(&ffn(&y, layer, config.eps)?)?;

    let state = capture.then(|| AttentionState {
        num_registers: tokens.num_registers,
        grid_height: config.grid_height(),
        grid_width: config.grid_width(),
        attention,
        values,
        cls_contributions: contributions,
        cls_input: Vector::from(x.row(0)),
    });
    Ok((
        TokenSequence {
            tokens: z,
            num_registers: tokens.num_registers,
        },
        state,
    ))
}

/// `FFN(LN2(y))` for every row of `y`.
pub(crate) fn ffn(y: &Matrix, layer: &LayerWeights, eps: f64) -> Result<Matrix> {
    let yn = layer_norm_rows(y, &layer.ln2_gamma, &layer.ln2_beta, eps)?;
    let mut hidden = affine(&yn, &layer.ffn_w1, &layer.ffn_b1)?;
    gelu_matrix_in_place(&mut hidden);
    affine(&hidden, &layer.ffn_w2, &layer.ffn_b2)
}

/// Final layer-normalized CLS row.
pub fn extract_feature(tokens: &TokenSequence, gamma: &Vector, beta: &Vector, eps: f64) -> Result<Vector> {
    if tokens.is_empty() {
        return Err(Error::dims("extract_feature", 1, 0));
    }
    layer_norm(&tokens.cls(), gamma, beta, eps)
}

fn check_image(img: &ImageTensor, c: &ModelConfig) -> Result<()> {
    if img.height() != c.image_height || img.width() != c.image_width || img.channels() != c.channels {
        return Err(Error::BadGeometry(format!(
            "image {}x{}x{} does not match model input {}x{}x{}",
            img.height(),
            img.width(),
            img.channels(),
            c.image_height,
            c.image_width,
            c.channels
        )));
    }
    Ok(())
}

/// Feature and last-layer attention state of `img`.
pub fn forward(img: &ImageTensor, weights: &ModelWeights) -> Result<(Vector, AttentionState)> {
    forward_with_gate(img, weights, None)
}

/// Full forward pass with `gate` applied to the last layer. The returned
/// state is the vanilla last-layer state.
pub fn forward_with_gate(
    img: &ImageTensor,
    weights: &ModelWeights,
    gate: Option<&HeadGate>,
) -> Result<(Vector, AttentionState)> {
    let c = &weights.config;
    check_image(img, c)?;
    let mut tokens = embed(&patchify(img, c.patch_size)?, weights)?;
    let mut state = None;
    let last = weights.layers.len() - 1;
    for (i, layer) in weights.layers.iter().enumerate() {
        let is_last = i == last;
        let (next, captured) =
            attention_layer_forward(&tokens, layer, c, is_last, gate.filter(|_| is_last))?;
        tokens = next;
        if is_last {
            state = captured;
        }
    }
    let feature = extract_feature(&tokens, &weights.final_ln_gamma, &weights.final_ln_beta, c.eps)?;
    Ok((feature, state.expect("last layer captures")))
}

/// Standard normal deviate by the Box–Muller cosine branch.
fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| TOY_WEIGHT_STD * normal(rng)).collect();
    Matrix::new(rows, cols, data).expect("finite normal draws")
}

fn random_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vector {
    Vector::from(random_matrix(rng, 1, dim).row(0))
}

/// Seeded toy model.
///
/// The generator is xoshiro256++ seeded by SplitMix64 expansion of `seed`.
/// Each weight is `0.02·z` with `z` from the Box–Muller cosine branch (two
/// uniforms per deviate). Draw order: patch projection, CLS token, register
/// tokens, positional rows, then per layer `W_Q, W_K, W_V, W_O, FFN W1,
/// FFN W2`, all row-major. Biases and layer-norm shifts are zero and
/// layer-norm gains are one.
pub fn gen_toy_model(seed: u64, config: ModelConfig) -> Result<ModelWeights> {
    let mut w = ModelWeights::zeros(config)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let d = config.embed_dim;
    w.patch_projection = random_matrix(&mut rng, config.patch_dim(), d);
    w.cls_token = random_vector(&mut rng, d);
    w.register_tokens = random_matrix(&mut rng, config.num_registers, d);
    w.positional = random_matrix(&mut rng, config.seq_len(), d);
    for layer in &mut w.layers {
        layer.w_q = random_matrix(&mut rng, d, d);
        layer.w_k = random_matrix(&mut rng, d, d);
        layer.w_v = random_matrix(&mut rng, d, d);
        layer.w_o = random_matrix(&mut rng, d, d);
        layer.ffn_w1 = random_matrix(&mut rng, d, config.ffn_hidden);
        layer.ffn_w2 = random_matrix(&mut rng, config.ffn_hidden, d);
    }
    Ok(w)
}
