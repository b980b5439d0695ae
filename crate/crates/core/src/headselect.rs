// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt-guided head selection on the last attention layer.
//!
//! A prompt's token mask scores every head by how much CLS attention it puts
//! on the prompted patches ([`roi_attention`]). The `h_on` best heads are
//! kept ([`select_heads`]) and the layer's CLS output is rebuilt from cached
//! per-head contributions with the others dropped ([`recombine_mha`]). The
//! default [`SelectionStrategy::BeforeScale`] zeroes dropped heads before the
//! output projection and scales kept heads by `h / h_on`; the projection
//! bias is added once after recombination.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{layer_norm, matmul, Matrix, Vector};
use crate::prompts::TokenMask;
use crate::vit::{ffn, AttentionState, HeadGate, ModelWeights};

/// How a head's CLS attention over the prompted patches is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiStrategy {
    #[default]
    Sum,
    Max,
}

/// Where head selection acts relative to the output projection, and whether
/// kept heads are rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    BeforeScale,
    Before,
    After,
    AfterScale,
    Identity,
}

impl RoiStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            RoiStrategy::Sum => "sum",
            RoiStrategy::Max => "max",
        }
    }
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 5] = [
        SelectionStrategy::BeforeScale,
        SelectionStrategy::Before,
        SelectionStrategy::After,
        SelectionStrategy::AfterScale,
        SelectionStrategy::Identity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionStrategy::BeforeScale => "before_scale",
            SelectionStrategy::Before => "before",
            SelectionStrategy::After => "after",
            SelectionStrategy::AfterScale => "after_scale",
            SelectionStrategy::Identity => "identity",
        }
    }
}

impl fmt::Display for RoiStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoiStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(RoiStrategy::Sum),
            "max" => Ok(RoiStrategy::Max),
            other => Err(Error::BadParam(format!("unknown roi strategy {other:?}"))),
        }
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SelectionStrategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::BadParam(format!("unknown selection strategy {s:?}")))
    }
}

/// Per-head ROI attention scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoiAttention {
    pub scores: Vec<f64>,
}

/// Kept heads (ascending, zero-based) and the scores that chose them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub on: Vec<usize>,
    pub h_on: usize,
    pub scores: RoiAttention,
}

impl HeadSelection {
    /// Keeps every head.
    pub fn all(scores: RoiAttention) -> Self {
        let h = scores.scores.len();
        Self {
            on: (0..h).collect(),
            h_on: h,
            scores,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.scores.scores.len()
    }

    pub fn contains(&self, head: usize) -> bool {
        self.on.binary_search(&head).is_ok()
    }

    fn validate(&self, num_heads: usize) -> Result<()> {
        if self.num_heads() != num_heads {
            return Err(Error::dims("HeadSelection scores", num_heads, self.num_heads()));
        }
        if self.h_on == 0 || self.h_on > num_heads || self.on.len() != self.h_on {
            return Err(Error::BadParam(format!(
                "selection keeps {} of {num_heads} heads (h_on = {})",
                self.on.len(),
                self.h_on
            )));
        }
        if self.on.windows(2).any(|w| w[0] >= w[1]) || self.on.iter().any(|&i| i >= num_heads) {
            return Err(Error::BadParam(String::from(
                "selected heads must be ascending, unique and in range",
            )));
        }
        Ok(())
    }

    /// Per-head multipliers this selection applies under `strategy`.
    pub fn gate(&self, strategy: SelectionStrategy) -> HeadGate {
        let h = self.num_heads();
        let scale = h as f64 / self.h_on as f64;
        let on: Vec<bool> = (0..h).map(|i| self.contains(i)).collect();
        let mask = |kept: f64| on.iter().map(|&b| if b { kept } else { 0.0 }).collect();
        let mut gate = HeadGate::passthrough(h);
        match strategy {
            SelectionStrategy::BeforeScale => gate.head_scale = mask(scale),
            SelectionStrategy::Before => gate.head_scale = mask(1.0),
            SelectionStrategy::After => gate.output_scale = Some(mask(1.0)),
            SelectionStrategy::AfterScale => gate.output_scale = Some(mask(scale)),
            SelectionStrategy::Identity => gate.identity_heads = on.iter().map(|b| !b).collect(),
        }
        gate
    }
}

fn check_mask(state: &AttentionState, mask: &TokenMask) -> Result<()> {
    if mask.len() != state.num_patches() {
        return Err(Error::dims("token mask", state.num_patches(), mask.len()));
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// CLS-row attention of each head over the prompted patch tokens. CLS and
/// register columns never count.
pub fn roi_attention(
    state: &AttentionState,
    mask: &TokenMask,
    strategy: RoiStrategy,
) -> Result<RoiAttention> {
    check_mask(state, mask)?;
    let scores = (0..state.num_heads())
        .map(|i| {
            let row = state.cls_patch_row(i);
            let picked = mask.indices().map(|t| row[t]);
            match strategy {
                RoiStrategy::Sum => picked.sum(),
                RoiStrategy::Max => picked.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(RoiAttention { scores })
}

/// Keeps the `h_on` highest-scoring heads. Ties go to the lower index.
pub fn select_heads(roi: &RoiAttention, h_on: usize) -> Result<HeadSelection> {
    let s = &roi.scores;
    let h = s.len();
    if h_on == 0 || h_on > h {
        return Err(Error::BadParam(format!("h_on = {h_on} outside [1, {h}]")));
    }
    // A head is kept when fewer than h_on heads outrank it.
    let on = (0..h)
        .filter(|&i| {
            let outranked_by = (0..h)
                .filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i))
                .count();
            outranked_by < h_on
        })
        .collect();
    Ok(HeadSelection {
        on,
        h_on,
        scores: roi.clone(),
    })
}

/// CLS row of the recombined last-layer MHA output (projection and bias
/// included).
pub fn recombine_mha(
    state: &AttentionState,
    selection: &HeadSelection,
    w_o: &Matrix,
    b_o: &Vector,
    strategy: SelectionStrategy,
) -> Result<Vector> {
    let h = state.num_heads();
    let dk = state.head_dim();
    selection.validate(h)?;
    if w_o.rows() != h * dk {
        return Err(Error::dims("recombine_mha W_O", h * dk, w_o.rows()));
    }
    let gate = selection.gate(strategy);
    let mut concat = Matrix::zeros(1, h * dk);
    for i in 0..h {
        let source = if gate.identity_heads[i] {
            state.values[i].row(0)
        } else {
            state.cls_contributions[i].as_slice()
        };
        let dst = &mut concat.row_mut(0)[i * dk..(i + 1) * dk];
        for (d, s) in dst.iter_mut().zip(source) {
            *d = s * gate.head_scale[i];
        }
    }
    let mut out = matmul(&concat, w_o)?;
    if let Some(scales) = &gate.output_scale {
        let row = out.row_mut(0);
        for (j, s) in scales.iter().enumerate() {
            row[j * dk..(j + 1) * dk].iter_mut().for_each(|v| *v *= s);
        }
    }
    out.add_row_bias(b_o)?;
    Ok(Vector::from(out.row(0)))
}

/// Zeroes CLS attention to patches outside the prompt, renormalizes the CLS
/// row, and refreshes the cached contributions. CLS and register columns are
/// kept. Heads whose row loses nothing are returned untouched.
pub fn attention_mask_variant(state: &AttentionState, mask: &TokenMask) -> Result<AttentionState> {
    check_mask(state, mask)?;
    let mut out = state.clone();
    let offset = 1 + state.num_registers;
    for i in 0..state.num_heads() {
        let row = out.attention[i].row_mut(0);
        let mut changed = false;
        for t in 0..mask.len() {
            if !mask.get(t) && row[offset + t] != 0.0 {
                row[offset + t] = 0.0;
                changed = true;
            }
        }
        if changed {
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
            out.cls_contributions[i] = out.recompute_contribution(i);
        }
    }
    Ok(out)
}

/// Image feature recomputed from a cached last-layer state with the given
/// head selection: `y₀ = x₀ + MHA^HS₀`, `z₀ = y₀ + FFN(LN₂(y₀))`,
/// `f = LN_final(z₀)`.
pub fn feature_with_selection(
    state: &AttentionState,
    selection: &HeadSelection,
    weights: &ModelWeights,
    strategy: SelectionStrategy,
) -> Result<Vector> {
    let c = &weights.config;
    let layer = weights.last_layer();
    state.validate(c.num_heads, c.head_dim, c.embed_dim)?;
    let mha = recombine_mha(state, selection, &layer.w_o, &layer.b_o, strategy)?;
    let y = Matrix::row_vector(&state.cls_input).add(&Matrix::row_vector(&mha))?;
    let z = y.add(&ffn(&y, layer, c.eps)?)?;
    layer_norm(
        &Vector::from(z.row(0)),
        &weights.final_ln_gamma,
        &weights.final_ln_beta,
        c.eps,
    )
}

/// Vanilla scores vector used when every head is kept without a prompt.
pub fn uniform_scores(num_heads: usize) -> RoiAttention {
    RoiAttention {
        scores: vec![1.0; num_heads],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// h = 1, R = 0, three patches on a 1x3 grid.
    fn one_head_state(row: &[f64]) -> AttentionState {
        let t = row.len();
        let mut a = Matrix::identity(t);
        a.row_mut(0).copy_from_slice(row);
        AttentionState {
            num_registers: 0,
            grid_height: 1,
            grid_width: t - 1,
            attention: vec![a],
            values: vec![Matrix::zeros(t, 1)],
            cls_contributions: vec![Vector::zeros(1)],
            cls_input: Vector::zeros(1),
        }
    }

    #[test]
    fn sum_and_max_hand_values() {
        let st = one_head_state(&[0.1, 0.2, 0.3, 0.4]);
        let mask = TokenMask::from_indices(3, &[0, 2]).unwrap();
        let sum = roi_attention(&st, &mask, RoiStrategy::Sum).unwrap();
        assert!((sum.scores[0] - 0.6).abs() < 1e-15);
        let max = roi_attention(&st, &mask, RoiStrategy::Max).unwrap();
        assert_eq!(max.scores[0], 0.4);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let st = one_head_state(&[0.1, 0.2, 0.3, 0.4]);
        let mask = TokenMask::new(vec![false; 3]);
        assert_eq!(roi_attention(&st, &mask, RoiStrategy::Sum), Err(Error::EmptyMask));
        assert_eq!(attention_mask_variant(&st, &mask), Err(Error::EmptyMask));
        let short = TokenMask::full(2);
        assert!(matches!(
            roi_attention(&st, &short, RoiStrategy::Sum),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ties_keep_lowest_indices() {
        let roi = RoiAttention {
            scores: vec![0.6, 0.1, 0.6, 0.3],
        };
        // Zero-based {0, 2} is {1, 3} one-based.
        assert_eq!(select_heads(&roi, 2).unwrap().on, vec![0, 2]);
        let roi = RoiAttention {
            scores: vec![0.5, 0.5, 0.5, 0.5],
        };
        assert_eq!(select_heads(&roi, 3).unwrap().on, vec![0, 1, 2]);
    }

    #[test]
    fn h_on_bounds() {
        let roi = RoiAttention {
            scores: vec![0.2, 0.9, 0.4],
        };
        assert_eq!(select_heads(&roi, 3).unwrap().on, vec![0, 1, 2]);
        assert_eq!(select_heads(&roi, 2).unwrap().on, vec![1, 2]);
        assert!(matches!(select_heads(&roi, 0), Err(Error::BadParam(_))));
        assert!(matches!(select_heads(&roi, 4), Err(Error::BadParam(_))));
    }

    fn two_head_state() -> AttentionState {
        AttentionState {
            num_registers: 0,
            grid_height: 1,
            grid_width: 1,
            attention: vec![Matrix::identity(2), Matrix::identity(2)],
            values: vec![
                Matrix::from_rows(&[vec![2.0], vec![7.0]]).unwrap(),
                Matrix::from_rows(&[vec![4.0], vec![9.0]]).unwrap(),
            ],
            cls_contributions: vec![Vector::new(vec![2.0]).unwrap(), Vector::new(vec![4.0]).unwrap()],
            cls_input: Vector::zeros(2),
        }
    }

    #[test]
    fn two_head_hand_trace() {
        let st = two_head_state();
        let sel = HeadSelection {
            on: vec![0],
            h_on: 1,
            scores: RoiAttention {
                scores: vec![1.0, 0.0],
            },
        };
        let eye = Matrix::identity(2);
        let zero = Vector::zeros(2);
        let out = |s| recombine_mha(&st, &sel, &eye, &zero, s).unwrap().into_vec();
        assert_eq!(out(SelectionStrategy::BeforeScale), vec![4.0, 0.0]);
        assert_eq!(out(SelectionStrategy::Before), vec![2.0, 0.0]);
        assert_eq!(out(SelectionStrategy::After), vec![2.0, 0.0]);
        assert_eq!(out(SelectionStrategy::AfterScale), vec![4.0, 0.0]);
        // Dropped head 1 attends to itself only: V_1[0] = 4.
        let mut st_id = st.clone();
        st_id.values[1] = Matrix::from_rows(&[vec![5.0], vec![9.0]]).unwrap();
        let id = recombine_mha(&st_id, &sel, &eye, &zero, SelectionStrategy::Identity).unwrap();
        assert_eq!(id.into_vec(), vec![2.0, 5.0]);
    }

    #[test]
    fn after_masks_projected_slices() {
        let st = two_head_state();
        let sel = HeadSelection {
            on: vec![1],
            h_on: 1,
            scores: RoiAttention {
                scores: vec![0.0, 1.0],
            },
        };
        // W_O mixes heads: out = [c0 + c1, c0 - c1].
        let w = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let b = Vector::new(vec![0.5, 0.25]).unwrap();
        let after = recombine_mha(&st, &sel, &w, &b, SelectionStrategy::After).unwrap();
        assert_eq!(after.into_vec(), vec![0.5, -1.75]);
        let before = recombine_mha(&st, &sel, &w, &b, SelectionStrategy::Before).unwrap();
        assert_eq!(before.into_vec(), vec![4.5, -3.75]);
    }

    #[test]
    fn scale_factor_for_sixteen_heads() {
        let scores = RoiAttention {
            scores: (0..16).map(|i| i as f64).collect(),
        };
        let sel = select_heads(&scores, 5).unwrap();
        assert_eq!(sel.on, vec![11, 12, 13, 14, 15]);
        let gate = sel.gate(SelectionStrategy::BeforeScale);
        assert_eq!(gate.head_scale[15], 3.2);
        assert_eq!(gate.head_scale[0], 0.0);
    }

    #[test]
    fn mask_variant_hand_renormalization() {
        // [CLS][register][p1][p2]
        let mut a = Matrix::identity(4);
        a.row_mut(0).copy_from_slice(&[0.25; 4]);
        let st = AttentionState {
            num_registers: 1,
            grid_height: 1,
            grid_width: 2,
            attention: vec![a],
            values: vec![Matrix::from_rows(&[vec![3.0], vec![6.0], vec![9.0], vec![12.0]]).unwrap()],
            cls_contributions: vec![Vector::new(vec![7.5]).unwrap()],
            cls_input: Vector::zeros(1),
        };
        let out = attention_mask_variant(&st, &TokenMask::from_indices(2, &[0]).unwrap()).unwrap();
        let row = out.cls_row(0);
        for v in &row[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(row[3], 0.0);
        assert!((out.cls_contributions[0][0] - 6.0).abs() < 1e-12);
        assert_eq!(out.attention[0].row(1), st.attention[0].row(1));

        let full = attention_mask_variant(&st, &TokenMask::full(2)).unwrap();
        assert_eq!(full, st);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in SelectionStrategy::ALL {
            assert_eq!(s.as_str().parse::<SelectionStrategy>().unwrap(), s);
        }
        assert_eq!("max".parse::<RoiStrategy>().unwrap(), RoiStrategy::Max);
        assert!("median".parse::<RoiStrategy>().is_err());
    }
}
