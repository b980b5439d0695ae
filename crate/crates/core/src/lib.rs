// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt-guided attention head selection for focus-oriented image
//! retrieval, on a small deterministic Vision Transformer.
//!
//! The crate is `no_std` and needs only `alloc`:
//!
//! * [`numerics`]: dense f64 kernel (matmul, softmax, layer norm, GELU).
//! * [`vit`]: toy ViT forward pass exposing last-layer per-head attention.
//! * [`prompts`]: point/box/segment prompts, pixel and token masks, box noise.
//! * [`headselect`]: ROI attention, head selection, MHA recombination.
//! * [`retrieval`]: feature store, exact cosine top-k, query modes.
//! * [`metrics`]: category-balanced MP@k / MAP@k.
//!
//! File formats, the experiment harness, the CLI and the HTTP service live in
//! the companion `phs` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod headselect;
pub mod image;
pub mod metrics;
pub mod numerics;
pub mod prompts;
pub mod retrieval;
pub mod vit;

pub use error::{Error, Result};
pub use headselect::{
    attention_mask_variant, feature_with_selection, recombine_mha, roi_attention, select_heads,
    HeadSelection, RoiAttention, RoiStrategy, SelectionStrategy,
};
pub use image::ImageTensor;
pub use metrics::{
    aggregate, average_precision_at, precision_at, score_retrieval, CategoryIndex, CategoryReport,
    EvalReport, ObjectAnnotation, ObjectScore, QueryOutcome,
};
pub use numerics::{Matrix, Vector};
pub use prompts::{
    add_box_noise, rasterize, tokenize_mask, BoxPrompt, NoiseParams, PixelBox, PromptMask, Rle,
    TokenMask, VisualPrompt,
};
pub use retrieval::{
    cosine_topk, index_image, query, EmptyMaskPolicy, FeatureRecord, FeatureStore, Fingerprint,
    QueryMode, QuerySpec, RankedItem, RetrievalResult,
};
pub use vit::{
    forward, forward_with_gate, gen_toy_model, AttentionState, HeadGate, ModelConfig, ModelWeights,
};
