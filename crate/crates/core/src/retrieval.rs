// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature store, exact cosine top-k, and the query modes.
//!
//! Every query image is resized to the model input and its prompt mapped to
//! model coordinates before any baseline or head selection runs. Box noise
//! is drawn in the original image's pixel space.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headselect::{
    attention_mask_variant, feature_with_selection, roi_attention, select_heads, uniform_scores,
    HeadSelection, RoiStrategy, SelectionStrategy,
};
use crate::image::ImageTensor;
use crate::numerics::Vector;
use crate::prompts::{add_box_noise, any_overlap, rasterize, tokenize_mask, NoiseParams, VisualPrompt};
use crate::vit::{forward, AttentionState, ModelWeights};

/// Pixel value written outside the prompt by the masking baseline.
pub const MASK_FILL: f64 = 0.0;

/// Digest of the weight file a store was built with.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// One indexed database image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub image_id: String,
    pub feature: Vector,
    pub cached: Option<AttentionState>,
}

/// Features of the database images, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub fingerprint: Fingerprint,
    records: Vec<FeatureRecord>,
}

impl FeatureStore {
    pub fn new(fingerprint: Fingerprint) -> Self {
        Self {
            fingerprint,
            records: Vec::new(),
        }
    }

    /// Appends a record, rejecting duplicate ids, width changes, and
    /// zero-norm features.
    pub fn push(&mut self, record: FeatureRecord) -> Result<()> {
        if let Some(first) = self.records.first() {
            if first.feature.dim() != record.feature.dim() {
                return Err(Error::dims(
                    "FeatureStore::push",
                    first.feature.dim(),
                    record.feature.dim(),
                ));
            }
        }
        if record.feature.norm() == 0.0 {
            return Err(Error::BadParam(format!(
                "record {:?} has a zero feature",
                record.image_id
            )));
        }
        if self.records.iter().any(|r| r.image_id == record.image_id) {
            return Err(Error::BadParam(format!(
                "duplicate image id {:?}",
                record.image_id
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FeatureRecord> {
        self.records.iter().find(|r| r.image_id == id)
    }

    pub fn has_caches(&self) -> bool {
        self.records.iter().all(|r| r.cached.is_some())
    }

    /// Drops every cached attention state.
    pub fn strip_caches(&mut self) {
        self.records.iter_mut().for_each(|r| r.cached = None);
    }

    /// Multiplies every stored feature by `s`.
    pub fn scale_features(&mut self, s: f64) {
        for r in &mut self.records {
            r.feature = r.feature.scaled(s);
        }
    }
}

/// Runs the model on `img` and packages the record.
pub fn index_image(id: &str, img: &ImageTensor, weights: &ModelWeights, keep_cache: bool) -> Result<FeatureRecord> {
    let img = fit_to_model(img, weights)?;
    let (feature, state) = forward(&img, weights)?;
    Ok(FeatureRecord {
        image_id: String::from(id),
        feature,
        cached: keep_cache.then_some(state),
    })
}

/// Resizes an image to the model input when needed.
pub fn fit_to_model(img: &ImageTensor, weights: &ModelWeights) -> Result<ImageTensor> {
    let c = &weights.config;
    if img.channels() != c.channels {
        return Err(Error::BadGeometry(format!(
            "image has {} channels, model expects {}",
            img.channels(),
            c.channels
        )));
    }
    img.resize_bilinear(c.image_height, c.image_width)
}

/// One ranked hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub image_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Ranked hits plus the head selection that produced them, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<RankedItem>,
    pub selected_heads: Option<HeadSelection>,
    /// Set when an empty prompt mask fell back to plain CBIR.
    #[serde(default)]
    pub fallback: bool,
}

fn cosine(query: &Vector, query_norm: f64, feature: &Vector) -> Result<f64> {
    let dot = query.dot(feature)?;
    Ok((dot / (query_norm * feature.norm())).clamp(-1.0, 1.0))
}

/// Exact cosine ranking of `(id, feature)` candidates. Ties keep candidate
/// order.
pub fn rank_candidates<'a, I>(query: &Vector, candidates: I, k: usize) -> Result<Vec<RankedItem>>
where
    I: IntoIterator<Item = (&'a str, &'a Vector)>,
{
    if k == 0 {
        return Err(Error::BadParam(String::from("k must be at least 1")));
    }
    let query_norm = query.norm();
    if query_norm == 0.0 {
        return Err(Error::BadParam(String::from("query feature has zero norm")));
    }
    let mut scored = Vec::new();
    for (id, feature) in candidates {
        scored.push((id, cosine(query, query_norm, feature)?));
    }
    if scored.is_empty() {
        return Err(Error::EmptyStore);
    }
    // Stable sort keeps insertion order among equal scores.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (id, score))| RankedItem {
            image_id: String::from(id),
            score,
            rank: i + 1,
        })
        .collect())
}

/// Exact full-scan cosine top-k over the store.
pub fn cosine_topk(query: &Vector, store: &FeatureStore, k: usize) -> Result<RetrievalResult> {
    let ranked = rank_candidates(
        query,
        store.records.iter().map(|r| (r.image_id.as_str(), &r.feature)),
        k,
    )?;
    Ok(RetrievalResult {
        ranked,
        selected_heads: None,
        fallback: false,
    })
}

/// Retrieval mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum QueryMode {
    /// Global feature of the whole query image.
    #[default]
    #[serde(rename = "cbir")]
    Cbir,
    /// Pixels outside the prompt are blanked before encoding.
    #[serde(rename = "mask")]
    MaskBaseline,
    /// The prompt's bounding box is cropped and resized to the model input.
    #[serde(rename = "crop")]
    CropBaseline,
    /// Last-layer CLS attention is restricted to the prompt.
    #[serde(rename = "attn-mask")]
    AttnMask,
    /// Head selection on the query feature only.
    #[serde(rename = "phs-qo")]
    PhsQo,
    /// Query-derived head selection applied to the query and every record.
    #[serde(rename = "phs-qd")]
    PhsQd,
}

impl QueryMode {
    pub const ALL: [QueryMode; 6] = [
        QueryMode::Cbir,
        QueryMode::MaskBaseline,
        QueryMode::CropBaseline,
        QueryMode::AttnMask,
        QueryMode::PhsQo,
        QueryMode::PhsQd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::Cbir => "cbir",
            QueryMode::MaskBaseline => "mask",
            QueryMode::CropBaseline => "crop",
            QueryMode::AttnMask => "attn-mask",
            QueryMode::PhsQo => "phs-qo",
            QueryMode::PhsQd => "phs-qd",
        }
    }

    pub fn is_phs(self) -> bool {
        matches!(self, QueryMode::PhsQo | QueryMode::PhsQd)
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::BadParam(format!("unknown mode {s:?}")))
    }
}

/// What to do when a prompt covers no patch token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyMaskPolicy {
    /// Answer with plain CBIR and flag the result.
    #[default]
    Fallback,
    /// Fail with [`Error::EmptyMask`].
    Strict,
}

/// A fully resolved query.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub image: ImageTensor,
    /// Records with this id are excluded from the candidates.
    pub exclude_id: Option<String>,
    /// Prompt in `image` pixel coordinates.
    pub prompt: Option<VisualPrompt>,
    pub mode: QueryMode,
    pub h_on: usize,
    pub k: usize,
    pub roi: RoiStrategy,
    pub selection: SelectionStrategy,
    pub noise: Option<NoiseParams>,
    pub overlap_threshold: Option<f64>,
    pub empty_mask: EmptyMaskPolicy,
}

impl QuerySpec {
    /// CBIR query with default knobs (`h_on = 5`, `k = 10`).
    pub fn new(image: ImageTensor, mode: QueryMode) -> Self {
        Self {
            image,
            exclude_id: None,
            prompt: None,
            mode,
            h_on: 5,
            k: 10,
            roi: RoiStrategy::Sum,
            selection: SelectionStrategy::BeforeScale,
            noise: None,
            overlap_threshold: None,
            empty_mask: EmptyMaskPolicy::Fallback,
        }
    }

    pub fn validate(&self, num_heads: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::BadParam(String::from("k must be at least 1")));
        }
        if self.mode != QueryMode::Cbir && self.prompt.is_none() {
            return Err(Error::BadParam(format!("mode {} needs a prompt", self.mode)));
        }
        if self.mode.is_phs() && (self.h_on == 0 || self.h_on > num_heads) {
            return Err(Error::BadParam(format!(
                "h_on = {} outside [1, {num_heads}]",
                self.h_on
            )));
        }
        Ok(())
    }

    /// Prompt after noise, mapped to model coordinates.
    pub fn model_prompt(&self, weights: &ModelWeights) -> Result<Option<VisualPrompt>> {
        let Some(prompt) = &self.prompt else {
            return Ok(None);
        };
        let (h, w) = (self.image.height(), self.image.width());
        let noisy = match (prompt, &self.noise) {
            (VisualPrompt::Box(b), Some(params)) => VisualPrompt::Box(add_box_noise(b, params, h, w)),
            _ => prompt.clone(),
        };
        let c = &weights.config;
        noisy
            .rescale((h, w), (c.image_height, c.image_width))
            .map(Some)
    }
}

enum Prepared {
    Feature(Vector, Option<HeadSelection>),
    Phs(Vector, HeadSelection),
}

fn prepare(spec: &QuerySpec, weights: &ModelWeights) -> Result<Prepared> {
    let c = &weights.config;
    let img = fit_to_model(&spec.image, weights)?;
    if spec.mode == QueryMode::Cbir {
        return Ok(Prepared::Feature(forward(&img, weights)?.0, None));
    }
    let prompt = spec.model_prompt(weights)?.expect("validated prompt");
    let mask = rasterize(&prompt, c.image_height, c.image_width, c.patch_size)?;
    let threshold = spec.overlap_threshold.unwrap_or_else(|| any_overlap(c.patch_size));
    let tokens = tokenize_mask(&mask, c.patch_size, threshold)?;
    match spec.mode {
        QueryMode::Cbir => unreachable!(),
        QueryMode::MaskBaseline => {
            if tokens.count() == 0 {
                return Err(Error::EmptyMask);
            }
            let masked = img.fill_outside(&mask, MASK_FILL)?;
            Ok(Prepared::Feature(forward(&masked, weights)?.0, None))
        }
        QueryMode::CropBaseline => {
            let bb = mask.bounding_box().ok_or(Error::EmptyMask)?;
            let cropped = img
                .crop(&bb)?
                .resize_bilinear(c.image_height, c.image_width)?;
            Ok(Prepared::Feature(forward(&cropped, weights)?.0, None))
        }
        QueryMode::AttnMask => {
            let (_, state) = forward(&img, weights)?;
            let masked = attention_mask_variant(&state, &tokens)?;
            let all = HeadSelection::all(uniform_scores(c.num_heads));
            let f = feature_with_selection(&masked, &all, weights, SelectionStrategy::BeforeScale)?;
            Ok(Prepared::Feature(f, None))
        }
        QueryMode::PhsQo | QueryMode::PhsQd => {
            let (_, state) = forward(&img, weights)?;
            let roi = roi_attention(&state, &tokens, spec.roi)?;
            let selection = select_heads(&roi, spec.h_on)?;
            let f = feature_with_selection(&state, &selection, weights, spec.selection)?;
            Ok(Prepared::Phs(f, selection))
        }
    }
}

/// Answers a query against `store`.
pub fn query(spec: &QuerySpec, store: &FeatureStore, weights: &ModelWeights) -> Result<RetrievalResult> {
    spec.validate(weights.config.num_heads)?;
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if spec.mode == QueryMode::PhsQd {
        if let Some(r) = store.records.iter().find(|r| r.cached.is_none()) {
            return Err(Error::MissingCache(r.image_id.clone()));
        }
    }
    let prepared = match prepare(spec, weights) {
        Err(Error::EmptyMask) if spec.empty_mask == EmptyMaskPolicy::Fallback => {
            let mut cbir = spec.clone();
            cbir.mode = QueryMode::Cbir;
            let mut result = query(&cbir, store, weights)?;
            result.fallback = true;
            return Ok(result);
        }
        other => other?,
    };
    let excluded = |id: &str| spec.exclude_id.as_deref() == Some(id);
    let candidates = store.records.iter().filter(|r| !excluded(&r.image_id));
    match prepared {
        Prepared::Feature(f, sel) => Ok(RetrievalResult {
            ranked: rank_candidates(&f, candidates.map(|r| (r.image_id.as_str(), &r.feature)), spec.k)?,
            selected_heads: sel,
            fallback: false,
        }),
        Prepared::Phs(f, selection) => {
            let ranked = if spec.mode == QueryMode::PhsQd {
                let recomputed = candidates
                    .map(|r| {
                        let state = r.cached.as_ref().expect("checked above");
                        Ok((r.image_id.as_str(), feature_with_selection(state, &selection, weights, spec.selection)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                rank_candidates(&f, recomputed.iter().map(|(id, v)| (*id, v)), spec.k)?
            } else {
                rank_candidates(&f, candidates.map(|r| (r.image_id.as_str(), &r.feature)), spec.k)?
            };
            Ok(RetrievalResult {
                ranked,
                selected_heads: Some(selection),
                fallback: false,
            })
        }
    }
}
