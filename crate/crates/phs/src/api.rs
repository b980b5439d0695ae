//! Query surface shared by the CLI and the HTTP service, so that both
//! answer a request with the same JSON.

use std::path::Path;

use phs_core::headselect::{RoiStrategy, SelectionStrategy};
use phs_core::metrics::ObjectAnnotation;
use phs_core::prompts::{NoiseParams, VisualPrompt};
use phs_core::retrieval::{fit_to_model, query, EmptyMaskPolicy, FeatureStore, Fingerprint, QueryMode, QuerySpec, RankedItem};
use phs_core::vit::{forward, ModelWeights};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::formats::{load_store, load_weights};
use crate::heatmap::attention_grid;
use crate::manifest::DatasetManifest;

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<VisualPrompt>,
    #[serde(default)]
    pub mode: QueryMode,
    /// Defaults to `min(5, h)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_on: Option<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub roi: RoiStrategy,
    #[serde(default)]
    pub selection: SelectionStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseParams>,
    #[serde(default)]
    pub include_heatmaps: bool,
    /// Keep the query image among the candidates.
    #[serde(default)]
    pub include_self: bool,
}

impl QueryRequest {
    pub fn new(image_id: impl Into<String>, mode: QueryMode) -> Self {
        Self {
            image_id: image_id.into(),
            prompt: None,
            mode,
            h_on: None,
            k: default_k(),
            roi: RoiStrategy::default(),
            selection: SelectionStrategy::default(),
            noise: None,
            include_heatmaps: false,
            include_self: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub image_id: String,
    pub mode: QueryMode,
    pub ranked: Vec<RankedItem>,
    pub selected_heads: Option<Vec<usize>>,
    pub roi_scores: Option<Vec<f64>>,
    pub fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<Vec<Vec<Vec<f64>>>>,
    /// Wall-clock fields; excluded from the canonical form.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAttention {
    pub head: usize,
    pub grid: Vec<Vec<f64>>,
    pub cls_mass: f64,
    pub register_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionResponse {
    pub image_id: String,
    pub grid_height: usize,
    pub grid_width: usize,
    pub heads: Vec<HeadAttention>,
}

/// Immutable model, store and manifest.
#[derive(Debug)]
pub struct Engine {
    pub weights: ModelWeights,
    pub fingerprint: Fingerprint,
    pub store: FeatureStore,
    pub manifest: DatasetManifest,
    pub empty_mask: EmptyMaskPolicy,
}

impl Engine {
    pub fn load(store: &Path, weights: &Path, manifest: &Path, empty_mask: EmptyMaskPolicy) -> Result<Self> {
        let (weights, fingerprint) = load_weights(weights)?;
        Ok(Self {
            store: load_store(store, &fingerprint)?,
            manifest: DatasetManifest::load(manifest)?,
            weights,
            fingerprint,
            empty_mask,
        })
    }

    pub fn images(&self, offset: usize, limit: Option<usize>) -> Vec<ImageInfo> {
        self.manifest
            .images
            .iter()
            .skip(offset)
            .take(limit.unwrap_or(usize::MAX))
            .map(|i| ImageInfo {
                id: i.id.clone(),
                height: i.height,
                width: i.width,
                objects: i.objects.clone(),
            })
            .collect()
    }

    pub fn query(&self, req: &QueryRequest) -> Result<QueryResponse> {
        let meta = self
            .manifest
            .get(&req.image_id)
            .ok_or_else(|| phs_core::Error::UnknownImage(req.image_id.clone()))?;
        let image = self.manifest.load_pixels(meta, self.weights.config.channels)?;
        let mut spec = QuerySpec::new(image, req.mode);
        spec.prompt = if req.mode == QueryMode::Cbir { None } else { req.prompt.clone() };
        spec.h_on = req.h_on.unwrap_or(5.min(self.weights.config.num_heads));
        spec.k = req.k;
        spec.roi = req.roi;
        spec.selection = req.selection;
        spec.noise = req.noise;
        spec.empty_mask = self.empty_mask;
        spec.exclude_id = (!req.include_self).then(|| req.image_id.clone());
        let result = query(&spec, &self.store, &self.weights)?;
        let heatmaps = if req.include_heatmaps {
            let (_, state) = forward(&fit_to_model(&spec.image, &self.weights)?, &self.weights)?;
            Some((0..state.num_heads()).map(|i| attention_grid(&state, i)).collect())
        } else {
            None
        };
        Ok(QueryResponse {
            image_id: req.image_id.clone(),
            mode: req.mode,
            selected_heads: result.selected_heads.as_ref().map(|s| s.on.clone()),
            roi_scores: result.selected_heads.as_ref().map(|s| s.scores.scores.clone()),
            ranked: result.ranked,
            fallback: result.fallback,
            heatmaps,
            timing: None,
        })
    }

    pub fn attention(&self, id: &str) -> Result<AttentionResponse> {
        let rec = self
            .store
            .get(id)
            .ok_or_else(|| phs_core::Error::UnknownImage(id.into()))?;
        let state = rec
            .cached
            .as_ref()
            .ok_or_else(|| phs_core::Error::MissingCache(id.into()))?;
        Ok(AttentionResponse {
            image_id: id.into(),
            grid_height: state.grid_height,
            grid_width: state.grid_width,
            heads: (0..state.num_heads())
                .map(|i| HeadAttention {
                    head: i,
                    grid: attention_grid(state, i),
                    cls_mass: state.cls_self_mass(i),
                    register_mass: state.register_mass(i),
                })
                .collect(),
        })
    }
}
