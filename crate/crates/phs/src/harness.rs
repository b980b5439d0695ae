//! Experiment runner: builds the database store, walks every (query image,
//! object) pair of the query manifest for each experiment cell, and
//! aggregates category-balanced metrics.
//!
//! Config JSON (paths are relative to the config file):
//!
//! ```json
//! {"model": {"quadrant": null},
//!  "query_manifest": "query.json", "db_manifest": "db.json",
//!  "modes": ["cbir", "phs-qo"], "prompts": ["box"], "h_on": [1, 2, 3, 4], "k": 10}
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use phs_core::image::ImageTensor;
use phs_core::metrics::{aggregate, score_retrieval, CategoryIndex, EvalReport, ObjectAnnotation, ObjectScore};
use phs_core::prompts::{NoiseParams, PixelBox, Rle, VisualPrompt, DEFAULT_POINT_WINDOW};
use phs_core::retrieval::{index_image, query, EmptyMaskPolicy, FeatureStore, Fingerprint, QueryMode, QuerySpec};
use phs_core::vit::{gen_toy_model, ModelConfig, ModelWeights};
use phs_core::{RoiStrategy, SelectionStrategy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PhsError, Result};
use crate::formats::{fingerprint, load_weights};
use crate::manifest::DatasetManifest;
use crate::quadrant::quadrant_model;

/// Indexes every manifest image in manifest order. Images that fail to load
/// or embed are collected and reported together.
pub fn build_index(
    manifest: &DatasetManifest,
    weights: &ModelWeights,
    fp: Fingerprint,
    keep_cache: bool,
) -> Result<FeatureStore> {
    let channels = weights.config.channels;
    let records: Vec<_> = manifest
        .images
        .par_iter()
        .map(|img| {
            let px = manifest.load_pixels(img, channels)?;
            Ok::<_, PhsError>(index_image(&img.id, &px, weights, keep_cache)?)
        })
        .collect();
    let failed: Vec<String> = manifest
        .images
        .iter()
        .zip(&records)
        .filter_map(|(img, r)| r.as_ref().err().map(|e| format!("{} ({e})", img.id)))
        .collect();
    if !failed.is_empty() {
        return Err(PhsError::Build(failed));
    }
    let mut store = FeatureStore::new(fp);
    for r in records {
        store.push(r.expect("failures handled above"))?;
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Weight file on disk.
    Path(PathBuf),
    /// Seeded random toy model.
    Toy {
        seed: u64,
        #[serde(default)]
        config: Option<ModelConfig>,
    },
    /// The hand-constructed quadrant model.
    Quadrant,
}

impl ModelSource {
    pub fn load(&self, base: &Path) -> Result<(ModelWeights, Fingerprint)> {
        let w = match self {
            ModelSource::Path(p) => return load_weights(&base.join(p)),
            ModelSource::Toy { seed, config } => gen_toy_model(*seed, config.unwrap_or_else(ModelConfig::toy))?,
            ModelSource::Quadrant => quadrant_model()?,
        };
        let fp = fingerprint(&w);
        Ok((w, fp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Box,
    Point,
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointAggregate {
    #[default]
    Mean,
    Best,
}

fn default_modes() -> Vec<QueryMode> {
    vec![QueryMode::Cbir]
}
fn default_prompts() -> Vec<PromptKind> {
    vec![PromptKind::Box]
}
fn default_k() -> usize {
    10
}
fn default_rois() -> Vec<RoiStrategy> {
    vec![RoiStrategy::Sum]
}
fn default_selections() -> Vec<SelectionStrategy> {
    vec![SelectionStrategy::BeforeScale]
}
fn default_noise() -> Vec<u32> {
    vec![0]
}
fn default_window() -> usize {
    DEFAULT_POINT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    pub query_manifest: PathBuf,
    pub db_manifest: PathBuf,
    #[serde(default = "default_modes")]
    pub modes: Vec<QueryMode>,
    #[serde(default = "default_prompts")]
    pub prompts: Vec<PromptKind>,
    /// Head counts for PHS cells; empty means `min(5, h)`.
    #[serde(default)]
    pub h_on: Vec<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_rois")]
    pub rois: Vec<RoiStrategy>,
    #[serde(default = "default_selections")]
    pub selections: Vec<SelectionStrategy>,
    /// Box noise magnitudes in pixels; applied to box prompts only.
    #[serde(default = "default_noise")]
    pub noise_m: Vec<u32>,
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default = "default_window")]
    pub point_window: usize,
    /// Query every patch position inside the object instead of its center.
    #[serde(default)]
    pub point_sweep: bool,
    #[serde(default)]
    pub point_aggregate: PointAggregate,
    #[serde(default)]
    pub empty_mask: EmptyMaskPolicy,
    #[serde(default)]
    pub overlap_threshold: Option<f64>,
    /// Keep the query image in its own candidate pool.
    #[serde(default)]
    pub include_query_in_db: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(model: ModelSource, query_manifest: PathBuf, db_manifest: PathBuf) -> Self {
        serde_json::from_value(serde_json::json!({
            "model": model,
            "query_manifest": query_manifest,
            "db_manifest": db_manifest,
        }))
        .expect("defaults deserialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PhsError::io(path, e))?;
        let mut c: ExperimentConfig = serde_json::from_str(&text)?;
        c.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(c)
    }

    pub fn validate(&self, num_heads: usize) -> Result<()> {
        let bad = |m: &str| Err(phs_core::Error::BadParam(m.into()).into());
        if self.modes.is_empty() || self.prompts.is_empty() || self.noise_m.is_empty() {
            return bad("modes, prompts and noise_m must be non-empty");
        }
        if self.rois.is_empty() || self.selections.is_empty() {
            return bad("rois and selections must be non-empty");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.h_on.iter().any(|&n| n == 0 || n > num_heads) {
            return bad("h_on values must lie in [1, h]");
        }
        Ok(())
    }

    /// Every cell in a fixed order: mode, prompt, noise, roi, selection, h_on.
    pub fn cells(&self, num_heads: usize) -> Vec<Cell> {
        let h_on = if self.h_on.is_empty() {
            vec![5.min(num_heads)]
        } else {
            self.h_on.clone()
        };
        let mut out = Vec::new();
        for &mode in &self.modes {
            let prompts: &[PromptKind] = if mode == QueryMode::Cbir { &[PromptKind::Box] } else { &self.prompts };
            for &prompt in prompts {
                let noise: &[u32] = if mode != QueryMode::Cbir && prompt == PromptKind::Box { &self.noise_m } else { &[0] };
                for &noise_m in noise {
                    if !mode.is_phs() {
                        out.push(Cell { mode, prompt, noise_m, roi: None, selection: None, h_on: None });
                        continue;
                    }
                    for &roi in &self.rois {
                        for &selection in &self.selections {
                            for &n in &h_on {
                                out.push(Cell {
                                    mode,
                                    prompt,
                                    noise_m,
                                    roi: Some(roi),
                                    selection: Some(selection),
                                    h_on: Some(n),
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// One experimental condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: QueryMode,
    pub prompt: PromptKind,
    pub noise_m: u32,
    pub roi: Option<RoiStrategy>,
    pub selection: Option<SelectionStrategy>,
    pub h_on: Option<usize>,
}

impl Cell {
    /// Directory-safe cell name.
    pub fn name(&self) -> String {
        let mut s = format!("{}_{}_m{}", self.mode, serde_plain(&self.prompt), self.noise_m);
        if let (Some(r), Some(sel), Some(h)) = (self.roi, self.selection, self.h_on) {
            s += &format!("_{}_{}_hon{h}", r.as_str(), sel.as_str());
        }
        s
    }
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: Cell,
    pub name: String,
    /// `None` when every query failed.
    pub report: Option<EvalReport>,
    pub num_objects: usize,
    pub failed_objects: usize,
    pub fallback_queries: usize,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLog {
    pub query_id: String,
    pub object_index: usize,
    pub category: String,
    pub positions: usize,
    /// Ranked ids of the first prompt position.
    pub ranked: Vec<String>,
    pub scores: Vec<f64>,
    pub selected_heads: Option<Vec<usize>>,
    pub fallback: bool,
    pub precision: Option<f64>,
    pub average_precision: Option<f64>,
    pub error: Option<String>,
}

/// Loaded inputs shared by every cell.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub weights: ModelWeights,
    pub fingerprint: Fingerprint,
    pub query_manifest: DatasetManifest,
    pub store: FeatureStore,
    pub categories: CategoryIndex,
    query_images: Vec<ImageTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub cells: Vec<CellReport>,
    pub logs: Vec<Vec<QueryLog>>,
}

impl ExperimentResult {
    /// Canonical bytes of the combined report.
    pub fn report_json(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(&self.cells).expect("reports serialize");
        s.push('\n');
        s.into_bytes()
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.report_json()))
    }
}

fn point_at(b: &PixelBox, window: usize) -> VisualPrompt {
    VisualPrompt::Point {
        x: ((b.x0 + b.x1) / 2) as i64,
        y: ((b.y0 + b.y1) / 2) as i64,
        window,
    }
}

fn object_mask(o: &ObjectAnnotation, h: usize, w: usize) -> Result<Vec<bool>> {
    match &o.segmentation {
        Some(rle) => Ok(rle.decode()?),
        None => Ok((0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                (o.bbox.y0..=o.bbox.y1).contains(&y) && (o.bbox.x0..=o.bbox.x1).contains(&x)
            })
            .collect()),
    }
}

/// Point prompts at the center of every `patch × patch` cell whose center
/// pixel lies inside the object.
pub fn sweep_points(o: &ObjectAnnotation, h: usize, w: usize, patch: usize, window: usize) -> Result<Vec<VisualPrompt>> {
    let mask = object_mask(o, h, w)?;
    let mut out = Vec::new();
    for cy in (0..h / patch).map(|r| r * patch + patch / 2) {
        for cx in (0..w / patch).map(|c| c * patch + patch / 2) {
            if mask[cy * w + cx] {
                out.push(VisualPrompt::Point { x: cx as i64, y: cy as i64, window });
            }
        }
    }
    if out.is_empty() {
        out.push(point_at(&o.bbox, window));
    }
    Ok(out)
}

/// Per-object noise stream seed.
pub fn noise_seed(base: u64, query: usize, object: usize) -> u64 {
    base ^ ((query as u64) << 20) ^ object as u64
}

fn combine(scores: &[ObjectScore], how: PointAggregate) -> ObjectScore {
    let mut out = scores[0].clone();
    match how {
        PointAggregate::Mean => {
            let n = scores.len() as f64;
            out.precision = scores.iter().map(|s| s.precision).sum::<f64>() / n;
            out.average_precision = scores.iter().map(|s| s.average_precision).sum::<f64>() / n;
        }
        PointAggregate::Best => {
            out.precision = scores.iter().map(|s| s.precision).fold(f64::MIN, f64::max);
            out.average_precision = scores.iter().map(|s| s.average_precision).fold(f64::MIN, f64::max);
        }
    }
    out
}

impl Experiment {
    pub fn load(config: ExperimentConfig) -> Result<Self> {
        let base = config.base_dir.clone();
        let (weights, fp) = config.model.load(&base)?;
        let query_manifest = DatasetManifest::load(&base.join(&config.query_manifest))?;
        let db = DatasetManifest::load(&base.join(&config.db_manifest))?;
        Self::from_parts(config, weights, fp, query_manifest, &db)
    }

    pub fn from_parts(
        config: ExperimentConfig,
        weights: ModelWeights,
        fingerprint: Fingerprint,
        query_manifest: DatasetManifest,
        db: &DatasetManifest,
    ) -> Result<Self> {
        config.validate(weights.config.num_heads)?;
        let store = build_index(db, &weights, fingerprint, true)?;
        let query_images = query_manifest
            .images
            .iter()
            .map(|img| query_manifest.load_pixels(img, weights.config.channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            categories: db.category_index(),
            config,
            weights,
            fingerprint,
            query_manifest,
            store,
            query_images,
        })
    }

    fn prompts_for(&self, cell: &Cell, o: &ObjectAnnotation, h: usize, w: usize) -> Result<Vec<VisualPrompt>> {
        let c = &self.config;
        Ok(match cell.prompt {
            PromptKind::Box => vec![VisualPrompt::Box(o.bbox.into())],
            PromptKind::Segment => vec![VisualPrompt::Segment(match &o.segmentation {
                Some(rle) => rle.clone(),
                None => Rle::encode(&object_mask(o, h, w)?, h, w)?,
            })],
            PromptKind::Point if c.point_sweep => sweep_points(o, h, w, self.weights.config.patch_size, c.point_window)?,
            PromptKind::Point => vec![point_at(&o.bbox, c.point_window)],
        })
    }

    fn run_object(&self, cell: &Cell, qi: usize, oi: usize) -> (Option<ObjectScore>, QueryLog, usize) {
        let img_meta = &self.query_manifest.images[qi];
        let o = &img_meta.objects[oi];
        let mut log = QueryLog {
            query_id: img_meta.id.clone(),
            object_index: oi,
            category: o.category.clone(),
            positions: 0,
            ranked: vec![],
            scores: vec![],
            selected_heads: None,
            fallback: false,
            precision: None,
            average_precision: None,
            error: None,
        };
        let mut fallbacks = 0;
        let outcome = (|| -> Result<ObjectScore> {
            let prompts = self.prompts_for(cell, o, img_meta.height, img_meta.width)?;
            log.positions = prompts.len();
            let mut scores = Vec::with_capacity(prompts.len());
            for (pi, prompt) in prompts.into_iter().enumerate() {
                let mut spec = QuerySpec::new(self.query_images[qi].clone(), cell.mode);
                spec.exclude_id = (!self.config.include_query_in_db).then(|| img_meta.id.clone());
                spec.prompt = (cell.mode != QueryMode::Cbir).then_some(prompt);
                spec.k = self.config.k;
                spec.h_on = cell.h_on.unwrap_or(spec.h_on);
                spec.roi = cell.roi.unwrap_or_default();
                spec.selection = cell.selection.unwrap_or_default();
                spec.overlap_threshold = self.config.overlap_threshold;
                spec.empty_mask = self.config.empty_mask;
                if cell.noise_m > 0 {
                    spec.noise = Some(NoiseParams {
                        m: cell.noise_m,
                        seed: noise_seed(self.config.noise_seed, qi, oi),
                    });
                }
                let result = query(&spec, &self.store, &self.weights)?;
                fallbacks += usize::from(result.fallback);
                if pi == 0 {
                    log.ranked = result.ranked.iter().map(|r| r.image_id.clone()).collect();
                    log.scores = result.ranked.iter().map(|r| r.score).collect();
                    log.selected_heads = result.selected_heads.as_ref().map(|s| s.on.clone());
                    log.fallback = result.fallback;
                }
                let outcome = score_retrieval(&result, &img_meta.id, oi, &o.category, &self.categories)?;
                scores.push(ObjectScore::from_outcome(&outcome, self.config.k)?);
            }
            Ok(combine(&scores, self.config.point_aggregate))
        })();
        match outcome {
            Ok(s) => {
                log.precision = Some(s.precision);
                log.average_precision = Some(s.average_precision);
                (Some(s), log, fallbacks)
            }
            Err(e) => {
                log.error = Some(e.to_string());
                (None, log, fallbacks)
            }
        }
    }

    pub fn run_cell(&self, cell: &Cell) -> (CellReport, Vec<QueryLog>) {
        let pairs: Vec<(usize, usize)> = self
            .query_manifest
            .images
            .iter()
            .enumerate()
            .flat_map(|(qi, img)| (0..img.objects.len()).map(move |oi| (qi, oi)))
            .collect();
        let results: Vec<_> = pairs.par_iter().map(|&(qi, oi)| self.run_object(cell, qi, oi)).collect();
        let scores: Vec<ObjectScore> = results.iter().filter_map(|r| r.0.clone()).collect();
        let failed = results.len() - scores.len();
        let fallback_queries = results.iter().map(|r| r.2).sum();
        let report = aggregate(&scores, self.config.k).ok();
        let logs = results.into_iter().map(|r| r.1).collect();
        (
            CellReport {
                cell: *cell,
                name: cell.name(),
                report,
                num_objects: pairs.len(),
                failed_objects: failed,
                fallback_queries,
                partial: failed > 0,
            },
            logs,
        )
    }

    pub fn run(&self) -> ExperimentResult {
        let (cells, logs) = self
            .config
            .cells(self.weights.config.num_heads)
            .iter()
            .map(|c| self.run_cell(c))
            .unzip();
        ExperimentResult { cells, logs }
    }
}

/// `category,p_at_k,ap_at_k,num_queries,num_objects` rows plus an `__all__`
/// aggregate row.
pub fn report_csv(r: &CellReport) -> String {
    let mut s = String::from("category,p_at_k,ap_at_k,num_queries,num_objects\n");
    if let Some(rep) = &r.report {
        for c in &rep.categories {
            s += &format!("{},{},{},{},{}\n", c.category, c.p_at_k, c.ap_at_k, c.num_queries, c.num_objects);
        }
        let queries: usize = rep.categories.iter().map(|c| c.num_queries).sum();
        s += &format!("__all__,{},{},{},{}\n", rep.mp_at_k, rep.map_at_k, queries, rep.num_objects);
    }
    s
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| PhsError::io(path, e))
}

/// Writes `report.json` (all cells) and per-cell `report.json`, `report.csv`
/// and `queries.jsonl` under `cells/<name>/`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PhsError::io(dir, e))?;
    write(&dir.join("report.json"), &result.report_json())?;
    for (cell, logs) in result.cells.iter().zip(&result.logs) {
        let cdir = dir.join("cells").join(&cell.name);
        fs::create_dir_all(&cdir).map_err(|e| PhsError::io(&cdir, e))?;
        let mut json = serde_json::to_string_pretty(cell)?;
        json.push('\n');
        write(&cdir.join("report.json"), json.as_bytes())?;
        write(&cdir.join("report.csv"), report_csv(cell).as_bytes())?;
        let mut jsonl = Vec::new();
        for l in logs {
            serde_json::to_writer(&mut jsonl, l)?;
            jsonl.write_all(b"\n").expect("in-memory write");
        }
        write(&cdir.join("queries.jsonl"), &jsonl)?;
    }
    Ok(())
}
