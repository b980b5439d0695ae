//! `phs` command-line interface. Every subcommand prints JSON on stdout;
//! failures print `{"error": code, "message": text}` on stderr and exit
//! nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use phs::api::{Engine, QueryRequest};
use phs::corpus::{gen_synthetic_corpus, SyntheticCorpusSpec};
use phs::formats::{fingerprint, load_weights, save_store, save_weights};
use phs::harness::{build_index, write_outputs, Experiment, ExperimentConfig, ExperimentResult};
use phs::heatmap::emit_attention_heatmaps;
use phs::manifest::DatasetManifest;
use phs::{PhsError, Result};
use phs_core::prompts::{rasterize, tokenize_mask, NoiseParams, VisualPrompt};
use phs_core::retrieval::{fit_to_model, EmptyMaskPolicy, QueryMode};
use phs_core::vit::{forward, gen_toy_model, ModelConfig};
use phs_core::{roi_attention, select_heads, RoiStrategy, SelectionStrategy};
use serde_json::json;

#[derive(Parser)]
#[command(name = "phs", version, about = "Prompt-guided attention head selection retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

fn parse_policy(s: &str) -> std::result::Result<EmptyMaskPolicy, String> {
    match s {
        "fallback" => Ok(EmptyMaskPolicy::Fallback),
        "strict" => Ok(EmptyMaskPolicy::Strict),
        _ => Err(format!("unknown policy {s:?} (fallback|strict)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a weight file: seeded toy model or the engineered quadrant model.
    GenModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Build the hand-constructed quadrant model instead of a random one.
        #[arg(long)]
        quadrant: bool,
        /// ModelConfig JSON file for the toy model (default: toy config).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the synthetic quadrant corpus (query.json, db.json, images/).
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        /// SyntheticCorpusSpec JSON; flags below override its fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        db_per_class: Option<usize>,
        #[arg(long)]
        query_per_class: Option<usize>,
    },
    /// Embed every manifest image into a store file.
    BuildIndex {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop cached attention states (disables phs-qd).
        #[arg(long)]
        no_cache: bool,
    },
    /// Run one prompted query; prints the QueryResponse JSON.
    Query {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Full QueryRequest JSON file; replaces the flags below.
        #[arg(long)]
        request: Option<PathBuf>,
        #[arg(long, required_unless_present = "request")]
        image_id: Option<String>,
        /// Prompt JSON, e.g. '{"type":"box","x0":0,"y0":0,"x1":15,"y1":15}'.
        #[arg(long)]
        prompt: Option<String>,
        /// cbir | mask | crop | attn-mask | phs-qo | phs-qd
        #[arg(long, default_value = "cbir", value_parser = parse::<QueryMode>)]
        mode: QueryMode,
        #[arg(long)]
        h_on: Option<usize>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// sum | max
        #[arg(long, default_value = "sum", value_parser = parse::<RoiStrategy>)]
        roi: RoiStrategy,
        /// before_scale | before | after | after_scale | identity
        #[arg(long, default_value = "before_scale", value_parser = parse::<SelectionStrategy>)]
        selection: SelectionStrategy,
        #[arg(long)]
        noise_m: Option<u32>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long)]
        include_heatmaps: bool,
        #[arg(long)]
        include_self: bool,
        #[arg(long, default_value = "fallback", value_parser = parse_policy)]
        fallback_policy: EmptyMaskPolicy,
    },
    /// Run an experiment config; prints per-cell MP@k/MAP@k and the report checksum.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config with an h_on scan (`1..4`, `1..h`, or `1,3,5`), one report per cell.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        h_on: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-head attention PGMs for one image.
    Heatmap {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image_id: String,
        #[arg(long)]
        out: PathBuf,
        /// With a prompt, `selected.pgm` combines the selected heads only.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 1)]
        h_on: usize,
        #[arg(long, default_value = "sum", value_parser = parse::<RoiStrategy>)]
        roi: RoiStrategy,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value = "fallback", value_parser = parse_policy)]
        fallback_policy: EmptyMaskPolicy,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| PhsError::Io { path: path.into(), source: e })?;
    Ok(serde_json::from_str(&text)?)
}

fn parse_prompt(s: &str) -> Result<VisualPrompt> {
    Ok(serde_json::from_str(s)?)
}

/// `a..b` (inclusive, `b` may be `h`) or a comma list.
pub fn parse_h_on(s: &str, h: usize) -> Result<Vec<usize>> {
    let num = |t: &str| -> Result<usize> {
        if t.trim() == "h" {
            return Ok(h);
        }
        t.trim()
            .parse()
            .map_err(|_| PhsError::Usage(format!("bad h_on value {t:?}")))
    };
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        Ok((num(a)?..=num(b)?).collect())
    } else {
        s.split(',').map(num).collect()
    }
}

fn summary(result: &ExperimentResult) -> serde_json::Value {
    let cells: Vec<_> = result
        .cells
        .iter()
        .map(|c| {
            json!({
                "name": c.name,
                "mp_at_k": c.report.as_ref().map(|r| r.mp_at_k),
                "map_at_k": c.report.as_ref().map(|r| r.map_at_k),
                "failed_objects": c.failed_objects,
            })
        })
        .collect();
    json!({ "cells": cells, "checksum": result.checksum() })
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::GenModel { out, seed, quadrant, config } => {
            let w = if quadrant {
                phs::quadrant::quadrant_model()?
            } else {
                let c: ModelConfig = match config {
                    Some(p) => read_json(&p)?,
                    None => ModelConfig::toy(),
                };
                gen_toy_model(seed, c)?
            };
            save_weights(&out, &w)?;
            Ok(json!({ "path": out, "fingerprint": hex::encode(fingerprint(&w).0) }))
        }
        Command::GenCorpus { out, spec, seed, db_per_class, query_per_class } => {
            let mut s: SyntheticCorpusSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SyntheticCorpusSpec::default(),
            };
            s.seed = seed.unwrap_or(s.seed);
            s.db_per_class = db_per_class.unwrap_or(s.db_per_class);
            s.query_per_class = query_per_class.unwrap_or(s.query_per_class);
            let (q, db) = gen_synthetic_corpus(&s, &out)?;
            Ok(json!({ "query_images": q.images.len(), "db_images": db.images.len(), "out": out }))
        }
        Command::BuildIndex { weights, manifest, out, no_cache } => {
            let (w, fp) = load_weights(&weights)?;
            let m = DatasetManifest::load(&manifest)?;
            let store = build_index(&m, &w, fp, !no_cache)?;
            save_store(&out, &store)?;
            Ok(json!({ "records": store.len(), "cached": store.has_caches(), "fingerprint": hex::encode(fp.0) }))
        }
        Command::Query {
            store, weights, manifest, request, image_id, prompt, mode, h_on, k, roi, selection,
            noise_m, noise_seed, include_heatmaps, include_self, fallback_policy,
        } => {
            let engine = Engine::load(&store, &weights, &manifest, fallback_policy)?;
            let req = match request {
                Some(p) => read_json(&p)?,
                None => QueryRequest {
                    image_id: image_id.expect("required by clap"),
                    prompt: prompt.as_deref().map(parse_prompt).transpose()?,
                    mode,
                    h_on,
                    k,
                    roi,
                    selection,
                    noise: noise_m.map(|m| NoiseParams { m, seed: noise_seed }),
                    include_heatmaps,
                    include_self,
                },
            };
            Ok(serde_json::to_value(engine.query(&req)?)?)
        }
        Command::Eval { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.or_else(|| cfg.output_dir.as_ref().map(|p| cfg.base_dir.join(p)));
            let result = Experiment::load(cfg)?.run();
            if let Some(dir) = out {
                write_outputs(&result, &dir)?;
            }
            Ok(summary(&result))
        }
        Command::Sweep { config, h_on, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            let (w, _) = cfg.model.load(&cfg.base_dir)?;
            cfg.h_on = parse_h_on(&h_on, w.config.num_heads)?;
            let result = Experiment::load(cfg)?.run();
            write_outputs(&result, &out)?;
            Ok(summary(&result))
        }
        Command::Heatmap { weights, manifest, image_id, out, prompt, h_on, roi } => {
            let (w, _) = load_weights(&weights)?;
            let m = DatasetManifest::load(&manifest)?;
            let meta = m.get(&image_id).ok_or_else(|| phs_core::Error::UnknownImage(image_id.clone()))?;
            let img = m.load_pixels(meta, w.config.channels)?;
            let (_, state) = forward(&fit_to_model(&img, &w)?, &w)?;
            let selection = match prompt {
                Some(p) => {
                    let c = &w.config;
                    let p = parse_prompt(&p)?.rescale((img.height(), img.width()), (c.image_height, c.image_width))?;
                    let mask = rasterize(&p, c.image_height, c.image_width, c.patch_size)?;
                    let tokens = tokenize_mask(&mask, c.patch_size, phs_core::prompts::any_overlap(c.patch_size))?;
                    Some(select_heads(&roi_attention(&state, &tokens, roi)?, h_on)?)
                }
                None => None,
            };
            let paths = emit_attention_heatmaps(&state, selection.as_ref(), &out)?;
            Ok(json!({ "files": paths, "selected_heads": selection.map(|s| s.on) }))
        }
        Command::Serve { store, weights, manifest, bind, fallback_policy } => {
            let engine = Arc::new(Engine::load(&store, &weights, &manifest, fallback_policy)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| PhsError::Io { path: "tokio".into(), source: e })?;
            eprintln!("listening on {bind}");
            rt.block_on(phs::service::serve(engine, &bind))
                .map_err(|e| PhsError::Io { path: bind.into(), source: e })?;
            Ok(json!({ "ok": true }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
