//! Acceptance suite. Each test is one criterion and prints a single
//! `PASS`/`FAIL` line with the measured quantity next to its pinned bound.
//! Run with `cargo test -p phs --test acceptance -- --nocapture` to see the
//! lines.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use phs::corpus::{synthetic_manifests, SyntheticCorpusSpec};
use phs::formats::fingerprint;
use phs::harness::{Experiment, ExperimentConfig, ModelSource};
use phs::quadrant::quadrant_model;
use phs_core::headselect::{
    feature_with_selection, recombine_mha, roi_attention, select_heads, HeadSelection, RoiAttention, RoiStrategy,
    SelectionStrategy,
};
use phs_core::image::ImageTensor;
use phs_core::metrics::{aggregate, average_precision_at, precision_at, score_retrieval, CategoryIndex, ObjectScore, QueryOutcome};
use phs_core::numerics::Vector;
use phs_core::prompts::{add_box_noise, noise_rng, BoxNoise, BoxPrompt, NoiseParams, TokenMask, VisualPrompt};
use phs_core::retrieval::{
    cosine_topk, index_image, query, FeatureRecord, FeatureStore, Fingerprint, QueryMode, QuerySpec, RankedItem,
    RetrievalResult,
};
use phs_core::vit::{forward, forward_with_gate, gen_toy_model, ModelConfig, ModelWeights};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

const IDENTITY_BUDGET: Duration = Duration::from_secs(10);
const CACHE_TOL: f64 = 1e-9;
const CACHE_BUDGET: Duration = Duration::from_secs(30);
const SELECT_BUDGET: Duration = Duration::from_secs(5);
const ADDITIVITY_TOL: f64 = 1e-12;
const COMPLEMENT_TOL: f64 = 1e-9;
const METRICS_TOL: f64 = 1e-12;
const NOISE_M: u32 = 40;
const NOISE_MEAN_TOL: f64 = 1.0;
const UPLIFT_MIN: f64 = 0.10;
const UPLIFT_BUDGET: Duration = Duration::from_secs(60);
/// Bound on the scaled-vs-unscaled gap, relative to the largest output or
/// bias magnitude, when `h/h_on` is not a power of two.
const SCALE_REL_TOL: f64 = 1e-12;

fn report(name: &str, ok: bool, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn random_image(r: &mut impl Rng, c: &ModelConfig) -> ImageTensor {
    let n = c.image_height * c.image_width * c.channels;
    ImageTensor::new(c.image_height, c.image_width, c.channels, (0..n).map(|_| r.random()).collect()).unwrap()
}

fn random_box(r: &mut impl Rng, h: usize, w: usize) -> BoxPrompt {
    let (x0, x1) = (r.random_range(0..w as i64), r.random_range(0..w as i64));
    let (y0, y1) = (r.random_range(0..h as i64), r.random_range(0..h as i64));
    BoxPrompt { x0: x0.min(x1), y0: y0.min(y1), x1: x0.max(x1), y1: y0.max(y1) }
}

fn random_selection(r: &mut impl Rng, h: usize) -> HeadSelection {
    let h_on = r.random_range(1..=h);
    let scores = RoiAttention { scores: (0..h).map(|_| r.random()).collect() };
    select_heads(&scores, h_on).unwrap()
}

fn toy_configs() -> Vec<ModelConfig> {
    let base = ModelConfig::toy();
    vec![
        base,
        ModelConfig { num_registers: 0, ..base },
        ModelConfig { num_layers: 1, ..base },
        ModelConfig { num_heads: 8, head_dim: 2, ..base },
        ModelConfig { num_heads: 2, head_dim: 8, num_registers: 3, ..base },
        ModelConfig { patch_size: 4, channels: 3, ..base },
    ]
}

#[test]
fn identity_selection_matches_plain_retrieval() {
    let start = Instant::now();
    let w = gen_toy_model(1, ModelConfig::toy()).unwrap();
    let c = w.config;
    let mut r = rng(100);
    let images: Vec<_> = (0..50).map(|_| random_image(&mut r, &c)).collect();
    let mut store = FeatureStore::new(fingerprint(&w));
    for (i, img) in images.iter().enumerate() {
        store.push(index_image(&format!("img{i:02}"), img, &w, true).unwrap()).unwrap();
    }
    let all = HeadSelection::all(phs_core::headselect::uniform_scores(c.num_heads));
    let mut mismatches = 0;
    for (i, img) in images.iter().enumerate() {
        let (f, state) = forward(img, &w).unwrap();
        let prompt = VisualPrompt::Box(random_box(&mut r, c.image_height, c.image_width));
        // Features: query side and every cached database record.
        if feature_with_selection(&state, &all, &w, SelectionStrategy::BeforeScale).unwrap() != f {
            mismatches += 1;
        }
        let rec = &store.records()[i];
        let cached = rec.cached.as_ref().unwrap();
        if feature_with_selection(cached, &all, &w, SelectionStrategy::BeforeScale).unwrap() != rec.feature {
            mismatches += 1;
        }
        // Rankings.
        let mut spec = QuerySpec::new(img.clone(), QueryMode::Cbir);
        spec.k = images.len();
        let base = query(&spec, &store, &w).unwrap().ranked;
        for mode in [QueryMode::PhsQo, QueryMode::PhsQd] {
            let mut s = spec.clone();
            s.mode = mode;
            s.prompt = Some(prompt.clone());
            s.h_on = c.num_heads;
            if query(&s, &store, &w).unwrap().ranked != base {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        "identity selection equivalence",
        mismatches == 0 && elapsed < IDENTITY_BUDGET,
        format!("{mismatches} mismatches over 50 images, {elapsed:.2?} (budget {IDENTITY_BUDGET:?})"),
    );
}

#[test]
fn cached_recombination_matches_gated_forward() {
    let start = Instant::now();
    let mut r = rng(200);
    let mut worst: f64 = 0.0;
    for pair in 0..50 {
        let c = toy_configs()[pair % toy_configs().len()];
        let w = gen_toy_model(pair as u64, c).unwrap();
        let img = random_image(&mut r, &c);
        let sel = random_selection(&mut r, c.num_heads);
        let strategy = SelectionStrategy::ALL[pair % SelectionStrategy::ALL.len()];
        let (_, state) = forward(&img, &w).unwrap();
        let cached = feature_with_selection(&state, &sel, &w, strategy).unwrap();
        let (direct, _) = forward_with_gate(&img, &w, Some(&sel.gate(strategy))).unwrap();
        for (a, b) in cached.as_slice().iter().zip(direct.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    report(
        "cache vs forward",
        worst <= CACHE_TOL && elapsed < CACHE_BUDGET,
        format!("max |diff| {worst:.3e} (tol {CACHE_TOL:e}), {elapsed:.2?} (budget {CACHE_BUDGET:?})"),
    );
}

/// Reference: sort indices by descending score, lower index first on ties.
fn sorted_selection(scores: &[f64], h_on: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut on = idx[..h_on].to_vec();
    on.sort_unstable();
    on
}

#[test]
fn head_selection_matches_exhaustive_sort() {
    let start = Instant::now();
    let mut r = rng(300);
    let (mut cases, mut wrong, mut with_ties) = (0, 0, 0);
    for h in [6, 12, 16, 24] {
        for v in 0..1000 {
            // Every other vector draws from four levels to force ties.
            let scores: Vec<f64> = if v % 2 == 0 {
                (0..h).map(|_| r.random_range(0..4) as f64 / 4.0).collect()
            } else {
                (0..h).map(|_| r.random()).collect()
            };
            let distinct: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
            with_ties += usize::from(distinct.len() < h);
            let h_on = r.random_range(1..=h);
            let got = select_heads(&RoiAttention { scores: scores.clone() }, h_on).unwrap().on;
            wrong += usize::from(got != sorted_selection(&scores, h_on));
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        "selection oracle",
        wrong == 0 && elapsed < SELECT_BUDGET,
        format!("{wrong}/{cases} disagree ({with_ties} with ties), {elapsed:.2?} (budget {SELECT_BUDGET:?})"),
    );
}

#[test]
fn roi_attention_additivity_and_complement() {
    let mut r = rng(400);
    let configs = toy_configs();
    let (mut add_err, mut comp_err): (f64, f64) = (0.0, 0.0);
    for s in 0..200 {
        let c = configs[s % configs.len()];
        let w = gen_toy_model(s as u64 / configs.len() as u64, c).unwrap();
        let (_, state) = forward(&random_image(&mut r, &c), &w).unwrap();
        let n = state.num_patches();
        // Random two-way split of a random nonempty subset into nonempty A and B.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let size = r.random_range(2..=n);
        let cut = r.random_range(1..size);
        let a = TokenMask::from_indices(n, &order[..cut]).unwrap();
        let b = TokenMask::from_indices(n, &order[cut..size]).unwrap();
        let ab = TokenMask::from_indices(n, &order[..size]).unwrap();
        let sa = roi_attention(&state, &a, RoiStrategy::Sum).unwrap().scores;
        let sb = roi_attention(&state, &b, RoiStrategy::Sum).unwrap().scores;
        let sab = roi_attention(&state, &ab, RoiStrategy::Sum).unwrap().scores;
        let full = roi_attention(&state, &TokenMask::full(n), RoiStrategy::Sum).unwrap().scores;
        for i in 0..state.num_heads() {
            add_err = add_err.max((sab[i] - sa[i] - sb[i]).abs());
            let rest = 1.0 - state.cls_self_mass(i) - state.register_mass(i);
            comp_err = comp_err.max((full[i] - rest).abs());
        }
    }
    report(
        "roi attention additivity and complement",
        add_err <= ADDITIVITY_TOL && comp_err <= COMPLEMENT_TOL,
        format!(
            "additivity {add_err:.3e} (tol {ADDITIVITY_TOL:e}), complement {comp_err:.3e} (tol {COMPLEMENT_TOL:e}) over 200 states"
        ),
    );
}

struct FixtureQuery {
    id: String,
    /// (category, ranked database ids) per object.
    objects: Vec<(String, Vec<String>)>,
}

/// Straight from the definitions: per-object P and AP, averaged over a
/// query's objects of the category, then over queries, then categories.
fn brute_force(db: &[(String, Vec<String>)], queries: &[FixtureQuery], k: usize) -> (f64, f64) {
    let relevant = |id: &str, cat: &str| db.iter().any(|(i, cats)| i == id && cats.iter().any(|c| c == cat));
    let mut cats: Vec<&str> = queries.iter().flat_map(|q| q.objects.iter().map(|o| o.0.as_str())).collect();
    cats.sort();
    cats.dedup();
    let (mut mp, mut map) = (0.0, 0.0);
    for cat in &cats {
        let (mut p_cat, mut ap_cat, mut nq) = (0.0, 0.0, 0.0);
        for q in queries {
            let objs: Vec<_> = q.objects.iter().filter(|o| o.0 == *cat).collect();
            if objs.is_empty() {
                continue;
            }
            nq += 1.0;
            let (mut p_q, mut ap_q) = (0.0, 0.0);
            for (_, ranked) in &objs {
                let kk = k.min(ranked.len());
                let rel: Vec<bool> = ranked[..kk].iter().map(|id| relevant(id, cat)).collect();
                let hits = rel.iter().filter(|&&b| b).count();
                p_q += hits as f64 / kk as f64;
                if hits > 0 {
                    let mut ap = 0.0;
                    for i in 0..kk {
                        if rel[i] {
                            ap += rel[..=i].iter().filter(|&&b| b).count() as f64 / (i + 1) as f64;
                        }
                    }
                    ap_q += ap / hits as f64;
                }
            }
            p_cat += p_q / objs.len() as f64;
            ap_cat += ap_q / objs.len() as f64;
        }
        mp += p_cat / nq;
        map += ap_cat / nq;
    }
    (mp / cats.len() as f64, map / cats.len() as f64)
}

#[test]
fn metrics_match_brute_force_evaluator() {
    let mut r = rng(500);
    let names = ["cat", "dog", "bus"];
    let db: Vec<(String, Vec<String>)> = (0..20)
        .map(|i| {
            let mut cats: Vec<String> = names.iter().filter(|_| r.random_bool(0.4)).map(|s| s.to_string()).collect();
            if cats.is_empty() {
                cats.push(names[i % 3].into());
            }
            (format!("db{i:02}"), cats)
        })
        .collect();
    let mut index = CategoryIndex::new();
    for (id, cats) in &db {
        index.insert(id, cats.iter().map(String::as_str));
    }
    let mut worst: f64 = 0.0;
    for (round, k) in [(0, 1), (1, 5), (2, 10), (3, 20), (4, 30)] {
        let queries: Vec<FixtureQuery> = (0..8)
            .map(|q| FixtureQuery {
                id: format!("r{round}q{q}"),
                objects: (0..r.random_range(1..=3))
                    .map(|_| {
                        let mut ids: Vec<String> = db.iter().map(|d| d.0.clone()).collect();
                        ids.shuffle(&mut r);
                        ids.truncate(r.random_range(1..=20));
                        (names[r.random_range(0..3)].to_string(), ids)
                    })
                    .collect(),
            })
            .collect();
        let mut scores = Vec::new();
        for q in &queries {
            for (oi, (cat, ranked)) in q.objects.iter().enumerate() {
                let result = RetrievalResult {
                    ranked: ranked
                        .iter()
                        .enumerate()
                        .map(|(i, id)| RankedItem { image_id: id.clone(), score: 0.0, rank: i + 1 })
                        .collect(),
                    selected_heads: None,
                    fallback: false,
                };
                let outcome = score_retrieval(&result, &q.id, oi, cat, &index).unwrap();
                scores.push(ObjectScore::from_outcome(&outcome, k).unwrap());
            }
        }
        let rep = aggregate(&scores, k).unwrap();
        let (mp, map) = brute_force(&db, &queries, k);
        worst = worst.max((rep.mp_at_k - mp).abs()).max((rep.map_at_k - map).abs());
    }
    let hand = QueryOutcome { query_id: "q".into(), object_index: 0, category: "c".into(), bits: vec![true, false, true] };
    let p = precision_at(&hand, 3).unwrap();
    let ap = average_precision_at(&hand, 3).unwrap();
    report(
        "metrics oracle",
        worst <= METRICS_TOL && p == 2.0 / 3.0 && ap == 5.0 / 6.0,
        format!("max |diff| {worst:.3e} (tol {METRICS_TOL:e}); hand case P@3 = {p}, AP@3 = {ap}"),
    );
}

#[test]
fn cosine_topk_matches_naive_scan() {
    let mut r = rng(600);
    let (mut wrong, mut scaled_wrong) = (0, 0);
    for _ in 0..100 {
        let n = r.random_range(1..80);
        let dim = r.random_range(2..24);
        let vec_of = |r: &mut Xoshiro256PlusPlus| Vector::new((0..dim).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap();
        let q = vec_of(&mut r);
        let mut store = FeatureStore::new(Fingerprint([0; 32]));
        for i in 0..n {
            store.push(FeatureRecord { image_id: format!("x{i}"), feature: vec_of(&mut r), cached: None }).unwrap();
        }
        // Naive: cosine of every record, stable descending sort.
        let mut naive: Vec<(usize, f64)> = store
            .records()
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let f = rec.feature.as_slice();
                let dot: f64 = q.as_slice().iter().zip(f).map(|(a, b)| a * b).sum();
                let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nq = q.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
                (i, dot / (nq * nf))
            })
            .collect();
        naive.sort_by(|a, b| b.1.total_cmp(&a.1));
        let naive_ids: Vec<String> = naive.iter().map(|(i, _)| format!("x{i}")).collect();
        let ids = |s: &FeatureStore| -> Vec<String> {
            cosine_topk(&q, s, n).unwrap().ranked.into_iter().map(|it| it.image_id).collect()
        };
        let got = ids(&store);
        wrong += usize::from(got != naive_ids);
        store.scale_features(10f64.powf(r.random_range(-3.0..3.0)));
        scaled_wrong += usize::from(ids(&store) != got);
    }
    report(
        "retrieval oracle",
        wrong == 0 && scaled_wrong == 0,
        format!("{wrong}/100 differ from naive scan, {scaled_wrong}/100 change under positive scaling"),
    );
}

#[test]
fn box_noise_support_mean_and_zero_identity() {
    let mut r = noise_rng(700);
    let draws: Vec<BoxNoise> = (0..10_000).map(|_| BoxNoise::sample(&mut r, NOISE_M)).collect();
    let m = i64::from(NOISE_M);
    let offsets: [Vec<i64>; 4] = [
        draws.iter().map(|d| d.cx).collect(),
        draws.iter().map(|d| d.cy).collect(),
        draws.iter().map(|d| d.lx).collect(),
        draws.iter().map(|d| d.ly).collect(),
    ];
    let in_support = offsets.iter().flatten().all(|v| (-m..=m).contains(v));
    let means: Vec<f64> = offsets.iter().map(|o| o.iter().sum::<i64>() as f64 / o.len() as f64).collect();
    let mean_ok = means.iter().all(|v| v.abs() <= NOISE_MEAN_TOL);
    let mut zero_ok = true;
    let mut br = rng(701);
    for seed in 0..1000 {
        let b = random_box(&mut br, 480, 640);
        zero_ok &= add_box_noise(&b, &NoiseParams { m: 0, seed }, 480, 640) == b;
    }
    report(
        "noise model",
        in_support && mean_ok && zero_ok,
        format!(
            "support within ±{NOISE_M}: {in_support}; means {means:.3?} (tol ±{NOISE_MEAN_TOL}); m = 0 identity: {zero_ok}"
        ),
    );
}

#[test]
fn quadrant_corpus_uplift() {
    let start = Instant::now();
    let (query_m, db) = synthetic_manifests(&SyntheticCorpusSpec::default()).unwrap();
    let w = quadrant_model().unwrap();
    let fp = fingerprint(&w);
    let mut cfg = ExperimentConfig::new(ModelSource::Quadrant, "query.json".into(), "db.json".into());
    cfg.modes = vec![QueryMode::Cbir, QueryMode::PhsQo];
    cfg.h_on = (1..=w.config.num_heads).collect();
    cfg.k = 10;
    let exp = Experiment::from_parts(cfg, w, fp, query_m, &db).unwrap();
    let result = exp.run();
    let mp = |pred: &dyn Fn(&phs::harness::Cell) -> bool| {
        result.cells.iter().find(|c| pred(&c.cell)).unwrap().report.as_ref().unwrap().mp_at_k
    };
    let cbir = mp(&|c| c.mode == QueryMode::Cbir);
    let scan: Vec<(usize, f64)> = (1..=4).map(|h| (h, mp(&|c| c.mode == QueryMode::PhsQo && c.h_on == Some(h)))).collect();
    let best = scan.iter().fold(scan[0], |b, &x| if x.1 > b.1 { x } else { b });
    let uplift = scan[0].1 - cbir;
    let elapsed = start.elapsed();
    report(
        "quadrant uplift",
        uplift >= UPLIFT_MIN && best.0 == 1 && elapsed < UPLIFT_BUDGET,
        format!(
            "CBIR MP@10 {cbir:.3}, scan {scan:.3?}, uplift {uplift:+.3} (min {UPLIFT_MIN}), best h_on {}, {elapsed:.2?}",
            best.0
        ),
    );
}

fn without_bias(mut w: ModelWeights) -> ModelWeights {
    let last = w.layers.len() - 1;
    w.layers[last].b_o = Vector::zeros(w.config.embed_dim);
    w
}

#[test]
fn scaled_strategies_and_variants_run() {
    let mut r = rng(900);
    let (mut rel_err, mut pow2_bitwise, mut pow2_cases, mut failures): (f64, bool, usize, Vec<String>) =
        (0.0, true, 0, Vec::new());
    for (ci, c) in toy_configs().into_iter().enumerate() {
        let mut w = gen_toy_model(ci as u64, c).unwrap();
        // Nonzero projection bias so that "added once" is observable.
        let last = w.layers.len() - 1;
        w.layers[last].b_o = Vector::new((0..c.embed_dim).map(|_| r.random::<f64>() - 0.5).collect()).unwrap();
        let bias = w.layers[last].b_o.clone();
        let unbiased = without_bias(w.clone());
        let img = random_image(&mut r, &c);
        let (_, state) = forward(&img, &w).unwrap();
        let h = c.num_heads;
        for h_on in 1..=h {
            let scores = RoiAttention { scores: (0..h).map(|_| r.random()).collect() };
            let sel = select_heads(&scores, h_on).unwrap();
            let s = h as f64 / h_on as f64;
            let lo = &w.layers[last];
            let scaled = recombine_mha(&state, &sel, &lo.w_o, &bias, SelectionStrategy::BeforeScale).unwrap();
            let plain = recombine_mha(&state, &sel, &lo.w_o, &bias, SelectionStrategy::Before).unwrap();
            // Relative to the largest magnitude involved; per-coordinate
            // ratios blow up where the bias cancels the projection.
            let scale = scaled.as_slice().iter().chain(bias.as_slice()).fold(0.0f64, |m, v| m.max(v.abs()));
            for ((a, b), o) in scaled.as_slice().iter().zip(plain.as_slice()).zip(bias.as_slice()) {
                let (x, y) = (a - o, s * (b - o));
                rel_err = rel_err.max((x - y).abs() / scale);
            }
            if (h / h_on).is_power_of_two() && h % h_on == 0 {
                pow2_cases += 1;
                let ul = &unbiased.layers[last];
                let zero = &ul.b_o;
                let a = recombine_mha(&state, &sel, &ul.w_o, zero, SelectionStrategy::BeforeScale).unwrap();
                let b = recombine_mha(&state, &sel, &ul.w_o, zero, SelectionStrategy::Before).unwrap();
                pow2_bitwise &= a == b.scaled(s);
            }
            for strategy in [SelectionStrategy::Identity, SelectionStrategy::After, SelectionStrategy::AfterScale] {
                let ok = feature_with_selection(&state, &sel, &w, strategy)
                    .and_then(|f| forward_with_gate(&img, &w, Some(&sel.gate(strategy))).map(|g| (f, g.0)))
                    .map(|(f, g)| f.as_slice().iter().chain(g.as_slice()).all(|v| v.is_finite()));
                if !matches!(ok, Ok(true)) {
                    failures.push(format!("config {ci} h_on {h_on} {strategy}: {ok:?}"));
                }
            }
        }
    }
    report(
        "strategy ablation sanity",
        rel_err <= SCALE_REL_TOL && pow2_bitwise && failures.is_empty(),
        format!(
            "max rel err {rel_err:.3e} (tol {SCALE_REL_TOL:e}); bitwise on {pow2_cases} power-of-two ratios: {pow2_bitwise}; variant failures {failures:?}"
        ),
    );
}

#[test]
fn cli_eval_reproduces_golden_checksum() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/eval");
    let golden = std::fs::read_to_string(fixture.join("golden.sha256")).unwrap().trim().to_string();
    let out = tempfile::tempdir().unwrap();
    let run = Command::new(env!("CARGO_BIN_EXE_phs"))
        .args(["eval", "--config"])
        .arg(fixture.join("config.json"))
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    let stdout: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap_or_default();
    let printed = stdout["checksum"].as_str().unwrap_or("").to_string();
    let file = std::fs::read(out.path().join("report.json")).map(|b| hex::encode(Sha256::digest(b))).unwrap_or_default();
    report(
        "cli golden checksum",
        run.status.success() && printed == golden && file == golden,
        format!("golden {golden}, printed {printed}, report.json {file}"),
    );
}
