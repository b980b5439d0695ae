use phs_core::headselect::uniform_scores;
use phs_core::numerics::{gelu_scalar, layer_norm, matmul, softmax_rows, DEFAULT_EPS};
use phs_core::prompts::{noise_rng, BoxNoise};
use phs_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn random_image(seed: u64, c: &ModelConfig) -> ImageTensor {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let n = c.image_height * c.image_width * c.channels;
    ImageTensor::new(
        c.image_height,
        c.image_width,
        c.channels,
        (0..n).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap()
}

fn toy_state(model_seed: u64, image_seed: u64) -> (ModelWeights, AttentionState) {
    let w = gen_toy_model(model_seed, ModelConfig::toy()).unwrap();
    let (_, s) = forward(&random_image(image_seed, &w.config), &w).unwrap();
    (w, s)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_distributes_over_addition(a in matrix(3, 4), b in matrix(4, 2), c in matrix(4, 2)) {
        let lhs = matmul(&a, &b.add(&c).unwrap()).unwrap();
        let rhs = matmul(&a, &b).unwrap().add(&matmul(&a, &c).unwrap()).unwrap();
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_row_matches_full_product_bitwise(a in matrix(5, 3), b in matrix(3, 4), r in 0usize..5) {
        let full = matmul(&a, &b).unwrap();
        let single = matmul(&Matrix::from_rows(&[a.row(r).to_vec()]).unwrap(), &b).unwrap();
        prop_assert_eq!(full.row(r), single.row(0));
    }

    #[test]
    fn softmax_rows_are_stochastic(a in matrix(4, 7)) {
        let s = softmax_rows(&a);
        for r in 0..4 {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layer_norm_standardizes(v in prop::collection::vec(-10.0f64..10.0, 2..32)) {
        prop_assume!(v.iter().any(|&x| (x - v[0]).abs() > 1e-3));
        let d = v.len();
        let out = layer_norm(&Vector::from(v.as_slice()), &Vector::filled(d, 1.0), &Vector::zeros(d), DEFAULT_EPS).unwrap();
        let mean = out.as_slice().iter().sum::<f64>() / d as f64;
        let var = out.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gelu_is_monotone_above_its_minimum(a in -0.7f64..5.0, delta in 1e-6f64..1.0) {
        prop_assert!(gelu_scalar(a + delta) >= gelu_scalar(a));
    }

    #[test]
    fn rle_round_trips(bits in prop::collection::vec(any::<bool>(), 64)) {
        let rle = Rle::encode(&bits, 8, 8).unwrap();
        prop_assert_eq!(rle.decode().unwrap(), bits);
    }

    #[test]
    fn tokenize_is_monotone(
        a in prop::collection::vec(any::<bool>(), 32 * 32),
        extra in prop::collection::vec(any::<bool>(), 32 * 32),
        threshold in 0.01f64..=1.0,
    ) {
        let b: Vec<bool> = a.iter().zip(&extra).map(|(x, y)| *x || *y).collect();
        let ta = tokenize_mask(&PromptMask::new(32, 32, a).unwrap(), 8, threshold).unwrap();
        let tb = tokenize_mask(&PromptMask::new(32, 32, b).unwrap(), 8, threshold).unwrap();
        prop_assert!(ta.is_subset_of(&tb));
    }

    #[test]
    fn aligned_box_covers_exactly_its_patches(r0 in 0usize..4, c0 in 0usize..4, hr in 1usize..4, hc in 1usize..4) {
        let (r1, c1) = ((r0 + hr).min(4) - 1, (c0 + hc).min(4) - 1);
        let prompt = VisualPrompt::Box(BoxPrompt {
            x0: (c0 * 8) as i64,
            y0: (r0 * 8) as i64,
            x1: (c1 * 8 + 7) as i64,
            y1: (r1 * 8 + 7) as i64,
        });
        let tokens = tokenize_mask(&rasterize(&prompt, 32, 32, 8).unwrap(), 8, prompts::any_overlap(8)).unwrap();
        for t in 0..16 {
            let (r, c) = (t / 4, t % 4);
            prop_assert_eq!(tokens.get(t), (r0..=r1).contains(&r) && (c0..=c1).contains(&c));
        }
    }

    #[test]
    fn noisy_boxes_stay_valid(
        x0 in -50i64..100, y0 in -50i64..100, x1 in -50i64..100, y1 in -50i64..100,
        m in 0u32..60, seed in any::<u64>(),
    ) {
        let b = add_box_noise(&BoxPrompt { x0, y0, x1, y1 }, &NoiseParams { m, seed }, 40, 60);
        if m > 0 {
            prop_assert!(b.x0 <= b.x1 && b.y0 <= b.y1);
            prop_assert!(b.x0 >= 0 && b.x1 < 60 && b.y0 >= 0 && b.y1 < 40);
        }
        let clamped = BoxPrompt { x0, y0, x1, y1 }.clamp_to(40, 60);
        prop_assert!(clamped.x0 <= clamped.x1 && clamped.y0 <= clamped.y1);
        prop_assert!(clamped.x1 < 60 && clamped.y1 < 40);
    }

    #[test]
    fn noise_offsets_within_magnitude(m in 0u32..100, seed in any::<u64>()) {
        let mut rng = noise_rng(seed);
        for _ in 0..20 {
            let n = BoxNoise::sample(&mut rng, m);
            let m = i64::from(m);
            for v in [n.cx, n.cy, n.lx, n.ly] {
                prop_assert!((-m..=m).contains(&v));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn captured_attention_is_row_stochastic(ms in any::<u64>(), is in any::<u64>()) {
        let (_, s) = toy_state(ms, is);
        for a in &s.attention {
            for r in 0..a.rows() {
                prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        for i in 0..s.num_heads() {
            let fresh = s.recompute_contribution(i);
            for (x, y) in fresh.as_slice().iter().zip(s.cls_contributions[i].as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_scores_are_bounded_and_complete(ms in any::<u64>(), is in any::<u64>()) {
        let (_, s) = toy_state(ms, is);
        let full = roi_attention(&s, &TokenMask::full(s.num_patches()), RoiStrategy::Sum).unwrap();
        for (i, v) in full.scores.iter().enumerate() {
            prop_assert!((0.0..=1.0 + 1e-12).contains(v));
            prop_assert!((v + s.cls_self_mass(i) + s.register_mass(i) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn roi_sum_is_additive(ms in any::<u64>(), is in any::<u64>(), split in prop::collection::vec(0u8..3, 16)) {
        let (_, s) = toy_state(ms, is);
        let pick = |which: u8| TokenMask::new(split.iter().map(|&x| x == which).collect());
        let (a, b) = (pick(0), pick(1));
        prop_assume!(a.count() > 0 && b.count() > 0);
        let union = TokenMask::new(a.bits().iter().zip(b.bits()).map(|(x, y)| *x || *y).collect());
        let ra = roi_attention(&s, &a, RoiStrategy::Sum).unwrap();
        let rb = roi_attention(&s, &b, RoiStrategy::Sum).unwrap();
        let ru = roi_attention(&s, &union, RoiStrategy::Sum).unwrap();
        for i in 0..s.num_heads() {
            prop_assert!((ru.scores[i] - ra.scores[i] - rb.scores[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn full_selection_reproduces_vanilla_feature(ms in any::<u64>(), is in any::<u64>()) {
        let w = gen_toy_model(ms, ModelConfig::toy()).unwrap();
        let (f, s) = forward(&random_image(is, &w.config), &w).unwrap();
        let all = HeadSelection::all(uniform_scores(4));
        let g = feature_with_selection(&s, &all, &w, SelectionStrategy::BeforeScale).unwrap();
        prop_assert_eq!(f, g);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn selection_ignores_positive_rescaling(
        scores in prop::collection::vec(0.0f64..1.0, 1..24),
        factor in 1e-3f64..1e3,
        pick in any::<prop::sample::Index>(),
    ) {
        let h_on = pick.index(scores.len()) + 1;
        let a = select_heads(&RoiAttention { scores: scores.clone() }, h_on).unwrap();
        let scaled = scores.iter().map(|s| s * factor).collect();
        let b = select_heads(&RoiAttention { scores: scaled }, h_on).unwrap();
        prop_assert_eq!(a.on, b.on);
    }

    #[test]
    fn ranking_ignores_positive_store_scaling(
        feats in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..30),
        q in prop::collection::vec(-1.0f64..1.0, 6),
        factor in 1e-3f64..1e3,
    ) {
        let q = Vector::from(q.as_slice());
        prop_assume!(q.norm() > 1e-6);
        let mut store = FeatureStore::new(Fingerprint([0; 32]));
        for (i, f) in feats.iter().enumerate() {
            let v = Vector::from(f.as_slice());
            if v.norm() > 1e-6 {
                store.push(FeatureRecord { image_id: format!("{i}"), feature: v, cached: None }).unwrap();
            }
        }
        prop_assume!(!store.is_empty());
        let ids = |s: &FeatureStore| -> Vec<String> {
            cosine_topk(&q, s, s.len()).unwrap().ranked.into_iter().map(|r| r.image_id).collect()
        };
        let before = ids(&store);
        store.scale_features(factor);
        prop_assert_eq!(before, ids(&store));
    }

    #[test]
    fn metric_bounds_and_precision_monotonicity(bits in prop::collection::vec(any::<bool>(), 1..20), flip in any::<prop::sample::Index>(), kk in any::<prop::sample::Index>()) {
        let k = kk.index(bits.len()) + 1;
        let o = QueryOutcome { query_id: "q".into(), object_index: 0, category: "c".into(), bits: bits.clone() };
        let (p, ap) = (precision_at(&o, k).unwrap(), average_precision_at(&o, k).unwrap());
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&ap));
        let mut better = o.clone();
        better.bits[flip.index(bits.len())] = true;
        prop_assert!(precision_at(&better, k).unwrap() >= p);
        let ap_better = average_precision_at(&better, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap_better));
    }

    #[test]
    fn category_renaming_keeps_means(
        rows in prop::collection::vec((0u8..4, 0u8..5, 0.0f64..1.0, 0.0f64..1.0), 1..30),
    ) {
        let build = |names: [&str; 4]| -> Vec<ObjectScore> {
            rows.iter().map(|&(c, q, p, ap)| ObjectScore {
                query_id: format!("q{q}"),
                category: names[c as usize].into(),
                precision: p,
                average_precision: ap,
            }).collect()
        };
        let a = aggregate(&build(["a", "b", "c", "d"]), 10).unwrap();
        let b = aggregate(&build(["zz", "m", "b", "a0"]), 10).unwrap();
        prop_assert_eq!(a.mp_at_k, b.mp_at_k);
        prop_assert_eq!(a.map_at_k, b.map_at_k);
    }

    #[test]
    fn duplicated_object_keeps_category_score(p in 0.0f64..1.0, ap in 0.0f64..1.0, other in 0.0f64..1.0) {
        let s = |q: &str, p: f64, ap: f64| ObjectScore { query_id: q.into(), category: "c".into(), precision: p, average_precision: ap };
        let single = aggregate(&[s("q1", p, ap), s("q2", other, other)], 10).unwrap();
        let doubled = aggregate(&[s("q1", p, ap), s("q1", p, ap), s("q2", other, other)], 10).unwrap();
        prop_assert!((single.mp_at_k - doubled.mp_at_k).abs() < 1e-15);
        prop_assert!((single.map_at_k - doubled.map_at_k).abs() < 1e-15);
    }
}
