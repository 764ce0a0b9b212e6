use fastcar::accounting::{flops_model_counts, mlp_flops_per_token};
use fastcar::drs::{
    dispatch, round_robin_assign, simulate, static_assign, uniform_stream, IndexRegister,
};
use fastcar::fastcar::{mean_over_heads, tas_from_vectors, ReplayPolicy};
use fastcar::model::{argmax, DecodeOptions, FrameLayout, GridPos, ModelConfig};
use fastcar::sparse_attn::{allowed_positions, AttentionMask};
use fastcar::tensor::{matmul, softmax_row, spectral_norm, vec_mat, Mat};
use fastcar::theory::{check_unit_cosine_law, spearman};
use fastcar::{Matrix, Model};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Mat::from_vec(rows, cols, v).unwrap())
}

proptest! {
    #[test]
    fn softmax_normalizes_and_ignores_shifts(row in prop::collection::vec(-30.0f64..30.0, 1..40), c in -50.0f64..50.0) {
        let p = softmax_row(&row).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
        let q = softmax_row(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn identity_product_is_exact(a in matrix(5, 7), b in matrix(7, 3)) {
        let ai = matmul(&a, &Mat::identity(7)).unwrap();
        prop_assert_eq!(matmul(&ai, &b).unwrap(), matmul(&a, &b).unwrap());
    }

    #[test]
    fn spectral_norm_dominates_samples(m in matrix(6, 6), x in prop::collection::vec(-1.0f64..1.0, 6)) {
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(nx > 1e-3);
        let y = vec_mat(&x, &m);
        let ratio = y.iter().map(|v| v * v).sum::<f64>().sqrt() / nx;
        prop_assert!(spectral_norm(&m, 500) >= ratio - 1e-6);
    }

    #[test]
    fn argmax_ignores_constant_shift(raw in prop::collection::vec(-64i32..64, 1..50), c in -64i32..64) {
        // Eighths stay exact under the shift.
        let v: Vec<f64> = raw.iter().map(|x| *x as f64 / 8.0).collect();
        let w: Vec<f64> = v.iter().map(|x| x + c as f64 / 8.0).collect();
        prop_assert_eq!(argmax(&v), argmax(&w));
        let best = argmax(&v);
        prop_assert!(v.iter().all(|x| *x <= v[best]));
        prop_assert!(v[..best].iter().all(|x| *x < v[best]));
    }

    #[test]
    fn flat_index_round_trips(frames in 1usize..10, n in 1usize..20, prefill in 1usize..10) {
        let lay = FrameLayout { frames, tokens_per_frame: n, prefill_len: prefill };
        for j in 0..lay.video_len() {
            let g = lay.grid(j);
            prop_assert_eq!(j, (g.t - 1) * n + g.i);
            prop_assert_eq!(lay.flat(g), j);
            prop_assert_eq!(lay.generated_index(lay.position(j)), Some(j));
            match lay.aligned(j) {
                Some(p) => {
                    prop_assert!(g.t >= 2);
                    prop_assert_eq!(lay.grid(p), GridPos { t: g.t - 1, i: g.i });
                }
                None => prop_assert_eq!(g.t, 1),
            }
        }
    }

    #[test]
    fn allowed_positions_are_causal(j in 0usize..300, sink in 0usize..40, local in 1usize..40) {
        let m = AttentionMask::new(sink, local).unwrap();
        let keys = allowed_positions(j, Some(&m));
        prop_assert_eq!(keys.last(), Some(&j));
        prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(keys.len(), m.visible_count(j));
        for k in 0..=j {
            let want = k < sink || k + local > j;
            prop_assert_eq!(keys.contains(&k), want);
        }
    }

    #[test]
    fn head_mean_and_vector_scores(q in prop::collection::vec(-2.0f64..2.0, 16), k in prop::collection::vec(-2.0f64..2.0, 16)) {
        let heads = tas_from_vectors(&q, &k, 4);
        for (h, s) in heads.iter().enumerate() {
            let r = h * 4..(h + 1) * 4;
            let want: f64 = q[r.clone()].iter().zip(&k[r]).map(|(a, b)| a * b).sum::<f64>() / 2.0;
            prop_assert!((s - want).abs() <= 1e-12);
        }
        let avg = heads.iter().sum::<f64>() / 4.0;
        prop_assert!((mean_over_heads(&heads) - avg).abs() <= 1e-12);
    }

    #[test]
    fn unit_cosine_law(dim in 2usize..256, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || {
            let v: Vec<f64> = (0..dim).map(|_| r.random::<f64>() - 0.5).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let (a, b) = (unit(), unit());
        let (lhs, rhs) = check_unit_cosine_law(&a, &b).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9);
    }

    #[test]
    fn spearman_is_bounded_and_symmetric(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..60)) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Some(r) = spearman(&x, &y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            prop_assert_eq!(Some(r), spearman(&y, &x));
        }
        if let Some(r) = spearman(&x, &x) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ledger_is_linear_in_replays(replayed in 0u64..=896, sink in 0usize..64, local in 1usize..64, masked in any::<bool>()) {
        let cfg = ModelConfig::default();
        let lay = FrameLayout::default();
        let mask = masked.then(|| AttentionMask::new(sink, local).unwrap());
        let dense = flops_model_counts(&cfg, &lay, 0, mask.as_ref());
        let run = flops_model_counts(&cfg, &lay, replayed, mask.as_ref());
        prop_assert_eq!(run.total(), dense.total() - replayed * mlp_flops_per_token(&cfg));
        let unmasked = flops_model_counts(&cfg, &lay, replayed, None);
        prop_assert!(run.total() <= unmasked.total());
    }

    #[test]
    fn round_robin_is_balanced(bits in any::<u32>(), log_cores in 0u32..6) {
        let cores = 1usize << log_cores;
        let idx = IndexRegister(bits);
        let map = round_robin_assign(idx, cores).unwrap();
        let loads = map.loads();
        prop_assert_eq!(loads.iter().sum::<usize>(), idx.compute_count());
        prop_assert!(loads.iter().max().unwrap() - loads.iter().min().unwrap() <= 1);
        prop_assert!(map.entries.iter().all(|e| (*e as usize) < cores));
    }

    #[test]
    fn dispatch_conserves_and_dominates(bits in any::<u32>(), log_cores in 0u32..4, per_batch in 1usize..5) {
        let cores = 1usize << log_cores;
        let idx = IndexRegister(bits);
        let stream = uniform_stream(32, per_batch);
        let drs = dispatch(&stream, idx, &round_robin_assign(idx, cores).unwrap()).unwrap();
        let stat = dispatch(&stream, idx, &static_assign(cores).unwrap()).unwrap();
        prop_assert_eq!(drs.surviving(), idx.compute_count() * per_batch);
        prop_assert_eq!(drs.discarded + drs.surviving(), stream.len());
        prop_assert!(drs.queues.iter().flatten().all(|i| idx.is_compute(i.batch)));
        let a = simulate(&drs, 1000, 1).unwrap();
        let b = simulate(&stat, 1000, 1).unwrap();
        prop_assert!(a.makespan <= b.makespan);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn replay_ratio_is_monotone_in_threshold(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let cfg = ModelConfig { d: 16, d_ff: 40, heads: 2, layers: 2, vocab: 31, seed, ..Default::default() };
        let lay = FrameLayout { frames: 4, tokens_per_frame: 4, prefill_len: 4 };
        let m = Model::new(cfg).unwrap();
        let prompt = m.random_prompt(seed, &lay);
        let ratio = |tau: f64| {
            let tr = m.decode(&lay, &prompt, Some(&ReplayPolicy::consistent(tau)), None, &DecodeOptions::default()).unwrap();
            prop_assert!(tr.stats.eligible.iter().all(|e| *e as usize == lay.eligible_per_layer()));
            prop_assert!(fastcar::fastcar::replay_fidelity(&tr).ok());
            Ok(tr.replay_ratio())
        };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(ratio(lo)? >= ratio(hi)?);
    }
}
