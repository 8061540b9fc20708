use std::sync::OnceLock;

use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speci_core::action::{gmm_nll, GMMParams};
use speci_core::env::{self, collect_demos, make_suite, Action, Demonstration, SuiteKind};
use speci_core::harness::ReplayBuffer;
use speci_core::metrics::{auc, fwt, fwt_per_task, nbt, SuccessRecord};
use speci_core::skill::{orthonormal_rows, top_c};
use speci_core::tensor::{log_sum_exp, softmax};
use speci_core::Tensor;

fn record_strategy() -> impl Strategy<Value = SuccessRecord> {
    (1usize..=6, 1usize..=8)
        .prop_flat_map(|(k, e)| (Just(k), Just(e), vec(0.0f64..=1.0, k * k * e)))
        .prop_map(|(k, e, vals)| {
            let mut rec = SuccessRecord::new(k, (0..e).collect());
            for i in 0..k {
                for j in 0..=i {
                    for t in 0..e {
                        rec.set(i, j, t, vals[(i * k + j) * e + t]).unwrap();
                    }
                }
            }
            rec
        })
}

fn gmm_strategy() -> impl Strategy<Value = (GMMParams, Vec<f64>)> {
    (1usize..=5, 1usize..=3)
        .prop_flat_map(|(r, a)| {
            (
                vec(-2.0f64..2.0, r * a),
                vec(-12.0f64..4.0, r * a),
                vec(-5.0f64..5.0, r),
                vec(-3.0f64..3.0, a),
                Just(a),
            )
        })
        .prop_map(|(means, log_stds, mixture_logits, action, action_dim)| {
            (
                GMMParams {
                    means,
                    log_stds,
                    mixture_logits,
                    action_dim,
                },
                action,
            )
        })
}

fn demos() -> &'static Vec<Demonstration> {
    static D: OnceLock<Vec<Demonstration>> = OnceLock::new();
    D.get_or_init(|| {
        let t = &make_suite(SuiteKind::Object, 1, 0).unwrap()[0];
        collect_demos(t, 12, 0).unwrap()
    })
}

proptest! {
    #[test]
    fn softmax_is_a_simplex(x in vec(-50.0f64..50.0, 1..20)) {
        let n = x.len();
        let s = softmax(&Tensor::new(vec![1, n], x).unwrap(), 1).unwrap();
        prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn log_sum_exp_is_shift_exact(x in vec(-30.0f64..30.0, 1..20), c in -100.0f64..100.0) {
        let n = x.len();
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let a = log_sum_exp(&Tensor::new(vec![1, n], x).unwrap(), 1).unwrap().item();
        let b = log_sum_exp(&Tensor::new(vec![1, n], shifted).unwrap(), 1).unwrap().item();
        prop_assert!((b - (a + c)).abs() <= 1e-12 * (1.0 + a.abs() + c.abs()));
    }

    #[test]
    fn top_c_matches_sorted_order(scores in vec((0u8..6).prop_map(f64::from), 1..16), c in 0usize..20) {
        let got = top_c(&scores, c);
        prop_assert_eq!(got.len(), c.min(scores.len()));
        for w in got.windows(2) {
            let (i, j) = (w[0], w[1]);
            prop_assert!(scores[i] > scores[j] || (scores[i] == scores[j] && i < j));
        }
        let worst_kept = got.last().map(|&i| scores[i]);
        for i in (0..scores.len()).filter(|i| !got.contains(i)) {
            if let Some(w) = worst_kept {
                prop_assert!(scores[i] < w || (scores[i] == w && i > *got.last().unwrap()));
            }
        }
    }

    #[test]
    fn new_rows_are_orthonormal_to_existing(seed in any::<u64>(), d in 2usize..24, existing in 0usize..12, count in 1usize..12) {
        prop_assume!(existing + count <= d);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let old = orthonormal_rows(&[], existing, d, &mut r).unwrap();
        let new = orthonormal_rows(&old, count, d, &mut r).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for (i, a) in new.iter().enumerate() {
            prop_assert!((dot(a, a) - 1.0).abs() <= 1e-12);
            for b in old.iter().chain(&new[..i]) {
                prop_assert!(dot(a, b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn mixture_weights_are_a_simplex((p, _) in gmm_strategy()) {
        let w = p.weights();
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn nll_is_invariant_to_component_order((p, a) in gmm_strategy(), rot in 0usize..5) {
        let r = p.components();
        let dim = p.action_dim;
        let perm: Vec<usize> = (0..r).map(|i| (i + rot) % r).collect();
        let q = GMMParams {
            means: perm.iter().flat_map(|&i| p.means[i * dim..(i + 1) * dim].to_vec()).collect(),
            log_stds: perm.iter().flat_map(|&i| p.log_stds[i * dim..(i + 1) * dim].to_vec()).collect(),
            mixture_logits: perm.iter().map(|&i| p.mixture_logits[i]).collect(),
            action_dim: dim,
        };
        let x = gmm_nll(&p, &a).unwrap();
        prop_assert!(x.is_finite());
        prop_assert!((gmm_nll(&q, &a).unwrap() - x).abs() <= 1e-12 * (1.0 + x.abs()));
    }

    #[test]
    fn metrics_stay_in_range(rec in record_strategy()) {
        let (f, n, a) = (fwt(&rec).unwrap(), nbt(&rec).unwrap(), auc(&rec).unwrap());
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((-1.0..=1.0).contains(&n));
    }

    #[test]
    fn metrics_scale_linearly(rec in record_strategy(), s in 0.01f64..=1.0) {
        let sc = rec.scaled(s);
        for m in [fwt, nbt, auc] {
            let (x, y) = (m(&rec).unwrap(), m(&sc).unwrap());
            prop_assert!((y - s * x).abs() <= 1e-12, "{} vs {}", y, s * x);
        }
    }

    #[test]
    fn clamping_is_idempotent(rec in record_strategy()) {
        let once = rec.clamped().unwrap();
        prop_assert_eq!(once.clamped().unwrap(), once.clone());
        prop_assert_eq!(fwt_per_task(&once).unwrap(), fwt_per_task(&rec).unwrap());
        for i in 0..rec.n_tasks() {
            let (best, e_star) = rec.best(i).unwrap();
            let curve = once.curve(i).unwrap();
            prop_assert!(curve[e_star..].iter().all(|&v| v == best));
        }
    }

    #[test]
    fn metrics_survive_a_json_round_trip(rec in record_strategy()) {
        let back: SuccessRecord = serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
        for m in [fwt, nbt, auc] {
            prop_assert!((m(&back).unwrap() - m(&rec).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn replay_buffer_is_bounded_and_balanced(cap in 0usize..30, sizes in vec(1usize..=12, 1..6), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = ReplayBuffer::new(cap);
        for (t, &n) in sizes.iter().enumerate() {
            buf.update(t, &demos()[..n], &mut r);
            prop_assert!(buf.len() <= cap);
            // Full tasks only shrink toward the others, so any two tasks that
            // had to give up entries end within one of each other.
            let counts = buf.counts();
            let evicted: Vec<usize> = counts
                .iter()
                .filter(|(&k, &c)| c < sizes[k])
                .map(|(_, &c)| c)
                .collect();
            if let (Some(lo), Some(hi)) = (evicted.iter().min(), counts.values().max()) {
                prop_assert!(hi - lo <= 1, "{:?}", counts);
            }
        }
    }

    #[test]
    fn dynamics_stay_in_bounds(seed in any::<u64>(), acts in vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..60)) {
        let t = &make_suite(SuiteKind::Long, 1, seed % 7).unwrap()[0];
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut s = t.sample_initial(&mut r);
        for (x, y, g) in acts {
            let a = Action { delta_xy: [x, y], gripper_cmd: g };
            let (next, _, _) = env::step(&s, &a, t).unwrap();
            prop_assert_eq!(&env::step(&s, &a, t).unwrap().0, &next);
            let inside = |p: [f64; 2]| p.iter().all(|v| (0.0..=1.0).contains(v));
            prop_assert!(inside(next.effector_xy));
            prop_assert!(next.objects.iter().all(|o| inside(o.xy)));
            prop_assert!(next.objects.iter().filter(|o| o.held).count() <= 1);
            if next.done {
                break;
            }
            s = next;
        }
    }
}
