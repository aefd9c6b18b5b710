use proptest::prelude::*;

use moelab::numeric::softmax;
use moelab::precision;
use moelab::replay::RoutingTrace;
use moelab::rlloss::{self, MaskConfig};
use moelab::routing;
use moelab::signal;
use moelab::{MoeLayerSpec, Rng, RoutingMode};

fn probs(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, len).prop_map(|z| softmax(&z, 1.0))
}

/// `(N, K, G)` with `G | N` and `G | K <= N`.
fn grouped_shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=8, 1usize..=8, 1usize..=4).prop_flat_map(|(g, per_group, kpg)| {
        let kpg = kpg.min(per_group);
        Just((g * per_group, g * kpg, g))
    })
}

proptest! {
    #[test]
    fn single_group_equals_topk(p in (2usize..40).prop_flat_map(probs), k_seed in 0usize..1000) {
        let n = p.len();
        let k = 1 + k_seed % n;
        let spec = MoeLayerSpec::new(n, k, 1, 1, 1, 1.0).unwrap();
        prop_assert_eq!(routing::grouped_select(&p, &spec).unwrap(), routing::topk_select(&p, k).unwrap());
    }

    #[test]
    fn grouped_takes_k_over_g_from_each_block(
        (n, k, g, p) in grouped_shape().prop_flat_map(|(n, k, g)| (Just(n), Just(k), Just(g), probs(n)))
    ) {
        let spec = MoeLayerSpec::new(n, k, g, 1, 1, 1.0).unwrap();
        let s = routing::grouped_select(&p, &spec).unwrap();
        prop_assert_eq!(s.len(), k);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        for b in 0..g {
            prop_assert_eq!(s.iter().filter(|&&e| e / (n / g) == b).count(), k / g);
        }
        let gates = routing::gate_weights(&p, &s).unwrap();
        prop_assert!((gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_is_zero_outside_and_identity_inside(rho in 0.0f64..5.0, alpha in 0.05f64..1.0, width in 0.1f64..3.0) {
        let cfg = MaskConfig::new(alpha, alpha + width).unwrap();
        let m = rlloss::mask_ratio(rho, &cfg);
        if rho > alpha && rho < alpha + width {
            prop_assert_eq!(m, rho);
        } else {
            prop_assert_eq!(m, 0.0);
        }
    }

    #[test]
    fn e4m3_rounding_is_monotone(a in -500.0f64..500.0, b in -500.0f64..500.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(precision::e4m3_round(lo) <= precision::e4m3_round(hi));
    }

    #[test]
    fn bf16_rounding_is_monotone_and_idempotent(a in -1e6f64..1e6, b in -1e6f64..1e6) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (rl, rh) = (precision::bf16_round_scalar(lo), precision::bf16_round_scalar(hi));
        prop_assert!(rl <= rh);
        prop_assert_eq!(precision::bf16_round_scalar(rl), rl);
    }

    #[test]
    fn trace_round_trips(tokens in 0usize..20, layers in 1usize..5, n in 2usize..300, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let k = 1 + rng.below(n.min(9));
        let mut indices = Vec::new();
        for _ in 0..tokens * layers {
            let mut entry: Vec<u16> = Vec::new();
            while entry.len() < k {
                let e = rng.below(n) as u16;
                if !entry.contains(&e) {
                    entry.push(e);
                }
            }
            entry.sort_unstable();
            indices.extend(entry);
        }
        let trace = RoutingTrace::from_entries(tokens, layers, k, n, indices).unwrap();
        let bytes = trace.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), 24 + tokens * layers * k * 2);
        let back = RoutingTrace::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, trace);
    }

    #[test]
    fn truncated_traces_are_rejected(cut in 1usize..40) {
        let trace = RoutingTrace::from_entries(2, 2, 2, 4, vec![0, 1, 2, 3, 1, 2, 0, 3]).unwrap();
        let bytes = trace.to_bytes().unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(RoutingTrace::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn patch_plans_tile_and_stay_bounded(len in 1usize..2_000_000, rate in 1.0f64..50_000.0, f_min in 1usize..64, extra in 0usize..8192) {
        let f_max = f_min + extra;
        let plan = signal::plan_patches(len, rate, f_min, f_max).unwrap();
        if len >= f_min {
            prop_assert!(plan.n_frames <= f_max);
        }
        let frames: Vec<_> = plan.frames().collect();
        prop_assert_eq!(frames.first().map(|f| f.0), Some(0));
        prop_assert_eq!(frames.last().map(|f| f.1), Some(len));
        prop_assert!(frames.windows(2).all(|w| w[0].1 == w[1].0));
    }

    #[test]
    fn loo_advantages_are_shift_invariant_on_integer_rewards(
        rewards in prop::collection::vec(-50i32..50, 2..20),
        shift in -1000i32..1000,
    ) {
        let r: Vec<f64> = rewards.iter().map(|&v| v as f64).collect();
        let shifted: Vec<f64> = rewards.iter().map(|&v| (v + shift) as f64).collect();
        let a = rlloss::loo_advantage(&r).unwrap();
        let b = rlloss::loo_advantage(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
        prop_assert!(a.iter().sum::<f64>().abs() <= 1e-12);
    }
}

#[test]
fn grouped_and_plain_disagree_on_wide_layers() {
    let spec = MoeLayerSpec::new(64, 8, 8, 1, 1, 1.0).unwrap();
    let mut rng = Rng::new(8);
    let trials = 1000;
    let disagreements = (0..trials)
        .filter(|_| {
            let p = softmax(&rng.gaussian_vec(64), 1.0);
            routing::select(&p, &spec, RoutingMode::Grouped).unwrap()
                != routing::select(&p, &spec, RoutingMode::PlainTopK).unwrap()
        })
        .count();
    assert!(disagreements > 0);
}
