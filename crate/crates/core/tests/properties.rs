//! Randomised invariants.

mod common;

use proptest::prelude::*;
use uvmtl::afd::{weights_from_rates, DecoupleConfig, DecoupleMode, LossHistory};
use uvmtl::attention::{merge_regions, partition_regions, top_k_stable};
use uvmtl::checkpoint;
use uvmtl::graph::Graph;
use uvmtl::metrics::{accuracy, mean_accuracy};
use uvmtl::params::ParamStore;
use uvmtl::tensor::Tensor;

fn tensor(shape: Vec<usize>, range: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-range..range, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn shape3() -> impl Strategy<Value = Vec<usize>> {
    (1usize..5, 1usize..5, 1usize..5).prop_map(|(a, b, c)| vec![a, b, c])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(t in shape3().prop_flat_map(|s| tensor(s, 60.0)), axis in 0usize..3) {
        let mut g = Graph::new();
        let x = g.input(&t);
        let y = g.softmax(x, axis).unwrap();
        let s = t.shape().to_vec();
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        let v = g.value(y);
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..s[axis]).map(|a| v[(o * s[axis] + a) * inner + i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(v.iter().all(|p| p.is_finite() && *p >= 0.0));
    }

    #[test]
    fn sigmoid_stays_open_unit_interval(t in tensor(vec![16], 30.0)) {
        let mut g = Graph::new();
        let x = g.input(&t);
        let y = g.sigmoid(x);
        prop_assert!(g.value(y).iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn task_weights_sum_to_task_count(rates in prop::collection::vec(0.0f64..3.0, 1..9), temp in 0.1f64..10.0) {
        let w = weights_from_rates(&rates, temp);
        let n = rates.len() as f64;
        prop_assert!((w.iter().sum::<f64>() - n).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        // a task whose loss falls more slowly gets at least as much weight
        for i in 0..rates.len() {
            for j in 0..rates.len() {
                if rates[i] > rates[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn history_weights_hold_at_every_window(
        losses in prop::collection::vec(prop::collection::vec(0.01f64..5.0, 3), 0..12),
    ) {
        let mut h = LossHistory::uniform(3, 2.0).unwrap();
        let w = h.task_weights();
        prop_assert_eq!(w, vec![1.0; 3]);
        for (t, l) in losses.iter().enumerate() {
            h.push_window(l).unwrap();
            let w = h.task_weights();
            prop_assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-12);
            if t < 2 {
                // no ratio is available for the window that feeds these weights
                prop_assert_eq!(w, vec![1.0; 3]);
            }
        }
    }

    #[test]
    fn mu_ramp_is_monotone_and_bounded(total in 1usize..500, ramp in 0.05f64..1.0) {
        let cfg = DecoupleConfig { ramp, ..Default::default() };
        let mut last = 0.0;
        for step in 0..=total {
            let mu = cfg.mu(step, total);
            prop_assert!(mu >= cfg.mu0 - 1e-15 && mu <= cfg.mu_max + 1e-15);
            prop_assert!(mu >= last);
            last = mu;
        }
        prop_assert!((cfg.mu(total, total) - cfg.mu_max).abs() < 1e-12);
    }

    #[test]
    fn decouple_loss_is_bounded(
        sh in tensor(vec![6], 2.0),
        sp in prop::collection::vec(tensor(vec![6], 2.0), 1..5),
    ) {
        let n = sp.len() as f64;
        for mode in [DecoupleMode::AbsCos, DecoupleMode::Cos, DecoupleMode::CosSquared] {
            let mut g = Graph::new();
            let a = g.input(&sh);
            let b: Vec<_> = sp.iter().map(|t| g.input(t)).collect();
            let l = uvmtl::afd::decouple_loss(&mut g, a, &b, mode).unwrap();
            let v = g.scalar(l);
            let lo = if mode == DecoupleMode::Cos { -n } else { 0.0 };
            prop_assert!(v >= lo - 1e-12 && v <= n + 1e-12, "{mode}: {v}");
        }
    }

    #[test]
    fn top_k_returns_the_k_largest(scores in prop::collection::vec(-3i32..3, 1..12), k in 1usize..12, ex in any::<bool>()) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let exclude = ex.then_some(0);
        let candidates = scores.len() - usize::from(ex);
        let k = k.min(candidates);
        let got = top_k_stable(&scores, k, exclude);
        prop_assert_eq!(&got, &common::select_top_k(&scores, k, exclude));
        let mut sorted: Vec<f64> = got.iter().map(|&i| scores[i]).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(sorted, got.iter().map(|&i| scores[i]).collect::<Vec<_>>());
    }

    #[test]
    fn regions_partition_and_merge_back(t in 1usize..4, rh in 1usize..4, rw in 1usize..4, c in 1usize..3) {
        let (h, w) = (t * rh, t * rw);
        let x = Tensor::from_fn(&[h, w, c], |i| i as f64);
        let mut g = Graph::new();
        let v = g.input(&x);
        let p = partition_regions(&mut g, v, t).unwrap();
        prop_assert_eq!(g.shape(p), &[rh * rw, t * t, c]);
        // every pixel of a region lies inside that region's tile
        for r in 0..rh * rw {
            for k in 0..t * t {
                let idx = g.value(p)[(r * t * t + k) * c] as usize / c;
                prop_assert_eq!((idx / w / t) * rw + (idx % w) / t, r);
            }
        }
        let m = merge_regions(&mut g, p, t, h, w).unwrap();
        prop_assert_eq!(g.value(m), x.data());
    }

    #[test]
    fn accuracy_matches_direct_count(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..64)) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        let hits = pairs.iter().filter(|(a, b)| a == b).count();
        prop_assert_eq!(accuracy(&p, &l).unwrap(), hits as f64 / pairs.len() as f64);
    }

    #[test]
    fn mean_accuracy_of_constant_is_constant(a in 0.0f64..100.0, n in 1usize..10) {
        prop_assert!((mean_accuracy(&vec![a; n]).unwrap() - a).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn checkpoint_round_trips_bit_exact(
        seed in any::<u64>(),
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 1..5),
    ) {
        let mut ps = ParamStore::new(seed);
        for (i, s) in shapes.iter().enumerate() {
            let fan = s.iter().product::<usize>().max(1);
            ps.uniform(&format!("p{i}.w"), s, fan).unwrap();
        }
        let bytes = checkpoint::encode(&ps).unwrap();
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), ps.len());
        for ((n1, t1), (n2, t2)) in ps.iter().zip(back.iter()) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(b1, b2);
        }
        prop_assert_eq!(checkpoint::encode(&back).unwrap(), bytes);
    }

    #[test]
    fn init_is_keyed_by_name_not_order(seed in any::<u64>()) {
        let mut a = ParamStore::new(seed);
        a.uniform("x", &[3, 2], 3).unwrap();
        a.uniform("y", &[4], 4).unwrap();
        let mut b = ParamStore::new(seed);
        b.uniform("y", &[4], 4).unwrap();
        b.uniform("x", &[3, 2], 3).unwrap();
        for name in ["x", "y"] {
            let ta = a.get(a.id(name).unwrap());
            let tb = b.get(b.id(name).unwrap());
            prop_assert_eq!(ta.data(), tb.data());
        }
        let x = a.get(a.id("x").unwrap());
        prop_assert!(x.data().iter().all(|v| v.abs() <= 1.0 / 3f64.sqrt()));
    }
}
