use proptest::prelude::*;

use fuseformer::gradients::layernorm_backward;
use fuseformer::kernels::softmax::{select_softmax_strategy, softmax_rows_into, RowLayout};
use fuseformer::kernels::{
    fused_criterion_in_place, layernorm_forward, AttentionMask, DropoutMask,
};
use fuseformer::memplan::{naive_total, plan, simulate_plan_safety, Lifetime};
use fuseformer::numerics::reduce::pairwise_sum;
use fuseformer::numerics::{b16_to_b32, b32_to_b16, rand_uniform, Half};
use fuseformer::Tensor;

fn lifetimes() -> impl Strategy<Value = Vec<Lifetime>> {
    prop::collection::vec((1usize..64, 0usize..12, 0usize..6), 0..24).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(id, (size, first, span))| Lifetime {
                id,
                size,
                first,
                last: first + span,
                name: None,
            })
            .collect()
    })
}

fn rows(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max_rows, 2..=max_cols)
        .prop_flat_map(|(r, c)| (Just(c), prop::collection::vec(-4.0f64..4.0, r * c)))
}

proptest! {
    #[test]
    fn plan_is_safe_and_never_worse_than_naive(ls in lifetimes()) {
        let p = plan(&ls).unwrap();
        prop_assert!(simulate_plan_safety(&p, &ls).ok());
        prop_assert!(p.peak <= naive_total(&ls));
        prop_assert_eq!(p.peak, p.blocks.iter().map(|b| b.size).sum::<usize>());
        // Tensors live at the same step need distinct blocks.
        let horizon = ls.iter().map(|l| l.last + 1).max().unwrap_or(0);
        for t in 0..horizon {
            let live: usize = ls.iter().filter(|l| l.first <= t && t <= l.last).map(|l| l.size).sum();
            prop_assert!(p.peak >= live);
        }
        let all_overlap = ls.iter().enumerate().all(|(i, a)| {
            ls[i + 1..].iter().all(|b| a.first <= b.last && b.first <= a.last)
        });
        prop_assert_eq!(p.peak == naive_total(&ls), all_overlap);
    }

    #[test]
    fn narrowing_is_nearest_and_monotone(a in any::<f32>(), b in any::<f32>()) {
        prop_assume!(a.is_finite() && b.is_finite());
        let (ha, hb) = (b32_to_b16(a), b32_to_b16(b));
        if a <= b {
            prop_assert!(b16_to_b32(ha) <= b16_to_b32(hb));
        }
        let wa = b16_to_b32(ha);
        if wa.is_finite() {
            // No finite binary16 neighbour is strictly closer.
            let bits = ha.0;
            for n in [bits.wrapping_add(1), bits.wrapping_sub(1)] {
                let v = b16_to_b32(Half(n));
                if v.is_finite() && v.signum() == wa.signum() {
                    prop_assert!((wa as f64 - a as f64).abs() <= (v as f64 - a as f64).abs());
                }
            }
        }
    }

    #[test]
    fn widening_round_trips(bits in any::<u16>()) {
        let w = b16_to_b32(Half(bits));
        prop_assume!(!w.is_nan());
        prop_assert_eq!(b32_to_b16(w).0, bits);
    }

    #[test]
    fn dropout_masks_extend_by_prefix(seed in any::<u64>(), p in 0.0f64..0.9, n in 0usize..300, k in 0usize..100) {
        let short = DropoutMask::generate(seed, p, n).unwrap();
        let long = DropoutMask::generate(seed, p, n + k).unwrap();
        for i in 0..n {
            prop_assert_eq!(short.keep.get(i), long.keep.get(i));
        }
        let u = rand_uniform(seed, n as u64);
        prop_assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn pairwise_sum_is_close_to_exact(x in prop::collection::vec(-1e3f32..1e3, 0..2000)) {
        let exact: f64 = x.iter().map(|&v| v as f64).sum();
        let abs: f64 = x.iter().map(|&v| (v as f64).abs()).sum();
        let n = x.len().max(2) as f64;
        let bound = abs * f32::EPSILON as f64 * n.log2().ceil();
        prop_assert!((pairwise_sum(&x) as f64 - exact).abs() <= bound);
    }

    #[test]
    fn layernorm_gradient_sums_to_zero((m, x) in rows(6, 24), seed in any::<u64>()) {
        let n = x.len();
        let xt = Tensor::new(&[n / m, m], x).unwrap();
        let w: Vec<f64> = (0..m).map(|i| 0.5 + rand_uniform(seed, i as u64)).collect();
        let (y, cache) = layernorm_forward(&xt, &w, &vec![0.0; m], 1e-5).unwrap();
        let dy = Tensor::new(&[n / m, m], (0..n).map(|i| rand_uniform(seed ^ 1, i as u64) - 0.5).collect()).unwrap();
        let (dx, _, _) = layernorm_backward(&dy, &xt, &w, &cache).unwrap();
        for r in 0..n / m {
            let s: f64 = dx.row(r).iter().sum();
            let scale: f64 = dx.row(r).iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            prop_assert!(s.abs() <= 1e-12 * scale, "row {} sums to {}", r, s);
            // Normalised outputs divided by the weights are zero-mean.
            let mean: f64 = y.row(r).iter().zip(&w).map(|(v, w)| v / w).sum::<f64>() / m as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn masked_softmax_rows_are_distributions((cols, x) in rows(8, 16), lens_seed in any::<u64>()) {
        let rows = x.len() / cols;
        let lens: Vec<usize> = (0..rows).map(|r| 1 + (rand_uniform(lens_seed, r as u64) * cols as f64) as usize % cols).collect();
        let layout = RowLayout { batch: rows, rows_per_batch: 1, queries: 1, cols };
        let mask = AttentionMask::Padding(lens.clone());
        let mut y = vec![0.0f64; x.len()];
        softmax_rows_into(&x, layout, &mask, select_softmax_strategy(rows, cols, false), &mut y).unwrap();
        for r in 0..rows {
            let row = &y[r * cols..(r + 1) * cols];
            prop_assert!((row[..lens[r]].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row[lens[r]..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn criterion_gradient_rows_sum_to_zero((vocab, x) in rows(8, 20), alpha in 0.0f64..=1.0, seed in any::<u64>()) {
        let rows = x.len() / vocab;
        let targets: Vec<usize> = (0..rows).map(|r| (rand_uniform(seed, r as u64) * vocab as f64) as usize % vocab).collect();
        let mut g = x.clone();
        let stats = fused_criterion_in_place(&mut g, vocab, &targets, alpha, None, 1.0).unwrap();
        prop_assert_eq!(stats.tokens, rows);
        prop_assert!(stats.loss.is_finite() && stats.loss >= -1e-12);
        for r in 0..rows {
            let s: f64 = g[r * vocab..(r + 1) * vocab].iter().sum();
            prop_assert!(s.abs() < 1e-12);
        }
    }
}
