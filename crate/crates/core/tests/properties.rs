//! Randomized invariants of projection, clipping, noise, steps, partitions
//! and accounting.

use pcdp::federated::{partition, server_aggregate, trace_dispersion, ClientUpdate, PartitionMode};
use pcdp::linalg::{topk_right_singular, DenseMatrix, OrthoBasis, SeededRng};
use pcdp::models::{init_params, Dataset, LayerSpec, ModelKind};
use pcdp::privacy::{clip, rdp_epsilon, ClipMethod, ClipSpec};
use pcdp::subspace::{projection_from_grads, ProjectionMode, ProjectionSet, PublicPool, Segmentation};
use pcdp::trainer::{pcdp_step, StepConfig};
use proptest::prelude::*;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| DenseMatrix::from_vec(rows, cols, d).unwrap())
}

/// `(A, k, v)` with `A` of shape `b × d` and `v ∈ ℝ^d`.
fn basis_case() -> impl Strategy<Value = (DenseMatrix, usize, Vec<f64>)> {
    (1usize..12, 1usize..16, 1usize..8).prop_flat_map(|(b, d, k)| {
        (
            matrix(b, d),
            Just(k),
            prop::collection::vec(-5.0f64..5.0, d),
        )
    })
}

fn layout(sizes: &[usize]) -> Vec<LayerSpec> {
    let mut offset = 0;
    sizes
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let l = LayerSpec {
                name: format!("l{i}"),
                offset,
                len,
                shape: vec![len],
            };
            offset += len;
            l
        })
        .collect()
}

fn pset_case() -> impl Strategy<Value = (ProjectionSet, Vec<Vec<f64>>)> {
    (
        prop::collection::vec(1usize..8, 1..4),
        2usize..10,
        1usize..6,
        any::<bool>(),
    )
        .prop_flat_map(|(sizes, b, k, whole)| {
            let d: usize = sizes.iter().sum();
            (
                Just(sizes),
                matrix(b, d),
                Just(k),
                Just(whole),
                prop::collection::vec(prop::collection::vec(-4.0f64..4.0, d), 1..8),
            )
        })
        .prop_filter_map("nonzero public gradients", |(sizes, a, k, whole, rows)| {
            let mode = if whole {
                ProjectionMode::Whole
            } else {
                ProjectionMode::Layerwise
            };
            projection_from_grads(&layout(&sizes), &a, k, mode, 1, 0)
                .ok()
                .map(|p| (p, rows))
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn topk_basis_is_orthonormal((a, k, _) in basis_case()) {
        prop_assume!(a.max_abs() > 0.0);
        let top = topk_right_singular(&a, k).unwrap();
        prop_assert!(top.basis.k() <= k.min(a.rows()).min(a.cols()));
        prop_assert!(top.basis.orthonormality_error() < 1e-10);
    }

    #[test]
    fn projection_is_idempotent_and_contractive((a, k, v) in basis_case()) {
        prop_assume!(a.max_abs() > 0.0);
        let basis = topk_right_singular(&a, k).unwrap().basis;
        let p = pcdp::linalg::project(&basis, &v).unwrap();
        let pp = pcdp::linalg::project(&basis, &p).unwrap();
        for (x, y) in p.iter().zip(&pp) {
            prop_assert!((x - y).abs() < 1e-10 * (1.0 + norm(&v)));
        }
        prop_assert!(norm(&p) <= norm(&v) * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn abadi_clip_bounds_norm_and_keeps_direction(
        g in prop::collection::vec(-100.0f64..100.0, 1..40),
        c in 1e-3f64..50.0,
    ) {
        let out = clip(&g, &ClipSpec::abadi(c));
        let n = norm(&g);
        prop_assert!(norm(&out) <= c * (1.0 + 1e-12));
        if n <= c {
            prop_assert_eq!(&out, &g);
        } else {
            let cos = g.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>() / (n * norm(&out));
            prop_assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_clips_bound_norm(
        g in prop::collection::vec(-100.0f64..100.0, 1..40),
        c in 1e-3f64..50.0,
        r in 1e-6f64..1.0,
        nsgd in any::<bool>(),
    ) {
        let method = if nsgd { ClipMethod::Nsgd } else { ClipMethod::AutoS };
        let out = clip(&g, &ClipSpec::new(method, c, r).unwrap());
        prop_assert!(norm(&out) <= c * (1.0 + 1e-12));
    }

    #[test]
    fn noise_lies_in_projection_span((pset, _) in pset_case(), seed in any::<u64>()) {
        let noise = pset.noise(0.7, 1.3, &mut SeededRng::new(seed)).unwrap();
        let back = pset.apply(&noise).unwrap();
        for (x, y) in noise.iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-10 * (1.0 + norm(&noise)));
        }
    }

    #[test]
    fn projected_clip_fraction_never_exceeds_raw((pset, rows) in pset_case(), c in 0.01f64..10.0) {
        let raw = rows.iter().filter(|r| norm(r) > c).count();
        let proj = rows
            .iter()
            .filter(|r| norm(&pset.apply(r).unwrap()) > c)
            .count();
        prop_assert!(proj <= raw);
    }

    #[test]
    fn layerwise_restore_inverts_coefficients_in_span((pset, rows) in pset_case()) {
        for r in &rows {
            let p = pset.apply(r).unwrap();
            let coeffs = pset.coefficients(&p).unwrap();
            prop_assert_eq!(
                coeffs.iter().map(Vec::len).collect::<Vec<_>>(),
                pset.ranks()
            );
            let back = pset.restore(&coeffs).unwrap();
            for (x, y) in p.iter().zip(&back) {
                prop_assert!((x - y).abs() < 1e-10 * (1.0 + norm(r)));
            }
        }
    }

    #[test]
    fn trace_contraction((pset, rows) in pset_case()) {
        let projected: Vec<Vec<f64>> = rows.iter().map(|r| pset.apply(r).unwrap()).collect();
        let raw = trace_dispersion(&rows);
        let proj = trace_dispersion(&projected);
        prop_assert!(proj <= raw * (1.0 + 1e-9) + 1e-12, "{proj} > {raw}");
    }

    #[test]
    fn partitions_are_disjoint_and_cover(
        labels in prop::collection::vec(0usize..5, 10..120),
        n in 1usize..10,
        mode in prop::sample::select(vec![PartitionMode::Iid, PartitionMode::Shard, PartitionMode::Extreme]),
        seed in any::<u64>(),
    ) {
        let len = labels.len();
        let data = Dataset::new(vec![0.5; len], 1, labels, 5).unwrap();
        let plan = partition(&data, n, mode, seed).unwrap();
        prop_assert_eq!(plan.clients.len(), n);
        let mut all: Vec<usize> = plan.clients.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn ibs_blocks_are_disjoint(n in 4usize..60, m in 1usize..6, seed in any::<u64>()) {
        let data = Dataset::new(vec![0.1; n], 1, vec![0; n], 1).unwrap();
        let pool = PublicPool::new(data, Segmentation::Ibs, m, seed).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..pool.block_budget() {
            for j in pool.draw_public_batch(i).unwrap() {
                prop_assert!(seen.insert(j), "index {j} reused");
            }
        }
        prop_assert!(pool.draw_public_batch(pool.block_budget()).is_err());
    }

    #[test]
    fn aggregate_is_client_order_invariant(
        deltas in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..6),
        perm_seed in any::<u64>(),
    ) {
        let kind = ModelKind::Logistic { features: 2, classes: 2 };
        let w = init_params(&kind, 0).unwrap();
        let updates: Vec<ClientUpdate> = deltas
            .iter()
            .enumerate()
            .map(|(i, d)| ClientUpdate {
                client: i,
                coefficients: w.layout().iter().map(|l| d[l.range()].to_vec()).collect(),
                compressed: false,
                bytes: 24,
                local_steps: 1,
                empty: false,
                delta: d.clone(),
                q: 1.0,
            })
            .collect();
        let mut shuffled = updates.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut SeededRng::new(perm_seed));
        let a = server_aggregate(&w, &updates, None, 0.5).unwrap();
        let b = server_aggregate(&w, &shuffled, None, 0.5).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    /// With ω = 0 every pcdp update lies in the projection span, noise included.
    #[test]
    fn pcdp_update_is_confined_to_span(seed in any::<u64>(), k in 1usize..4, c in 0.05f64..5.0) {
        let kind = ModelKind::Logistic { features: 5, classes: 3 };
        let mut rng = SeededRng::new(seed);
        let n = 12;
        let feats: Vec<f64> = (0..n * 5).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let data = Dataset::new(feats, 5, labels, 3).unwrap();
        let params = init_params(&kind, seed).unwrap();
        let public: Vec<usize> = (0..6).collect();
        let pset = pcdp::subspace::refresh_projection(
            &kind, &params, &data, &public, k, ProjectionMode::Layerwise, 1, 0,
        ).unwrap();
        let cfg = StepConfig { lot_size: 4, lr: 0.7, clip: ClipSpec::abadi(c), sigma: 2.0, symmetrize: 0.0 };
        let lot = [6usize, 7, 9, 11];
        let (next, stats) = pcdp_step(
            &kind, &params, &data, &lot, &pset, &cfg,
            &mut SeededRng::new(seed ^ 1), &mut SeededRng::new(seed ^ 2),
        ).unwrap();
        prop_assert!(stats.max_contribution_norm <= c * (1.0 + 1e-12));
        let delta: Vec<f64> = next.values().iter().zip(params.values()).map(|(a, b)| a - b).collect();
        let back = pset.apply(&delta).unwrap();
        for (x, y) in delta.iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-10 * (1.0 + norm(&delta)));
        }
    }
}

/// Accountant monotonicity over a 3 × 3 × 3 grid, and RDP composition.
#[test]
fn accountant_monotone_grid_and_composition() {
    let qs = [0.01, 0.05, 0.2];
    let sigmas = [0.8, 2.0, 8.0];
    let steps = [10usize, 100, 1000];
    for &q in &qs {
        for &s in &sigmas {
            for &t in &steps {
                let e = rdp_epsilon(q, s, t, 1e-5).unwrap();
                assert!(e.is_finite() && e > 0.0);
                if t < 1000 {
                    assert!(rdp_epsilon(q, s, t * 10, 1e-5).unwrap() > e, "T at q={q} s={s} t={t}");
                }
                if s < 8.0 {
                    let larger = if s == 0.8 { 2.0 } else { 8.0 };
                    assert!(rdp_epsilon(q, larger, t, 1e-5).unwrap() < e, "sigma at q={q} s={s} t={t}");
                }
                if q < 0.2 {
                    let larger = if q == 0.01 { 0.05 } else { 0.2 };
                    assert!(rdp_epsilon(larger, s, t, 1e-5).unwrap() > e, "q at q={q} s={s} t={t}");
                }
            }
        }
    }
    // Composition is additive in RDP: each order's curve scales linearly in T.
    for alpha in [2u32, 8, 32] {
        let one = pcdp::privacy::rdp_subsampled_gaussian(0.05, 2.0, alpha);
        let acc = pcdp::privacy::RdpAccountant::new(0.05, 2.0, 1e-5).unwrap();
        let direct = (1..=256u32)
            .filter(|&a| a >= 2)
            .map(|a| {
                500.0 * pcdp::privacy::rdp_subsampled_gaussian(0.05, 2.0, a)
                    + (1e5f64).ln() / f64::from(a - 1)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(one > 0.0);
        assert!((acc.epsilon(500) - direct).abs() < 1e-12);
    }
}

#[test]
fn random_projection_set_is_orthonormal() {
    let p = ProjectionSet::random(50, 20, &mut SeededRng::new(3)).unwrap();
    assert_eq!(p.total_k(), 20);
    assert!(p.blocks()[0].basis.orthonormality_error() < 1e-12);
    let basis: &OrthoBasis = &p.blocks()[0].basis;
    assert_eq!(basis.dim(), 50);
}
