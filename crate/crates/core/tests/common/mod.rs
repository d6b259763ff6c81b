//! Reference computations shared by the oracle and acceptance targets.
#![allow(dead_code)]

use pcdp::linalg::{topk_right_singular, DenseMatrix, SeededRng};
use pcdp::models::{per_sample_grads, Dataset, LayerSpec, ModelKind, ModelParams};
use pcdp::subspace::{projection_from_grads, ProjectionMode};
use rand::Rng;

pub fn gaussian(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal()).collect()
}

/// `n` orthonormal vectors in ℝ^dim by classical Gram-Schmidt on Gaussian draws.
pub fn random_orthonormal(rng: &mut SeededRng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    while out.len() < n {
        let mut v = gaussian(rng, dim);
        for _ in 0..2 {
            for u in &out {
                let p: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= p * y;
                }
            }
        }
        let n2 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n2 > 1e-6 {
            out.push(v.iter().map(|x| x / n2).collect());
        }
    }
    out
}

pub fn outer_sum(vs: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut p = vec![0.0; dim * dim];
    for v in vs {
        for i in 0..dim {
            for j in 0..dim {
                p[i * dim + j] += v[i] * v[j];
            }
        }
    }
    p
}

/// `A = Σ s_j u_j w_jᵀ` with prescribed singular values, so the top-k right
/// singular subspace is `span(w_1..w_k)` exactly.
pub fn gram_vs_dense_case(seed: u64, b: usize, d: usize, k: usize) -> f64 {
    let mut rng = SeededRng::new(seed);
    let r = b.min(d);
    let u = random_orthonormal(&mut rng, r, b);
    let w = random_orthonormal(&mut rng, r, d);
    let s: Vec<f64> = (0..r).map(|j| (r - j) as f64 + 0.5).collect();
    let mut a = DenseMatrix::zeros(b, d);
    for j in 0..r {
        for row in 0..b {
            for col in 0..d {
                let v = a.get(row, col) + s[j] * u[j][row] * w[j][col];
                a.set(row, col, v);
            }
        }
    }
    let top = topk_right_singular(&a, k).unwrap();
    assert_eq!(top.basis.k(), k);
    let got: Vec<Vec<f64>> = (0..k).map(|j| top.basis.vector(j).to_vec()).collect();
    let p_got = outer_sum(&got, d);
    let p_true = outer_sum(&w[..k], d);
    let frob = p_got
        .iter()
        .zip(&p_true)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    // Frobenius bounds the spectral distance from above.
    frob
}

/// Independent forward pass: cross-entropy loss of one sample.
pub fn reference_loss(kind: &ModelKind, w: &[f64], x: &[f64], y: usize) -> f64 {
    let affine = |wt: &[f64], b: &[f64], input: &[f64]| -> Vec<f64> {
        b.iter()
            .enumerate()
            .map(|(o, bo)| {
                bo + input
                    .iter()
                    .enumerate()
                    .map(|(i, xi)| wt[o * input.len() + i] * xi)
                    .sum::<f64>()
            })
            .collect()
    };
    let z = match *kind {
        ModelKind::Logistic { features, classes } => {
            let (wt, b) = w.split_at(features * classes);
            affine(wt, b, x)
        }
        ModelKind::Mlp {
            features,
            hidden,
            classes,
        } => {
            let (w1, rest) = w.split_at(hidden * features);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(classes * hidden);
            let h: Vec<f64> = affine(w1, b1, x).into_iter().map(|v| v.max(0.0)).collect();
            affine(w2, b2, &h)
        }
    };
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

pub fn finite_difference_trials(kind: ModelKind, trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    let f = kind.features();
    let c = kind.classes();
    for t in 0..trials {
        let mut rng = SeededRng::new(t).substream("fd");
        let dim = kind.param_count();
        let w: Vec<f64> = (0..dim).map(|_| 0.5 * rng.standard_normal()).collect();
        let x: Vec<f64> = (0..f).map(|_| rng.random::<f64>()).collect();
        let y = rng.random_range(0..c);
        let data = Dataset::new(x.clone(), f, vec![y], c).unwrap();
        let params = ModelParams::from_values(&kind, w.clone()).unwrap();
        let g = per_sample_grads(&kind, &params, &data, &[0]).unwrap();
        let analytic = g.grads.row(0);
        assert!((g.losses[0] - reference_loss(&kind, &w, &x, y)).abs() < 1e-12);
        for j in 0..dim {
            let mut plus = w.clone();
            plus[j] += h;
            let mut minus = w.clone();
            minus[j] -= h;
            let fd = (reference_loss(&kind, &plus, &x, y) - reference_loss(&kind, &minus, &x, y))
                / (2.0 * h);
            worst = worst.max((fd - analytic[j]).abs());
        }
    }
    worst
}

/// Largest deviation between the layer-wise projection and an explicit dense
/// block-diagonal projector, over random layouts with `d ≤ 20`.
pub fn layerwise_vs_block_diagonal(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = SeededRng::new(seed).substream("blocks");
        let n_layers = rng.random_range(1..=4);
        let mut sizes: Vec<usize> = (0..n_layers).map(|_| rng.random_range(1..=6)).collect();
        while sizes.iter().sum::<usize>() > 20 {
            sizes.pop();
        }
        let d: usize = sizes.iter().sum();
        let mut offset = 0;
        let layout: Vec<LayerSpec> = sizes
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let l = LayerSpec {
                    name: format!("b{i}"),
                    offset,
                    len,
                    shape: vec![len],
                };
                offset += len;
                l
            })
            .collect();
        let b = rng.random_range(2..=8);
        let grads = DenseMatrix::from_vec(b, d, gaussian(&mut rng, b * d)).unwrap();
        let k = rng.random_range(1..=4);
        let pset = projection_from_grads(&layout, &grads, k, ProjectionMode::Layerwise, 1, 0).unwrap();

        let mut dense = vec![0.0; d * d];
        for block in pset.blocks() {
            let vs: Vec<Vec<f64>> = (0..block.basis.k())
                .map(|j| block.basis.vector(j).to_vec())
                .collect();
            let p = outer_sum(&vs, block.len());
            for i in 0..block.len() {
                for j in 0..block.len() {
                    dense[(block.offset + i) * d + block.offset + j] = p[i * block.len() + j];
                }
            }
        }
        for _ in 0..5 {
            let v = gaussian(&mut rng, d);
            let fast = pset.apply(&v).unwrap();
            for i in 0..d {
                let slow: f64 = (0..d).map(|j| dense[i * d + j] * v[j]).sum();
                worst = worst.max((fast[i] - slow).abs());
            }
        }
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Failure counts per invariant over `cases` seeded random instances.
pub fn invariant_sweep(cases: u64) -> Vec<(&'static str, usize)> {
    use pcdp::federated::{partition, trace_dispersion, PartitionMode};
    use pcdp::models::init_params;
    use pcdp::privacy::{clip, ClipSpec};
    use pcdp::trainer::{pcdp_step, StepConfig};

    let names = [
        "orthonormality",
        "idempotence",
        "contraction",
        "clip norm bound",
        "noise in span",
        "clipped-fraction dominance",
        "update confinement",
        "partition disjointness",
        "trace contraction",
    ];
    let mut fails = [0usize; 9];
    for case in 0..cases {
        let mut rng = SeededRng::new(case).substream("sweep");
        let n_layers = rng.random_range(1..=3);
        let sizes: Vec<usize> = (0..n_layers).map(|_| rng.random_range(1..=8)).collect();
        let d: usize = sizes.iter().sum();
        let mut offset = 0;
        let layout: Vec<LayerSpec> = sizes
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
            .collect();
        let b = rng.random_range(1..=10);
        let grads = DenseMatrix::from_vec(b, d, gaussian(&mut rng, b * d)).unwrap();
        let k = rng.random_range(1..=5);
        let mode = if rng.random_bool(0.5) {
            ProjectionMode::Whole
        } else {
            ProjectionMode::Layerwise
        };
        let pset = projection_from_grads(&layout, &grads, k, mode, 1, 0).unwrap();
        let tol = 1e-10;

        if pset.blocks().iter().any(|bl| bl.basis.orthonormality_error() > tol) {
            fails[0] += 1;
        }
        let rows: Vec<Vec<f64>> = (0..6).map(|_| gaussian(&mut rng, d)).collect();
        let c = 0.5 + rng.random::<f64>() * 3.0;
        for v in &rows {
            let p = pset.apply(v).unwrap();
            let pp = pset.apply(&p).unwrap();
            if p.iter().zip(&pp).any(|(x, y)| (x - y).abs() > tol * (1.0 + norm(v))) {
                fails[1] += 1;
            }
            if norm(&p) > norm(v) * (1.0 + 1e-12) {
                fails[2] += 1;
            }
            if norm(&clip(v, &ClipSpec::abadi(c))) > c * (1.0 + 1e-12) {
                fails[3] += 1;
            }
        }
        let noise = pset.noise(c, 1.5, &mut rng).unwrap();
        let back = pset.apply(&noise).unwrap();
        if noise.iter().zip(&back).any(|(x, y)| (x - y).abs() > tol * (1.0 + norm(&noise))) {
            fails[4] += 1;
        }
        let raw_clipped = rows.iter().filter(|r| norm(r) > c).count();
        let proj_clipped = rows
            .iter()
            .filter(|r| norm(&pset.apply(r).unwrap()) > c)
            .count();
        if proj_clipped > raw_clipped {
            fails[5] += 1;
        }
        let projected: Vec<Vec<f64>> = rows.iter().map(|r| pset.apply(r).unwrap()).collect();
        if trace_dispersion(&projected) > trace_dispersion(&rows) * (1.0 + 1e-9) + 1e-12 {
            fails[8] += 1;
        }

        // A small model for update confinement.
        let kind = ModelKind::Logistic {
            features: 3,
            classes: 2,
        };
        let n = 8;
        let feats: Vec<f64> = (0..n * 3).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = Dataset::new(feats, 3, labels, 2).unwrap();
        let params = init_params(&kind, case).unwrap();
        let mpset = pcdp::subspace::refresh_projection(
            &kind,
            &params,
            &data,
            &[0, 1, 2, 3],
            rng.random_range(1..=3),
            ProjectionMode::Layerwise,
            1,
            0,
        )
        .unwrap();
        let cfg = StepConfig {
            lot_size: 4,
            lr: 0.5,
            clip: ClipSpec::abadi(c),
            sigma: 1.0,
            symmetrize: 0.0,
        };
        let (next, _) = pcdp_step(
            &kind,
            &params,
            &data,
            &[4, 5, 6, 7],
            &mpset,
            &cfg,
            &mut SeededRng::new(case).substream("noise"),
            &mut SeededRng::new(case).substream("sym"),
        )
        .unwrap();
        let delta: Vec<f64> = next
            .values()
            .iter()
            .zip(params.values())
            .map(|(a, b)| a - b)
            .collect();
        let back = mpset.apply(&delta).unwrap();
        if delta.iter().zip(&back).any(|(x, y)| (x - y).abs() > tol * (1.0 + norm(&delta))) {
            fails[6] += 1;
        }

        let part_mode = [PartitionMode::Iid, PartitionMode::Shard, PartitionMode::Extreme]
            [rng.random_range(0..3)];
        let n_clients = rng.random_range(1..=n);
        let plan = partition(&data, n_clients, part_mode, case).unwrap();
        let mut all: Vec<usize> = plan.clients.iter().flatten().copied().collect();
        all.sort_unstable();
        if all != (0..n).collect::<Vec<_>>() {
            fails[7] += 1;
        }
    }
    names.into_iter().zip(fails).collect()
}
