//! Centralized private training: projected clipping and the baseline orderings.
//!
//! Every method shares one pipeline and differs only in where the public
//! projection sits relative to per-sample clipping:
//!
//! | method  | per-sample pipeline                 | noise                 |
//! |---------|-------------------------------------|-----------------------|
//! | `pcdp`  | project → clip                      | in the projection span |
//! | `pdp`   | clip → project                      | in the projection span |
//! | `dpsgd` | clip                                | ambient               |
//! | `rpdp`  | clip → random orthonormal projection | in the random span    |
//! | `rsdp`  | random coordinate mask → clip       | on kept coordinates   |
//!
//! The summed contributions plus noise are divided by the configured lot size
//! `B` (not the realized Poisson lot size) before the SGD update.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Grad2dRow;
use crate::linalg::{gaussian_vec, norm2, pairwise_sum, DenseMatrix, SeededRng};
use crate::models::{evaluate, init_params, per_sample_grads, Dataset, ModelKind, ModelParams};
use crate::privacy::{ClipSpec, RdpAccountant};
use crate::subspace::{
    kappa_from_rows, refresh_projection, skew, ProjectionMode, ProjectionSet, PublicPool,
    Segmentation, SkewReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pcdp,
    Dpsgd,
    Pdp,
    Rpdp,
    Rsdp,
}

impl Method {
    /// Uses a projection built from public gradients.
    pub fn uses_public_projection(self) -> bool {
        matches!(self, Method::Pcdp | Method::Pdp)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcdp" => Ok(Method::Pcdp),
            "dpsgd" => Ok(Method::Dpsgd),
            "pdp" => Ok(Method::Pdp),
            "rpdp" => Ok(Method::Rpdp),
            "rsdp" => Ok(Method::Rsdp),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected pcdp, dpsgd, pdp, rpdp or rsdp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Poisson,
    FixedShuffle,
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" => Ok(Sampling::Poisson),
            "fixed_shuffle" => Ok(Sampling::FixedShuffle),
            other => Err(Error::Config(format!(
                "unknown sampling `{other}` (expected poisson or fixed_shuffle)"
            ))),
        }
    }
}

/// Everything one noisy step needs besides data and parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    /// Configured lot size `B`; the update divides by it.
    pub lot_size: usize,
    pub lr: f64,
    pub clip: ClipSpec,
    pub sigma: f64,
    /// Amplitude ω of the symmetrizing perturbation (pcdp only).
    pub symmetrize: f64,
}

impl StepConfig {
    fn validate(&self) -> Result<()> {
        if self.lot_size == 0 {
            return Err(Error::InvalidArgument("lot size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.sigma >= 0.0) || !(self.symmetrize >= 0.0) {
            return Err(Error::InvalidArgument(
                "sigma and symmetrize must be non-negative".into(),
            ));
        }
        if self.sigma > 0.0 && !self.clip.threshold.is_finite() {
            return Err(Error::InvalidArgument(
                "noise needs a finite clipping threshold".into(),
            ));
        }
        Ok(())
    }
}

/// Method-specific side input of a step.
#[derive(Debug, Clone, Copy)]
pub enum Aux<'a> {
    None,
    Projection(&'a ProjectionSet),
    /// Coordinates kept by the sparsifying mask.
    Mask(&'a [bool]),
}

/// Measurements taken inside one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    pub lot_size: usize,
    pub train_loss: Option<f64>,
    pub mean_norm_raw: Option<f64>,
    pub mean_norm_proj: Option<f64>,
    pub clipped_frac_raw: Option<f64>,
    pub clipped_frac_proj: Option<f64>,
    pub kappa: Option<f64>,
    /// Largest norm of a single sample's contribution to the pre-noise sum.
    pub max_contribution_norm: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn frac_above(xs: &[f64], c: f64) -> f64 {
    xs.iter().filter(|&&x| x > c).count() as f64 / xs.len() as f64
}

fn mask_rows(rows: &DenseMatrix, mask: &[bool]) -> DenseMatrix {
    let mut out = rows.clone();
    for r in 0..out.rows() {
        for (x, &keep) in out.row_mut(r).iter_mut().zip(mask) {
            if !keep {
                *x = 0.0;
            }
        }
    }
    out
}

/// One private step for `method`. `prox` adds `μ (w − anchor)` to the noisy
/// gradient (data-independent, so it needs no clipping).
#[allow(clippy::too_many_arguments)]
pub(crate) fn private_step(
    method: Method,
    kind: &ModelKind,
    params: &ModelParams,
    data: &Dataset,
    lot: &[usize],
    aux: Aux<'_>,
    cfg: &StepConfig,
    noise_rng: &mut SeededRng,
    sym_rng: &mut SeededRng,
    prox: Option<(f64, &[f64])>,
) -> Result<(ModelParams, StepStats)> {
    cfg.validate()?;
    let d = params.dim();
    let c = cfg.clip.threshold;
    let mut stats = StepStats {
        lot_size: lot.len(),
        ..Default::default()
    };

    let projection = match (method, aux) {
        (Method::Pcdp | Method::Pdp | Method::Rpdp, Aux::Projection(p)) => Some(p),
        (Method::Dpsgd, Aux::Projection(p)) => Some(p),
        (Method::Pcdp | Method::Pdp | Method::Rpdp, _) => {
            return Err(Error::InvalidArgument(format!(
                "{method:?} needs a projection set"
            )))
        }
        _ => None,
    };
    let mask = match (method, aux) {
        (Method::Rsdp, Aux::Mask(m)) => {
            if m.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: m.len(),
                });
            }
            Some(m)
        }
        (Method::Rsdp, _) => {
            return Err(Error::InvalidArgument("rsdp needs a coordinate mask".into()))
        }
        _ => None,
    };

    let sum = if lot.is_empty() {
        vec![0.0; d]
    } else {
        let g = per_sample_grads(kind, params, data, lot)?;
        stats.train_loss = Some(g.mean_loss());
        let raw_norms: Vec<f64> = g.grads.row_iter().map(norm2).collect();
        stats.mean_norm_raw = Some(mean(&raw_norms));
        stats.clipped_frac_raw = Some(frac_above(&raw_norms, c));

        let reduced = match (projection, mask) {
            (Some(p), _) => Some(p.project_rows(&g.grads)?),
            (None, Some(m)) => Some(mask_rows(&g.grads, m)),
            _ => None,
        };
        let reduced_norms: Option<Vec<f64>> =
            reduced.as_ref().map(|r| r.row_iter().map(norm2).collect());
        if let (Some(r), Some(n)) = (&reduced, &reduced_norms) {
            stats.mean_norm_proj = Some(mean(n));
            stats.clipped_frac_proj = Some(frac_above(n, c));
            let k = kappa_from_rows(&g.grads, r);
            stats.kappa = (k.count > 0).then_some(k.value);
        }

        let contrib = match method {
            Method::Dpsgd => {
                let mut rows = g.grads.clone();
                for (i, &n) in raw_norms.iter().enumerate() {
                    let f = cfg.clip.factor(n);
                    if f != 1.0 {
                        rows.row_mut(i).iter_mut().for_each(|x| *x *= f);
                    }
                }
                rows
            }
            Method::Pdp | Method::Rpdp => {
                // Π(f·g) = f·Πg for the scalar clip factor f of the raw row.
                let mut rows = reduced.expect("projection present");
                for (i, &n) in raw_norms.iter().enumerate() {
                    let f = cfg.clip.factor(n);
                    if f != 1.0 {
                        rows.row_mut(i).iter_mut().for_each(|x| *x *= f);
                    }
                }
                rows
            }
            Method::Pcdp | Method::Rsdp => {
                let mut rows = reduced.expect("reduction present");
                let norms = if method == Method::Pcdp && cfg.symmetrize > 0.0 {
                    for r in 0..rows.rows() {
                        let zeta = gaussian_vec(d, cfg.symmetrize, sym_rng);
                        for (x, z) in rows.row_mut(r).iter_mut().zip(&zeta) {
                            *x += z;
                        }
                    }
                    rows.row_iter().map(norm2).collect()
                } else {
                    reduced_norms.expect("norms present")
                };
                for (i, &n) in norms.iter().enumerate() {
                    let f = cfg.clip.factor(n);
                    if f != 1.0 {
                        rows.row_mut(i).iter_mut().for_each(|x| *x *= f);
                    }
                }
                rows
            }
        };
        stats.max_contribution_norm = contrib.row_iter().map(norm2).fold(0.0, f64::max);
        let refs: Vec<&[f64]> = contrib.row_iter().collect();
        pairwise_sum(&refs, d)
    };

    let noise = if cfg.sigma == 0.0 {
        vec![0.0; d]
    } else {
        match (projection, mask) {
            (Some(p), _) if method != Method::Dpsgd => p.noise(c, cfg.sigma, noise_rng)?,
            (_, Some(m)) => {
                let mut n = vec![0.0; d];
                for (x, &keep) in n.iter_mut().zip(m) {
                    if keep {
                        *x = c * cfg.sigma * noise_rng.standard_normal();
                    }
                }
                n
            }
            _ => gaussian_vec(d, c * cfg.sigma, noise_rng),
        }
    };

    let b = cfg.lot_size as f64;
    let mut values = params.values().to_vec();
    for j in 0..d {
        let mut g = (sum[j] + noise[j]) / b;
        if let Some((mu, anchor)) = prox {
            g += mu * (values[j] - anchor[j]);
        }
        values[j] -= cfg.lr * g;
    }
    Ok((params.with_values(values)?, stats))
}

/// Projected-clipping step: project each per-sample gradient onto `pset`,
/// optionally perturb by `ω ζ`, clip, sum, add noise in the span, average
/// over `B` and descend.
pub fn pcdp_step(
    kind: &ModelKind,
    params: &ModelParams,
    data: &Dataset,
    lot: &[usize],
    pset: &ProjectionSet,
    cfg: &StepConfig,
    noise_rng: &mut SeededRng,
    sym_rng: &mut SeededRng,
) -> Result<(ModelParams, StepStats)> {
    private_step(
        Method::Pcdp,
        kind,
        params,
        data,
        lot,
        Aux::Projection(pset),
        cfg,
        noise_rng,
        sym_rng,
        None,
    )
}

/// Baseline step for `dpsgd`, `pdp`, `rpdp` or `rsdp`.
///
/// `dpsgd` accepts an optional projection that is used for diagnostics only.
pub fn baseline_step(
    method: Method,
    kind: &ModelKind,
    params: &ModelParams,
    data: &Dataset,
    lot: &[usize],
    aux: Aux<'_>,
    cfg: &StepConfig,
    noise_rng: &mut SeededRng,
) -> Result<(ModelParams, StepStats)> {
    if method == Method::Pcdp {
        return Err(Error::InvalidArgument("use pcdp_step for pcdp".into()));
    }
    let mut unused = SeededRng::new(0);
    private_step(
        method, kind, params, data, lot, aux, cfg, noise_rng, &mut unused, None,
    )
}

/// Coordinate mask keeping each coordinate independently with probability `keep`.
pub fn random_mask(dim: usize, keep: f64, rng: &mut SeededRng) -> Vec<bool> {
    (0..dim).map(|_| rng.random_bool(keep)).collect()
}

/// Draws lots from `0..n`.
#[derive(Debug, Clone)]
pub struct LotSampler {
    n: usize,
    q: f64,
    lot_size: usize,
    sampling: Sampling,
    rng: SeededRng,
    perm: Vec<usize>,
    cursor: usize,
}

impl LotSampler {
    pub fn new(n: usize, lot_size: usize, sampling: Sampling, rng: SeededRng) -> Result<Self> {
        if n == 0 || lot_size == 0 || lot_size > n {
            return Err(Error::InvalidArgument(format!(
                "lot size {lot_size} must be in 1..={n}"
            )));
        }
        Ok(Self {
            n,
            q: lot_size as f64 / n as f64,
            lot_size,
            sampling,
            rng,
            perm: Vec::new(),
            cursor: n,
        })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Steps per epoch, `⌈n / B⌉`.
    pub fn steps_per_epoch(&self) -> usize {
        self.n.div_ceil(self.lot_size)
    }

    /// Poisson: each index independently with probability `q` (possibly empty).
    /// Fixed shuffle: next `B` indices of the current epoch's permutation.
    pub fn next_lot(&mut self) -> Vec<usize> {
        match self.sampling {
            Sampling::Poisson => sample_lot_poisson(self.n, self.q, &mut self.rng),
            Sampling::FixedShuffle => {
                if self.cursor >= self.n {
                    self.perm = (0..self.n).collect();
                    self.perm.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let end = (self.cursor + self.lot_size).min(self.n);
                let lot = self.perm[self.cursor..end].to_vec();
                self.cursor = end;
                lot
            }
        }
    }

    /// Starts the next epoch at a fresh permutation (fixed shuffle only).
    pub fn start_epoch(&mut self) {
        self.cursor = self.n;
    }
}

pub fn sample_lot_poisson(n: usize, q: f64, rng: &mut SeededRng) -> Vec<usize> {
    if q >= 1.0 {
        return (0..n).collect();
    }
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

/// Full configuration of a centralized run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub model: ModelKind,
    pub epochs: usize,
    pub lot_size: usize,
    pub lr: f64,
    pub clip: ClipSpec,
    pub sigma: f64,
    pub delta: f64,
    pub k: usize,
    pub interval: usize,
    pub projection_mode: ProjectionMode,
    pub public_batch: usize,
    pub segmentation: Segmentation,
    pub sampling: Sampling,
    pub symmetrize: f64,
    pub rpdp_dim: usize,
    pub rsdp_keep: f64,
    pub epsilon_cap: Option<f64>,
    /// Test-set evaluation period in steps; `None` means once per epoch.
    pub eval_every: Option<usize>,
    pub diagnose_skew: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: Method, model: ModelKind) -> Self {
        Self {
            method,
            model,
            epochs: 80,
            lot_size: 250,
            lr: 1.0,
            clip: ClipSpec::abadi(0.01),
            sigma: 10.0,
            delta: 1e-5,
            k: 100,
            interval: 1,
            projection_mode: ProjectionMode::Layerwise,
            public_batch: 100,
            segmentation: Segmentation::Rbs,
            sampling: Sampling::Poisson,
            symmetrize: 0.0,
            rpdp_dim: 800,
            rsdp_keep: 0.3,
            epsilon_cap: None,
            eval_every: None,
            diagnose_skew: false,
            seed: 0,
        }
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            lot_size: self.lot_size,
            lr: self.lr,
            clip: self.clip,
            sigma: self.sigma,
            symmetrize: self.symmetrize,
        }
    }
}

/// Data feeding a run. `public` is required for pcdp/pdp; `holdout` for skew
/// diagnostics.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub private: Dataset,
    pub public: Option<Dataset>,
    pub holdout: Option<Dataset>,
    pub test: Option<Dataset>,
}

/// One JSONL row per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub lot_size_actual: usize,
    pub train_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub mean_norm_raw: Option<f64>,
    pub mean_norm_proj: Option<f64>,
    pub clipped_frac_raw: Option<f64>,
    pub clipped_frac_proj: Option<f64>,
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew: Option<SkewReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigen_gap: Option<f64>,
    pub eps_spent: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<MetricRecord>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub epsilon: Option<f64>,
    pub steps: usize,
    pub q: f64,
}

/// Runs the full loop, handing each record to `sink` as it is produced.
pub fn train_run(
    cfg: &TrainConfig,
    data: &TrainData,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let step_cfg = cfg.step_config();
    step_cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let mut sampler = LotSampler::new(
        data.private.len(),
        cfg.lot_size,
        cfg.sampling,
        root.substream("lots"),
    )?;
    let q = sampler.q();
    let accountant = if cfg.sigma > 0.0 {
        Some(RdpAccountant::new(q, cfg.sigma, cfg.delta)?)
    } else {
        None
    };
    let mut params = init_params(&cfg.model, cfg.seed)?;
    let mut noise_rng = root.substream("noise");
    let mut sym_rng = root.substream("symmetrize");
    let mut mask_rng = root.substream("mask");

    let pool = if cfg.method.uses_public_projection() {
        let public = data.public.clone().ok_or_else(|| {
            Error::Config(format!("{:?} needs a public dataset (public_size > 0)", cfg.method))
        })?;
        Some(PublicPool::new(public, cfg.segmentation, cfg.public_batch, cfg.seed)?)
    } else {
        None
    };
    if cfg.diagnose_skew && (pool.is_none() || data.holdout.is_none()) {
        return Err(Error::Config(
            "skew diagnostics need pcdp/pdp and a holdout set (holdout_size > 0)".into(),
        ));
    }
    let random_set = if cfg.method == Method::Rpdp {
        Some(ProjectionSet::random(
            params.dim(),
            cfg.rpdp_dim,
            &mut root.substream("rpdp"),
        )?)
    } else {
        None
    };

    let steps_per_epoch = sampler.steps_per_epoch();
    let eval_every = cfg.eval_every.unwrap_or(steps_per_epoch).max(1);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut records = Vec::with_capacity(total_steps);
    let mut refreshes = 0usize;
    let mut last_test = None;

    for epoch in 0..cfg.epochs {
        sampler.start_epoch();
        let mut pset: Option<ProjectionSet> = None;
        for _ in 0..steps_per_epoch {
            let step = records.len();
            let mut skew_report = None;
            let mut eigen_gap = None;
            if let Some(pool) = &pool {
                if pset.as_ref().is_none_or(|p| p.needs_refresh(step)) {
                    let batch = pool.draw_public_batch(refreshes)?;
                    refreshes += 1;
                    let fresh = refresh_projection(
                        &cfg.model,
                        &params,
                        pool.data(),
                        &batch,
                        cfg.k,
                        cfg.projection_mode,
                        cfg.interval,
                        step,
                    )?;
                    eigen_gap = Some(fresh.min_eigen_gap());
                    if cfg.diagnose_skew {
                        let holdout = data.holdout.as_ref().expect("checked above");
                        let all: Vec<usize> = (0..holdout.len()).collect();
                        let reference = refresh_projection(
                            &cfg.model,
                            &params,
                            holdout,
                            &all,
                            cfg.k,
                            cfg.projection_mode,
                            cfg.interval,
                            step,
                        )?;
                        skew_report = Some(skew(&fresh, &reference, holdout.len())?);
                    }
                    pset = Some(fresh);
                }
            }
            let lot = sampler.next_lot();
            let mask;
            let aux = match cfg.method {
                Method::Pcdp | Method::Pdp => Aux::Projection(pset.as_ref().expect("refreshed")),
                Method::Rpdp => Aux::Projection(random_set.as_ref().expect("built")),
                Method::Rsdp => {
                    mask = random_mask(params.dim(), cfg.rsdp_keep, &mut mask_rng);
                    Aux::Mask(&mask)
                }
                Method::Dpsgd => Aux::None,
            };
            let (next, stats) = private_step(
                cfg.method,
                &cfg.model,
                &params,
                &data.private,
                &lot,
                aux,
                &step_cfg,
                &mut noise_rng,
                &mut sym_rng,
                None,
            )?;
            params = next;

            let eps = accountant.as_ref().map(|a| a.epsilon(step + 1));
            if let (Some(e), Some(cap)) = (eps, cfg.epsilon_cap) {
                if e > cap {
                    return Err(Error::BudgetExceeded {
                        spent: e,
                        cap,
                        step,
                    });
                }
            }
            let is_last = step + 1 == total_steps;
            let test_acc = match &data.test {
                Some(test) if (step + 1) % eval_every == 0 || is_last => {
                    let (l, a) = evaluate(&cfg.model, &params, test)?;
                    last_test = Some((l, a));
                    Some(a)
                }
                _ => None,
            };
            let record = MetricRecord {
                step,
                epoch,
                lot_size_actual: stats.lot_size,
                train_loss: stats.train_loss,
                test_acc,
                mean_norm_raw: stats.mean_norm_raw,
                mean_norm_proj: stats.mean_norm_proj,
                clipped_frac_raw: stats.clipped_frac_raw,
                clipped_frac_proj: stats.clipped_frac_proj,
                kappa: stats.kappa,
                skew: skew_report,
                eigen_gap,
                eps_spent: eps,
            };
            sink(&record)?;
            records.push(record);
        }
    }

    let steps = records.len();
    let (test_loss, test_acc) = match (last_test, &data.test) {
        (Some((l, a)), _) => (Some(l), Some(a)),
        (None, Some(test)) => {
            let (l, a) = evaluate(&cfg.model, &params, test)?;
            (Some(l), Some(a))
        }
        (None, None) => (None, None),
    };
    Ok(TrainOutcome {
        params,
        records,
        test_loss,
        test_acc,
        epsilon: accountant.map(|a| a.epsilon(steps)),
        steps,
        q,
    })
}

/// Maps per-sample raw and projected gradient slices of the named layers to ℝ²
/// through fixed seeded Gaussian matrices (one per layer).
#[allow(clippy::too_many_arguments)]
pub fn grad2d_dump(
    kind: &ModelKind,
    params: &ModelParams,
    data: &Dataset,
    samples: &[usize],
    pset: &ProjectionSet,
    layers: &[String],
    step: usize,
    seed: u64,
) -> Result<Vec<Grad2dRow>> {
    let g = per_sample_grads(kind, params, data, samples)?;
    let projected = pset.project_rows(&g.grads)?;
    let root = SeededRng::new(seed);
    let mut rows = Vec::new();
    for name in layers {
        let spec = params
            .layout()
            .iter()
            .find(|l| &l.name == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown layer `{name}`; available: {}",
                    params
                        .layout()
                        .iter()
                        .map(|l| l.name.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })?;
        let p = spec.len;
        let mut rng = root.substream(&format!("grad2d:{name}"));
        let map = gaussian_vec(2 * p, 1.0 / (p as f64).sqrt(), &mut rng);
        let (mx, my) = map.split_at(p);
        for (variant, source) in [("raw", &g.grads), ("proj", &projected)] {
            for (i, &sample) in samples.iter().enumerate() {
                let slice = &source.row(i)[spec.range()];
                rows.push(Grad2dRow {
                    step,
                    sample,
                    layer: name.clone(),
                    variant: variant.into(),
                    x: crate::linalg::dot(mx, slice),
                    y: crate::linalg::dot(my, slice),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{gen_synthetic, SyntheticSpec};
    use crate::linalg::OrthoBasis;
    use crate::subspace::BlockBasis;

    fn two_dim_kind() -> ModelKind {
        ModelKind::Logistic {
            features: 1,
            classes: 1,
        }
    }

    #[test]
    fn poisson_q_one_takes_everything() {
        let mut rng = SeededRng::new(1);
        assert_eq!(sample_lot_poisson(7, 1.0, &mut rng), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn fixed_shuffle_covers_each_index_once_per_epoch() {
        let mut s = LotSampler::new(10, 3, Sampling::FixedShuffle, SeededRng::new(2)).unwrap();
        assert_eq!(s.steps_per_epoch(), 4);
        for _ in 0..2 {
            s.start_epoch();
            let mut seen: Vec<usize> = (0..4).flat_map(|_| s.next_lot()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn poisson_mean_lot_size() {
        // Binomial(10000, 0.025): mean 250, sd 15.6; the mean of 1e4 lots has sd 0.16.
        let mut s = LotSampler::new(10_000, 250, Sampling::Poisson, SeededRng::new(3)).unwrap();
        let trials = 10_000;
        let total: usize = (0..trials).map(|_| s.next_lot().len()).sum();
        let m = total as f64 / trials as f64;
        assert!((245.0..=255.0).contains(&m), "{m}");
    }

    /// Logistic model whose flat parameter vector has exactly two entries (weight, bias).
    fn hand_problem() -> (ModelKind, ModelParams, Dataset) {
        let kind = two_dim_kind();
        let params = ModelParams::from_values(&kind, vec![0.0, 0.0]).unwrap();
        let data = Dataset::new(vec![0.0, 0.0], 1, vec![0, 0], 1).unwrap();
        (kind, params, data)
    }

    #[test]
    fn hand_evaluated_projected_clipping() {
        // Reproduce g1 = (3,4), g2 = (0,2) through the clip/project algebra directly,
        // since the model cannot emit arbitrary gradients.
        let rows = DenseMatrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]]).unwrap();
        let basis = OrthoBasis::orthonormalize(
            DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            vec![1.0],
        )
        .unwrap();
        let pset = ProjectionSet::from_blocks(
            ProjectionMode::Whole,
            vec![BlockBasis {
                name: "all".into(),
                offset: 0,
                basis,
                truncated: false,
                eigen_gap: 0.0,
            }],
            1,
            1,
            0,
        )
        .unwrap();
        let proj = pset.project_rows(&rows).unwrap();
        assert_eq!(proj.row(0), &[3.0, 0.0]);
        assert_eq!(proj.row(1), &[0.0, 0.0]);
        let spec = ClipSpec::abadi(1.0);
        let clipped: Vec<Vec<f64>> = proj
            .row_iter()
            .map(|r| crate::privacy::clip(r, &spec))
            .collect();
        let refs: Vec<&[f64]> = clipped.iter().map(Vec::as_slice).collect();
        let sum = pairwise_sum(&refs, 2);
        let update: Vec<f64> = sum.iter().map(|s| s / 2.0).collect();
        assert_eq!(update, vec![0.5, 0.0]);
    }

    #[test]
    fn inert_mechanisms_reduce_to_sgd() {
        let data = gen_synthetic(
            &SyntheticSpec {
                samples: 12,
                feature_dim: 3,
                classes: 3,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let kind = ModelKind::Logistic {
            features: 3,
            classes: 3,
        };
        let params = init_params(&kind, 1).unwrap();
        let lot = [0usize, 3, 5, 7];
        let cfg = StepConfig {
            lot_size: 8,
            lr: 0.5,
            clip: ClipSpec::none(),
            sigma: 0.0,
            symmetrize: 0.0,
        };
        let pset = ProjectionSet::identity(params.layout());
        let (a, _) = pcdp_step(
            &kind,
            &params,
            &data,
            &lot,
            &pset,
            &cfg,
            &mut SeededRng::new(0),
            &mut SeededRng::new(0),
        )
        .unwrap();
        let (b, _) = baseline_step(
            Method::Dpsgd,
            &kind,
            &params,
            &data,
            &lot,
            Aux::None,
            &cfg,
            &mut SeededRng::new(0),
        )
        .unwrap();
        let g = per_sample_grads(&kind, &params, &data, &lot).unwrap().mean_row();
        for j in 0..params.dim() {
            let sgd = params.values()[j] - 0.5 * g[j] * (4.0 / 8.0);
            assert!((a.values()[j] - sgd).abs() < 1e-12);
            assert!((b.values()[j] - sgd).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_lot_is_noise_only() {
        let (kind, params, data) = hand_problem();
        let cfg = StepConfig {
            lot_size: 2,
            lr: 1.0,
            clip: ClipSpec::abadi(1.0),
            sigma: 1.0,
            symmetrize: 0.0,
        };
        let (next, stats) = baseline_step(
            Method::Dpsgd,
            &kind,
            &params,
            &data,
            &[],
            Aux::None,
            &cfg,
            &mut SeededRng::new(4),
        )
        .unwrap();
        assert_eq!(stats.lot_size, 0);
        assert!(stats.train_loss.is_none());
        assert_ne!(next.values(), params.values());
    }

    #[test]
    fn pdp_requires_projection_and_rsdp_mask() {
        let (kind, params, data) = hand_problem();
        let cfg = StepConfig {
            lot_size: 1,
            lr: 1.0,
            clip: ClipSpec::abadi(1.0),
            sigma: 0.0,
            symmetrize: 0.0,
        };
        let mut rng = SeededRng::new(0);
        for m in [Method::Pdp, Method::Rpdp, Method::Rsdp] {
            assert!(baseline_step(m, &kind, &params, &data, &[0], Aux::None, &cfg, &mut rng).is_err());
        }
        let noisy_unclipped = StepConfig {
            clip: ClipSpec::none(),
            sigma: 1.0,
            ..cfg
        };
        assert!(baseline_step(
            Method::Dpsgd,
            &kind,
            &params,
            &data,
            &[0],
            Aux::None,
            &noisy_unclipped,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn rsdp_mask_keep_rate() {
        // Binomial(1e4, 0.3): mean 3000, sd 45.8; [2850, 3150] is beyond 3 sd.
        let m = random_mask(10_000, 0.3, &mut SeededRng::new(8));
        let kept = m.iter().filter(|&&k| k).count();
        assert!((2850..=3150).contains(&kept), "{kept}");
    }

    #[test]
    fn method_parsing() {
        assert_eq!("pcdp".parse::<Method>().unwrap(), Method::Pcdp);
        assert!("fedavg".parse::<Method>().is_err());
        assert_eq!(
            "fixed_shuffle".parse::<Sampling>().unwrap(),
            Sampling::FixedShuffle
        );
    }
}
