//! Single-process federated simulation with a server-side virtual client.
//!
//! Each round the virtual client trains on public data and publishes a
//! projection; sampled clients run private local steps, upload per-layer
//! coefficients, and the server restores and averages them.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, SeededRng};
use crate::models::{evaluate, init_params, per_sample_grads, Dataset, LayerSpec, ModelKind, ModelParams};
use crate::privacy::{ClipSpec, RdpAccountant};
use crate::subspace::{projection_from_grads, ProjectionMode, ProjectionSet, PublicPool, Segmentation};
use crate::trainer::{private_step, sample_lot_poisson, Aux, Method, StepConfig};

/// Bytes per uploaded coefficient on the wire.
pub const WIRE_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedMethod {
    Fedpcdp,
    FedavgDp,
    FedproxDp,
    Fedpdp,
}

impl FedMethod {
    /// Uploads projection coefficients instead of the dense update.
    pub fn compresses(self) -> bool {
        matches!(self, FedMethod::Fedpcdp | FedMethod::Fedpdp)
    }

    fn local_method(self) -> Method {
        match self {
            FedMethod::Fedpcdp => Method::Pcdp,
            FedMethod::Fedpdp => Method::Pdp,
            FedMethod::FedavgDp | FedMethod::FedproxDp => Method::Dpsgd,
        }
    }
}

impl FromStr for FedMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedpcdp" => Ok(FedMethod::Fedpcdp),
            "fedavg_dp" => Ok(FedMethod::FedavgDp),
            "fedprox_dp" => Ok(FedMethod::FedproxDp),
            "fedpdp" => Ok(FedMethod::Fedpdp),
            other => Err(Error::Config(format!(
                "unknown federated method `{other}` (expected fedpcdp, fedavg_dp, fedprox_dp or fedpdp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    Shard,
    Extreme,
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(PartitionMode::Iid),
            "shard" => Ok(PartitionMode::Shard),
            "extreme" => Ok(PartitionMode::Extreme),
            other => Err(Error::Config(format!(
                "unknown partition `{other}` (expected iid, shard or extreme)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub method: FedMethod,
    pub model: ModelKind,
    pub clients: usize,
    /// Clients sampled per round, `S`.
    pub sampled: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub lr_local: f64,
    pub lr_global: f64,
    pub partition: PartitionMode,
    pub sigma: f64,
    pub clip: ClipSpec,
    pub local_lot: usize,
    pub delta: f64,
    pub k: usize,
    pub mu: f64,
    pub symmetrize: f64,
    pub public_batch: usize,
    pub segmentation: Segmentation,
    pub projection_mode: ProjectionMode,
    pub seed: u64,
}

impl FedConfig {
    pub fn new(method: FedMethod, model: ModelKind) -> Self {
        Self {
            method,
            model,
            clients: 10,
            sampled: 8,
            rounds: 80,
            local_steps: 5,
            lr_local: 1.0,
            lr_global: 1.0,
            partition: PartitionMode::Extreme,
            sigma: 6.0,
            clip: ClipSpec::abadi(0.01),
            local_lot: 64,
            delta: 1e-5,
            k: 100,
            mu: 0.01,
            symmetrize: 0.0,
            public_batch: 100,
            segmentation: Segmentation::Rbs,
            projection_mode: ProjectionMode::Layerwise,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampled == 0 || self.sampled > self.clients {
            return Err(Error::Config(format!(
                "sampled clients must be in 1..={}, got {}",
                self.clients, self.sampled
            )));
        }
        if self.rounds == 0 || self.local_steps == 0 {
            return Err(Error::Config("rounds and local_steps must be at least 1".into()));
        }
        if self.local_lot == 0 || self.k == 0 || self.public_batch == 0 {
            return Err(Error::Config(
                "local_lot, k and public_batch must be positive".into(),
            ));
        }
        if !(self.lr_global > 0.0) || !(self.mu >= 0.0) {
            return Err(Error::Config(
                "lr_global must be positive and mu non-negative".into(),
            ));
        }
        Ok(())
    }

    fn local(&self) -> LocalConfig {
        LocalConfig {
            steps: self.local_steps,
            lot_size: self.local_lot,
            lr: self.lr_local,
            clip: self.clip,
            sigma: self.sigma,
            symmetrize: self.symmetrize,
            mu: if self.method == FedMethod::FedproxDp {
                self.mu
            } else {
                0.0
            },
        }
    }
}

/// Disjoint per-client index lists covering the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
    /// `histograms[i][c]` = samples of class `c` held by client `i`.
    pub histograms: Vec<Vec<usize>>,
}

impl PartitionPlan {
    fn new(clients: Vec<Vec<usize>>, data: &Dataset) -> Self {
        let histograms = clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; data.classes()];
                for &i in idx {
                    h[data.labels()[i]] += 1;
                }
                h
            })
            .collect();
        Self {
            clients,
            histograms,
        }
    }

    /// Fraction of client `i`'s data in its most frequent class.
    pub fn modal_frequency(&self, i: usize) -> f64 {
        let total: usize = self.histograms[i].iter().sum();
        if total == 0 {
            return 0.0;
        }
        *self.histograms[i].iter().max().expect("nonempty histogram") as f64 / total as f64
    }

    pub fn distinct_labels(&self, i: usize) -> usize {
        self.histograms[i].iter().filter(|&&c| c > 0).count()
    }
}

/// Splits `0..n` into `parts` contiguous runs whose sizes differ by at most one.
fn even_chunks(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = n / parts + usize::from(p < n % parts);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Assigns the dataset to `n` clients.
///
/// * `iid`: shuffled equal split.
/// * `shard`: sort by label, cut `2n` shards, deal two random shards per client.
/// * `extreme`: client `i` owns class `i mod C` (shared evenly when `n > C`) and
///   fills an equal quota from it; surplus and unowned classes are dealt
///   round-robin to clients below quota.
pub fn partition(data: &Dataset, n: usize, mode: PartitionMode, seed: u64) -> Result<PartitionPlan> {
    if n == 0 || n > data.len() {
        return Err(Error::InvalidArgument(format!(
            "client count {n} must be in 1..={}",
            data.len()
        )));
    }
    let mut rng = SeededRng::new(seed).substream("partition");
    let labels = data.labels();
    let clients = match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            even_chunks(&idx, n)
        }
        PartitionMode::Shard => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            idx.sort_by_key(|&i| labels[i]);
            let mut shards = even_chunks(&idx, 2 * n);
            shards.shuffle(&mut rng);
            (0..n)
                .map(|c| {
                    let mut v = shards[2 * c].clone();
                    v.extend_from_slice(&shards[2 * c + 1]);
                    v
                })
                .collect()
        }
        PartitionMode::Extreme => {
            let classes = data.classes();
            let mut by_class = vec![Vec::new(); classes];
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            for i in order {
                by_class[labels[i]].push(i);
            }
            let quota: Vec<usize> = (0..n)
                .map(|p| data.len() / n + usize::from(p < data.len() % n))
                .collect();
            let mut clients = vec![Vec::new(); n];
            let mut spill = Vec::new();
            for (c, members) in by_class.iter().enumerate() {
                let owners: Vec<usize> = (0..n).filter(|i| i % classes == c).collect();
                if owners.is_empty() {
                    spill.extend_from_slice(members);
                    continue;
                }
                for (&owner, chunk) in owners.iter().zip(even_chunks(members, owners.len())) {
                    let take = chunk.len().min(quota[owner]);
                    clients[owner].extend_from_slice(&chunk[..take]);
                    spill.extend_from_slice(&chunk[take..]);
                }
            }
            let mut next = 0;
            for i in spill {
                while clients[next % n].len() >= quota[next % n] {
                    next += 1;
                }
                clients[next % n].push(i);
                next += 1;
            }
            clients
        }
    };
    let clients = clients
        .into_iter()
        .map(|mut v| {
            v.sort_unstable();
            v
        })
        .collect();
    Ok(PartitionPlan::new(clients, data))
}

/// Algorithm of the server-side public worker: `T` plain SGD steps from
/// `w_g`, with the projection taken from the per-sample gradients of the
/// last public batch. Returns the projection and the worker's final weights.
#[allow(clippy::too_many_arguments)]
pub fn virtual_client_projection(
    kind: &ModelKind,
    w_g: &ModelParams,
    pool: &PublicPool,
    steps: usize,
    k: usize,
    lr: f64,
    mode: ProjectionMode,
    round: usize,
) -> Result<(ProjectionSet, ModelParams)> {
    if steps == 0 {
        return Err(Error::InvalidArgument("virtual client needs T >= 1".into()));
    }
    let mut w_v = w_g.clone();
    let mut pset = None;
    for t in 0..steps {
        let batch = pool.draw_public_batch(round * steps + t)?;
        let g = per_sample_grads(kind, &w_v, pool.data(), &batch)?;
        if t + 1 == steps {
            pset = Some(projection_from_grads(
                w_v.layout(),
                &g.grads,
                k,
                mode,
                usize::MAX,
                round,
            )?);
        }
        let mean = g.mean_row();
        let values = w_v
            .values()
            .iter()
            .zip(&mean)
            .map(|(w, g)| w - lr * g)
            .collect();
        w_v = w_v.with_values(values)?;
    }
    Ok((pset.expect("steps >= 1"), w_v))
}

/// Local training parameters of one client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub steps: usize,
    pub lot_size: usize,
    pub lr: f64,
    pub clip: ClipSpec,
    pub sigma: f64,
    pub symmetrize: f64,
    /// Proximal weight; 0 disables the term.
    pub mu: f64,
}

/// What a client sends to the server, plus simulation-side diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    /// Per-block payload: projection coefficients when `compressed`, else the
    /// dense layer slices of `∇w`.
    pub coefficients: Vec<Vec<f64>>,
    pub compressed: bool,
    pub bytes: usize,
    /// Local steps actually run (0 for a client without data).
    pub local_steps: usize,
    pub empty: bool,
    /// `∇w = w_g − w_l` before upload (not transmitted).
    pub delta: Vec<f64>,
    /// Sampling rate used by the local lots.
    pub q: f64,
}

/// Runs `cfg.steps` private local steps from `w_g` and packages the upload.
///
/// `pset` is required for compressing methods; for the others it is ignored.
/// A client without data (`None`) uploads a zero update flagged `empty`.
#[allow(clippy::too_many_arguments)]
pub fn client_local_update(
    method: FedMethod,
    kind: &ModelKind,
    w_g: &ModelParams,
    pset: Option<&ProjectionSet>,
    data: Option<&Dataset>,
    cfg: &LocalConfig,
    client: usize,
    rng: &SeededRng,
) -> Result<ClientUpdate> {
    let d = w_g.dim();
    if method.compresses() && pset.is_none() {
        return Err(Error::InvalidArgument(format!(
            "{method:?} needs the round's projection set"
        )));
    }
    let Some(data) = data else {
        let zero = vec![0.0; d];
        return package(method, w_g, pset, client, zero, 0, true, 0.0);
    };
    let lot_size = cfg.lot_size.min(data.len());
    let q = lot_size as f64 / data.len() as f64;
    let step_cfg = StepConfig {
        lot_size,
        lr: cfg.lr,
        clip: cfg.clip,
        sigma: cfg.sigma,
        symmetrize: cfg.symmetrize,
    };
    let local_method = method.local_method();
    let aux = if method.compresses() {
        Aux::Projection(pset.expect("checked above"))
    } else {
        Aux::None
    };
    let mut lot_rng = rng.substream("lots");
    let mut noise_rng = rng.substream("noise");
    let mut sym_rng = rng.substream("symmetrize");
    let mut w_l = w_g.clone();
    for _ in 0..cfg.steps {
        let lot = sample_lot_poisson(data.len(), q, &mut lot_rng);
        let prox = (cfg.mu > 0.0).then_some((cfg.mu, w_g.values()));
        let (next, _) = private_step(
            local_method,
            kind,
            &w_l,
            data,
            &lot,
            aux,
            &step_cfg,
            &mut noise_rng,
            &mut sym_rng,
            prox,
        )?;
        w_l = next;
    }
    let delta: Vec<f64> = w_g
        .values()
        .iter()
        .zip(w_l.values())
        .map(|(g, l)| g - l)
        .collect();
    package(method, w_g, pset, client, delta, cfg.steps, false, q)
}

#[allow(clippy::too_many_arguments)]
fn package(
    method: FedMethod,
    w_g: &ModelParams,
    pset: Option<&ProjectionSet>,
    client: usize,
    delta: Vec<f64>,
    local_steps: usize,
    empty: bool,
    q: f64,
) -> Result<ClientUpdate> {
    let coefficients = if method.compresses() {
        pset.expect("checked by caller").coefficients(&delta)?
    } else {
        w_g.layout()
            .iter()
            .map(|l| delta[l.range()].to_vec())
            .collect()
    };
    let bytes = coefficients.iter().map(Vec::len).sum::<usize>() * WIRE_BYTES;
    Ok(ClientUpdate {
        client,
        coefficients,
        compressed: method.compresses(),
        bytes,
        local_steps,
        empty,
        delta,
        q,
    })
}

/// Restores one upload to the full parameter space.
pub fn restore_update(update: &ClientUpdate, pset: Option<&ProjectionSet>) -> Result<Vec<f64>> {
    if update.compressed {
        let pset = pset.ok_or_else(|| {
            Error::InvalidArgument("compressed update needs the round's projection set".into())
        })?;
        if update.coefficients.len() != pset.blocks().len()
            || update
                .coefficients
                .iter()
                .zip(pset.blocks())
                .any(|(c, b)| c.len() != b.basis.k())
        {
            return Err(Error::LayoutMismatch(format!(
                "client {} coefficients do not match the projection set",
                update.client
            )));
        }
        pset.restore(&update.coefficients)
    } else {
        Ok(update.coefficients.concat())
    }
}

/// `w_g − γ_g · mean(restored updates)`, summed in ascending client-id order.
/// With no updates the weights are returned unchanged.
pub fn server_aggregate(
    w_g: &ModelParams,
    updates: &[ClientUpdate],
    pset: Option<&ProjectionSet>,
    lr_global: f64,
) -> Result<ModelParams> {
    if updates.is_empty() {
        return Ok(w_g.clone());
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client);
    let restored = order
        .iter()
        .map(|u| {
            let r = restore_update(u, pset)?;
            if r.len() != w_g.dim() {
                return Err(Error::DimensionMismatch {
                    expected: w_g.dim(),
                    actual: r.len(),
                });
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = restored.iter().map(Vec::as_slice).collect();
    let sum = pairwise_sum(&refs, w_g.dim());
    let n = updates.len() as f64;
    let values = w_g
        .values()
        .iter()
        .zip(&sum)
        .map(|(w, s)| w - lr_global * (s / n))
        .collect();
    w_g.with_values(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCost {
    pub bytes_projected: usize,
    pub bytes_raw: usize,
}

impl CommCost {
    /// `bytes_raw / bytes_projected`.
    pub fn ratio(&self) -> f64 {
        self.bytes_raw as f64 / self.bytes_projected as f64
    }
}

/// Per-client upload size with `min(k, p_i)` coefficients per layer versus
/// the dense layer.
pub fn comm_cost(layer_sizes: &[usize], k: usize) -> CommCost {
    CommCost {
        bytes_projected: layer_sizes.iter().map(|&p| p.min(k)).sum::<usize>() * WIRE_BYTES,
        bytes_raw: layer_sizes.iter().sum::<usize>() * WIRE_BYTES,
    }
}

pub fn comm_cost_for_layout(layout: &[LayerSpec], k: usize) -> CommCost {
    comm_cost(&layout.iter().map(|l| l.len).collect::<Vec<_>>(), k)
}

/// Trace of the empirical covariance `1/(n−1) Σ ‖v_i − v̄‖²`; 0 for fewer than two vectors.
pub fn trace_dispersion(vectors: &[Vec<f64>]) -> f64 {
    let n = vectors.len();
    if n < 2 {
        return 0.0;
    }
    let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    let dim = vectors[0].len();
    let mean: Vec<f64> = pairwise_sum(&refs, dim).iter().map(|s| s / n as f64).collect();
    let ss: f64 = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum();
    ss / (n - 1) as f64
}

/// One JSONL row per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub test_acc: Option<f64>,
    pub test_loss: Option<f64>,
    /// Dispersion of the clients' raw deltas.
    pub dispersion_raw: f64,
    /// Dispersion of the same deltas projected onto the round's public span.
    pub dispersion_proj: f64,
    pub bytes_per_client: usize,
    pub bytes_total: usize,
    pub empty_clients: Vec<usize>,
    pub skipped: bool,
    /// Cumulative ε per client id (`None` before a client's first participation
    /// or when σ = 0).
    pub eps_per_client: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct FedData {
    pub train: Dataset,
    pub public: Dataset,
    pub test: Option<Dataset>,
}

#[derive(Debug, Clone)]
pub struct FedOutcome {
    pub params: ModelParams,
    pub records: Vec<RoundRecord>,
    pub plan: PartitionPlan,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub eps_per_client: Vec<Option<f64>>,
}

pub fn fed_train_run(
    cfg: &FedConfig,
    data: &FedData,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<FedOutcome> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let plan = partition(&data.train, cfg.clients, cfg.partition, cfg.seed)?;
    let shards = plan
        .clients
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                Ok(None)
            } else {
                data.train.subset(idx).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = PublicPool::new(data.public.clone(), cfg.segmentation, cfg.public_batch, cfg.seed)?;
    let local = cfg.local();
    let mut w_g = init_params(&cfg.model, cfg.seed)?;
    let mut steps_run = vec![0usize; cfg.clients];
    let mut q_of = vec![0.0; cfg.clients];
    let mut records = Vec::with_capacity(cfg.rounds);

    let eps_for = |steps: &[usize], q: &[f64]| -> Result<Vec<Option<f64>>> {
        steps
            .iter()
            .zip(q)
            .map(|(&s, &q)| {
                if s == 0 || cfg.sigma == 0.0 {
                    Ok(None)
                } else {
                    Ok(Some(RdpAccountant::new(q, cfg.sigma, cfg.delta)?.epsilon(s)))
                }
            })
            .collect()
    };

    for round in 0..cfg.rounds {
        let mut chosen = sample(
            &mut root.substream_indexed("clients", round as u64),
            cfg.clients,
            cfg.sampled,
        )
        .into_vec();
        chosen.sort_unstable();
        let (pset, _) = virtual_client_projection(
            &cfg.model,
            &w_g,
            &pool,
            cfg.local_steps,
            cfg.k,
            cfg.lr_local,
            cfg.projection_mode,
            round,
        )?;
        let mut updates = Vec::with_capacity(chosen.len());
        for &client in &chosen {
            let rng = root
                .substream_indexed("client", client as u64)
                .substream_indexed("round", round as u64);
            let u = client_local_update(
                cfg.method,
                &cfg.model,
                &w_g,
                Some(&pset),
                shards[client].as_ref(),
                &local,
                client,
                &rng,
            )?;
            steps_run[client] += u.local_steps;
            if !u.empty {
                q_of[client] = u.q;
            }
            updates.push(u);
        }
        let raw: Vec<Vec<f64>> = updates.iter().map(|u| u.delta.clone()).collect();
        let projected = raw
            .iter()
            .map(|v| pset.apply(v))
            .collect::<Result<Vec<_>>>()?;
        let empty_clients: Vec<usize> = updates.iter().filter(|u| u.empty).map(|u| u.client).collect();
        let bytes_per_client = updates.first().map_or(0, |u| u.bytes);
        let bytes_total = updates.iter().map(|u| u.bytes).sum();
        let skipped = updates.is_empty();
        w_g = server_aggregate(&w_g, &updates, Some(&pset), cfg.lr_global)?;
        let (test_loss, test_acc) = match &data.test {
            Some(t) => {
                let (l, a) = evaluate(&cfg.model, &w_g, t)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let record = RoundRecord {
            round,
            participants: chosen,
            test_acc,
            test_loss,
            dispersion_raw: trace_dispersion(&raw),
            dispersion_proj: trace_dispersion(&projected),
            bytes_per_client,
            bytes_total,
            empty_clients,
            skipped,
            eps_per_client: eps_for(&steps_run, &q_of)?,
        };
        sink(&record)?;
        records.push(record);
    }
    let eps_per_client = eps_for(&steps_run, &q_of)?;
    let (test_loss, test_acc) = records
        .last()
        .map_or((None, None), |r| (r.test_loss, r.test_acc));
    Ok(FedOutcome {
        params: w_g,
        records,
        plan,
        test_loss,
        test_acc,
        eps_per_client,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{gen_synthetic, SyntheticSpec};

    fn labelled(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        Dataset::new((0..n).map(|i| i as f64).collect(), 1, labels, classes).unwrap()
    }

    fn assert_disjoint_cover(plan: &PartitionPlan, n: usize) {
        let mut all: Vec<usize> = plan.clients.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn iid_sizes_differ_by_at_most_one() {
        let data = labelled((0..103).map(|i| i % 10).collect(), 10);
        let plan = partition(&data, 10, PartitionMode::Iid, 1).unwrap();
        assert_disjoint_cover(&plan, 103);
        let sizes: Vec<usize> = plan.clients.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap(), 1);
    }

    #[test]
    fn extreme_assigns_one_class_per_client() {
        let data = labelled((0..500).map(|i| i % 10).collect(), 10);
        let plan = partition(&data, 10, PartitionMode::Extreme, 2).unwrap();
        assert_disjoint_cover(&plan, 500);
        for i in 0..10 {
            assert!(plan.modal_frequency(i) >= 0.9);
            assert_eq!(plan.histograms[i][i], 50);
        }
    }

    #[test]
    fn extreme_spills_unowned_classes() {
        let data = labelled((0..100).map(|i| i % 10).collect(), 10);
        let plan = partition(&data, 4, PartitionMode::Extreme, 3).unwrap();
        assert_disjoint_cover(&plan, 100);
        for i in 0..4 {
            assert_eq!(plan.histograms[i][i], 10);
        }
    }

    #[test]
    fn extreme_equalizes_unbalanced_classes() {
        // Class sizes 46..=54 plus 50 sum to 500; every client still ends with 50.
        let sizes = [46, 47, 48, 49, 50, 50, 51, 52, 53, 54];
        let labels: Vec<usize> = (0..10).flat_map(|c| std::iter::repeat_n(c, sizes[c])).collect();
        let n = labels.len();
        let data = labelled(labels, 10);
        let plan = partition(&data, 10, PartitionMode::Extreme, 5).unwrap();
        assert_disjoint_cover(&plan, n);
        for i in 0..10 {
            assert_eq!(plan.clients[i].len(), n / 10);
            assert!(plan.modal_frequency(i) >= 0.9, "{:?}", plan.histograms[i]);
            assert_eq!(plan.histograms[i][i], sizes[i].min(n / 10));
        }
    }

    #[test]
    fn shard_limits_labels() {
        let data = labelled((0..1000).map(|i| i % 10).collect(), 10);
        let plan = partition(&data, 10, PartitionMode::Shard, 4).unwrap();
        assert_disjoint_cover(&plan, 1000);
        for i in 0..10 {
            assert!(plan.distinct_labels(i) <= 4, "{:?}", plan.histograms[i]);
        }
    }

    #[test]
    fn comm_cost_examples() {
        let a = comm_cost(&[100, 10], 100);
        assert_eq!((a.bytes_projected, a.bytes_raw), (440, 440));
        assert_eq!(a.ratio(), 1.0);
        let b = comm_cost(&[784 * 64, 64 * 10], 100);
        assert_eq!((b.bytes_projected, b.bytes_raw), (800, 203_264));
    }

    fn small_setup() -> (ModelKind, ModelParams, Dataset) {
        let data = gen_synthetic(
            &SyntheticSpec {
                samples: 40,
                feature_dim: 4,
                classes: 3,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        let kind = ModelKind::Logistic {
            features: 4,
            classes: 3,
        };
        let params = init_params(&kind, 5).unwrap();
        (kind, params, data)
    }

    #[test]
    fn opposite_updates_cancel() {
        let (_, w, _) = small_setup();
        let d = w.dim();
        let mk = |client, sign: f64| ClientUpdate {
            client,
            coefficients: w
                .layout()
                .iter()
                .map(|l| vec![sign * 0.5; l.len])
                .collect(),
            compressed: false,
            bytes: d * 4,
            local_steps: 1,
            empty: false,
            delta: vec![sign * 0.5; d],
            q: 1.0,
        };
        let out = server_aggregate(&w, &[mk(1, 1.0), mk(0, -1.0)], None, 1.0).unwrap();
        assert_eq!(out.values(), w.values());
    }

    #[test]
    fn inert_local_update_is_plain_sgd_drift() {
        let (kind, w, data) = small_setup();
        let pset = ProjectionSet::identity(w.layout());
        let cfg = LocalConfig {
            steps: 3,
            lot_size: data.len(),
            lr: 0.3,
            clip: ClipSpec::none(),
            sigma: 0.0,
            symmetrize: 0.0,
            mu: 0.0,
        };
        let u = client_local_update(
            FedMethod::Fedpcdp,
            &kind,
            &w,
            Some(&pset),
            Some(&data),
            &cfg,
            0,
            &SeededRng::new(1),
        )
        .unwrap();
        let all: Vec<usize> = (0..data.len()).collect();
        let mut v = w.clone();
        for _ in 0..3 {
            let g = per_sample_grads(&kind, &v, &data, &all).unwrap().mean_row();
            let next = v.values().iter().zip(&g).map(|(a, b)| a - 0.3 * b).collect();
            v = v.with_values(next).unwrap();
        }
        let restored = restore_update(&u, Some(&pset)).unwrap();
        for j in 0..w.dim() {
            assert!((restored[j] - (w.values()[j] - v.values()[j])).abs() < 1e-12);
        }
        assert_eq!(u.bytes, w.dim() * 4);
    }

    #[test]
    fn empty_client_is_flagged_zero() {
        let (kind, w, _) = small_setup();
        let cfg = LocalConfig {
            steps: 2,
            lot_size: 4,
            lr: 0.1,
            clip: ClipSpec::abadi(1.0),
            sigma: 1.0,
            symmetrize: 0.0,
            mu: 0.0,
        };
        let u = client_local_update(
            FedMethod::FedavgDp,
            &kind,
            &w,
            None,
            None,
            &cfg,
            3,
            &SeededRng::new(0),
        )
        .unwrap();
        assert!(u.empty);
        assert_eq!(u.local_steps, 0);
        assert!(u.delta.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dispersion_of_identical_vectors_is_zero() {
        assert_eq!(trace_dispersion(&[vec![1.0, 2.0], vec![1.0, 2.0]]), 0.0);
        assert_eq!(trace_dispersion(&[vec![0.0], vec![2.0]]), 2.0);
        assert_eq!(trace_dispersion(&[vec![3.0]]), 0.0);
    }
}
