//! Per-sample clipping, subspace-confined Gaussian noise and privacy accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_vec, norm2, OrthoBasis, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMethod {
    /// `g · min(1, c/‖g‖)`
    Abadi,
    /// Automatic clipping: `c · g / (‖g‖ + r)`
    AutoS,
    /// Normalized SGD: `c · g / max(‖g‖, r)`
    Nsgd,
    None,
}

impl std::str::FromStr for ClipMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abadi" => Ok(ClipMethod::Abadi),
            "auto_s" => Ok(ClipMethod::AutoS),
            "nsgd" => Ok(ClipMethod::Nsgd),
            "none" => Ok(ClipMethod::None),
            other => Err(Error::Config(format!(
                "unknown clip method `{other}` (expected abadi, auto_s, nsgd or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub method: ClipMethod,
    pub threshold: f64,
    pub stabilizer: f64,
}

impl ClipSpec {
    pub fn new(method: ClipMethod, threshold: f64, stabilizer: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clipping threshold must be positive, got {threshold}"
            )));
        }
        if !(stabilizer >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "stabilizer must be non-negative, got {stabilizer}"
            )));
        }
        Ok(Self {
            method,
            threshold,
            stabilizer,
        })
    }

    pub fn abadi(threshold: f64) -> Self {
        Self {
            method: ClipMethod::Abadi,
            threshold,
            stabilizer: 0.0,
        }
    }

    pub fn none() -> Self {
        Self {
            method: ClipMethod::None,
            threshold: f64::INFINITY,
            stabilizer: 0.0,
        }
    }

    /// Multiplier applied to a vector of norm `norm`.
    pub fn factor(&self, norm: f64) -> f64 {
        let c = self.threshold;
        let r = self.stabilizer;
        match self.method {
            ClipMethod::None => 1.0,
            ClipMethod::Abadi => {
                if norm <= c {
                    1.0
                } else {
                    c / norm
                }
            }
            ClipMethod::AutoS => {
                if norm + r == 0.0 {
                    0.0
                } else {
                    c / (norm + r)
                }
            }
            ClipMethod::Nsgd => {
                let den = norm.max(r);
                if den == 0.0 {
                    0.0
                } else {
                    c / den
                }
            }
        }
    }
}

/// Clips `g` in place and returns its norm before clipping.
pub fn clip_in_place(g: &mut [f64], spec: &ClipSpec) -> f64 {
    let norm = norm2(g);
    let f = spec.factor(norm);
    if f != 1.0 {
        g.iter_mut().for_each(|x| *x *= f);
    }
    norm
}

pub fn clip(g: &[f64], spec: &ClipSpec) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, spec);
    out
}

/// Gaussian noise confined to a subspace.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub coefficients: Vec<f64>,
    pub ambient: Vec<f64>,
}

/// Draws `V z` with `z ~ N(0, c²σ² I_k)`, which has the law of `VVᵀ N(0, c²σ² I_d)`.
pub fn subspace_noise(basis: &OrthoBasis, c: f64, sigma: f64, rng: &mut SeededRng) -> Result<NoiseDraw> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
    }
    let std = if sigma == 0.0 { 0.0 } else { c * sigma };
    let coefficients = gaussian_vec(basis.k(), std, rng);
    let ambient = basis.reconstruct(&coefficients)?;
    Ok(NoiseDraw {
        coefficients,
        ambient,
    })
}

/// Integer Rényi orders used by the accountant.
pub const RDP_ORDERS: std::ops::RangeInclusive<u32> = 2..=256;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Rényi divergence of order `alpha` for one step of the Poisson-subsampled
/// Gaussian mechanism with sampling rate `q` and noise multiplier `sigma`.
///
/// Uses the binomial expansion
/// `ε_α = log Σ_j C(α,j) (1−q)^{α−j} q^j exp(j(j−1)/(2σ²)) / (α−1)`,
/// evaluated with log-sum-exp.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = f64::from(alpha);
    if q >= 1.0 {
        return a / (2.0 * sigma * sigma);
    }
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for j in 0..=alpha {
        let jf = f64::from(j);
        if j > 0 {
            log_binom += (a - jf + 1.0).ln() - jf.ln();
        }
        let term = log_binom + (a - jf) * l1q + jf * lq + jf * (jf - 1.0) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc / (a - 1.0)
}

fn validate_accounting(q: f64, sigma: f64, delta: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling rate must be in (0, 1], got {q}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("noise multiplier must be positive, got {sigma}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Tracks the RDP curve of one (q, σ) mechanism and converts composed loss to ε.
#[derive(Debug, Clone)]
pub struct RdpAccountant {
    q: f64,
    sigma: f64,
    delta: f64,
    per_step: Vec<(u32, f64)>,
}

impl RdpAccountant {
    pub fn new(q: f64, sigma: f64, delta: f64) -> Result<Self> {
        validate_accounting(q, sigma, delta)?;
        let per_step = RDP_ORDERS
            .map(|a| (a, rdp_subsampled_gaussian(q, sigma, a)))
            .collect();
        Ok(Self {
            q,
            sigma,
            delta,
            per_step,
        })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `min_α [T·ε_α + log(1/δ)/(α−1)]`; zero steps spend nothing.
    pub fn epsilon(&self, steps: usize) -> f64 {
        if steps == 0 {
            return 0.0;
        }
        let t = steps as f64;
        let log_inv_delta = (1.0 / self.delta).ln();
        self.per_step
            .iter()
            .map(|&(a, e)| t * e + log_inv_delta / (f64::from(a) - 1.0))
            .fold(f64::INFINITY, f64::min)
    }
}

/// ε after `steps` compositions of the subsampled Gaussian mechanism.
pub fn rdp_epsilon(q: f64, sigma: f64, steps: usize, delta: f64) -> Result<f64> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    Ok(RdpAccountant::new(q, sigma, delta)?.epsilon(steps))
}

/// Noise standard deviation `σ_dp = c · q · sqrt(m₂ · T · ln(1/δ)) / ε`.
pub fn calibrate_sigma_theorem1(
    epsilon: f64,
    delta: f64,
    q: f64,
    steps: usize,
    c: f64,
    m2: f64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) || !(q > 0.0) || steps == 0 || !(c > 0.0) || !(m2 > 0.0) {
        return Err(Error::InvalidArgument(
            "delta in (0,1) and positive q, steps, c, m2 are required".into(),
        ));
    }
    Ok(c * q * (m2 * steps as f64 * (1.0 / delta).ln()).sqrt() / epsilon)
}
