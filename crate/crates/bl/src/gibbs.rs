//! The conditional Gibbs distribution induced by a network,
//! `p_τ(y | x) ∝ exp(BL(x, y) / τ)`.
//!
//! Provides class probabilities (a softmax over the utility vector),
//! trapezoidal partition-function quadrature for low-dimensional responses,
//! overdamped Langevin sampling with the update
//!
//! ```text
//! y ← y + η ∇_y BL(x, y) / τ + √(2ητ) ξ,   ξ ~ N(0, I)
//! ```
//!
//! and the high-dimensional constraint-enforcement diagnostic built on a
//! pure-penalty energy `BL(x, y) = −λ T(x, y)²` with the energy-conservation
//! residual `T(x, y) = (‖y‖² − ‖x‖²) / dim`.
//!
//! Chains draw noise from counter-based streams keyed by
//! `(seed, chain, step)`, so parallel execution is bitwise identical to
//! sequential execution.

use crate::block::{BlockParams, HeadStyle};
use crate::error::{BlError, Result};
use crate::mat::Mat;
use crate::network::{Network, OutputMode, SkipMode};
use crate::poly::{MonomialBasis, PolynomialMap};
use crate::rng::CounterRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const TAG_CHAIN_INIT: u64 = 0x11;
const TAG_CHAIN_NOISE: u64 = 0x12;
const TAG_DIAG_X: u64 = 0x13;

#[derive(Clone, Debug)]
pub struct GibbsModel {
    pub net: Network,
    pub tau: f64,
}

impl GibbsModel {
    pub fn new(net: Network, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(BlError::InvalidArgument(
                "temperature must be positive".into(),
            ));
        }
        Ok(Self { net, tau })
    }

    /// Class probabilities `softmax(BL(x) / τ)` via max-subtracted
    /// log-sum-exp.
    pub fn class_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let utilities = self.net.class_utilities(x)?;
        softmax_scaled(&utilities, self.tau)
    }

    /// Log of the trapezoidal estimate of `Z_τ(x)` over the box `[lo, hi]`.
    /// Supports one- and two-dimensional responses.
    pub fn log_partition_quadrature(
        &self,
        x: &[f64],
        lo: &[f64],
        hi: &[f64],
        points_per_dim: usize,
    ) -> Result<f64> {
        let d = self.net.y_dim;
        if self.net.output != OutputMode::Scalar {
            return Err(BlError::Mode {
                required: "scalar",
                actual: "class",
            });
        }
        if d > 2 {
            return Err(BlError::UnsupportedDimension(d));
        }
        if lo.len() != d || hi.len() != d {
            return Err(BlError::Shape {
                context: "quadrature bounds".into(),
                expected: d,
                got: lo.len().min(hi.len()),
            });
        }
        if lo.iter().zip(hi).any(|(a, b)| a >= b) {
            return Err(BlError::InvalidArgument(
                "quadrature bounds must satisfy lo < hi componentwise".into(),
            ));
        }
        if points_per_dim < 16 {
            return Err(BlError::InvalidArgument(
                "quadrature needs at least 16 points per dimension".into(),
            ));
        }

        let n = points_per_dim;
        let axis = |k: usize| -> (Vec<f64>, f64) {
            let h = (hi[k] - lo[k]) / (n - 1) as f64;
            ((0..n).map(|i| lo[k] + h * i as f64).collect(), h)
        };

        // Accumulate log Σ wᵢ exp(aᵢ) stably: collect aᵢ and log wᵢ.
        let mut log_terms: Vec<f64> = Vec::new();
        match d {
            1 => {
                let (grid, h) = axis(0);
                for (i, &g) in grid.iter().enumerate() {
                    let w = if i == 0 || i == n - 1 { 0.5 * h } else { h };
                    let e = self.net.scalar_field(x, &[g])?;
                    log_terms.push(e / self.tau + w.ln());
                }
            }
            2 => {
                let (g0, h0) = axis(0);
                let (g1, h1) = axis(1);
                for (i, &a) in g0.iter().enumerate() {
                    let w0 = if i == 0 || i == n - 1 { 0.5 * h0 } else { h0 };
                    for (j, &b) in g1.iter().enumerate() {
                        let w1 = if j == 0 || j == n - 1 { 0.5 * h1 } else { h1 };
                        let e = self.net.scalar_field(x, &[a, b])?;
                        log_terms.push(e / self.tau + (w0 * w1).ln());
                    }
                }
            }
            _ => unreachable!(),
        }
        Ok(log_sum_exp(&log_terms))
    }

    /// Final states of `cfg.n_chains` independent Langevin chains started
    /// from `N(0, init_scale² I)`, all conditioned on the same `x`.
    pub fn langevin_sample(&self, x: &[f64], cfg: &LangevinConfig) -> Result<Vec<Vec<f64>>> {
        cfg.validate()?;
        if self.net.output != OutputMode::Scalar {
            return Err(BlError::Mode {
                required: "scalar",
                actual: "class",
            });
        }
        let results: Vec<Result<Vec<f64>>> = (0..cfg.n_chains)
            .into_par_iter()
            .map(|chain| self.langevin_chain(x, cfg, chain as u64))
            .collect();
        let mut out = Vec::with_capacity(cfg.n_chains);
        for r in results {
            out.push(r?);
        }
        Ok(out)
    }

    /// One chain of the exact update rule. Pure in `(seed, chain)`.
    pub fn langevin_chain(&self, x: &[f64], cfg: &LangevinConfig, chain: u64) -> Result<Vec<f64>> {
        let d = self.net.y_dim;
        let init_rng = CounterRng::new(cfg.seed, &[TAG_CHAIN_INIT, chain]);
        let noise_rng = CounterRng::new(cfg.seed, &[TAG_CHAIN_NOISE, chain]);
        let pairs_per_step = d.div_ceil(2) as u64;

        let mut y = vec![0.0; d];
        init_rng.fill_gauss(0, &mut y);
        for v in &mut y {
            *v *= cfg.init_scale;
        }

        let noise_scale = if cfg.zero_noise {
            0.0
        } else {
            (2.0 * cfg.step_size * self.tau).sqrt()
        };
        let mut noise = vec![0.0; d];
        let mut scratch = crate::network::NetScratch::default();
        for step in 0..cfg.n_steps {
            let score = self.net.score_y_buffered(x, &y, &mut scratch)?;
            if !cfg.zero_noise {
                noise_rng.fill_gauss(step as u64 * pairs_per_step, &mut noise);
            }
            for j in 0..d {
                y[j] += cfg.step_size * score[j] / self.tau + noise_scale * noise[j];
            }
            let norm2: f64 = y.iter().map(|v| v * v).sum();
            if !norm2.is_finite() || norm2 > 1e12 {
                return Err(BlError::Divergence {
                    chain: chain as usize,
                    step,
                });
            }
        }
        Ok(y)
    }
}

/// Stable softmax of `u / tau`.
pub fn softmax_scaled(utilities: &[f64], tau: f64) -> Result<Vec<f64>> {
    if utilities.iter().any(|v| !v.is_finite()) {
        return Err(BlError::NonFinite("class utilities".into()));
    }
    let m = utilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = utilities.iter().map(|&u| ((u - m) / tau).exp()).collect();
    let total: f64 = pairwise_sum(&exps);
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log Σ exp(aᵢ)` with max subtraction.
pub fn log_sum_exp(a: &[f64]) -> f64 {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let terms: Vec<f64> = a.iter().map(|&v| (v - m).exp()).collect();
    m + pairwise_sum(&terms).ln()
}

/// Order-normalized pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub step_size: f64,
    pub n_steps: usize,
    pub burn_in: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub init_scale: f64,
    /// Freeze the noise term to zero (deterministic gradient flow).
    #[serde(default)]
    pub zero_noise: bool,
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_steps {
            return Err(BlError::InvalidArgument(
                "burn_in must be smaller than n_steps".into(),
            ));
        }
        if self.n_chains == 0 {
            return Err(BlError::InvalidArgument("need at least one chain".into()));
        }
        if !(self.step_size >= 0.0) || !(self.init_scale > 0.0) {
            return Err(BlError::InvalidArgument(
                "step size must be nonnegative and init scale positive".into(),
            ));
        }
        Ok(())
    }
}

/// Violation statistics of the constraint-enforcement diagnostic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolationStats {
    pub mean_violation: f64,
    pub p95_violation: f64,
    pub feasible_fraction: f64,
    pub epsilon_tol: f64,
}

/// The pure-penalty energy `BL(x, y) = −λ ((‖y‖² − ‖x‖²) / dim)²` as a
/// network (square equality head on a custom quadratic basis). With
/// `normalized = false` the residual is the raw `‖y‖² − ‖x‖²`, which makes
/// the Langevin drift violently stiff in high dimension; the diagnostic
/// therefore uses the per-dimension average.
pub fn penalty_energy_network(dim: usize, lambda: f64, normalized: bool) -> Result<Network> {
    if dim == 0 {
        return Err(BlError::InvalidArgument("dim must be ≥ 1".into()));
    }
    if lambda < 0.0 {
        return Err(BlError::InvalidArgument(
            "penalty weight must be nonnegative".into(),
        ));
    }
    let input_dim = 2 * dim;
    let mut exps = Vec::with_capacity(input_dim);
    for i in 0..input_dim {
        let mut e = vec![0u8; input_dim];
        e[i] = 2;
        exps.push(e);
    }
    let basis = MonomialBasis::custom(input_dim, exps)?;
    let w = if normalized { 1.0 / dim as f64 } else { 1.0 };
    let mut coeff = Mat::zeros(1, input_dim);
    for i in 0..dim {
        coeff[(0, i)] = -w; // −x_i²
        coeff[(0, dim + i)] = w; // +y_i²
    }
    let y_range = dim..2 * dim;
    let map_t = PolynomialMap::new(basis.clone(), coeff, None, y_range.clone())?;
    let map_u = PolynomialMap::zeros(basis.clone(), 0, false, y_range.clone());
    let map_c = PolynomialMap::zeros(basis, 0, false, y_range.clone());
    let block = BlockParams::new(
        HeadStyle::Ibl,
        vec![],
        vec![],
        vec![lambda],
        map_u,
        map_c,
        map_t,
    )?;
    let net = Network {
        style: HeadStyle::Ibl,
        x_dim: dim,
        y_dim: dim,
        output: OutputMode::Scalar,
        skip: SkipMode::None,
        layers: vec![vec![block]],
        projections: vec![None],
        readout_w: Mat::from_rows(vec![vec![1.0]]),
        readout_b: None,
    };
    net.validate()?;
    Ok(net)
}

/// Run the diagnostic at one `(λ, τ)` configuration: fresh `x ~ N(0, I)` per
/// chain, Langevin on the pure-penalty energy, violation statistics of the
/// residual magnitude `|T|` over final chain states.
pub fn constraint_diagnostic(
    dim: usize,
    lambda: f64,
    tau: f64,
    cfg: &LangevinConfig,
    epsilon_tol: f64,
) -> Result<ViolationStats> {
    cfg.validate()?;
    if !(epsilon_tol > 0.0) {
        return Err(BlError::InvalidArgument(
            "epsilon_tol must be positive".into(),
        ));
    }
    let net = penalty_energy_network(dim, lambda, true)?;
    let model = GibbsModel::new(net, tau)?;

    let results: Vec<Result<f64>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|chain| {
            let x_rng = CounterRng::new(cfg.seed, &[TAG_DIAG_X, chain as u64]);
            let mut x = vec![0.0; dim];
            x_rng.fill_gauss(0, &mut x);
            let y = model.langevin_chain(&x, cfg, chain as u64)?;
            let ny: f64 = y.iter().map(|v| v * v).sum();
            let nx: f64 = x.iter().map(|v| v * v).sum();
            Ok(((ny - nx) / dim as f64).abs())
        })
        .collect();

    let mut violations = Vec::with_capacity(cfg.n_chains);
    for r in results {
        violations.push(r?);
    }
    Ok(violation_stats(&violations, epsilon_tol))
}

/// Summary statistics over per-chain violations.
pub fn violation_stats(violations: &[f64], epsilon_tol: f64) -> ViolationStats {
    let n = violations.len();
    let mean = pairwise_sum(violations) / n as f64;
    let mut sorted = violations.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    let p95 = sorted[k - 1];
    let feasible = violations.iter().filter(|&&v| v <= epsilon_tol).count() as f64 / n as f64;
    ViolationStats {
        mean_violation: mean,
        p95_violation: p95,
        feasible_fraction: feasible,
        epsilon_tol,
    }
}

/// One CSV row of the diagnostic output.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticRow {
    pub lambda: f64,
    pub tau: f64,
    pub eta: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub dim: usize,
    pub stats: ViolationStats,
}

pub const DIAGNOSTIC_CSV_HEADER: &str =
    "lambda,tau,eta,steps,burn_in,chains,dim,mean_violation,p95_violation,feasible_fraction";

impl std::fmt::Display for DiagnosticRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            self.lambda,
            self.tau,
            self.eta,
            self.steps,
            self.burn_in,
            self.chains,
            self.dim,
            self.stats.mean_violation,
            self.stats.p95_violation,
            self.stats.feasible_fraction
        )
    }
}

/// Both sweeps of the diagnostic experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub dim: usize,
    pub eta: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub epsilon_tol: f64,
    pub seed: u64,
    pub tau_sweep: Vec<f64>,
    pub fixed_lambda: f64,
    pub lambda_sweep: Vec<f64>,
    pub fixed_tau: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            eta: 1e-4,
            steps: 1500,
            burn_in: 500,
            chains: 512,
            epsilon_tol: 0.1,
            seed: 0,
            tau_sweep: vec![2.0, 1.0, 0.5, 0.25, 0.1, 0.05, 0.02, 0.01, 0.005],
            fixed_lambda: 25.0,
            lambda_sweep: vec![0.0, 1.0, 3.0, 10.0, 30.0, 100.0, 200.0, 500.0],
            fixed_tau: 0.05,
        }
    }
}

/// Run the τ-sweep at fixed λ followed by the λ-sweep at fixed τ. Each
/// configuration draws an independent noise stream.
pub fn run_diagnostic_sweeps(cfg: &SweepConfig) -> Result<Vec<DiagnosticRow>> {
    let mut rows = Vec::new();
    let mut config_idx = 0u64;
    let run = |lambda: f64, tau: f64, config_idx: u64| -> Result<DiagnosticRow> {
        let lc = LangevinConfig {
            step_size: cfg.eta,
            n_steps: cfg.steps,
            burn_in: cfg.burn_in,
            n_chains: cfg.chains,
            seed: crate::rng::mix_key(cfg.seed, &[0xD1A6, config_idx]),
            init_scale: 1.0,
            zero_noise: false,
        };
        let stats = constraint_diagnostic(cfg.dim, lambda, tau, &lc, cfg.epsilon_tol)?;
        Ok(DiagnosticRow {
            lambda,
            tau,
            eta: cfg.eta,
            steps: cfg.steps,
            burn_in: cfg.burn_in,
            chains: cfg.chains,
            dim: cfg.dim,
            stats,
        })
    };
    for &tau in &cfg.tau_sweep {
        rows.push(run(cfg.fixed_lambda, tau, config_idx)?);
        config_idx += 1;
    }
    for &lambda in &cfg.lambda_sweep {
        rows.push(run(lambda, cfg.fixed_tau, config_idx)?);
        config_idx += 1;
    }
    Ok(rows)
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman_rho(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        let xa = ra[i] - mean;
        let xb = rb[i] - mean;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Kolmogorov–Smirnov statistic between sorted samples and a CDF.
pub fn ks_statistic(sorted_samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted_samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted_samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max((f - (i as f64 + 1.0) / n).abs());
    }
    d
}

/// Normalized CDF of a 1-D Gibbs law on `[lo, hi]` from trapezoidal
/// quadrature, returned as a closure over a precomputed grid.
pub fn quadrature_cdf_1d(
    model: &GibbsModel,
    x: &[f64],
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<impl Fn(f64) -> f64> {
    let h = (hi - lo) / (points - 1) as f64;
    let mut dens = Vec::with_capacity(points);
    for i in 0..points {
        let y = lo + h * i as f64;
        dens.push(model.net.scalar_field(x, &[y])? / model.tau);
    }
    let m = dens.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = dens.into_iter().map(|d| (d - m).exp()).collect();
    let mut cum = vec![0.0; points];
    for i in 1..points {
        cum[i] = cum[i - 1] + 0.5 * h * (dens[i - 1] + dens[i]);
    }
    let total = cum[points - 1];
    for c in &mut cum {
        *c /= total;
    }
    Ok(move |y: f64| -> f64 {
        if y <= lo {
            return 0.0;
        }
        if y >= hi {
            return 1.0;
        }
        let t = (y - lo) / h;
        let i = (t.floor() as usize).min(points - 2);
        let frac = t - i as f64;
        cum[i] + frac * (cum[i + 1] - cum[i])
    })
}
