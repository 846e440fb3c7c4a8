//! Butterworth-Van Dyke equivalent circuits: synthesis, closed-form
//! resonances, extraction from sweeps and spur injection.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sweep::{ImpedanceSweep, SweepError, DEFAULT_REF_OHM};

/// Minimum relative separation between branch series-resonance frequencies.
pub const MIN_BRANCH_SEPARATION: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum BvdError {
    #[error("branch {index}: {reason}")]
    Branch { index: usize, reason: &'static str },
    #[error("static capacitance must be positive, got {0}")]
    C0(f64),
    #[error("branches {a} and {b} resonate at the same frequency ({f_hz} Hz)")]
    DuplicateFrequency { a: usize, b: usize, f_hz: f64 },
    #[error("expected exactly {expected} motional branch(es), model has {got}")]
    BranchCount { expected: usize, got: usize },
    #[error("spur {index}: {reason}")]
    Spur { index: usize, reason: &'static str },
    #[error("no conductance peak exceeds {factor} x the median conductance")]
    NoResonance { factor: f64 },
    #[error("fit did not converge after {iterations} iterations (gradient norm {gradient:e})")]
    NonConvergence { iterations: usize, gradient: f64 },
    #[error("fit needs at least {min} points, sweep has {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("invalid fit option: {0}")]
    Option(&'static str),
    #[error(transparent)]
    Sweep(#[from] SweepError),
}

/// One motional R-L-C branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BvdBranch {
    #[serde(rename = "r_ohm")]
    pub r_m: f64,
    #[serde(rename = "l_h")]
    pub l_m: f64,
    #[serde(rename = "c_f")]
    pub c_m: f64,
}

impl BvdBranch {
    pub fn new(r_m: f64, l_m: f64, c_m: f64) -> Self {
        BvdBranch { r_m, l_m, c_m }
    }

    /// Branch resonating at `fs_hz` with capacitance `c_m` and quality
    /// factor `q = omega_s l / r`.
    pub fn from_fs(fs_hz: f64, c_m: f64, q: f64) -> Self {
        let ws = 2.0 * PI * fs_hz;
        let l_m = 1.0 / (ws * ws * c_m);
        BvdBranch {
            r_m: ws * l_m / q,
            l_m,
            c_m,
        }
    }

    pub fn fs(&self) -> f64 {
        1.0 / (2.0 * PI * (self.l_m * self.c_m).sqrt())
    }

    pub fn q(&self) -> f64 {
        2.0 * PI * self.fs() * self.l_m / self.r_m
    }

    pub fn impedance(&self, omega: f64) -> Complex64 {
        Complex64::new(self.r_m, omega * self.l_m - 1.0 / (omega * self.c_m))
    }

    fn validate(&self, index: usize) -> Result<(), BvdError> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.r_m) {
            return Err(BvdError::Branch { index, reason: "r_m must be positive" });
        }
        if !pos(self.l_m) {
            return Err(BvdError::Branch { index, reason: "l_m must be positive" });
        }
        if !pos(self.c_m) {
            return Err(BvdError::Branch { index, reason: "c_m must be positive" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BvdModelFile {
    c0_f: f64,
    #[serde(default)]
    branches: Vec<BvdBranch>,
    #[serde(default)]
    label: String,
}

/// Static capacitance in parallel with any number of motional branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BvdModelFile", into = "BvdModelFile")]
pub struct BvdModel {
    pub c0: f64,
    pub branches: Vec<BvdBranch>,
    pub label: String,
}

impl TryFrom<BvdModelFile> for BvdModel {
    type Error = BvdError;
    fn try_from(f: BvdModelFile) -> Result<Self, BvdError> {
        BvdModel::new(f.c0_f, f.branches, f.label)
    }
}

impl From<BvdModel> for BvdModelFile {
    fn from(m: BvdModel) -> Self {
        BvdModelFile {
            c0_f: m.c0,
            branches: m.branches,
            label: m.label,
        }
    }
}

impl BvdModel {
    pub fn new(
        c0: f64,
        branches: Vec<BvdBranch>,
        label: impl Into<String>,
    ) -> Result<Self, BvdError> {
        let m = BvdModel {
            c0,
            branches,
            label: label.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), BvdError> {
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return Err(BvdError::C0(self.c0));
        }
        for (i, b) in self.branches.iter().enumerate() {
            b.validate(i)?;
        }
        let fs: Vec<f64> = self.branches.iter().map(BvdBranch::fs).collect();
        for a in 0..fs.len() {
            for b in a + 1..fs.len() {
                if (fs[a] - fs[b]).abs() <= MIN_BRANCH_SEPARATION * fs[a].max(fs[b]) {
                    return Err(BvdError::DuplicateFrequency { a, b, f_hz: fs[a] });
                }
            }
        }
        Ok(())
    }

    /// Single-branch model with prescribed series and parallel resonances,
    /// quality factor and static capacitance.
    pub fn from_resonances(
        fs_hz: f64,
        fp_hz: f64,
        q: f64,
        c0: f64,
        label: impl Into<String>,
    ) -> Result<Self, BvdError> {
        let c_m = c0 * ((fp_hz / fs_hz).powi(2) - 1.0);
        Self::new(c0, vec![BvdBranch::from_fs(fs_hz, c_m, q)], label)
    }

    pub fn admittance_at(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz;
        let mut y = Complex64::new(0.0, w * self.c0);
        for b in &self.branches {
            y += 1.0 / b.impedance(w);
        }
        y
    }

    pub fn impedance_at(&self, freq_hz: f64) -> Complex64 {
        1.0 / self.admittance_at(freq_hz)
    }

    /// Impedance of the motional branches alone (all in parallel).
    pub fn motional_impedance_at(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz;
        let y: Complex64 = self.branches.iter().map(|b| 1.0 / b.impedance(w)).sum();
        1.0 / y
    }
}

/// `Z(f)` of the model on the grid.
pub fn impedance(model: &BvdModel, freq_hz: &[f64]) -> Result<ImpedanceSweep, BvdError> {
    impedance_with_ref(model, freq_hz, DEFAULT_REF_OHM)
}

pub fn impedance_with_ref(
    model: &BvdModel,
    freq_hz: &[f64],
    ref_ohm: f64,
) -> Result<ImpedanceSweep, BvdError> {
    model.validate()?;
    Ok(ImpedanceSweep::from_fn(freq_hz.to_vec(), ref_ohm, |f| {
        model.impedance_at(f)
    })?)
}

/// Closed-form `(fs, fp)` of a single-branch model.
pub fn resonance_freqs(model: &BvdModel) -> Result<(f64, f64), BvdError> {
    if model.branches.len() != 1 {
        return Err(BvdError::BranchCount {
            expected: 1,
            got: model.branches.len(),
        });
    }
    let b = &model.branches[0];
    let fs = b.fs();
    Ok((fs, fs * (1.0 + b.c_m / model.c0).sqrt()))
}

/// A spurious mode to append: frequency, coupling (pi^2/8 convention) and Q.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spur {
    pub f_hz: f64,
    pub coupling: f64,
    pub q: f64,
}

/// Appends one branch per spur. A spur of coupling `k` gets
/// `c_m / c0 = (fp/fs)^2 - 1 = 8 k / pi^2`.
pub fn inject_spurs(base: &BvdModel, spurs: &[Spur]) -> Result<BvdModel, BvdError> {
    base.validate()?;
    let mut out = base.clone();
    for (index, s) in spurs.iter().enumerate() {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(s.f_hz) {
            return Err(BvdError::Spur { index, reason: "frequency must be positive" });
        }
        if !pos(s.coupling) {
            return Err(BvdError::Spur { index, reason: "coupling must be positive" });
        }
        if !pos(s.q) {
            return Err(BvdError::Spur { index, reason: "q must be positive" });
        }
        for (a, b) in out.branches.iter().enumerate() {
            let f = b.fs();
            if (f - s.f_hz).abs() <= MIN_BRANCH_SEPARATION * f.max(s.f_hz) {
                return Err(BvdError::DuplicateFrequency {
                    a,
                    b: out.branches.len(),
                    f_hz: s.f_hz,
                });
            }
        }
        let c_m = 8.0 / (PI * PI) * s.coupling * base.c0;
        out.branches.push(BvdBranch::from_fs(s.f_hz, c_m, s.q));
    }
    out.validate()?;
    Ok(out)
}

/// Extraction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_branches: usize,
    /// Conductance peaks must exceed this multiple of the median.
    pub peak_factor: f64,
    /// A branch is dropped when removing it raises the residual by less
    /// than this fraction.
    pub prune_fraction: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// RMS log residual below which a resonance-free sweep is accepted as a
    /// bare capacitor.
    pub capacitor_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_branches: 1,
            peak_factor: 3.0,
            prune_fraction: 0.01,
            max_iterations: 200,
            gradient_tolerance: 1e-10,
            capacitor_tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Gradient,
    SmallStep,
    NoDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfidence {
    pub fs_hz: f64,
    /// One-sigma relative uncertainties from the Gauss-Newton covariance.
    pub rel_sigma_fs: f64,
    pub rel_sigma_r: f64,
    pub rel_sigma_c: f64,
    /// Relative residual increase when this branch is removed and the
    /// rest refitted.
    pub removal_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// RMS of the complex log-impedance residual.
    pub residual: f64,
    pub iterations: usize,
    pub stop: StopReason,
    pub candidates: usize,
    pub branches: Vec<BranchConfidence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: BvdModel,
    pub report: FitReport,
}

pub const MIN_FIT_POINTS: usize = 50;

/// Extracts a model with at most `max_branches` branches.
pub fn fit(sweep: &ImpedanceSweep, max_branches: usize) -> Result<FitResult, BvdError> {
    fit_with(
        sweep,
        &FitOptions {
            max_branches,
            ..FitOptions::default()
        },
    )
}

struct Problem<'a> {
    omega: Vec<f64>,
    log_z: Vec<Complex64>,
    _sweep: &'a ImpedanceSweep,
}

/// Parameters: `[ln c0, (ln omega_s, ln r, ln c) per branch]`.
fn unpack(p: &[f64]) -> (f64, Vec<BvdBranch>) {
    let c0 = p[0].exp();
    let branches = p[1..]
        .chunks(3)
        .map(|q| {
            let ws = q[0].exp();
            let c = q[2].exp();
            BvdBranch::new(q[1].exp(), 1.0 / (ws * ws * c), c)
        })
        .collect();
    (c0, branches)
}

fn pack(c0: f64, branches: &[BvdBranch]) -> Vec<f64> {
    let mut p = vec![c0.ln()];
    for b in branches {
        p.push((2.0 * PI * b.fs()).ln());
        p.push(b.r_m.ln());
        p.push(b.c_m.ln());
    }
    p
}

fn wrap_phase(x: f64) -> f64 {
    let mut y = x % (2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    } else if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

impl Problem<'_> {
    fn residuals(&self, p: &[f64]) -> DVector<f64> {
        let (c0, br) = unpack(p);
        let n = self.omega.len();
        let mut r = DVector::zeros(2 * n);
        for (j, &w) in self.omega.iter().enumerate() {
            let mut y = Complex64::new(0.0, w * c0);
            for b in &br {
                y += 1.0 / b.impedance(w);
            }
            let d = -y.ln() - self.log_z[j];
            r[2 * j] = d.re;
            r[2 * j + 1] = wrap_phase(d.im);
        }
        r
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let (c0, br) = unpack(p);
        let n = self.omega.len();
        let mut jac = DMatrix::zeros(2 * n, p.len());
        let i = Complex64::i();
        let mut yk = vec![Complex64::new(0.0, 0.0); br.len()];
        for (j, &w) in self.omega.iter().enumerate() {
            let mut y = i * w * c0;
            for (k, b) in br.iter().enumerate() {
                yk[k] = 1.0 / b.impedance(w);
                y += yk[k];
            }
            let mut put = |col: usize, dy: Complex64| {
                let d = -dy / y;
                jac[(2 * j, col)] = d.re;
                jac[(2 * j + 1, col)] = d.im;
            };
            put(0, i * w * c0);
            for (k, b) in br.iter().enumerate() {
                let y2 = yk[k] * yk[k];
                let d_ln_r = -y2 * b.r_m;
                let d_ln_l = -y2 * i * w * b.l_m;
                let d_ln_c = y2 / (i * w * b.c_m);
                put(1 + 3 * k, -2.0 * d_ln_l);
                put(2 + 3 * k, d_ln_r);
                put(3 + 3 * k, d_ln_c - d_ln_l);
            }
        }
        jac
    }
}

struct LmOutcome {
    p: Vec<f64>,
    rms: f64,
    iterations: usize,
    stop: StopReason,
    jtj: DMatrix<f64>,
}

fn rms(r: &DVector<f64>) -> f64 {
    (r.norm_squared() / r.len() as f64).sqrt()
}

/// Levenberg-Marquardt on the mean squared residual.
fn levenberg_marquardt(
    prob: &Problem,
    mut p: Vec<f64>,
    opts: &FitOptions,
) -> Result<LmOutcome, BvdError> {
    let m = 2.0 * prob.omega.len() as f64;
    let mut r = prob.residuals(&p);
    let mut cost = 0.5 * r.norm_squared() / m;
    let mut lambda = 1e-3;
    let mut last_grad = f64::INFINITY;
    for it in 0..opts.max_iterations {
        let jac = prob.jacobian(&p);
        let jtj = jac.tr_mul(&jac) / m;
        let g = jac.tr_mul(&r) / m;
        last_grad = g.amax();
        if last_grad < opts.gradient_tolerance {
            return Ok(LmOutcome { p, rms: rms(&r), iterations: it, stop: StopReason::Gradient, jtj });
        }
        let dmax = jtj.diagonal().max();
        let mut accepted = None;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12 * dmax);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda *= 4.0;
                    continue;
                }
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rt = prob.residuals(&trial);
            let ct = 0.5 * rt.norm_squared() / m;
            if ct.is_finite() && ct < cost {
                lambda = (lambda / 3.0).max(1e-12);
                accepted = Some((trial, rt, ct, step.amax()));
                break;
            }
            lambda *= 4.0;
        }
        match accepted {
            Some((trial, rt, ct, step)) => {
                let gain = (cost - ct) / cost.max(f64::MIN_POSITIVE);
                p = trial;
                r = rt;
                cost = ct;
                if step < 1e-12 && gain < 1e-12 {
                    let jac = prob.jacobian(&p);
                    let jtj = jac.tr_mul(&jac) / m;
                    return Ok(LmOutcome { p, rms: rms(&r), iterations: it + 1, stop: StopReason::SmallStep, jtj });
                }
            }
            None => {
                let jac = prob.jacobian(&p);
                let jtj = jac.tr_mul(&jac) / m;
                return Ok(LmOutcome { p, rms: rms(&r), iterations: it + 1, stop: StopReason::NoDescent, jtj });
            }
        }
    }
    Err(BvdError::NonConvergence {
        iterations: opts.max_iterations,
        gradient: last_grad,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| x.is_finite());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Candidate {
    g_peak: f64,
    branch: BvdBranch,
}

/// Linear crossing of `level` between samples `a` and `b`.
fn crossing(fa: f64, ga: f64, fb: f64, gb: f64, level: f64) -> f64 {
    if ga == gb {
        return 0.5 * (fa + fb);
    }
    fa + (level - ga) * (fb - fa) / (gb - ga)
}

/// Conductance peaks that dominate their own half-power neighbourhood.
fn conductance_peaks(f: &[f64], g: &[f64], threshold: f64) -> Vec<Candidate> {
    let n = g.len();
    let mut out = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let gp = g[i];
        if !(gp > threshold && gp >= g[i - 1] && gp > g[i + 1]) {
            continue;
        }
        let half = 0.5 * gp;
        let mut dominant = true;
        let mut lo = None;
        let mut j = i;
        while j > 0 {
            j -= 1;
            if g[j] > gp {
                dominant = false;
                break;
            }
            if g[j] <= half {
                lo = Some(crossing(f[j], g[j], f[j + 1], g[j + 1], half));
                break;
            }
        }
        let mut hi = None;
        let mut j = i;
        while dominant && j + 1 < n {
            j += 1;
            if g[j] > gp {
                dominant = false;
                break;
            }
            if g[j] <= half {
                hi = Some(crossing(f[j - 1], g[j - 1], f[j], g[j], half));
                break;
            }
        }
        if !dominant {
            continue;
        }
        // quadratic vertex of the conductance peak
        let (x0, x1, x2) = (f[i - 1], f[i], f[i + 1]);
        let d01 = (g[i] - g[i - 1]) / (x1 - x0);
        let d12 = (g[i + 1] - g[i]) / (x2 - x1);
        let a = (d12 - d01) / (x2 - x0);
        let mut fpk = x1;
        if a < 0.0 {
            let v = -(d01 - a * (x0 + x1)) / (2.0 * a);
            if v > x0 && v < x2 {
                fpk = v;
            }
        }
        let width = match (lo, hi) {
            (Some(l), Some(h)) => h - l,
            (Some(l), None) => 2.0 * (fpk - l),
            (None, Some(h)) => 2.0 * (h - fpk),
            (None, None) => f64::NAN,
        };
        let q = if width > 0.0 && width.is_finite() {
            fpk / width
        } else {
            1000.0
        };
        let r = 1.0 / gp;
        let ws = 2.0 * PI * fpk;
        let c = 1.0 / (q * ws * r);
        out.push(Candidate {
            g_peak: gp,
            branch: BvdBranch::new(r, 1.0 / (ws * ws * c), c),
        });
    }
    out
}

pub fn fit_with(sweep: &ImpedanceSweep, opts: &FitOptions) -> Result<FitResult, BvdError> {
    if !(opts.peak_factor > 0.0) {
        return Err(BvdError::Option("peak_factor must be positive"));
    }
    if !(opts.prune_fraction >= 0.0) {
        return Err(BvdError::Option("prune_fraction must be non-negative"));
    }
    if opts.max_iterations == 0 {
        return Err(BvdError::Option("max_iterations must be positive"));
    }
    let n = sweep.len();
    if n < MIN_FIT_POINTS {
        return Err(BvdError::TooFewPoints { min: MIN_FIT_POINTS, got: n });
    }
    let f = sweep.freq_hz();
    let omega: Vec<f64> = f.iter().map(|x| 2.0 * PI * x).collect();
    let y: Vec<Complex64> = sweep.z_ohm().iter().map(|z| 1.0 / z).collect();
    let prob = Problem {
        omega: omega.clone(),
        log_z: sweep.z_ohm().iter().map(|z| z.ln()).collect(),
        _sweep: sweep,
    };

    let decile = (n / 10).max(1);
    let c0_raw = median((0..decile).map(|j| y[j].im / omega[j]).collect());
    if !(c0_raw > 0.0) {
        return Err(BvdError::C0(c0_raw));
    }

    let g: Vec<f64> = y.iter().map(|v| v.re).collect();
    let g_med = median(g.clone());
    let y_max = y.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let threshold = (opts.peak_factor * g_med).max(1e-12 * y_max);
    let mut cands = conductance_peaks(f, &g, threshold);
    cands.sort_by(|a, b| b.g_peak.total_cmp(&a.g_peak));
    let n_cand = cands.len();
    cands.truncate(opts.max_branches);

    let label = "fit".to_string();
    if cands.is_empty() {
        let out = levenberg_marquardt(&prob, vec![c0_raw.ln()], opts)?;
        if opts.max_branches > 0 && out.rms > opts.capacitor_tolerance {
            return Err(BvdError::NoResonance { factor: opts.peak_factor });
        }
        let (c0, _) = unpack(&out.p);
        return Ok(FitResult {
            model: BvdModel::new(c0, Vec::new(), label)?,
            report: FitReport {
                residual: out.rms,
                iterations: out.iterations,
                stop: out.stop,
                candidates: n_cand,
                branches: Vec::new(),
            },
        });
    }

    let seeds: Vec<BvdBranch> = cands.iter().map(|c| c.branch).collect();
    let c0_seed = {
        let v = median(
            (0..decile)
                .map(|j| {
                    let s: f64 = seeds.iter().map(|b| (1.0 / b.impedance(omega[j])).im).sum();
                    (y[j].im - s) / omega[j]
                })
                .collect(),
        );
        if v > 0.0 {
            v
        } else {
            c0_raw
        }
    };

    let mut best = levenberg_marquardt(&prob, pack(c0_seed, &seeds), opts)?;
    let mut increases: Vec<f64>;
    // weakest first, so a strong branch is never judged against a model
    // still carrying noise branches
    loop {
        let (c0, br) = unpack(&best.p);
        increases = vec![f64::INFINITY; br.len()];
        let mut order: Vec<usize> = (0..br.len()).collect();
        order.sort_by(|&a, &b| (1.0 / br[a].r_m).total_cmp(&(1.0 / br[b].r_m)));
        let mut removed = false;
        for &k in &order {
            let rest: Vec<BvdBranch> = br
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != k)
                .map(|(_, b)| *b)
                .collect();
            let Ok(alt) = levenberg_marquardt(&prob, pack(c0, &rest), opts) else {
                continue;
            };
            let inc = (alt.rms - best.rms) / best.rms.max(f64::MIN_POSITIVE);
            increases[k] = inc;
            if inc < opts.prune_fraction && !rest.is_empty() {
                best = alt;
                removed = true;
                break;
            }
        }
        if !removed {
            break;
        }
    }

    let (c0, mut br) = unpack(&best.p);
    let m_res = 2.0 * n as f64;
    let dof = (m_res - best.p.len() as f64).max(1.0);
    let s2 = best.rms * best.rms * m_res / dof;
    // jtj was normalized by the residual count
    let cov = (best.jtj.clone() * m_res)
        .try_inverse()
        .map(|c| c * s2);
    let sigma = |k: usize| cov.as_ref().map_or(f64::NAN, |c| c[(k, k)].max(0.0).sqrt());
    let mut conf: Vec<(BranchConfidence, BvdBranch)> = br
        .iter()
        .enumerate()
        .map(|(k, b)| {
            (
                BranchConfidence {
                    fs_hz: b.fs(),
                    rel_sigma_fs: sigma(1 + 3 * k),
                    rel_sigma_r: sigma(2 + 3 * k),
                    rel_sigma_c: sigma(3 + 3 * k),
                    removal_increase: increases[k],
                },
                *b,
            )
        })
        .collect();
    conf.sort_by(|a, b| a.0.fs_hz.total_cmp(&b.0.fs_hz));
    br = conf.iter().map(|c| c.1).collect();
    Ok(FitResult {
        model: BvdModel::new(c0, br, label)?,
        report: FitReport {
            residual: best.rms,
            iterations: best.iterations,
            stop: best.stop,
            candidates: n_cand,
            branches: conf.into_iter().map(|c| c.0).collect(),
        },
    })
}
