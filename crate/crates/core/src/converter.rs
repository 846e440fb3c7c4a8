//! Periodic steady state of a piezoelectric DC-DC converter.
//!
//! The resonator is a single-branch BVD circuit switched between DC rails.
//! `i_l` is positive flowing from the terminal node into the motional
//! branch, so during a Clamped stage the rail supplies `V i_l` and during
//! an Open stage C0 discharges as `dv_C0/dt = -i_l / C0`.
//!
//! Every stage is a series R-L-C natural response, propagated in closed
//! form. The steady state is found by Newton shooting on the period map.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvd::{BvdBranch, BvdModel};

#[derive(Debug, Error, PartialEq)]
pub enum ConverterError {
    #[error("model must have exactly one motional branch, has {0}")]
    BranchCount(usize),
    #[error("invalid resonator: {0}")]
    Model(&'static str),
    #[error("invalid converter spec: {0}")]
    Spec(String),
    #[error("operating frequency {f_op} Hz outside the inductive band ({fs}, {fp}) Hz")]
    Band { f_op: f64, fs: f64, fp: f64 },
    #[error("time step must be non-negative, got {0}")]
    Step(f64),
    #[error("no convergence after {iterations} Newton iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("infeasible timing at {f_op} Hz: {reason}")]
    Infeasible { f_op: f64, reason: String },
    #[error("steady state at {f_op} Hz reverses current inside open stage {stage}")]
    Unphysical { f_op: f64, stage: usize },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

/// Clamp edge at which the motional current is steered to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edge {
    Start,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StageKind {
    Clamped(f64),
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Connected,
    Zero,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum StageFile {
    Open(OpenTag),
    Clamped {
        clamped: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        zero_current: Option<Edge>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum OpenTag {
    Open,
}

/// One switching stage. A clamp may carry a zero-current marker, which
/// makes its duration a solver unknown fixed by `i_l = 0` at that edge;
/// unmarked clamps share the rest of the period equally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "StageFile", into = "StageFile")]
pub struct StageDef {
    pub kind: StageKind,
    pub zero_current: Option<Edge>,
}

impl From<StageFile> for StageDef {
    fn from(f: StageFile) -> Self {
        match f {
            StageFile::Open(_) => StageDef::open(),
            StageFile::Clamped {
                clamped,
                zero_current,
            } => StageDef {
                kind: StageKind::Clamped(clamped),
                zero_current,
            },
        }
    }
}

impl From<StageDef> for StageFile {
    fn from(s: StageDef) -> Self {
        match s.kind {
            StageKind::Open => StageFile::Open(OpenTag::Open),
            StageKind::Clamped(v) => StageFile::Clamped {
                clamped: v,
                zero_current: s.zero_current,
            },
        }
    }
}

impl StageDef {
    pub fn clamped(v: f64) -> Self {
        StageDef {
            kind: StageKind::Clamped(v),
            zero_current: None,
        }
    }

    pub fn open() -> Self {
        StageDef {
            kind: StageKind::Open,
            zero_current: None,
        }
    }

    pub fn with_zero_current(mut self, edge: Edge) -> Self {
        self.zero_current = Some(edge);
        self
    }

    pub fn role(&self) -> Role {
        match self.kind {
            StageKind::Open => Role::Open,
            StageKind::Clamped(0.0) => Role::Zero,
            StageKind::Clamped(_) => Role::Connected,
        }
    }

    fn level(&self) -> Option<f64> {
        match self.kind {
            StageKind::Clamped(v) => Some(v),
            StageKind::Open => None,
        }
    }
}

/// Six-stage cycle: input clamp (current rising from zero), open, zero
/// clamp (current back to zero), open, output clamp, open.
pub fn default_stages(v_in: f64, v_out: f64) -> Vec<StageDef> {
    vec![
        StageDef::clamped(v_in).with_zero_current(Edge::Start),
        StageDef::open(),
        StageDef::clamped(0.0).with_zero_current(Edge::End),
        StageDef::open(),
        StageDef::clamped(v_out),
        StageDef::open(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConverterSpec {
    pub v_in: f64,
    pub v_out: f64,
    pub stages: Vec<StageDef>,
    pub f_op: f64,
}

impl ConverterSpec {
    pub fn new(v_in: f64, v_out: f64, f_op: f64) -> Self {
        ConverterSpec {
            v_in,
            v_out,
            stages: default_stages(v_in, v_out),
            f_op,
        }
    }

    pub fn at(&self, f_op: f64) -> Self {
        ConverterSpec {
            f_op,
            ..self.clone()
        }
    }

    /// The same cycle started `k` stages later.
    pub fn rotated(&self, k: usize) -> Self {
        let mut stages = self.stages.clone();
        let n = stages.len();
        if n > 0 {
            stages.rotate_left(k % n);
        }
        ConverterSpec {
            stages,
            ..self.clone()
        }
    }

    fn validate_stages(&self) -> Result<(), ConverterError> {
        let bad = |m: &str| Err(ConverterError::Spec(m.to_string()));
        if !(self.v_in > 0.0 && self.v_in.is_finite()) {
            return bad("v_in must be positive");
        }
        if !(self.v_out > 0.0 && self.v_out < self.v_in) {
            return bad("v_out must lie in (0, v_in)");
        }
        let n = self.stages.len();
        if n == 0 {
            return bad("stage list is empty");
        }
        if !self.stages.iter().any(|s| s.kind == StageKind::Open) {
            return bad("at least one open stage is required");
        }
        for (k, s) in self.stages.iter().enumerate() {
            let next = &self.stages[(k + 1) % n];
            match s.kind {
                StageKind::Open => {
                    if s.zero_current.is_some() {
                        return bad("zero-current markers apply to clamped stages only");
                    }
                    if next.kind == StageKind::Open {
                        return bad("open stages must be separated by clamps");
                    }
                }
                StageKind::Clamped(v) => {
                    if !v.is_finite() {
                        return bad("clamp level must be finite");
                    }
                    if let StageKind::Clamped(w) = next.kind {
                        if w != v {
                            return bad("distinct clamp levels need an open stage between them");
                        }
                    }
                }
            }
        }
        if !self
            .stages
            .iter()
            .any(|s| s.level().is_some() && s.zero_current.is_none())
        {
            return bad("at least one clamp must be free of zero-current markers");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonatorState {
    pub i_l: f64,
    pub v_cm: f64,
    pub v_c0: f64,
}

impl ResonatorState {
    pub fn new(i_l: f64, v_cm: f64, v_c0: f64) -> Self {
        ResonatorState { i_l, v_cm, v_c0 }
    }
}

/// Single-branch parameters as used by the propagator. `r` may be zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resonator {
    pub r: f64,
    pub l: f64,
    pub c: f64,
    pub c0: f64,
}

impl Resonator {
    pub fn from_model(model: &BvdModel) -> Result<Self, ConverterError> {
        if model.branches.len() != 1 {
            return Err(ConverterError::BranchCount(model.branches.len()));
        }
        let b = model.branches[0];
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !(b.r_m >= 0.0 && b.r_m.is_finite()) {
            return Err(ConverterError::Model("r_m must be non-negative"));
        }
        if !pos(b.l_m) || !pos(b.c_m) || !pos(model.c0) {
            return Err(ConverterError::Model("l_m, c_m and c0 must be positive"));
        }
        Ok(Resonator {
            r: b.r_m,
            l: b.l_m,
            c: b.c_m,
            c0: model.c0,
        })
    }

    pub fn fs(&self) -> f64 {
        1.0 / (2.0 * PI * (self.l * self.c).sqrt())
    }

    pub fn fp(&self) -> f64 {
        self.fs() * (1.0 + self.c / self.c0).sqrt()
    }

    fn series_c(&self) -> f64 {
        self.c * self.c0 / (self.c + self.c0)
    }
}

/// `sin(w t)/w`, `sinh(b t)/b` or `t`, and the matching cosine, for
/// `disc = alpha^2 - w0^2`.
fn osc(disc: f64, t: f64) -> (f64, f64) {
    let s2 = -disc;
    let x2 = s2 * t * t;
    if x2.abs() < 1e-8 {
        // series through the critically damped case
        return (t * (1.0 - x2 / 6.0), 1.0 - x2 / 2.0);
    }
    if s2 > 0.0 {
        let w = s2.sqrt();
        ((w * t).sin() / w, (w * t).cos())
    } else {
        let b = (-s2).sqrt();
        ((b * t).sinh() / b, (b * t).cosh())
    }
}

/// Natural response of `L di/dt = -R i - u`, `du/dt = i / C`.
pub fn rlc_response(i0: f64, u0: f64, r: f64, l: f64, c: f64, t: f64) -> (f64, f64) {
    if t == 0.0 {
        return (i0, u0);
    }
    let alpha = r / (2.0 * l);
    let w0sq = 1.0 / (l * c);
    let disc = alpha * alpha - w0sq;
    let (sn, cs) = if disc > 0.0 {
        // overdamped: keep both exponentials bounded
        let b = disc.sqrt();
        let ep = ((b - alpha) * t).exp();
        let em = (-(b + alpha) * t).exp();
        let s = (ep - em) / (2.0 * b);
        let co = 0.5 * (ep + em);
        return (
            i0 * co + (-alpha * i0 - u0 / l) * s,
            u0 * co + (i0 / c + alpha * u0) * s,
        );
    } else {
        osc(disc, t)
    };
    let e = (-alpha * t).exp();
    (
        e * (i0 * cs + (-alpha * i0 - u0 / l) * sn),
        e * (u0 * cs + (i0 / c + alpha * u0) * sn),
    )
}

fn evolve(res: &Resonator, x: ResonatorState, kind: StageKind, dt: f64) -> ResonatorState {
    match kind {
        StageKind::Clamped(v) => {
            let (i, u) = rlc_response(x.i_l, x.v_cm - v, res.r, res.l, res.c, dt);
            ResonatorState::new(i, u + v, v)
        }
        StageKind::Open => {
            let cs = res.series_c();
            let w0 = x.v_cm - x.v_c0;
            let (i, w) = rlc_response(x.i_l, w0, res.r, res.l, cs, dt);
            let dw = w - w0;
            ResonatorState::new(i, x.v_cm + cs / res.c * dw, x.v_c0 - cs / res.c0 * dw)
        }
    }
}

/// Propagates `state` through `stage` for `dt` seconds.
pub fn stage_evolve(
    state: ResonatorState,
    stage: &StageDef,
    model: &BvdModel,
    dt: f64,
) -> Result<ResonatorState, ConverterError> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(ConverterError::Step(dt));
    }
    let res = Resonator::from_model(model)?;
    Ok(evolve(&res, state, stage.kind, dt))
}

/// Solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub fd_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-9,
            max_iterations: 100,
            fd_step: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyAudit {
    /// Per period, J.
    pub e_in: f64,
    pub e_out: f64,
    pub e_loss: f64,
    /// Energy exchanged with clamps at other levels (zero for 0 V clamps).
    pub e_other: f64,
    /// `(e_in + e_other - e_out - e_loss) / e_in`.
    pub imbalance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PssSolution {
    pub f_op: f64,
    pub stages: Vec<StageDef>,
    pub durations: Vec<f64>,
    /// State at the start of each stage plus the state after the last.
    pub boundary_states: Vec<ResonatorState>,
    pub p_in: f64,
    pub p_out: f64,
    pub p_loss: f64,
    pub efficiency: f64,
    /// Scaled norm of the three-state mismatch after one period.
    pub periodicity_residual: f64,
    /// `v_C0 - next clamp level` at the end of each open stage, V.
    pub zvs_residuals: Vec<f64>,
    /// Motional current at each zero-current marker, A.
    pub zero_current_residuals: Vec<f64>,
    pub iterations: usize,
    pub audit: EnergyAudit,
}

impl PssSolution {
    pub fn period(&self) -> f64 {
        1.0 / self.f_op
    }

    pub fn initial_state(&self) -> ResonatorState {
        self.boundary_states[0]
    }
}

/// Shooting formulation for one spec and resonator. Unknowns (scaled):
/// `[i0 / I, v_Cm0 / V, open durations / T..., marked clamp durations / T...]`
/// with `I = v_in w_s C0`, `V = v_in`, `T = 1/f_op`.
#[derive(Debug, Clone)]
pub struct Shooting {
    res: Resonator,
    stages: Vec<StageDef>,
    open: Vec<usize>,
    marked: Vec<usize>,
    unmarked: Vec<usize>,
    period: f64,
    i_scale: f64,
    v_scale: f64,
    v_c0_start: f64,
}

struct Shot {
    residual: Vec<f64>,
    durations: Vec<f64>,
    states: Vec<ResonatorState>,
}

impl Shooting {
    pub fn new(spec: &ConverterSpec, model: &BvdModel) -> Result<Self, ConverterError> {
        let res = Resonator::from_model(model)?;
        spec.validate_stages()?;
        let (fs, fp) = (res.fs(), res.fp());
        if !(spec.f_op > fs && spec.f_op < fp) {
            return Err(ConverterError::Band {
                f_op: spec.f_op,
                fs,
                fp,
            });
        }
        let n = spec.stages.len();
        let open = (0..n).filter(|&k| spec.stages[k].kind == StageKind::Open).collect();
        let marked = (0..n)
            .filter(|&k| spec.stages[k].level().is_some() && spec.stages[k].zero_current.is_some())
            .collect();
        let unmarked = (0..n)
            .filter(|&k| spec.stages[k].level().is_some() && spec.stages[k].zero_current.is_none())
            .collect();
        // v_C0 entering stage 0 sits at the level of the nearest clamp at or
        // before it, which ZVS makes exact
        let v_c0_start = (0..n)
            .map(|k| (n - k) % n)
            .find_map(|k| spec.stages[k].level())
            .expect("validated spec has a clamp");
        Ok(Shooting {
            res,
            stages: spec.stages.clone(),
            open,
            marked,
            unmarked,
            period: 1.0 / spec.f_op,
            i_scale: spec.v_in * 2.0 * PI * res.fs() * res.c0,
            v_scale: spec.v_in,
            v_c0_start,
        })
    }

    pub fn unknown_count(&self) -> usize {
        2 + self.open.len() + self.marked.len()
    }

    fn durations(&self, u: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.stages.len()];
        let mut used = 0.0;
        for (j, &k) in self.open.iter().chain(self.marked.iter()).enumerate() {
            d[k] = u[2 + j] * self.period;
            used += d[k];
        }
        let share = (self.period - used) / self.unmarked.len() as f64;
        for &k in &self.unmarked {
            d[k] = share;
        }
        d
    }

    fn feasible(&self, u: &[f64]) -> bool {
        u.iter().all(|x| x.is_finite()) && self.durations(u).iter().all(|&d| d > 0.0)
    }

    fn next_level(&self, k: usize) -> f64 {
        let n = self.stages.len();
        self.stages[(k + 1) % n]
            .level()
            .expect("open stages are followed by clamps")
    }

    fn shoot(&self, u: &[f64]) -> Shot {
        let durations = self.durations(u);
        let mut x = ResonatorState::new(u[0] * self.i_scale, u[1] * self.v_scale, self.v_c0_start);
        let x0 = x;
        let mut states = vec![x];
        let mut zvs = Vec::new();
        let mut zc = Vec::new();
        for (k, s) in self.stages.iter().enumerate() {
            if s.zero_current == Some(Edge::Start) {
                zc.push(x.i_l / self.i_scale);
            }
            x = evolve(&self.res, x, s.kind, durations[k]);
            if s.kind == StageKind::Open {
                zvs.push((x.v_c0 - self.next_level(k)) / self.v_scale);
            }
            if s.zero_current == Some(Edge::End) {
                zc.push(x.i_l / self.i_scale);
            }
            states.push(x);
        }
        let mut residual = vec![(x.i_l - x0.i_l) / self.i_scale, (x.v_cm - x0.v_cm) / self.v_scale];
        residual.extend(zvs);
        residual.extend(zc);
        Shot {
            residual,
            durations,
            states,
        }
    }

    /// Scaled residual vector of the period map.
    pub fn residual(&self, u: &[f64]) -> Vec<f64> {
        self.shoot(u).residual
    }

    /// Forward-difference Jacobian with relative step `h`.
    pub fn jacobian(&self, u: &[f64], h: f64) -> DMatrix<f64> {
        let r0 = self.residual(u);
        let m = u.len();
        let mut j = DMatrix::zeros(r0.len(), m);
        for c in 0..m {
            let step = h * u[c].abs().max(1.0);
            let mut up = u.to_vec();
            up[c] += step;
            let r1 = self.residual(&up);
            for r in 0..r0.len() {
                j[(r, c)] = (r1[r] - r0[r]) / step;
            }
        }
        j
    }

    /// Centered-difference Jacobian with relative step `h`.
    pub fn jacobian_centered(&self, u: &[f64], h: f64) -> DMatrix<f64> {
        let m = u.len();
        let n = self.residual(u).len();
        let mut j = DMatrix::zeros(n, m);
        for c in 0..m {
            let step = h * u[c].abs().max(1.0);
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[c] += step;
            dn[c] -= step;
            let (rp, rm) = (self.residual(&up), self.residual(&dn));
            for r in 0..n {
                j[(r, c)] = (rp[r] - rm[r]) / (2.0 * step);
            }
        }
        j
    }

    /// Scaled unknowns of a solution of this formulation.
    pub fn unknowns_of(&self, sol: &PssSolution) -> Vec<f64> {
        let x = sol.initial_state();
        let mut u = vec![x.i_l / self.i_scale, x.v_cm / self.v_scale];
        for &k in self.open.iter().chain(self.marked.iter()) {
            u.push(sol.durations[k] / self.period);
        }
        u
    }

    /// Unknowns for given duration fractions, with the state taken from the
    /// periodic solution of the (affine) period map at those durations.
    fn seed(&self, fractions: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0, 0.0];
        for &k in self.open.iter().chain(self.marked.iter()) {
            u.push(fractions[k]);
        }
        let d = self.durations(&u);
        let run = |x: ResonatorState| {
            let mut x = x;
            for (k, s) in self.stages.iter().enumerate() {
                x = evolve(&self.res, x, s.kind, d[k]);
            }
            Vector3::new(x.i_l, x.v_cm, x.v_c0)
        };
        let base = ResonatorState::new(0.0, 0.0, self.v_c0_start);
        let b = run(base);
        let mut phi = Matrix3::zeros();
        let unit = [
            ResonatorState::new(1.0, 0.0, self.v_c0_start),
            ResonatorState::new(0.0, 1.0, self.v_c0_start),
        ];
        for (c, x) in unit.iter().enumerate() {
            let col = run(*x) - b;
            phi.set_column(c, &col);
        }
        // v_C0 is not free: solve the 2x2 block for (i, v_Cm)
        let a = nalgebra::Matrix2::new(
            1.0 - phi[(0, 0)],
            -phi[(0, 1)],
            -phi[(1, 0)],
            1.0 - phi[(1, 1)],
        );
        if let Some(inv) = a.try_inverse() {
            let x = inv * nalgebra::Vector2::new(b[0], b[1]);
            if x.iter().all(|v| v.is_finite()) {
                u[0] = x[0] / self.i_scale;
                u[1] = x[1] / self.v_scale;
            }
        }
        u
    }

    fn fractions_of(&self, sol: &PssSolution) -> Vec<f64> {
        let t: f64 = sol.durations.iter().sum();
        sol.durations.iter().map(|d| d / t).collect()
    }

    /// Damped Newton from `u`.
    fn newton(&self, mut u: Vec<f64>, opts: &SolverOptions) -> Result<(Vec<f64>, usize), ConverterError> {
        if !self.feasible(&u) {
            return Err(ConverterError::Infeasible {
                f_op: 1.0 / self.period,
                reason: "initial durations are not positive".into(),
            });
        }
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut r = self.residual(&u);
        let mut rn = norm(&r);
        let mut polish = 0;
        for it in 0..opts.max_iterations {
            if rn < opts.tolerance {
                // a few extra steps while they still help
                if polish >= 3 {
                    return Ok((u, it));
                }
                polish += 1;
            }
            let j = self.jacobian(&u, opts.fd_step);
            let rhs = -DVector::from_vec(r.clone());
            let Some(step) = j.lu().solve(&rhs) else {
                return Err(ConverterError::NonConvergence {
                    iterations: it,
                    residual: rn,
                });
            };
            let mut lam = 1.0;
            let mut accepted = false;
            let mut any_feasible = false;
            for _ in 0..40 {
                let trial: Vec<f64> = u.iter().zip(step.iter()).map(|(a, b)| a + lam * b).collect();
                if self.feasible(&trial) {
                    any_feasible = true;
                    let rt = self.residual(&trial);
                    let tn = norm(&rt);
                    if tn < rn {
                        u = trial;
                        r = rt;
                        rn = tn;
                        accepted = true;
                        break;
                    }
                }
                lam *= 0.5;
            }
            if !accepted {
                if rn < opts.tolerance {
                    return Ok((u, it));
                }
                if !any_feasible {
                    return Err(ConverterError::Infeasible {
                        f_op: 1.0 / self.period,
                        reason: "Newton step drives a stage duration negative".into(),
                    });
                }
                return Err(ConverterError::NonConvergence {
                    iterations: it,
                    residual: rn,
                });
            }
        }
        if rn < opts.tolerance {
            return Ok((u, opts.max_iterations));
        }
        Err(ConverterError::NonConvergence {
            iterations: opts.max_iterations,
            residual: rn,
        })
    }

    fn finish(&self, u: &[f64], iterations: usize) -> Result<PssSolution, ConverterError> {
        let shot = self.shoot(u);
        let f_op = 1.0 / self.period;
        for &k in &self.open {
            if reverses(&self.res, shot.states[k], self.stages[k].kind, shot.durations[k]) {
                return Err(ConverterError::Unphysical { f_op, stage: k });
            }
        }
        let end = shot.states[self.stages.len()];
        let start = shot.states[0];
        let periodicity_residual = (((end.i_l - start.i_l) / self.i_scale).powi(2)
            + ((end.v_cm - start.v_cm) / self.v_scale).powi(2)
            + ((end.v_c0 - start.v_c0) / self.v_scale).powi(2))
        .sqrt();
        let n_zvs = self.open.len();
        let zvs_residuals = shot.residual[2..2 + n_zvs].iter().map(|x| x * self.v_scale).collect();
        let zero_current_residuals = shot.residual[2 + n_zvs..]
            .iter()
            .map(|x| x * self.i_scale)
            .collect();
        Ok(PssSolution {
            f_op,
            stages: self.stages.clone(),
            durations: shot.durations,
            boundary_states: shot.states,
            p_in: 0.0,
            p_out: 0.0,
            p_loss: 0.0,
            efficiency: 0.0,
            periodicity_residual,
            zvs_residuals,
            zero_current_residuals,
            iterations,
            audit: EnergyAudit {
                e_in: 0.0,
                e_out: 0.0,
                e_loss: 0.0,
                e_other: 0.0,
                imbalance: 0.0,
            },
        })
    }
}

/// True when the current changes sign strictly inside the stage.
fn reverses(res: &Resonator, x: ResonatorState, kind: StageKind, dt: f64) -> bool {
    const SAMPLES: usize = 64;
    let scale = (0..=SAMPLES)
        .map(|k| evolve(res, x, kind, dt * k as f64 / SAMPLES as f64).i_l.abs())
        .fold(0.0, f64::max);
    let tol = 1e-6 * scale;
    let mut sign = 0.0;
    for k in 0..=SAMPLES {
        let i = evolve(res, x, kind, dt * k as f64 / SAMPLES as f64).i_l;
        if i.abs() <= tol {
            continue;
        }
        if sign != 0.0 && i.signum() != sign {
            return true;
        }
        sign = i.signum();
    }
    false
}

/// Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `integral of i_l^2 dt` over one stage by composite Gauss-Legendre.
fn integral_i_sq(res: &Resonator, x: ResonatorState, kind: StageKind, dt: f64) -> f64 {
    const PANELS: usize = 8;
    let (nodes, weights) = gauss_legendre(16);
    let h = dt / PANELS as f64;
    let mut acc = 0.0;
    for p in 0..PANELS {
        let a = p as f64 * h;
        for (t, w) in nodes.iter().zip(&weights) {
            let i = evolve(res, x, kind, a + 0.5 * h * (t + 1.0)).i_l;
            acc += 0.5 * h * w * i * i;
        }
    }
    acc
}

fn with_energy(res: &Resonator, spec: &ConverterSpec, mut sol: PssSolution) -> PssSolution {
    let (mut e_in, mut e_out, mut e_other, mut e_loss) = (0.0, 0.0, 0.0, 0.0);
    for (k, s) in sol.stages.iter().enumerate() {
        let (a, b) = (sol.boundary_states[k], sol.boundary_states[k + 1]);
        if let StageKind::Clamped(v) = s.kind {
            // charge through the rail is exactly C_m dv_Cm
            let e = v * res.c * (b.v_cm - a.v_cm);
            if v == spec.v_in {
                e_in += e;
            } else if v == spec.v_out {
                e_out -= e;
            } else {
                e_other += e;
            }
        }
        if res.r != 0.0 {
            e_loss += res.r * integral_i_sq(res, a, s.kind, sol.durations[k]);
        }
    }
    let t = sol.period();
    sol.p_in = e_in / t;
    sol.p_out = e_out / t;
    sol.p_loss = e_loss / t;
    sol.efficiency = if sol.p_out + sol.p_loss > 0.0 {
        sol.p_out / (sol.p_out + sol.p_loss)
    } else {
        0.0
    };
    sol.audit = EnergyAudit {
        e_in,
        e_out,
        e_loss,
        e_other,
        imbalance: (e_in + e_other - e_out - e_loss) / e_in.abs().max(f64::MIN_POSITIVE),
    };
    sol
}

/// Initial guess for a solve: a previous solution or equal durations.
#[derive(Debug, Clone, Copy)]
pub enum Guess<'a> {
    Cold,
    From(&'a PssSolution),
}

fn solve_from(
    spec: &ConverterSpec,
    model: &BvdModel,
    guess: Guess,
    opts: &SolverOptions,
) -> Result<PssSolution, ConverterError> {
    let sh = Shooting::new(spec, model)?;
    let n = spec.stages.len();
    let fractions = match guess {
        Guess::Cold => vec![1.0 / n as f64; n],
        Guess::From(prev) if prev.stages == spec.stages => sh.fractions_of(prev),
        Guess::From(_) => vec![1.0 / n as f64; n],
    };
    let u0 = sh.seed(&fractions);
    let (u, it) = sh.newton(u0, opts)?;
    let sol = sh.finish(&u, it)?;
    let sol = with_energy(&sh.res, spec, sol);
    if !(sol.p_out >= 0.0) {
        return Err(ConverterError::Infeasible {
            f_op: spec.f_op,
            reason: "power flows from the output back to the input".into(),
        });
    }
    Ok(sol)
}

/// Steady state from a warm start, no fallback.
pub fn solve_pss_warm(
    spec: &ConverterSpec,
    model: &BvdModel,
    prev: &PssSolution,
    opts: &SolverOptions,
) -> Result<PssSolution, ConverterError> {
    solve_from(spec, model, Guess::From(prev), opts)
}

/// Zero-voltage-switching periodic steady state.
pub fn solve_pss(spec: &ConverterSpec, model: &BvdModel) -> Result<PssSolution, ConverterError> {
    solve_pss_with(spec, model, &SolverOptions::default())
}

/// Cold solve: equal durations first, then continuation from the band
/// centre toward `f_op` if that fails.
pub fn solve_pss_with(
    spec: &ConverterSpec,
    model: &BvdModel,
    opts: &SolverOptions,
) -> Result<PssSolution, ConverterError> {
    let first = match solve_from(spec, model, Guess::Cold, opts) {
        Ok(s) => return Ok(s),
        Err(e @ (ConverterError::Spec(_)
        | ConverterError::Band { .. }
        | ConverterError::BranchCount(_)
        | ConverterError::Model(_))) => return Err(e),
        Err(e) => e,
    };
    let res = Resonator::from_model(model)?;
    let centre = 0.5 * (res.fs() + res.fp());
    let Ok(mut sol) = solve_from(&spec.at(centre), model, Guess::Cold, opts) else {
        return Err(first);
    };
    let mut f = centre;
    let mut step = (spec.f_op - centre) / 8.0;
    let mut halvings = 0;
    while (spec.f_op - f).abs() > 0.0 {
        let target = if (spec.f_op - f).abs() <= step.abs() * (1.0 + 1e-12) {
            spec.f_op
        } else {
            f + step
        };
        match solve_from(&spec.at(target), model, Guess::From(&sol), opts) {
            Ok(s) => {
                sol = s;
                f = target;
            }
            Err(_) if halvings < 12 => {
                step *= 0.5;
                halvings += 1;
            }
            Err(_) => return Err(first),
        }
    }
    Ok(sol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub f_op: f64,
    pub p_out: f64,
    pub p_loss: f64,
    pub efficiency: f64,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub solution: Option<PssSolution>,
}

impl SweepPoint {
    fn from_result(f_op: f64, r: Result<PssSolution, ConverterError>) -> Self {
        match r {
            Ok(s) => SweepPoint {
                f_op,
                p_out: s.p_out,
                p_loss: s.p_loss,
                efficiency: s.efficiency,
                converged: true,
                error: None,
                solution: Some(s),
            },
            Err(e) => SweepPoint {
                f_op,
                p_out: f64::NAN,
                p_loss: f64::NAN,
                efficiency: f64::NAN,
                converged: false,
                error: Some(e.to_string()),
                solution: None,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub warm_start: bool,
    pub solver: SolverOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            warm_start: true,
            solver: SolverOptions::default(),
        }
    }
}

pub fn power_sweep(spec: &ConverterSpec, model: &BvdModel, f_grid: &[f64]) -> Vec<SweepPoint> {
    power_sweep_with(spec, model, f_grid, &SweepOptions::default())
}

/// One steady state per grid frequency. With warm starting the points are
/// solved in order, each seeded by its converged neighbour, and failures
/// are retried cold and then from the next converged point above; without
/// it the points are solved cold and in parallel.
pub fn power_sweep_with(
    spec: &ConverterSpec,
    model: &BvdModel,
    f_grid: &[f64],
    opts: &SweepOptions,
) -> Vec<SweepPoint> {
    let s = &opts.solver;
    if !opts.warm_start {
        return f_grid
            .par_iter()
            .map(|&f| SweepPoint::from_result(f, solve_pss_with(&spec.at(f), model, s)))
            .collect();
    }
    let mut out: Vec<SweepPoint> = Vec::with_capacity(f_grid.len());
    let mut prev: Option<PssSolution> = None;
    for &f in f_grid {
        let sp = spec.at(f);
        let r = match &prev {
            Some(p) => solve_pss_warm(&sp, model, p, s).or_else(|_| solve_pss_with(&sp, model, s)),
            None => solve_pss_with(&sp, model, s),
        };
        if let Ok(sol) = &r {
            prev = Some(sol.clone());
        }
        out.push(SweepPoint::from_result(f, r));
    }
    for k in (0..out.len().saturating_sub(1)).rev() {
        if out[k].converged {
            continue;
        }
        if let Some(next) = out[k + 1].solution.clone() {
            let f = out[k].f_op;
            if let Ok(sol) = solve_pss_warm(&spec.at(f), model, &next, s) {
                out[k] = SweepPoint::from_result(f, Ok(sol));
            }
        }
    }
    out
}

/// Single-branch equivalent of the motional impedance at one frequency:
/// matches `Re Z_m`, `Im Z_m` and `d Im Z_m / d w`.
pub fn local_equivalent(model: &BvdModel, f_hz: f64) -> Option<BvdModel> {
    let w = 2.0 * PI * f_hz;
    let i = num_complex::Complex64::i();
    let mut y = num_complex::Complex64::new(0.0, 0.0);
    let mut dy = num_complex::Complex64::new(0.0, 0.0);
    for b in &model.branches {
        let yk = 1.0 / b.impedance(w);
        y += yk;
        dy -= yk * yk * i * (b.l_m + 1.0 / (w * w * b.c_m));
    }
    let z = 1.0 / y;
    let dz = -dy / (y * y);
    let (x, dx) = (z.im, dz.im);
    let l = 0.5 * (dx + x / w);
    let c = 2.0 / (w * w * (dx - x / w));
    let r = z.re;
    if !(l > 0.0 && c > 0.0 && r >= 0.0 && l.is_finite() && c.is_finite()) {
        return None;
    }
    Some(BvdModel {
        c0: model.c0,
        branches: vec![BvdBranch::new(r, l, c)],
        label: format!("{} @ {f_hz} Hz", model.label),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpurPoint {
    pub f_op: f64,
    pub clean_p_out: f64,
    pub spurred_p_out: f64,
    pub clean_converged: bool,
    pub spurred_converged: bool,
    pub lost: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpurImpact {
    pub points: Vec<SpurPoint>,
    /// Grid frequencies where the spurred resonator fails or deviates by
    /// more than 10 % in output power.
    pub lost_hz: Vec<f64>,
}

pub const SPUR_POWER_TOLERANCE: f64 = 0.10;

/// Operating range lost to spurs. The spurred resonator enters the solver
/// through its local single-branch equivalent at each grid frequency.
pub fn spur_impact(
    spec: &ConverterSpec,
    clean: &BvdModel,
    spurred: &BvdModel,
    f_grid: &[f64],
) -> Result<SpurImpact, ConverterError> {
    if clean.branches.len() != 1 {
        return Err(ConverterError::BranchCount(clean.branches.len()));
    }
    if !spurred.branches.contains(&clean.branches[0]) || spurred.c0 != clean.c0 {
        return Err(ConverterError::Spec(
            "spurred model must contain the clean branch and C0".into(),
        ));
    }
    let base = power_sweep(spec, clean, f_grid);
    let opts = SolverOptions::default();
    let points: Vec<SpurPoint> = base
        .par_iter()
        .map(|bp| {
            let f = bp.f_op;
            let sp = spec.at(f);
            let r = match local_equivalent(spurred, f) {
                None => None,
                Some(eq) => {
                    let warm = bp
                        .solution
                        .as_ref()
                        .and_then(|s| solve_pss_warm(&sp, &eq, s, &opts).ok());
                    warm.or_else(|| solve_pss_with(&sp, &eq, &opts).ok())
                }
            };
            let spurred_converged = r.is_some();
            let spurred_p_out = r.map_or(f64::NAN, |s| s.p_out);
            let deviates = bp.converged
                && spurred_converged
                && (spurred_p_out - bp.p_out).abs() > SPUR_POWER_TOLERANCE * bp.p_out.abs();
            SpurPoint {
                f_op: f,
                clean_p_out: bp.p_out,
                spurred_p_out,
                clean_converged: bp.converged,
                spurred_converged,
                lost: bp.converged && (!spurred_converged || deviates),
            }
        })
        .collect();
    let lost_hz = points.iter().filter(|p| p.lost).map(|p| p.f_op).collect();
    Ok(SpurImpact { points, lost_hz })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveformSample {
    pub t_s: f64,
    pub i_l_a: f64,
    pub v_cm_v: f64,
    pub v_c0_v: f64,
    pub stage_index: usize,
}

pub const MIN_WAVEFORM_POINTS: usize = 200;

/// One period sampled uniformly at `points` (at least 200) instants.
pub fn sample_waveform(
    sol: &PssSolution,
    model: &BvdModel,
    points: usize,
) -> Result<Vec<WaveformSample>, ConverterError> {
    let res = Resonator::from_model(model)?;
    let n = points.max(MIN_WAVEFORM_POINTS);
    let t_total = sol.period();
    let mut starts = Vec::with_capacity(sol.durations.len());
    let mut acc = 0.0;
    for d in &sol.durations {
        starts.push(acc);
        acc += d;
    }
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for j in 0..n {
        let t = t_total * j as f64 / n as f64;
        while k + 1 < starts.len() && t >= starts[k + 1] {
            k += 1;
        }
        let x = evolve(&res, sol.boundary_states[k], sol.stages[k].kind, t - starts[k]);
        out.push(WaveformSample {
            t_s: t,
            i_l_a: x.i_l,
            v_cm_v: x.v_cm,
            v_c0_v: x.v_c0,
            stage_index: k,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvd::resonance_freqs;
    use crate::metrics::reference_twin;
    use crate::sweep::linspace;

    fn res() -> Resonator {
        Resonator::from_model(&reference_twin()).unwrap()
    }

    fn spec(f: f64) -> ConverterSpec {
        ConverterSpec::new(40.0, 30.0, f)
    }

    #[test]
    fn zero_step_is_identity() {
        let m = reference_twin();
        let x = ResonatorState::new(0.3, -2.0, 7.0);
        for s in default_stages(40.0, 30.0) {
            let y = stage_evolve(x, &s, &m, 0.0).unwrap();
            if s.kind == StageKind::Open {
                assert_eq!(y, x);
            } else {
                assert_eq!((y.i_l, y.v_cm), (x.i_l, x.v_cm));
            }
        }
        assert!(stage_evolve(x, &StageDef::open(), &m, -1.0).is_err());
    }

    #[test]
    fn lossless_clamp_conserves_energy() {
        let mut m = reference_twin();
        m.branches[0].r_m = 0.0;
        let b = m.branches[0];
        let e = |x: ResonatorState| 0.5 * b.l_m * x.i_l * x.i_l + 0.5 * b.c_m * x.v_cm * x.v_cm;
        let x0 = ResonatorState::new(1.0, 0.0, 0.0);
        for dt in [1e-9, 3.3e-8, 1e-7, 2.5e-6] {
            let x = stage_evolve(x0, &StageDef::clamped(0.0), &m, dt).unwrap();
            assert!((e(x) - e(x0)).abs() <= 1e-10 * e(x0));
        }
    }

    #[test]
    fn open_stage_c0_matches_trapezoid() {
        let m = reference_twin();
        let r = res();
        let x0 = ResonatorState::new(0.5, 3.0, 10.0);
        let dt = 1e-9;
        let x1 = stage_evolve(x0, &StageDef::open(), &m, dt).unwrap();
        let n = 1000;
        let mut integral = 0.0;
        for k in 0..n {
            let a = evolve(&r, x0, StageKind::Open, dt * k as f64 / n as f64).i_l;
            let b = evolve(&r, x0, StageKind::Open, dt * (k + 1) as f64 / n as f64).i_l;
            integral += 0.5 * (a + b) * dt / n as f64;
        }
        let expect = -integral / r.c0;
        let got = x1.v_c0 - x0.v_c0;
        assert!((got - expect).abs() <= 1e-6 * expect.abs());
    }

    #[test]
    fn semigroup_property() {
        let r = res();
        let x0 = ResonatorState::new(0.2, -5.0, 12.0);
        let scale = |a: ResonatorState, b: ResonatorState| {
            ((a.i_l - b.i_l) / 0.25).abs().max(((a.v_cm - b.v_cm) / 40.0).abs()).max(((a.v_c0 - b.v_c0) / 40.0).abs())
        };
        for kind in [StageKind::Open, StageKind::Clamped(40.0)] {
            for (d1, d2) in [(1e-8, 2e-8), (3.7e-8, 1.1e-9), (5e-8, 5e-8)] {
                let a = evolve(&r, evolve(&r, x0, kind, d1), kind, d2);
                let b = evolve(&r, x0, kind, d1 + d2);
                assert!(scale(a, b) < 1e-10);
            }
        }
    }

    #[test]
    fn damping_regimes_agree_with_rk4() {
        let rk4 = |i0: f64, u0: f64, r: f64, l: f64, c: f64, t: f64| {
            let n = 20000;
            let h = t / n as f64;
            let f = |i: f64, u: f64| ((-r * i - u) / l, i / c);
            let (mut i, mut u) = (i0, u0);
            for _ in 0..n {
                let k1 = f(i, u);
                let k2 = f(i + 0.5 * h * k1.0, u + 0.5 * h * k1.1);
                let k3 = f(i + 0.5 * h * k2.0, u + 0.5 * h * k2.1);
                let k4 = f(i + h * k3.0, u + h * k3.1);
                i += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
                u += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            }
            (i, u)
        };
        let (l, c): (f64, f64) = (1e-5, 2e-11);
        let rc = 2.0 * (l / c).sqrt();
        for r in [0.0, 0.16, 0.5 * rc, rc, 3.0 * rc] {
            let t = 2e-7;
            let (a, b) = rlc_response(0.4, -3.0, r, l, c, t);
            let (x, y) = rk4(0.4, -3.0, r, l, c, t);
            assert!((a - x).abs() < 1e-8 && (b - y).abs() < 1e-6, "r={r}: {a} {x} {b} {y}");
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(16);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(30)).sum();
        assert!((q - 2.0 / 31.0).abs() < 1e-14);
    }

    #[test]
    fn converges_at_midband() {
        let m = reference_twin();
        let (fs, fp) = resonance_freqs(&m).unwrap();
        let sol = solve_pss(&spec(0.5 * (fs + fp)), &m).unwrap();
        assert!(sol.periodicity_residual < 1e-9);
        assert!(sol.zvs_residuals.iter().all(|v| v.abs() < 1e-6));
        let t: f64 = sol.durations.iter().sum();
        assert!((t - sol.period()).abs() <= 1e-12 * sol.period());
        assert!(sol.durations.iter().all(|&d| d > 0.0));
        assert!(sol.audit.imbalance.abs() < 1e-6, "{:?}", sol.audit);
        assert!(sol.efficiency > 0.0 && sol.efficiency <= 1.0);
    }

    #[test]
    fn lossless_efficiency_is_one() {
        let mut m = reference_twin();
        m.branches[0].r_m = 0.0;
        let (fs, fp) = resonance_freqs(&m).unwrap();
        let sol = solve_pss(&spec(0.5 * (fs + fp)), &m).unwrap();
        assert_eq!(sol.p_loss, 0.0);
        assert_eq!(sol.efficiency, 1.0);
    }

    #[test]
    fn band_is_enforced() {
        let m = reference_twin();
        assert!(matches!(solve_pss(&spec(10.0e6), &m), Err(ConverterError::Band { .. })));
        let mut s = spec(10.5e6);
        s.v_out = 50.0;
        assert!(matches!(solve_pss(&s, &m), Err(ConverterError::Spec(_))));
        s = spec(10.5e6);
        s.stages = vec![StageDef::clamped(40.0), StageDef::clamped(30.0), StageDef::open()];
        assert!(matches!(solve_pss(&s, &m), Err(ConverterError::Spec(_))));
    }

    #[test]
    fn stage_file_format() {
        let st = default_stages(40.0, 30.0);
        let text = serde_json::to_string(&st).unwrap();
        assert!(text.contains("\"open\""));
        assert!(text.contains("{\"clamped\":30.0}"));
        let back: Vec<StageDef> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, st);
        let plain: Vec<StageDef> = serde_json::from_str(r#"[{"clamped": 40}, "open"]"#).unwrap();
        assert_eq!(plain, vec![StageDef::clamped(40.0), StageDef::open()]);
    }

    #[test]
    fn local_equivalent_is_exact_for_one_branch() {
        let m = reference_twin();
        let eq = local_equivalent(&m, 10.7e6).unwrap();
        let (a, b) = (eq.branches[0], m.branches[0]);
        assert!((a.r_m - b.r_m).abs() <= 1e-9 * b.r_m);
        assert!((a.l_m - b.l_m).abs() <= 1e-9 * b.l_m);
        assert!((a.c_m - b.c_m).abs() <= 1e-9 * b.c_m);
    }

    #[test]
    fn waveform_has_enough_points() {
        let m = reference_twin();
        let sol = solve_pss(&spec(10.7e6), &m).unwrap();
        let w = sample_waveform(&sol, &m, 10).unwrap();
        assert_eq!(w.len(), 200);
        assert_eq!(w[0].stage_index, 0);
        assert_eq!(w[199].stage_index, 5);
        assert!(w.windows(2).all(|p| p[1].t_s > p[0].t_s));
    }

    #[test]
    fn sweep_grid_helper() {
        let m = reference_twin();
        let (fs, fp) = resonance_freqs(&m).unwrap();
        let g = linspace(fs, fp, 6);
        let pts = power_sweep(&spec(g[1]), &m, &g[1..5]);
        assert_eq!(pts.len(), 4);
        assert!(pts.iter().all(|p| p.converged), "{pts:?}");
    }
}
