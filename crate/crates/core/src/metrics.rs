//! Resonator figures of merit: Bode Q from reflection group delay, coupling
//! from the resonance pair, the spur-suppressed band and the published
//! state-of-the-art comparison table.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvd::{self, BvdModel};
use crate::sweep::{find_resonances, interp, linspace, ImpedanceSweep, ResonanceError};

pub const DEFAULT_THRESHOLD: f64 = 20.0;

/// Closest |Gamma| may come to 1 before the data is declared non-passive.
pub const GAMMA_MARGIN: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("series resonance {fs} Hz must lie below parallel resonance {fp} Hz")]
    Ordering { fs: f64, fp: f64 },
    #[error("|Gamma| = {magnitude} at point {index} is not below 1 (non-passive data)")]
    Reflection { index: usize, magnitude: f64 },
    #[error("Bode Q needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("sweep [{lo}, {hi}] Hz does not cover [{fs}, {fp}] Hz")]
    Coverage { lo: f64, hi: f64, fs: f64, fp: f64 },
    #[error("threshold multiplier must be >= 1, got {0}")]
    Threshold(f64),
    #[error("minimum resistance {0} ohm in the band is not positive")]
    NonPassive(f64),
    #[error("coupling {0} falls outside [0, 1)")]
    CouplingRange(f64),
    #[error(transparent)]
    Resonance(#[from] ResonanceError),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

/// How `k_r^2` is derived from `(fs, fp)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KConvention {
    /// `(pi^2/8) (fp^2 - fs^2) / fs^2`
    #[default]
    PiSquaredOver8,
    /// `(fp^2 - fs^2) / fp^2`
    FpSquared,
    /// `(pi/2)(fs/fp) tan((pi/2)(fp - fs)/fp)`
    Tangent,
}

impl KConvention {
    pub fn name(&self) -> &'static str {
        match self {
            KConvention::PiSquaredOver8 => "pi_squared_over8",
            KConvention::FpSquared => "fp_squared",
            KConvention::Tangent => "tangent",
        }
    }
}

impl std::str::FromStr for KConvention {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pi_squared_over8" | "pi2_8" => Ok(KConvention::PiSquaredOver8),
            "fp_squared" => Ok(KConvention::FpSquared),
            "tangent" => Ok(KConvention::Tangent),
            _ => Err(format!(
                "unknown k^2 convention '{s}' (pi_squared_over8, fp_squared, tangent)"
            )),
        }
    }
}

pub fn coupling_from_freqs(fs_hz: f64, fp_hz: f64) -> Result<f64, MetricsError> {
    coupling_from_freqs_with(fs_hz, fp_hz, KConvention::PiSquaredOver8)
}

pub fn coupling_from_freqs_with(
    fs_hz: f64,
    fp_hz: f64,
    convention: KConvention,
) -> Result<f64, MetricsError> {
    if !(fs_hz > 0.0 && fs_hz < fp_hz && fp_hz.is_finite()) {
        return Err(MetricsError::Ordering { fs: fs_hz, fp: fp_hz });
    }
    let r = fs_hz / fp_hz;
    Ok(match convention {
        KConvention::PiSquaredOver8 => PI * PI / 8.0 * (fp_hz * fp_hz - fs_hz * fs_hz) / (fs_hz * fs_hz),
        KConvention::FpSquared => (fp_hz * fp_hz - fs_hz * fs_hz) / (fp_hz * fp_hz),
        KConvention::Tangent => 0.5 * PI * r * (0.5 * PI * (1.0 - r)).tan(),
    })
}

/// Parallel resonance implied by `fs` and `k_r^2` under the default
/// convention.
pub fn fp_from_coupling(fs_hz: f64, k_sq: f64) -> f64 {
    fs_hz * (1.0 + 8.0 * k_sq / (PI * PI)).sqrt()
}

pub fn fom(q: f64, k_sq: f64) -> f64 {
    q * k_sq
}

/// Bode Q on every grid point, `Q = w tau |G| / (1 - |G|^2)`.
pub fn bode_q(sweep: &ImpedanceSweep) -> Result<Vec<(f64, f64)>, MetricsError> {
    let n = sweep.len();
    if n < 3 {
        return Err(MetricsError::TooFewPoints(n));
    }
    let zr = sweep.ref_ohm();
    let gamma: Vec<Complex64> = sweep.z_ohm().iter().map(|z| (z - zr) / (z + zr)).collect();
    for (index, g) in gamma.iter().enumerate() {
        let magnitude = g.norm();
        if !(magnitude < 1.0 - GAMMA_MARGIN) {
            return Err(MetricsError::Reflection { index, magnitude });
        }
    }
    let mut phase: Vec<f64> = gamma.iter().map(|g| g.arg()).collect();
    for k in 1..n {
        let d = phase[k] - phase[k - 1];
        let wraps = (d / (2.0 * PI)).round();
        phase[k] -= wraps * 2.0 * PI;
    }
    let w: Vec<f64> = sweep.freq_hz().iter().map(|f| 2.0 * PI * f).collect();
    Ok((0..n)
        .map(|k| {
            let (a, b) = match k {
                0 => (0, 1),
                _ if k == n - 1 => (n - 2, n - 1),
                _ => (k - 1, k + 1),
            };
            let tau = -(phase[b] - phase[a]) / (w[b] - w[a]);
            let m = gamma[k].norm();
            (sweep.freq_hz()[k], w[k] * tau * m / (1.0 - m * m))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuppressedRegion {
    pub f_lo: f64,
    pub f_hi: f64,
    pub width_hz: f64,
    pub fractional: f64,
    /// Minimum resistance inside `[fs, fp]`.
    pub r_min_ohm: f64,
}

/// Contiguous band around the resistance minimum where
/// `Re Z <= threshold * R_min`, clipped to `[fs, fp]`.
pub fn suppressed_region(
    sweep: &ImpedanceSweep,
    fs_hz: f64,
    fp_hz: f64,
    threshold: f64,
) -> Result<SuppressedRegion, MetricsError> {
    if !(fs_hz < fp_hz) {
        return Err(MetricsError::Ordering { fs: fs_hz, fp: fp_hz });
    }
    if !(threshold >= 1.0) {
        return Err(MetricsError::Threshold(threshold));
    }
    let f = sweep.freq_hz();
    let n = f.len();
    let coverage = || MetricsError::Coverage {
        lo: f[0],
        hi: f[n - 1],
        fs: fs_hz,
        fp: fp_hz,
    };
    if f[0] > fs_hz || f[n - 1] < fp_hz {
        return Err(coverage());
    }
    let re: Vec<f64> = sweep.z_ohm().iter().map(|z| z.re).collect();
    let inside: Vec<usize> = (0..n).filter(|&k| f[k] >= fs_hz && f[k] <= fp_hz).collect();
    let Some(&i_min) = inside.iter().min_by(|&&a, &&b| re[a].total_cmp(&re[b])) else {
        return Err(coverage());
    };
    let r_min = re[i_min];
    if !(r_min > 0.0) {
        return Err(MetricsError::NonPassive(r_min));
    }
    let level = threshold * r_min;
    let cross = |a: usize, b: usize| {
        let (ra, rb) = (re[a], re[b]);
        if rb == ra {
            f[a]
        } else {
            f[a] + (level - ra) * (f[b] - f[a]) / (rb - ra)
        }
    };
    let mut lo = i_min;
    while lo > 0 && re[lo - 1] <= level {
        lo -= 1;
    }
    let f_lo = if lo == 0 { f[0] } else { cross(lo - 1, lo) };
    let mut hi = i_min;
    while hi + 1 < n && re[hi + 1] <= level {
        hi += 1;
    }
    let f_hi = if hi + 1 == n { f[n - 1] } else { cross(hi, hi + 1) };
    let f_lo = f_lo.clamp(fs_hz, fp_hz);
    let f_hi = f_hi.clamp(fs_hz, fp_hz);
    let width_hz = f_hi - f_lo;
    Ok(SuppressedRegion {
        f_lo,
        f_hi,
        width_hz,
        fractional: width_hz / (fp_hz - fs_hz),
        r_min_ohm: r_min,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSettings {
    pub threshold: f64,
    pub k_sq_convention: KConvention,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        ScoreSettings {
            threshold: DEFAULT_THRESHOLD,
            k_sq_convention: KConvention::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QBand {
    pub f_lo: f64,
    pub f_hi: f64,
    pub median_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonatorScore {
    pub fs_hz: f64,
    pub fp_hz: f64,
    pub k_r_sq: f64,
    pub q_bode_at_fs: f64,
    pub q_bode_band: QBand,
    pub fom: f64,
    pub supp_lo_hz: f64,
    pub supp_hi_hz: f64,
    pub supp_width_hz: f64,
    pub fractional_supp: f64,
}

impl ResonatorScore {
    pub fn check(&self) -> Result<(), MetricsError> {
        let fail = |m: &str| Err(MetricsError::Invariant(m.to_string()));
        if !(self.fs_hz < self.fp_hz) {
            return fail("fs < fp");
        }
        if !(self.supp_lo_hz <= self.supp_hi_hz) {
            return fail("supp_lo <= supp_hi");
        }
        if !(0.0..=1.0).contains(&self.fractional_supp) {
            return fail("0 <= fractional_supp <= 1");
        }
        if self.fom != self.q_bode_at_fs * self.k_r_sq {
            return fail("fom = q * k^2");
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn score(sweep: &ImpedanceSweep) -> Result<ResonatorScore, MetricsError> {
    score_with(sweep, &ScoreSettings::default())
}

pub fn score_with(
    sweep: &ImpedanceSweep,
    settings: &ScoreSettings,
) -> Result<ResonatorScore, MetricsError> {
    let (fs, fp) = find_resonances(sweep)?;
    let k = coupling_from_freqs_with(fs, fp, settings.k_sq_convention)?;
    if !(0.0..1.0).contains(&k) {
        return Err(MetricsError::CouplingRange(k));
    }
    let q = bode_q(sweep)?;
    let qf: Vec<f64> = q.iter().map(|p| p.0).collect();
    let qv: Vec<f64> = q.iter().map(|p| p.1).collect();
    let q_fs = interp(&qf, &qv, fs);
    let region = suppressed_region(sweep, fs, fp, settings.threshold)?;
    let in_band: Vec<f64> = q
        .iter()
        .filter(|p| p.0 >= region.f_lo && p.0 <= region.f_hi)
        .map(|p| p.1)
        .collect();
    let median_q = if in_band.is_empty() {
        interp(&qf, &qv, 0.5 * (region.f_lo + region.f_hi))
    } else {
        median(in_band)
    };
    let s = ResonatorScore {
        fs_hz: fs,
        fp_hz: fp,
        k_r_sq: k,
        q_bode_at_fs: q_fs,
        q_bode_band: QBand {
            f_lo: region.f_lo,
            f_hi: region.f_hi,
            median_q,
        },
        fom: fom(q_fs, k),
        supp_lo_hz: region.f_lo,
        supp_hi_hz: region.f_hi,
        supp_width_hz: region.width_hz,
        fractional_supp: region.fractional,
    };
    s.check()?;
    Ok(s)
}

/// Series resonance of the reference device.
pub const TWIN_FS_HZ: f64 = 10.14e6;
/// Suppressed width and fraction of the reference device.
pub const TWIN_SUPP_WIDTH_HZ: f64 = 0.72e6;
pub const TWIN_FRACTIONAL: f64 = 0.62;
pub const TWIN_Q: f64 = 4000.0;
pub const TWIN_C0_F: f64 = 100e-12;

/// Single-branch circuit reproducing the reference row of the comparison
/// table: `fp = fs + width / fraction`, `Q = 4000`, `C0 = 100 pF`.
pub fn reference_twin() -> BvdModel {
    BvdModel::from_resonances(
        TWIN_FS_HZ,
        TWIN_FS_HZ + TWIN_SUPP_WIDTH_HZ / TWIN_FRACTIONAL,
        TWIN_Q,
        TWIN_C0_F,
        "twin",
    )
    .expect("twin parameters are valid")
}

/// Grid used to score the twin: 9.6 to 12.0 MHz at 100 Hz.
pub fn twin_grid() -> Vec<f64> {
    linspace(9.6e6, 12.0e6, 24_001)
}

pub fn reference_twin_sweep() -> ImpedanceSweep {
    bvd::impedance(&reference_twin(), &twin_grid()).expect("twin grid is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoaRow {
    pub reference: String,
    pub fs_mhz: Option<f64>,
    pub k_r_sq: Option<f64>,
    pub q: Option<f64>,
    pub fom: Option<f64>,
    pub supp_region_mhz: Option<f64>,
    pub fractional_supp: Option<f64>,
}

fn row(
    reference: &str,
    fs_mhz: f64,
    k_r_sq: f64,
    q: Option<f64>,
    fom: Option<f64>,
    supp: Option<f64>,
    frac: Option<f64>,
) -> SoaRow {
    SoaRow {
        reference: reference.to_string(),
        fs_mhz: Some(fs_mhz),
        k_r_sq: Some(k_r_sq),
        q,
        fom,
        supp_region_mhz: supp,
        fractional_supp: frac,
    }
}

/// Published piezoelectric power-converter resonators.
#[allow(clippy::approx_constant)] // 6.28 MHz is a table entry
pub fn soa_table() -> Vec<SoaRow> {
    vec![
        row("PZT-radial [34]", 0.48, 0.19, Some(1030.0), Some(196.0), Some(0.015), Some(0.429)),
        row("LN-TS [35]", 3.55, 0.53, None, None, None, None),
        row("LN-TS [36]", 5.94, 0.45, Some(3500.0), Some(1575.0), Some(0.37), Some(0.349)),
        row("LN-TE [31]", 6.28, 0.255, Some(3700.0), Some(944.0), None, None),
        row("LN-TE [32]", 6.82, 0.29, Some(4178.0), Some(1212.0), Some(0.027), Some(0.0338)),
        row("LN-TE [This work]", 10.14, 0.30, Some(4000.0), Some(1200.0), Some(0.72), Some(0.62)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRow {
    pub rank: usize,
    pub user: bool,
    #[serde(flatten)]
    pub row: SoaRow,
}

pub fn score_row(score: &ResonatorScore, label: &str) -> SoaRow {
    SoaRow {
        reference: label.to_string(),
        fs_mhz: Some(score.fs_hz / 1e6),
        k_r_sq: Some(score.k_r_sq),
        q: Some(score.q_bode_at_fs),
        fom: Some(score.fom),
        supp_region_mhz: Some(score.supp_width_hz / 1e6),
        fractional_supp: Some(score.fractional_supp),
    }
}

/// Descending order with missing values last.
fn desc(a: Option<f64>, b: Option<f64>) -> std::cmp::Ordering {
    use std::cmp::Ordering::*;
    match (a, b) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Less,
        (None, Some(_)) => Greater,
        (None, None) => Equal,
    }
}

/// The table plus the user's device, ranked by fractional suppressed
/// region and then by FoM.
pub fn compare(score: &ResonatorScore, label: &str) -> Vec<RankedRow> {
    let mut rows: Vec<(bool, SoaRow)> = soa_table().into_iter().map(|r| (false, r)).collect();
    rows.push((true, score_row(score, label)));
    rows.sort_by(|a, b| {
        desc(a.1.fractional_supp, b.1.fractional_supp).then(desc(a.1.fom, b.1.fom))
    });
    rows.into_iter()
        .enumerate()
        .map(|(i, (user, row))| RankedRow {
            rank: i + 1,
            user,
            row,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvd::{inject_spurs, BvdBranch, Spur};

    fn scaled_twin(alpha: f64) -> (BvdModel, Vec<f64>) {
        let t = reference_twin();
        let b = t.branches[0];
        // scaling every frequency by alpha: l -> l/alpha keeps impedances
        let m = BvdModel::new(
            t.c0 / alpha,
            vec![BvdBranch::new(b.r_m, b.l_m / alpha, b.c_m / alpha)],
            "scaled",
        )
        .unwrap();
        (m, twin_grid().iter().map(|f| f * alpha).collect())
    }

    #[test]
    fn coupling_examples() {
        let fs = 10.14e6;
        let fp = fs + 0.72e6 / 0.62;
        let k = coupling_from_freqs(fs, fp).unwrap();
        assert!((k - 0.2988).abs() < 5e-4, "{k}");
        assert!(coupling_from_freqs(fs, fs * (1.0 + 1e-12)).unwrap() < 1e-10);
        assert!(matches!(
            coupling_from_freqs(fs, fs),
            Err(MetricsError::Ordering { .. })
        ));
        let fp45 = fp_from_coupling(5.94e6, 0.45);
        assert!((coupling_from_freqs(5.94e6, fp45).unwrap() - 0.45).abs() < 1e-12);
        assert!((fp45 - 6.939e6).abs() < 1e3, "{fp45}");
    }

    #[test]
    fn alternative_conventions() {
        let fs = 10.14e6;
        let fp = fs + 0.72e6 / 0.62;
        let a = coupling_from_freqs_with(fs, fp, KConvention::FpSquared).unwrap();
        assert!((a - 0.195).abs() < 2e-3, "{a}");
        let b = coupling_from_freqs_with(fs, fp, KConvention::Tangent).unwrap();
        assert!((b - 0.23).abs() < 1e-2, "{b}");
    }

    #[test]
    fn fom_examples() {
        assert_eq!(fom(4000.0, 0.30), 1200.0);
        assert!((fom(3500.0, 0.45) - 1575.0).abs() < 1e-9);
        assert_eq!(fom(0.0, 0.3), 0.0);
    }

    #[test]
    fn bode_q_recovers_unloaded_q() {
        let sw = reference_twin_sweep();
        let q = bode_q(&sw).unwrap();
        let f: Vec<f64> = q.iter().map(|p| p.0).collect();
        let v: Vec<f64> = q.iter().map(|p| p.1).collect();
        let got = interp(&f, &v, TWIN_FS_HZ);
        assert!((got - 4000.0).abs() / 4000.0 < 0.05, "{got}");
    }

    #[test]
    fn bode_q_invariant_under_common_scaling() {
        let sw = reference_twin_sweep();
        let k = 7.3;
        let scaled = ImpedanceSweep::new(
            sw.freq_hz().to_vec(),
            sw.z_ohm().iter().map(|z| z * k).collect(),
            sw.ref_ohm() * k,
        )
        .unwrap();
        let a = bode_q(&sw).unwrap();
        let b = bode_q(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.1 - y.1).abs() <= 1e-9 * x.1.abs().max(1.0));
        }
    }

    #[test]
    fn bode_q_agrees_with_half_power_bandwidth() {
        let m = reference_twin();
        let sw = reference_twin_sweep();
        let g: Vec<f64> = sw.z_ohm().iter().map(|z| (1.0 / z).re).collect();
        let f = sw.freq_hz();
        let ip = (0..g.len()).max_by(|&a, &b| g[a].total_cmp(&g[b])).unwrap();
        let half = g[ip] / 2.0;
        let lo = (0..ip).rev().find(|&k| g[k] < half).unwrap();
        let hi = (ip..g.len()).find(|&k| g[k] < half).unwrap();
        let q_bw = f[ip] / (f[hi] - f[lo]);
        let q = bode_q(&sw).unwrap();
        let qb = q[ip].1;
        assert!((qb - q_bw).abs() / q_bw < 0.1, "{qb} vs {q_bw}");
        assert!((m.branches[0].q() - 4000.0).abs() < 1e-9);
    }

    #[test]
    fn non_passive_reflection_rejected() {
        let sw = ImpedanceSweep::new(
            vec![1.0, 2.0, 3.0],
            vec![Complex64::new(-1.0, 0.0); 3],
            50.0,
        )
        .unwrap();
        assert!(matches!(bode_q(&sw), Err(MetricsError::Reflection { index: 0, .. })));
    }

    #[test]
    fn region_threshold_monotone_and_limit() {
        let sw = reference_twin_sweep();
        let (fs, fp) = find_resonances(&sw).unwrap();
        let mut last = 0.0;
        for t in [5.0, 10.0, 20.0, 50.0] {
            let r = suppressed_region(&sw, fs, fp, t).unwrap();
            assert!(r.width_hz >= last);
            last = r.width_hz;
        }
        let r = suppressed_region(&sw, fs, fp, f64::INFINITY).unwrap();
        assert_eq!(r.fractional, 1.0);
        assert!(matches!(
            suppressed_region(&sw, 9.0e6, fp, 20.0),
            Err(MetricsError::Coverage { .. })
        ));
    }

    #[test]
    fn spur_shrinks_region() {
        let twin = reference_twin();
        let clean = reference_twin_sweep();
        let (fs, fp) = find_resonances(&clean).unwrap();
        let base = suppressed_region(&clean, fs, fp, 20.0).unwrap();
        let spurred = inject_spurs(
            &twin,
            &[Spur {
                f_hz: 0.5 * (fs + fp),
                coupling: 0.005,
                q: 100.0,
            }],
        )
        .unwrap();
        let sw = bvd::impedance(&spurred, &twin_grid()).unwrap();
        let r = suppressed_region(&sw, fs, fp, 20.0).unwrap();
        assert!(r.fractional < base.fractional);
    }

    #[test]
    fn twin_score_and_determinism() {
        let sw = reference_twin_sweep();
        let a = score(&sw).unwrap();
        let b = score(&sw).unwrap();
        assert_eq!(a, b);
        assert!((a.fom - 1200.0).abs() / 1200.0 < 0.05, "{a:?}");
        assert!((a.k_r_sq - 0.30).abs() < 0.005);
        assert_eq!(a.fom, a.q_bode_at_fs * a.k_r_sq);
    }

    #[test]
    fn bare_capacitor_score_fails() {
        let m = BvdModel::new(1e-10, vec![], "").unwrap();
        let sw = bvd::impedance(&m, &linspace(9e6, 12e6, 500)).unwrap();
        assert_eq!(score(&sw), Err(MetricsError::Resonance(ResonanceError::NotFound)));
    }

    #[test]
    fn frequency_scaling_covariance() {
        let base = score(&reference_twin_sweep()).unwrap();
        let alpha = 3.7;
        let (m, grid) = scaled_twin(alpha);
        let s = score(&bvd::impedance(&m, &grid).unwrap()).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        assert!(rel(s.fs_hz, alpha * base.fs_hz) < 1e-6);
        assert!(rel(s.fp_hz, alpha * base.fp_hz) < 1e-6);
        assert!(rel(s.supp_width_hz, alpha * base.supp_width_hz) < 1e-6);
        assert!(rel(s.k_r_sq, base.k_r_sq) < 1e-6);
        assert!(rel(s.fractional_supp, base.fractional_supp) < 1e-6);
        assert!(rel(s.q_bode_at_fs, base.q_bode_at_fs) < 1e-6);
    }

    #[test]
    fn soa_rows_verbatim() {
        let t = soa_table();
        assert_eq!(t.len(), 6);
        let pzt = &t[0];
        assert_eq!(pzt.reference, "PZT-radial [34]");
        assert_eq!(pzt.fs_mhz, Some(0.48));
        assert_eq!(pzt.k_r_sq, Some(0.19));
        assert_eq!(pzt.q, Some(1030.0));
        assert_eq!(pzt.fom, Some(196.0));
        assert_eq!(pzt.supp_region_mhz, Some(0.015));
        assert_eq!(pzt.fractional_supp, Some(0.429));
        let ts = &t[1];
        assert_eq!(ts.k_r_sq, Some(0.53));
        assert!(ts.q.is_none() && ts.fom.is_none() && ts.supp_region_mhz.is_none());
        for r in &t {
            for v in [r.fs_mhz, r.k_r_sq, r.q, r.fom, r.supp_region_mhz, r.fractional_supp]
                .into_iter()
                .flatten()
            {
                assert!(v > 0.0);
            }
        }
    }

    #[test]
    fn compare_ranks_twin_first() {
        let s = score(&reference_twin_sweep()).unwrap();
        let ranked = compare(&s, "twin");
        assert_eq!(ranked.len(), 7);
        assert!(ranked[0].user);
        let tabled: Vec<Option<f64>> = ranked
            .iter()
            .filter(|r| !r.user)
            .map(|r| r.row.fractional_supp)
            .collect();
        assert_eq!(
            &tabled[..4],
            &[Some(0.62), Some(0.429), Some(0.349), Some(0.0338)]
        );
        assert!(tabled[4..].iter().all(Option::is_none));
    }
}
