//! Frequency-domain impedance data shared by every module, and the
//! series/parallel resonance locator.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_REF_OHM: f64 = 50.0;

#[derive(Debug, Error, PartialEq)]
pub enum SweepError {
    #[error("sweep is empty")]
    Empty,
    #[error("frequency and impedance arrays differ in length ({freq} vs {z})")]
    Length { freq: usize, z: usize },
    #[error("frequency at index {index} is not positive and finite")]
    Frequency { index: usize },
    #[error("frequency at index {index} does not increase")]
    Order { index: usize },
    #[error("impedance at index {index} is not finite")]
    Impedance { index: usize },
    #[error("reference impedance must be positive and finite, got {0}")]
    Reference(f64),
}

#[derive(Debug, Error, PartialEq)]
pub enum ResonanceError {
    #[error("no |Z| minimum followed by a maximum inside the sweep")]
    NotFound,
}

/// Complex impedance sampled on a strictly increasing frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceSweep {
    freq_hz: Vec<f64>,
    z_ohm: Vec<Complex64>,
    ref_ohm: f64,
}

impl ImpedanceSweep {
    pub fn new(freq_hz: Vec<f64>, z_ohm: Vec<Complex64>, ref_ohm: f64) -> Result<Self, SweepError> {
        if freq_hz.len() != z_ohm.len() {
            return Err(SweepError::Length {
                freq: freq_hz.len(),
                z: z_ohm.len(),
            });
        }
        if freq_hz.is_empty() {
            return Err(SweepError::Empty);
        }
        if !(ref_ohm > 0.0 && ref_ohm.is_finite()) {
            return Err(SweepError::Reference(ref_ohm));
        }
        for (index, f) in freq_hz.iter().enumerate() {
            if !(*f > 0.0 && f.is_finite()) {
                return Err(SweepError::Frequency { index });
            }
            if index > 0 && *f <= freq_hz[index - 1] {
                return Err(SweepError::Order { index });
            }
        }
        if let Some(index) = z_ohm.iter().position(|z| !z.is_finite()) {
            return Err(SweepError::Impedance { index });
        }
        Ok(ImpedanceSweep {
            freq_hz,
            z_ohm,
            ref_ohm,
        })
    }

    /// Evaluates `z` on every grid point.
    pub fn from_fn(
        freq_hz: Vec<f64>,
        ref_ohm: f64,
        z: impl Fn(f64) -> Complex64,
    ) -> Result<Self, SweepError> {
        let zs = freq_hz.iter().map(|&f| z(f)).collect();
        Self::new(freq_hz, zs, ref_ohm)
    }

    pub fn freq_hz(&self) -> &[f64] {
        &self.freq_hz
    }

    pub fn z_ohm(&self) -> &[Complex64] {
        &self.z_ohm
    }

    pub fn ref_ohm(&self) -> f64 {
        self.ref_ohm
    }

    pub fn len(&self) -> usize {
        self.freq_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq_hz.is_empty()
    }

    pub fn with_ref_ohm(mut self, ref_ohm: f64) -> Result<Self, SweepError> {
        if !(ref_ohm > 0.0 && ref_ohm.is_finite()) {
            return Err(SweepError::Reference(ref_ohm));
        }
        self.ref_ohm = ref_ohm;
        Ok(self)
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n).map(|k| lo + step * k as f64).collect();
            v[n - 1] = hi;
            v
        }
    }
}

/// Vertex abscissa offset (in grid steps, within [-1, 1]) of the parabola
/// through three equally weighted samples at -1, 0, +1.
fn vertex_offset(ym: f64, y0: f64, yp: f64) -> Option<f64> {
    let denom = ym - 2.0 * y0 + yp;
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    let t = 0.5 * (ym - yp) / denom;
    (t.is_finite() && t.abs() <= 1.0).then_some(t)
}

/// Refines an interior extremum at grid index `i` with a quadratic through
/// `(f, log|Z|)` at `i-1, i, i+1` (non-uniform spacing allowed).
fn refine(f: &[f64], y: &[f64], i: usize) -> f64 {
    let (x0, x1, x2) = (f[i - 1], f[i], f[i + 1]);
    let (y0, y1, y2) = (y[i - 1], y[i], y[i + 1]);
    if !(y0.is_finite() && y1.is_finite() && y2.is_finite()) {
        return x1;
    }
    if ((x1 - x0) - (x2 - x1)).abs() <= 1e-9 * (x2 - x0) {
        return match vertex_offset(y0, y1, y2) {
            Some(t) => x1 + t * 0.5 * (x2 - x0),
            None => x1,
        };
    }
    // divided differences for the general case
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let a = (d12 - d01) / (x2 - x0);
    if a == 0.0 || !a.is_finite() {
        return x1;
    }
    let b = d01 - a * (x0 + x1);
    let v = -b / (2.0 * a);
    if v.is_finite() && v >= x0 && v <= x2 {
        v
    } else {
        x1
    }
}

/// Series (global |Z| minimum) and parallel (dominant |Z| maximum above it)
/// resonance frequencies.
///
/// The parallel peak is searched upward from `fs`; the scan stops at the
/// first local minimum that falls below the log-midpoint between the `fs`
/// level and the highest peak seen so far, so a weak spur peak inside the
/// inductive band is not mistaken for the antiresonance.
pub fn find_resonances(sweep: &ImpedanceSweep) -> Result<(f64, f64), ResonanceError> {
    let f = sweep.freq_hz();
    let y: Vec<f64> = sweep.z_ohm().iter().map(|z| z.norm().ln()).collect();
    let n = y.len();
    if n < 3 {
        return Err(ResonanceError::NotFound);
    }
    let mut i_s = 0;
    for (i, v) in y.iter().enumerate() {
        if *v < y[i_s] {
            i_s = i;
        }
    }
    if i_s == 0 || i_s + 1 >= n {
        return Err(ResonanceError::NotFound);
    }
    let floor = y[i_s];
    let mut best: Option<usize> = None;
    for j in i_s + 1..n - 1 {
        if y[j] >= y[j - 1] && y[j] > y[j + 1] && best.is_none_or(|b| y[j] > y[b]) {
            best = Some(j);
        }
        if let Some(b) = best {
            let is_min = y[j] <= y[j - 1] && y[j] < y[j + 1];
            if is_min && y[j] < 0.5 * (floor + y[b]) {
                break;
            }
        }
    }
    let i_p = best.ok_or(ResonanceError::NotFound)?;
    let fs = refine(f, &y, i_s);
    let fp = refine(f, &y, i_p);
    if fs < fp {
        Ok((fs, fp))
    } else {
        Err(ResonanceError::NotFound)
    }
}

/// Linear interpolation of `(x, y)` samples at `x0`; `x` must be increasing.
pub fn interp(x: &[f64], y: &[f64], x0: f64) -> f64 {
    let n = x.len();
    if n == 0 {
        return f64::NAN;
    }
    if x0 <= x[0] {
        return y[0];
    }
    if x0 >= x[n - 1] {
        return y[n - 1];
    }
    let k = x.partition_point(|&v| v <= x0);
    let (xa, xb, ya, yb) = (x[k - 1], x[k], y[k - 1], y[k]);
    ya + (yb - ya) * (x0 - xa) / (xb - xa)
}
