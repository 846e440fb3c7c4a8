//! Anisotropic material constants, rotated-Y cut transformations and the
//! thickness-mode coupling coefficients derived from them.
//!
//! Constants use Voigt notation with the index map
//! `11 -> 1, 22 -> 2, 33 -> 3, 23 -> 4, 13 -> 5, 12 -> 6`.
//!
//! Two frames matter here. [`rotate_constants`] applies the plain rotation
//! about crystal X, so the rotated plate normal (Y') is axis 2 of its
//! output. The coupling coefficients are read in the *plate frame*
//! returned by [`plate_constants`], a cyclic relabeling of that rotated
//! frame in which axis 3 is the plate normal, axis 1 is the in-plane
//! direction inside the crystal Y-Z plane and axis 2 is crystal X. In that
//! frame `e33`, `c33`, `eps33` describe the thickness-extensional mode and
//! `e35`, `c55` the piezoelectrically active thickness-shear mode.

use nalgebra::{Matrix3, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Stiffness = SMatrix<f64, 6, 6>;
pub type Piezo = SMatrix<f64, 3, 6>;
pub type Permittivity = Matrix3<f64>;

/// Direction-cosine matrix: row `i` holds new axis `i` in old coordinates.
pub type Rotation = Matrix3<f64>;

const CANONICAL_LINBO3: &str = include_str!("../data/linbo3_warner1967.json");

#[derive(Debug, Error, PartialEq)]
pub enum MaterialsError {
    #[error("stiffness matrix is not symmetric positive definite")]
    Stiffness,
    #[error("permittivity matrix is not symmetric positive definite")]
    Permittivity,
    #[error("density must be positive, got {0}")]
    Density(f64),
    #[error("{field}: expected {expected} numbers, got {got}")]
    Shape {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty angle range: theta_min {min} >= theta_max {max}")]
    EmptyRange { min: f64, max: f64 },
    #[error("scan step must be positive and finite, got {0}")]
    Step(f64),
    #[error("malformed material file: {0}")]
    Json(String),
}

/// Full elastic, piezoelectric and dielectric description of a crystal in
/// some Cartesian frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialConstantSet {
    pub name: String,
    /// c^E, Pa.
    pub stiffness: Stiffness,
    /// e, C/m^2.
    pub piezo: Piezo,
    /// Clamped permittivity eps^S, F/m.
    pub permittivity: Permittivity,
    /// kg/m^3.
    pub density: f64,
}

/// On-disk layout of a material constant file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialFile {
    pub name: String,
    pub density_kg_m3: f64,
    pub stiffness_pa: Vec<f64>,
    pub piezo_c_m2: Vec<f64>,
    pub permittivity_f_m: Vec<f64>,
}

fn check_len(field: &'static str, v: &[f64], expected: usize) -> Result<(), MaterialsError> {
    if v.len() != expected {
        return Err(MaterialsError::Shape {
            field,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

impl MaterialConstantSet {
    /// Builds a set and checks its invariants.
    pub fn new(
        name: impl Into<String>,
        stiffness: Stiffness,
        piezo: Piezo,
        permittivity: Permittivity,
        density: f64,
    ) -> Result<Self, MaterialsError> {
        let m = MaterialConstantSet {
            name: name.into(),
            stiffness,
            piezo,
            permittivity,
            density,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), MaterialsError> {
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(MaterialsError::Density(self.density));
        }
        if !is_spd(&self.stiffness) {
            return Err(MaterialsError::Stiffness);
        }
        if !is_spd(&self.permittivity) {
            return Err(MaterialsError::Permittivity);
        }
        if self.piezo.iter().any(|x| !x.is_finite()) {
            return Err(MaterialsError::Json("non-finite piezo entry".into()));
        }
        Ok(())
    }

    /// Congruent LiNbO3 in the crystal frame (Warner, Onoe & Coquin,
    /// J. Acoust. Soc. Am. 42, 1223 (1967)).
    pub fn linbo3() -> Self {
        Self::from_json(CANONICAL_LINBO3).expect("bundled LiNbO3 constants are valid")
    }

    pub fn from_file(file: &MaterialFile) -> Result<Self, MaterialsError> {
        check_len("stiffness_pa", &file.stiffness_pa, 36)?;
        check_len("piezo_c_m2", &file.piezo_c_m2, 18)?;
        check_len("permittivity_f_m", &file.permittivity_f_m, 9)?;
        Self::new(
            file.name.clone(),
            Stiffness::from_row_slice(&file.stiffness_pa),
            Piezo::from_row_slice(&file.piezo_c_m2),
            Permittivity::from_row_slice(&file.permittivity_f_m),
            file.density_kg_m3,
        )
    }

    pub fn from_json(text: &str) -> Result<Self, MaterialsError> {
        let file: MaterialFile =
            serde_json::from_str(text).map_err(|e| MaterialsError::Json(e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn to_file(&self) -> MaterialFile {
        let rows = |n: usize, m: usize, at: &dyn Fn(usize, usize) -> f64| {
            (0..n)
                .flat_map(|i| (0..m).map(move |j| (i, j)))
                .map(|(i, j)| at(i, j))
                .collect::<Vec<_>>()
        };
        MaterialFile {
            name: self.name.clone(),
            density_kg_m3: self.density,
            stiffness_pa: rows(6, 6, &|i, j| self.stiffness[(i, j)]),
            piezo_c_m2: rows(3, 6, &|i, j| self.piezo[(i, j)]),
            permittivity_f_m: rows(3, 3, &|i, j| self.permittivity[(i, j)]),
        }
    }
}

fn is_spd<const N: usize>(m: &SMatrix<f64, N, N>) -> bool {
    if m.iter().any(|x| !x.is_finite()) {
        return false;
    }
    let scale = m.abs().max();
    if scale == 0.0 {
        return false;
    }
    let tol = 1e-9 * scale;
    for i in 0..N {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    let sym = (m + m.transpose()) * 0.5;
    nalgebra::DMatrix::from_iterator(N, N, sym.iter().copied())
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .all(|&l| l > 0.0)
}

/// A singly rotated Y cut. `theta_deg = 36` is the 36Y cut: plate normal
/// tilted 36 degrees from +Y toward +Z about crystal X.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrystalCut {
    theta_deg: f64,
}

impl CrystalCut {
    /// Angle is reduced to `[0, 180)`.
    pub fn new(theta_deg: f64) -> Self {
        let mut t = theta_deg.rem_euclid(180.0);
        if t >= 180.0 {
            t = 0.0;
        }
        CrystalCut { theta_deg: t }
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta_deg
    }
}

/// Rotation of the frame about crystal X by `theta_deg` (right-handed).
pub fn rotation_about_x(theta_deg: f64) -> Rotation {
    let (s, c) = theta_deg.to_radians().sin_cos();
    Rotation::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}

/// Rotated-Y plate frame: axis 3 along the plate normal.
pub fn plate_rotation(cut: CrystalCut) -> Rotation {
    let (s, c) = cut.theta_deg().to_radians().sin_cos();
    Rotation::new(0.0, -s, c, 1.0, 0.0, 0.0, 0.0, c, s)
}

/// 6x6 Bond stress-transformation matrix for direction cosines `a`.
pub fn bond_matrix(a: &Rotation) -> Stiffness {
    let mut m = Stiffness::zeros();
    // (row pair) for Voigt 4, 5, 6
    const PAIRS: [(usize, usize); 3] = [(1, 2), (2, 0), (0, 1)];
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = a[(i, j)] * a[(i, j)];
        }
        m[(i, 3)] = 2.0 * a[(i, 1)] * a[(i, 2)];
        m[(i, 4)] = 2.0 * a[(i, 2)] * a[(i, 0)];
        m[(i, 5)] = 2.0 * a[(i, 0)] * a[(i, 1)];
    }
    for (r, &(p, q)) in PAIRS.iter().enumerate() {
        for j in 0..3 {
            m[(3 + r, j)] = a[(p, j)] * a[(q, j)];
        }
        m[(3 + r, 3)] = a[(p, 1)] * a[(q, 2)] + a[(p, 2)] * a[(q, 1)];
        m[(3 + r, 4)] = a[(p, 0)] * a[(q, 2)] + a[(p, 2)] * a[(q, 0)];
        m[(3 + r, 5)] = a[(p, 1)] * a[(q, 0)] + a[(p, 0)] * a[(q, 1)];
    }
    m
}

/// Re-expresses `base` in the frame given by direction cosines `a`.
pub fn transform(base: &MaterialConstantSet, a: &Rotation) -> MaterialConstantSet {
    let m = bond_matrix(a);
    let stiffness = m * base.stiffness * m.transpose();
    let piezo = a * base.piezo * m.transpose();
    let permittivity = a * base.permittivity * a.transpose();
    MaterialConstantSet {
        name: base.name.clone(),
        // symmetrize away round-off so downstream invariant checks are exact
        stiffness: (stiffness + stiffness.transpose()) * 0.5,
        piezo,
        permittivity: (permittivity + permittivity.transpose()) * 0.5,
        density: base.density,
    }
}

/// Rotation by an unreduced angle about crystal X.
pub fn rotate_about_x(base: &MaterialConstantSet, theta_deg: f64) -> MaterialConstantSet {
    transform(base, &rotation_about_x(theta_deg))
}

/// Constants in the rotated frame `(X, Y', Z')` of the given cut.
pub fn rotate_constants(base: &MaterialConstantSet, cut: CrystalCut) -> MaterialConstantSet {
    rotate_about_x(base, cut.theta_deg())
}

/// Constants in the plate frame of the given cut (axis 3 = plate normal).
pub fn plate_constants(base: &MaterialConstantSet, cut: CrystalCut) -> MaterialConstantSet {
    transform(base, &plate_rotation(cut))
}

/// Which coupling expression to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingForm {
    /// e^2 / (c eps)
    #[default]
    Literal,
    /// e^2 / (c eps + e^2)
    Stiffened,
}

fn coupling(e: f64, c: f64, eps: f64, form: CouplingForm) -> f64 {
    let num = e * e;
    match form {
        CouplingForm::Literal => num / (c * eps),
        CouplingForm::Stiffened => num / (c * eps + num),
    }
}

/// Thickness-extensional coupling `e33^2 / (c33 eps33)`.
pub fn coupling_te(m: &MaterialConstantSet) -> f64 {
    coupling_te_with(m, CouplingForm::Literal)
}

pub fn coupling_te_with(m: &MaterialConstantSet, form: CouplingForm) -> f64 {
    coupling(
        m.piezo[(2, 2)],
        m.stiffness[(2, 2)],
        m.permittivity[(2, 2)],
        form,
    )
}

/// Thickness-shear coupling `e35^2 / (c55 eps33)`.
pub fn coupling_ts(m: &MaterialConstantSet) -> f64 {
    coupling_ts_with(m, CouplingForm::Literal)
}

pub fn coupling_ts_with(m: &MaterialConstantSet, form: CouplingForm) -> f64 {
    coupling(
        m.piezo[(2, 4)],
        m.stiffness[(4, 4)],
        m.permittivity[(2, 2)],
        form,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingRow {
    pub theta_deg: f64,
    pub k33_sq: f64,
    pub k35_sq: f64,
    /// Signed plate-frame e35, kept so zero crossings can be located.
    pub e35: f64,
}

pub fn coupling_at(base: &MaterialConstantSet, theta_deg: f64, form: CouplingForm) -> CouplingRow {
    let p = plate_constants(base, CrystalCut::new(theta_deg));
    CouplingRow {
        theta_deg,
        k33_sq: coupling_te_with(&p, form),
        k35_sq: coupling_ts_with(&p, form),
        e35: p.piezo[(2, 4)],
    }
}

/// Coupling table on `theta_min, theta_min + step, ...` up to `theta_max`
/// inclusive.
pub fn coupling_scan(
    base: &MaterialConstantSet,
    theta_min: f64,
    theta_max: f64,
    step: f64,
) -> Result<Vec<CouplingRow>, MaterialsError> {
    coupling_scan_with(base, theta_min, theta_max, step, CouplingForm::Literal)
}

pub fn coupling_scan_with(
    base: &MaterialConstantSet,
    theta_min: f64,
    theta_max: f64,
    step: f64,
    form: CouplingForm,
) -> Result<Vec<CouplingRow>, MaterialsError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(MaterialsError::Step(step));
    }
    if !(theta_min < theta_max) {
        return Err(MaterialsError::EmptyRange {
            min: theta_min,
            max: theta_max,
        });
    }
    let n = ((theta_max - theta_min) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|k| coupling_at(base, theta_min + k as f64 * step, form))
        .collect())
}

/// Angles where the signed plate-frame e35 changes sign, refined by
/// bisection between neighbouring scan rows.
pub fn ts_zero_crossings(base: &MaterialConstantSet, rows: &[CouplingRow]) -> Vec<f64> {
    let e35 = |t: f64| plate_constants(base, CrystalCut::new(t)).piezo[(2, 4)];
    let mut out = Vec::new();
    for w in rows.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.e35 == 0.0 {
            out.push(a.theta_deg);
            continue;
        }
        if a.e35.signum() == b.e35.signum() || b.e35 == 0.0 {
            continue;
        }
        let (mut lo, mut hi) = (a.theta_deg, b.theta_deg);
        let mut f_lo = a.e35;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let f_mid = e35(mid);
            if f_mid == 0.0 {
                lo = mid;
                hi = mid;
                break;
            }
            if f_mid.signum() == f_lo.signum() {
                lo = mid;
                f_lo = f_mid;
            } else {
                hi = mid;
            }
        }
        out.push(0.5 * (lo + hi));
    }
    if let Some(last) = rows.last() {
        if last.e35 == 0.0 {
            out.push(last.theta_deg);
        }
    }
    out
}

/// Effective thickness-mode constants of a cut: `(c33^E, e33, eps33^S)` in
/// the plate frame.
pub fn thickness_constants(base: &MaterialConstantSet, cut: CrystalCut) -> (f64, f64, f64) {
    let p = plate_constants(base, cut);
    (p.stiffness[(2, 2)], p.piezo[(2, 2)], p.permittivity[(2, 2)])
}
