//! One-dimensional thickness-mode impedance of an electroded piezoelectric
//! plate.
//!
//! The piezoelectric layer is the classical three-port (two acoustic faces,
//! one electrical port). Non-piezoelectric layers on either side are
//! transmission lines cascaded outward to a traction-free surface and seen
//! by the plate as face loads.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::materials::{thickness_constants, CrystalCut, MaterialConstantSet};
pub use crate::sweep::{find_resonances, ImpedanceSweep, ResonanceError, DEFAULT_REF_OHM};
use crate::sweep::SweepError;

/// Default stack geometry.
pub const PLATE_THICKNESS_M: f64 = 3.0e-4;
pub const ELECTRODE_THICKNESS_M: f64 = 3.0e-7;
pub const DEFAULT_ELECTRODE_RADIUS_M: f64 = 5.0e-3;
pub const PLATE_CUT_DEG: f64 = 36.0;

/// Aluminum: density and longitudinal stiffness (Lame: lambda + 2 mu).
pub const AL_DENSITY: f64 = 2700.0;
pub const AL_C33: f64 = 1.113e11;
pub const AL_MECH_Q: f64 = 1000.0;
pub const LN_MECH_Q: f64 = 4000.0;

#[derive(Debug, Error, PartialEq)]
pub enum MasonError {
    #[error("stack must contain exactly one piezoelectric layer, found {0}")]
    PiezoCount(usize),
    #[error("layer {index}: {reason}")]
    Layer { index: usize, reason: &'static str },
    #[error("active area must be positive, got {0}")]
    Area(f64),
    #[error(transparent)]
    Sweep(#[from] SweepError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Metal,
    Piezo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub thickness: f64,
    pub density: f64,
    /// c33 at constant field along the stack axis, Pa.
    pub stiffness_c33: f64,
    pub piezo_e33: f64,
    pub permittivity_e33: f64,
    pub mech_q: f64,
}

impl Layer {
    pub fn metal(thickness: f64, density: f64, stiffness_c33: f64, mech_q: f64) -> Self {
        Layer {
            kind: LayerKind::Metal,
            thickness,
            density,
            stiffness_c33,
            piezo_e33: 0.0,
            permittivity_e33: 0.0,
            mech_q,
        }
    }

    pub fn aluminum(thickness: f64) -> Self {
        Self::metal(thickness, AL_DENSITY, AL_C33, AL_MECH_Q)
    }

    pub fn piezo(
        thickness: f64,
        density: f64,
        stiffness_c33: f64,
        piezo_e33: f64,
        permittivity_e33: f64,
        mech_q: f64,
    ) -> Self {
        Layer {
            kind: LayerKind::Piezo,
            thickness,
            density,
            stiffness_c33,
            piezo_e33,
            permittivity_e33,
            mech_q,
        }
    }

    /// Stiffened constant `c33 + e33^2 / eps33` (just `c33` for metals).
    pub fn stiffened_c33(&self) -> f64 {
        match self.kind {
            LayerKind::Metal => self.stiffness_c33,
            LayerKind::Piezo => {
                self.stiffness_c33 + self.piezo_e33 * self.piezo_e33 / self.permittivity_e33
            }
        }
    }

    /// Lossless longitudinal velocity on the stiffened constant.
    pub fn velocity(&self) -> f64 {
        (self.stiffened_c33() / self.density).sqrt()
    }

    fn complex_velocity(&self) -> Complex64 {
        let c = Complex64::new(self.stiffened_c33(), self.stiffened_c33() / self.mech_q);
        (c / self.density).sqrt()
    }

    fn validate(&self, index: usize) -> Result<(), MasonError> {
        let err = |reason| Err(MasonError::Layer { index, reason });
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.thickness) {
            return err("thickness must be positive");
        }
        if !pos(self.density) {
            return err("density must be positive");
        }
        if !pos(self.stiffness_c33) {
            return err("stiffness must be positive");
        }
        if !(self.mech_q > 0.0) || self.mech_q.is_nan() {
            return err("mechanical Q must be positive");
        }
        match self.kind {
            LayerKind::Metal if self.piezo_e33 != 0.0 => err("metal layer with nonzero e33"),
            LayerKind::Piezo if !pos(self.permittivity_e33) => err("permittivity must be positive"),
            LayerKind::Piezo if !self.piezo_e33.is_finite() => err("e33 must be finite"),
            _ => Ok(()),
        }
    }
}

/// Layers ordered bottom to top plus the electrode area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
    pub active_area: f64,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>, active_area: f64) -> Result<Self, MasonError> {
        let s = LayerStack {
            layers,
            active_area,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), MasonError> {
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
        }
        let n = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::Piezo)
            .count();
        if n != 1 {
            return Err(MasonError::PiezoCount(n));
        }
        if !(self.active_area > 0.0 && self.active_area.is_finite()) {
            return Err(MasonError::Area(self.active_area));
        }
        Ok(())
    }

    fn piezo_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::Piezo)
            .expect("validated stack has a piezo layer")
    }

    pub fn piezo_layer(&self) -> &Layer {
        &self.layers[self.piezo_index()]
    }

    /// Clamped capacitance `eps33 A / d`.
    pub fn c0(&self) -> f64 {
        let p = self.piezo_layer();
        p.permittivity_e33 * self.active_area / p.thickness
    }
}

/// Al(300 nm) / 36Y LiNbO3 (0.3 mm) / Al(300 nm) with a circular electrode
/// of the default radius.
pub fn default_reference_stack() -> LayerStack {
    reference_stack(DEFAULT_ELECTRODE_RADIUS_M, &MaterialConstantSet::linbo3())
}

/// The Al/LiNbO3/Al default stack with a chosen electrode radius and constant set.
pub fn reference_stack(electrode_radius_m: f64, material: &MaterialConstantSet) -> LayerStack {
    let (c33, e33, eps33) = thickness_constants(material, CrystalCut::new(PLATE_CUT_DEG));
    LayerStack {
        layers: vec![
            Layer::aluminum(ELECTRODE_THICKNESS_M),
            Layer::piezo(
                PLATE_THICKNESS_M,
                material.density,
                c33,
                e33,
                eps33,
                LN_MECH_Q,
            ),
            Layer::aluminum(ELECTRODE_THICKNESS_M),
        ],
        active_area: PI * electrode_radius_m * electrode_radius_m,
    }
}

/// Mechanical impedance presented to a face by `layers`, listed from the
/// face outward, terminated by a free surface.
fn face_load<'a>(layers: impl Iterator<Item = &'a Layer>, omega: f64, area: f64) -> Complex64 {
    let outward: Vec<&Layer> = layers.collect();
    let i = Complex64::i();
    let mut z = Complex64::new(0.0, 0.0);
    for l in outward.iter().rev() {
        let v = l.complex_velocity();
        let z0 = l.density * v * area;
        let t = (omega * l.thickness / v).tan();
        z = z0 * (z + i * z0 * t) / (z0 + i * z * t);
    }
    z
}

/// Input impedance at one frequency. The stack is assumed valid.
pub fn impedance_at(stack: &LayerStack, freq_hz: f64) -> Complex64 {
    let omega = 2.0 * PI * freq_hz;
    let i = Complex64::i();
    let k = stack.piezo_index();
    let p = &stack.layers[k];
    let c0 = stack.c0();
    let zc = 1.0 / (i * omega * c0);
    if p.piezo_e33 == 0.0 {
        return zc;
    }
    let area = stack.active_area;
    let z1 = face_load(stack.layers[..k].iter().rev(), omega, area);
    let z2 = face_load(stack.layers[k + 1..].iter(), omega, area);
    let v = p.complex_velocity();
    let z0 = p.density * v * area;
    let theta = omega * p.thickness / v;
    let (sn, cs) = (theta.sin(), theta.cos());
    let g = (p.piezo_e33 / p.permittivity_e33) / (i * omega);
    // with a = z0/(i tan), b = z0/(i sin): a - b = i z0 tan(theta/2) and
    // a^2 - b^2 = z0^2, which stay finite where tan and sin do not
    let zl = z1 + z2;
    let mut det = z0 * z0 + z1 * z2;
    if zl != Complex64::new(0.0, 0.0) {
        det += z0 * cs / (i * sn) * zl;
    }
    let half = sn / (1.0 + cs);
    zc - g * g * (2.0 * i * z0 * half + zl) / det
}

/// Input impedance over a frequency grid, evaluated in parallel.
pub fn input_impedance(stack: &LayerStack, freq_hz: &[f64]) -> Result<ImpedanceSweep, MasonError> {
    stack.validate()?;
    if let Some(index) = freq_hz.iter().position(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(SweepError::Frequency { index }.into());
    }
    let z: Vec<Complex64> = freq_hz.par_iter().map(|&f| impedance_at(stack, f)).collect();
    Ok(ImpedanceSweep::new(freq_hz.to_vec(), z, DEFAULT_REF_OHM)?)
}

/// Half-wave frequency `v / (2 d)` of the bare piezo layer.
pub fn free_plate_fp(stack: &LayerStack) -> f64 {
    let p = stack.piezo_layer();
    p.velocity() / (2.0 * p.thickness)
}
