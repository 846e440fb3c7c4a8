//! Modeling, fitting and scoring of thickness-extensional piezoelectric
//! resonators, and periodic steady-state simulation of the DC-DC converters
//! built on them.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bvd;
pub mod converter;
pub mod io;
pub mod mason;
pub mod materials;
pub mod metrics;
pub mod sweep;

pub use sweep::ImpedanceSweep;

use thiserror::Error;

/// Any failure surfaced by the toolkit, grouped by how a caller should
/// react to it.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Materials(#[from] materials::MaterialsError),
    #[error(transparent)]
    Mason(#[from] mason::MasonError),
    #[error(transparent)]
    Sweep(#[from] sweep::SweepError),
    #[error(transparent)]
    Resonance(#[from] sweep::ResonanceError),
    #[error(transparent)]
    Bvd(#[from] bvd::BvdError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Converter(#[from] converter::ConverterError),
    #[error(transparent)]
    Io(#[from] io::IoError),
}

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Input = 1,
    NonConvergence = 2,
    Invariant = 3,
}

impl Error {
    pub fn class(&self) -> ExitClass {
        match self {
            Error::Bvd(bvd::BvdError::NonConvergence { .. }) => ExitClass::NonConvergence,
            Error::Converter(
                converter::ConverterError::NonConvergence { .. }
                | converter::ConverterError::Infeasible { .. }
                | converter::ConverterError::Unphysical { .. },
            ) => ExitClass::NonConvergence,
            Error::Converter(converter::ConverterError::Invariant(_)) => ExitClass::Invariant,
            Error::Metrics(metrics::MetricsError::Invariant(_)) => ExitClass::Invariant,
            _ => ExitClass::Input,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class() as i32
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
