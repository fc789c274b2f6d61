use thiserror::Error;

use crate::aggregator::DriverError;
use crate::bsde::BsdeError;
use crate::dpp::DppError;
use crate::ez::EzError;
use crate::hjb::HjbError;
use crate::sde::SdeError;

/// Any failure of the toolkit, grouped by origin.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Bsde(#[from] BsdeError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    Dpp(#[from] DppError),
    #[error(transparent)]
    Ez(#[from] EzError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used for exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid parameters or inputs.
    Config,
    /// A verification did not pass (failed audit, violated premise).
    Check,
    /// The numerics broke down.
    Numerical,
    Io,
}

fn driver_kind(e: &DriverError) -> ErrorKind {
    match e {
        DriverError::Evaluation { .. } | DriverError::DomainViolation { .. } => ErrorKind::Numerical,
        DriverError::ConditionAuditFailed { .. } => ErrorKind::Check,
        DriverError::ZNotSupported
        | DriverError::UnsupportedRegime { .. }
        | DriverError::OutOfModel { .. }
        | DriverError::InvalidParameter(_) => ErrorKind::Config,
    }
}

fn sde_kind(e: &SdeError) -> ErrorKind {
    match e {
        SdeError::DivergedPath { .. } | SdeError::UnstableMoment { .. } => ErrorKind::Numerical,
        SdeError::DegenerateComparison => ErrorKind::Check,
        SdeError::Cache(_) => ErrorKind::Io,
        _ => ErrorKind::Config,
    }
}

fn bsde_kind(e: &BsdeError) -> ErrorKind {
    match e {
        BsdeError::Driver(d) => driver_kind(d),
        BsdeError::PremiseViolated(_) | BsdeError::NotAudited(_) => ErrorKind::Check,
        BsdeError::InvalidInput(_) => ErrorKind::Config,
        _ => ErrorKind::Numerical,
    }
}

fn hjb_kind(e: &HjbError) -> ErrorKind {
    match e {
        HjbError::Driver(d) => driver_kind(d),
        HjbError::NotAudited(_) => ErrorKind::Check,
        HjbError::InvalidGrid(_) | HjbError::ZDependent | HjbError::DimensionUnsupported(_) => ErrorKind::Config,
        _ => ErrorKind::Numerical,
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Self::Sde(e) => sde_kind(e),
            Self::Driver(e) => driver_kind(e),
            Self::Bsde(e) => bsde_kind(e),
            Self::Hjb(e) => hjb_kind(e),
            Self::Dpp(e) => match e {
                DppError::Bsde(b) => bsde_kind(b),
                DppError::Sde(s) => sde_kind(s),
                DppError::Hjb(h) => hjb_kind(h),
                DppError::BudgetExceeded { .. } | DppError::InvalidInput(_) => ErrorKind::Config,
                DppError::Reachability { .. } => ErrorKind::Check,
            },
            Self::Ez(e) => match e {
                EzError::Driver(d) => driver_kind(d),
                EzError::InvalidMarket(_) => ErrorKind::Config,
                EzError::AuditFailed(_) => ErrorKind::Check,
                EzError::Stage { source, .. } => source.kind(),
                EzError::Io(_) => ErrorKind::Io,
            },
            Self::Io(_) => ErrorKind::Io,
        }
    }
}
