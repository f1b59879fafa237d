//! Weak-disorder random Schrödinger operators on layers and on the whole
//! space. Single-cell perturbation expansions feed finite-volume operators
//! with Mezincescu boundary conditions, which the Monte-Carlo checks sample.

pub mod disorder;
pub mod error;
pub mod expansion;
pub mod expr;
pub mod finite_volume;
pub mod grid;
pub mod ledger;
pub mod models;
pub mod sparse;
pub mod spectral;
pub mod stats;

pub use disorder::DisorderLaw;
pub use error::{Error, Result};
pub use expansion::{CaseLabel, ExpansionReport};
pub use finite_volume::{Configuration, FiniteVolumeOperator};
pub use grid::{BoxGrid, CellGrid, GridSpec, LateralBc, MezincescuDensity, Mode, TransversalBc, TransversalPotential};
pub use ledger::{ConstantsLedger, REPORT_SCHEMA};
pub use models::{ModelParams, PerturbationModel};
pub use sparse::{SparseHermitian, C64};
pub use spectral::EigenPair;
