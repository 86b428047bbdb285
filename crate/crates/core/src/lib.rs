//! Low-rank and group-low-rank weight compression mapped onto in-memory
//! computing crossbars with shift-and-duplicate-kernel (SDK) layouts, plus
//! cycle and energy accounting and a design-space planner.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod cycles;
pub mod decomposition;
pub mod energy;
pub mod linalg;
pub mod mapping;
pub mod network;
pub mod plan;
pub mod planner;
pub mod verify;
pub mod weights;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Decomposition(#[from] decomposition::DecompositionError),
    #[error(transparent)]
    Mapping(#[from] mapping::MappingError),
    #[error(transparent)]
    Cycle(#[from] cycles::CycleError),
    #[error(transparent)]
    Energy(#[from] energy::EnergyError),
    #[error(transparent)]
    Plan(#[from] plan::PlanError),
    #[error(transparent)]
    Weights(#[from] weights::WeightsError),
    #[error("unknown preset '{0}' (known: resnet20, wrn16-4)")]
    UnknownPreset(String),
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
