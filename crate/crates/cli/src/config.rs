//! TOML run configuration. Every section is optional; command-line flags
//! override individual fields.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use lddm_core::schwarz::{InitialState, IterateOptions, SweepMode, Tolerance};
use lddm_core::training::{BoundaryDistribution, Target, TrainConfig};
use lddm_core::{FourierBoundaryParams, MicrostructureKind, MicrostructureRecipe, OperatorConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generate: GenerateConfig,
    pub operator: OperatorConfig,
    pub train: TrainConfig,
    pub solve: SolveConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n: usize,
    pub nx: usize,
    pub cells: usize,
    pub microstructure: MicrostructureKind,
    pub value_range: (f64, f64),
    pub boundary: BoundaryDistribution,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { n: 200, nx: 33, cells: 10, microstructure: MicrostructureKind::Voronoi, value_range: (0.0, 10.0), boundary: BoundaryDistribution::Fourier }
    }
}

impl GenerateConfig {
    pub fn recipe(&self, cells: usize) -> MicrostructureRecipe {
        MicrostructureRecipe { kind: self.microstructure, cell_count: cells, value_range: self.value_range, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Oracle,
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Additive,
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InitialArg {
    Extension,
    Zero,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TolKind {
    /// Relative to the norm of the first sweep's iterate.
    Relative,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TargetArg {
    U,
    Grad,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::U => Target::U,
            TargetArg::Grad => Target::GradU,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub shape: String,
    pub layout: Option<String>,
    pub solver: SolverKind,
    pub checkpoint: Option<PathBuf>,
    pub local_nodes: usize,
    pub overlap: f64,
    /// Voronoi grains per unit area of the global domain.
    pub cells_per_window: f64,
    pub value_range: (f64, f64),
    pub tol: f64,
    pub tol_kind: TolKind,
    pub max_iter: usize,
    pub mode: ModeArg,
    pub initial: InitialArg,
    /// Fixed boundary parameters; drawn from the seed when absent.
    pub boundary: Option<FourierBoundaryParams>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            shape: "square".into(),
            layout: Some("2x2".into()),
            solver: SolverKind::Oracle,
            checkpoint: None,
            local_nodes: 33,
            overlap: 0.3125,
            cells_per_window: 10.0,
            value_range: (0.0, 10.0),
            tol: 1e-6,
            tol_kind: TolKind::Relative,
            max_iter: 200,
            mode: ModeArg::Additive,
            initial: InitialArg::Extension,
            boundary: None,
        }
    }
}

impl SolveConfig {
    pub fn iterate_options(&self, seed: u64) -> IterateOptions {
        IterateOptions {
            tol: match self.tol_kind {
                TolKind::Relative => Tolerance::RelativeToFirst(self.tol),
                TolKind::Absolute => Tolerance::Absolute(self.tol),
            },
            max_iter: self.max_iter,
            mode: match self.mode {
                ModeArg::Additive => SweepMode::Additive,
                ModeArg::Alternating => SweepMode::Alternating,
            },
            initial: match self.initial {
                InitialArg::Extension => InitialState::Extension,
                InitialArg::Zero => InitialState::Zero,
                InitialArg::Random => InitialState::Random { seed },
            },
        }
    }
}
