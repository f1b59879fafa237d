//! Fixtures shared by the criterion benches.

use weakloc_core::disorder::DisorderLaw;
use weakloc_core::finite_volume::{assemble_box_operator, mezincescu_bc};
use weakloc_core::grid::{build_box_grid, build_cell_grid};
use weakloc_core::models::build_model;
use weakloc_core::{BoxGrid, CellGrid, FiniteVolumeOperator, GridSpec, ModelParams, PerturbationModel, TransversalPotential};

pub struct Fixture {
    pub cell: CellGrid,
    pub model: PerturbationModel,
    pub v0: TransversalPotential,
    pub law: DisorderLaw,
}

/// Whole-space cos-model on the unit cell with `mesh` nodes per cell.
pub fn cosine(mesh: usize) -> Fixture {
    let cell = build_cell_grid(&GridSpec::whole_space(vec![1.0], mesh)).expect("valid grid");
    let model = build_model(&ModelParams::potential("cos(2*pi()*x)", "0").expect("valid expression"), &cell)
        .expect("valid model");
    Fixture { cell, model, v0: TransversalPotential::zero(), law: DisorderLaw::uniform(0.0).expect("valid law") }
}

impl Fixture {
    pub fn mezincescu_box(&self, epsilon: f64, n_cells: usize) -> BoxGrid {
        let bc = mezincescu_bc(&self.model, &self.cell, &self.v0, epsilon).expect("real model");
        build_box_grid(&self.cell.spec, &[0], n_cells, bc).expect("valid box")
    }

    pub fn operator(&self, grid: &BoxGrid, epsilon: f64, sample: u64) -> FiniteVolumeOperator {
        let xi = self.law.sample_configuration(grid, 1, sample).expect("configuration");
        assemble_box_operator(&self.model, &self.v0, grid, epsilon, &xi).expect("operator")
    }
}
