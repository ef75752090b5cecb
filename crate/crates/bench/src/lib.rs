//! Shared fixtures for the benchmarks.

use lddm_core::boundary::{extend, trace_from_params};
use lddm_core::microstructure::generate;
use lddm_core::{rng, CoefficientField, FourierBoundaryParams, GridFunction, GridSpec, MicrostructureRecipe, OperatorConfig, OperatorParams};

/// A 10-grain Voronoi coefficient and a sampled boundary trace on an `n x n` unit grid.
pub fn local_problem(n: usize, seed: u64) -> (CoefficientField, lddm_core::BoundaryTrace) {
    let spec = GridSpec::unit(n).expect("valid grid");
    let a = generate(&MicrostructureRecipe::voronoi(10, seed), &spec).expect("valid recipe");
    let g = trace_from_params(&FourierBoundaryParams::sample(&mut rng::stream(seed, 1)), &spec);
    (a, g)
}

/// Operator input built from [`local_problem`].
pub fn operator_input(n: usize, seed: u64) -> GridFunction {
    let (a, g) = local_problem(n, seed);
    a.to_grid_function().concat(&extend(&g)).expect("same grid")
}

pub fn operator(widths: &[usize], kernel_nodes: usize) -> OperatorParams {
    let cfg = OperatorConfig { widths: widths.to_vec(), kernel_nodes, ..OperatorConfig::default() };
    OperatorParams::init(cfg, &mut rng::stream(0, 0)).expect("valid config")
}
