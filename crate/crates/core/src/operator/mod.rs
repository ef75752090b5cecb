//! The U-shaped neural operator: lifting kernel, down blocks, a middle
//! block, up blocks fed with skip connections, and a projection kernel.
//!
//! Stage `s` runs on the grid coarsened `s` times. Kernel supports are fixed
//! physical lengths, `(K - 1)` fine-grid cells at stage 0 of the nominal
//! resolution and doubling per stage, so one parameter set evaluates at any
//! dyadic refinement.

pub mod checkpoint;
pub mod kernel;
pub mod layer;
pub mod norm;

use serde::{Deserialize, Serialize};

use crate::boundary::{extend, BoundaryTrace};
use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::microstructure::CoefficientField;
use crate::rng::Rng;

pub use kernel::InterpKernel;
pub use layer::{Block, BlockKind, Layer};
pub use norm::{Activation, GroupNorm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorConfig {
    /// Channel widths `d_1..d_T`; `T` is the length.
    pub widths: Vec<usize>,
    pub kernel_nodes: usize,
    /// Grid size at which stage-0 kernels span `kernel_nodes - 1` cells.
    pub nominal_nodes: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub group_size: usize,
    pub activation: Activation,
    pub eps: f64,
    pub layers_per_block: usize,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            kernel_nodes: 5,
            nominal_nodes: 33,
            in_channels: 2,
            out_channels: 1,
            group_size: 8,
            activation: Activation::Gelu,
            eps: 1e-5,
            layers_per_block: 2,
        }
    }
}

impl OperatorConfig {
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn support(&self, stage: usize) -> f64 {
        (self.kernel_nodes - 1) as f64 * (1 << stage) as f64 / (self.nominal_nodes - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Config("operator needs at least two nonzero widths".into()));
        }
        if self.kernel_nodes < 2 || self.in_channels == 0 || self.out_channels == 0 || self.layers_per_block == 0 || self.group_size == 0 {
            return Err(Error::Config("kernel nodes must be >= 2 and channel counts positive".into()));
        }
        if self.nominal_nodes < 3 || !(self.nominal_nodes - 1).is_multiple_of(1 << (self.depth() - 1)) {
            return Err(Error::NonDyadic(format!("nominal grid {} does not coarsen {} times", self.nominal_nodes, self.depth() - 1)));
        }
        let top = self.support(self.depth() - 1);
        if top > 1.0 + 1e-12 {
            return Err(Error::Config(format!("coarsest kernel support {top} exceeds the unit domain")));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("group-norm epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorParams {
    pub config: OperatorConfig,
    pub lift: InterpKernel,
    pub down: Vec<Block>,
    pub middle: Block,
    pub up: Vec<Block>,
    pub proj: InterpKernel,
}

/// Gradients share the parameter layout.
pub type GradientTree = OperatorParams;

impl OperatorParams {
    pub fn init(config: OperatorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let t = c.depth();
        let (k, g, e, nl) = (c.kernel_nodes, c.group_size, c.eps, c.layers_per_block);
        let w = &c.widths;
        let lift = InterpKernel::random(k, c.support(0), c.in_channels, w[0], rng)?;
        let mut down = Vec::with_capacity(t - 1);
        for j in 0..t - 1 {
            down.push(Block::random(BlockKind::Down, w[j], w[j + 1], nl, k, c.support(j), g, e, rng)?);
        }
        let middle = Block::random(BlockKind::Middle, w[t - 1], w[t - 1], nl, k, c.support(t - 1), g, e, rng)?;
        let mut up = Vec::with_capacity(t - 1);
        for j in 1..t {
            // Up block j runs at stage T - j and maps 2 d_{T-j+1} -> d_{T-j}.
            let stage = t - j;
            up.push(Block::random(BlockKind::Up, 2 * w[stage], w[stage - 1], nl, k, c.support(stage), g, e, rng)?);
        }
        let proj = InterpKernel::random(k, c.support(0), w[0], c.out_channels, rng)?;
        Ok(Self { config, lift, down, middle, up, proj })
    }

    /// A tree of the same shape with every entry zero.
    pub fn zeros_like(&self) -> GradientTree {
        let mut g = self.clone();
        g.for_each_slice_mut(|s| s.iter_mut().for_each(|v| *v = 0.0));
        g
    }

    /// Visits parameter arrays in checkpoint order: lifting kernel, down
    /// blocks, middle block, up blocks, projection kernel; within a layer
    /// `N1.gamma, N1.beta, F1, N2.gamma, N2.beta, F2, F3`.
    pub fn for_each_slice(&self, mut f: impl FnMut(&[f64])) {
        f(&self.lift.nodal);
        for b in self.down.iter().chain(std::iter::once(&self.middle)).chain(self.up.iter()) {
            for l in &b.layers {
                f(&l.n1.gamma);
                f(&l.n1.beta);
                f(&l.f1.nodal);
                f(&l.n2.gamma);
                f(&l.n2.beta);
                f(&l.f2.nodal);
                if let Some(k) = &l.f3 {
                    f(&k.nodal);
                }
            }
        }
        f(&self.proj.nodal);
    }

    pub fn for_each_slice_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(&mut self.lift.nodal);
        for b in self.down.iter_mut().chain(std::iter::once(&mut self.middle)).chain(self.up.iter_mut()) {
            for l in &mut b.layers {
                f(&mut l.n1.gamma);
                f(&mut l.n1.beta);
                f(&mut l.f1.nodal);
                f(&mut l.n2.gamma);
                f(&mut l.n2.beta);
                f(&mut l.f2.nodal);
                if let Some(k) = &mut l.f3 {
                    f(&mut k.nodal);
                }
            }
        }
        f(&mut self.proj.nodal);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_slice(|s| n += s.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.for_each_slice(|s| v.extend_from_slice(s));
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut at = 0;
        self.for_each_slice_mut(|s| {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        });
        Ok(())
    }

    /// `self += alpha * other`, entrywise.
    pub fn add_scaled(&mut self, alpha: f64, other: &OperatorParams) {
        let flat = other.to_flat();
        let mut at = 0;
        self.for_each_slice_mut(|s| {
            for v in s.iter_mut() {
                *v += alpha * flat[at];
                at += 1;
            }
        });
    }

    pub fn check_resolution(&self, nx: usize, ny: usize) -> Result<()> {
        let f = 1 << (self.config.depth() - 1);
        if nx < 3 || ny < 3 || !(nx - 1).is_multiple_of(f) || !(ny - 1).is_multiple_of(f) {
            return Err(Error::NonDyadic(format!("{nx}x{ny} grid cannot be coarsened {} times", self.config.depth() - 1)));
        }
        Ok(())
    }
}

/// Intermediate values saved by [`forward_tape`].
pub struct ForwardTape {
    input: GridFunction,
    lifted: GridFunction,
    down: Vec<layer::BlockTape>,
    middle: layer::BlockTape,
    up: Vec<layer::BlockTape>,
    before_proj: GridFunction,
}

/// Stacks the coefficient field and the extended boundary data.
pub fn input_fields(a: &CoefficientField, g: &BoundaryTrace) -> Result<GridFunction> {
    if a.spec != g.spec {
        return Err(Error::ShapeMismatch("coefficient field and trace live on different grids".into()));
    }
    a.to_grid_function().concat(&extend(g))
}

pub fn forward_tape(params: &OperatorParams, input: &GridFunction) -> Result<(GridFunction, ForwardTape)> {
    params.check_resolution(input.spec.nx, input.spec.ny)?;
    if input.channels != params.config.in_channels {
        return Err(Error::ShapeMismatch(format!("operator expects {} input channels, got {}", params.config.in_channels, input.channels)));
    }
    let act = params.config.activation;
    let lifted = params.lift.forward(input)?;
    // Down path outputs omega^(1)..omega^(T).
    let mut outs = vec![lifted.clone()];
    let mut down_tapes = Vec::with_capacity(params.down.len());
    for b in &params.down {
        let (y, tape) = b.forward(outs.last().unwrap(), None, act)?;
        down_tapes.push(tape);
        outs.push(y);
    }
    let (mut cur, mid_tape) = params.middle.forward(outs.last().unwrap(), None, act)?;
    let t = params.config.depth();
    let mut up_tapes = Vec::with_capacity(params.up.len());
    for (j, b) in params.up.iter().enumerate() {
        // Up block j+1 pairs with omega^(T - j).
        let skip = &outs[t - 1 - j];
        let (y, tape) = b.forward(&cur, Some(skip), act)?;
        up_tapes.push(tape);
        cur = y;
    }
    let out = params.proj.forward(&cur)?;
    Ok((out, ForwardTape { input: input.clone(), lifted, down: down_tapes, middle: mid_tape, up: up_tapes, before_proj: cur }))
}

pub fn ppno_forward_fields(params: &OperatorParams, input: &GridFunction) -> Result<GridFunction> {
    Ok(forward_tape(params, input)?.0)
}

pub fn ppno_forward(params: &OperatorParams, a: &CoefficientField, g: &BoundaryTrace) -> Result<GridFunction> {
    ppno_forward_fields(params, &input_fields(a, g)?)
}

/// Reverse pass: returns parameter gradients and the input gradient.
pub fn backward_tape(params: &OperatorParams, tape: &ForwardTape, upstream: &GridFunction) -> Result<(GradientTree, GridFunction)> {
    if upstream.spec != tape.input.spec || upstream.channels != params.config.out_channels {
        return Err(Error::ShapeMismatch("upstream gradient does not match the operator output".into()));
    }
    let act = params.config.activation;
    let mut grad = params.zeros_like();
    let t = params.config.depth();
    let mut d = params.proj.backward(&tape.before_proj, upstream, &mut grad.proj)?;
    // Gradients flowing into omega^(1)..omega^(T) through skips.
    let mut skip_grads: Vec<Option<GridFunction>> = vec![None; t];
    for j in (0..params.up.len()).rev() {
        let (dx, dskip) = params.up[j].backward(&tape.up[j], &d, act, &mut grad.up[j])?;
        skip_grads[t - 1 - j] = dskip;
        d = dx;
    }
    let (mut d, _) = params.middle.backward(&tape.middle, &d, act, &mut grad.middle)?;
    for j in (0..params.down.len()).rev() {
        if let Some(s) = skip_grads[j + 1].take() {
            d = d.axpy(1.0, &s)?;
        }
        let (dx, _) = params.down[j].backward(&tape.down[j], &d, act, &mut grad.down[j])?;
        d = dx;
    }
    if let Some(s) = skip_grads[0].take() {
        d = d.axpy(1.0, &s)?;
    }
    debug_assert_eq!(d.spec, tape.lifted.spec);
    let dinput = params.lift.backward(&tape.input, &d, &mut grad.lift)?;
    Ok((grad, dinput))
}

pub fn ppno_backward(params: &OperatorParams, a: &CoefficientField, g: &BoundaryTrace, upstream: &GridFunction) -> Result<GradientTree> {
    let (_, tape) = forward_tape(params, &input_fields(a, g)?)?;
    Ok(backward_tape(params, &tape, upstream)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::{trace_from_params, FourierBoundaryParams};
    use crate::grid::GridSpec;
    use crate::microstructure::{generate, MicrostructureRecipe};
    use crate::rng;
    use rand::Rng as _;

    pub(crate) fn tiny_config() -> OperatorConfig {
        OperatorConfig { widths: vec![4, 8, 16], kernel_nodes: 3, nominal_nodes: 9, ..OperatorConfig::default() }
    }

    fn sample(spec: GridSpec, seed: u64) -> (CoefficientField, BoundaryTrace) {
        let a = generate(&MicrostructureRecipe::voronoi(6, seed).with_range(0.0, 10.0), &spec).unwrap();
        let g = trace_from_params(&FourierBoundaryParams::sample(&mut rng::stream(seed, 1)), &spec);
        (a, g)
    }

    #[test]
    fn default_shapes_and_resolution_invariance() {
        let p = OperatorParams::init(OperatorConfig { widths: vec![4, 8, 8], ..OperatorConfig::default() }, &mut rng::stream(1, 0)).unwrap();
        for n in [33, 65] {
            let (a, g) = sample(GridSpec::unit(n).unwrap(), 2);
            let y = ppno_forward(&p, &a, &g).unwrap();
            assert_eq!((y.spec.nx, y.channels), (n, 1));
            assert!(y.data.iter().all(|v| v.is_finite()));
        }
        let (a, g) = sample(GridSpec::unit(31).unwrap(), 2);
        assert!(matches!(ppno_forward(&p, &a, &g), Err(Error::NonDyadic(_))));
    }

    #[test]
    fn flat_round_trip() {
        let mut p = OperatorParams::init(tiny_config(), &mut rng::stream(2, 0)).unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.num_params());
        let mut q = p.zeros_like();
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        p.add_scaled(0.0, &q);
        assert_eq!(p.to_flat(), flat);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let p = OperatorParams::init(tiny_config(), &mut rng::stream(3, 0)).unwrap();
        let (a, g) = sample(GridSpec::unit(9).unwrap(), 3);
        let grad = ppno_backward(&p, &a, &g, &GridFunction::zeros(a.spec, 1)).unwrap();
        assert!(grad.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = OperatorParams::init(tiny_config(), &mut rng::stream(4, 0)).unwrap();
        let spec = GridSpec::unit(9).unwrap();
        let (a, g) = sample(spec, 4);
        let mut r = rng::stream(4, 9);
        let mut rand_field = || GridFunction::new(spec, 1, (0..spec.len()).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let (u1, u2) = (rand_field(), rand_field());
        let g12 = ppno_backward(&p, &a, &g, &u1.axpy(1.0, &u2).unwrap()).unwrap().to_flat();
        let g1 = ppno_backward(&p, &a, &g, &u1).unwrap().to_flat();
        let g2 = ppno_backward(&p, &a, &g, &u2).unwrap().to_flat();
        for k in 0..g12.len() {
            assert!((g12[k] - g1[k] - g2[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut p = OperatorParams::init(tiny_config(), &mut rng::stream(5, 0)).unwrap();
        // Move the affine parameters off their initial values.
        let mut r = rng::stream(5, 5);
        for b in p.down.iter_mut().chain(std::iter::once(&mut p.middle)).chain(p.up.iter_mut()) {
            for l in &mut b.layers {
                l.n1.beta.iter_mut().chain(l.n2.beta.iter_mut()).for_each(|v| *v = r.gen_range(-0.2..0.2));
            }
        }
        let spec = GridSpec::unit(9).unwrap();
        let (a, g) = sample(spec, 5);
        let input = input_fields(&a, &g).unwrap();
        let target = GridFunction::from_fn(spec, |x, y| x - y);
        let loss = |p: &OperatorParams| -> f64 {
            let y = ppno_forward_fields(p, &input).unwrap();
            crate::grid::sq_l2_norm(&y.sub(&target).unwrap())
        };
        let (y, tape) = forward_tape(&p, &input).unwrap();
        let q = spec.quad_weights();
        let upstream = GridFunction { spec, channels: 1, data: y.data.iter().zip(&target.data).zip(&q).map(|((a, b), w)| 2.0 * w * (a - b)).collect() };
        let grad = backward_tape(&p, &tape, &upstream).unwrap().0.to_flat();
        let base = p.to_flat();
        let eps = 1e-5;
        for k in (0..base.len()).step_by(base.len() / 40) {
            let mut plus = base.clone();
            plus[k] += eps;
            let mut minus = base.clone();
            minus[k] -= eps;
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.set_flat(&plus).unwrap();
            pm.set_flat(&minus).unwrap();
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * eps);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {k}: fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let p = OperatorParams::init(tiny_config(), &mut rng::stream(6, 0)).unwrap();
        let (a, g) = sample(GridSpec::unit(17).unwrap(), 6);
        assert_eq!(ppno_forward(&p, &a, &g).unwrap(), ppno_forward(&p, &a, &g).unwrap());
    }
}
