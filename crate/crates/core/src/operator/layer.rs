//! Residual layers `L(w) = F3(w) + F2(s(N2(F1(s(N1(w))))))` and the
//! two-layer down, middle and up blocks built from them.

use crate::error::{Error, Result};
use crate::grid::{project, project_adjoint, GridFunction};
use crate::operator::kernel::InterpKernel;
use crate::operator::norm::{Activation, GroupNorm, NormCache};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n1: GroupNorm,
    pub f1: InterpKernel,
    pub n2: GroupNorm,
    pub f2: InterpKernel,
    /// `None` means the identity shortcut (`d_in == d_out`).
    pub f3: Option<InterpKernel>,
}

pub struct LayerTape {
    x: GridFunction,
    c1: NormCache,
    z1: GridFunction,
    a1: GridFunction,
    c2: NormCache,
    z2: GridFunction,
    a2: GridFunction,
}

impl Layer {
    pub fn random(d_in: usize, d_out: usize, k: usize, support: f64, group: usize, eps: f64, rng: &mut Rng) -> Result<Self> {
        use crate::operator::norm::group_size_for;
        Ok(Self {
            n1: GroupNorm::new(d_in, group_size_for(d_in, group), eps),
            f1: InterpKernel::random(k, support, d_in, d_out, rng)?,
            n2: GroupNorm::new(d_out, group_size_for(d_out, group), eps),
            f2: InterpKernel::random(k, support, d_out, d_out, rng)?,
            f3: if d_in == d_out { None } else { Some(InterpKernel::random(k, support, d_in, d_out, rng)?) },
        })
    }

    pub fn d_in(&self) -> usize {
        self.f1.d_in
    }

    pub fn d_out(&self) -> usize {
        self.f1.d_out
    }

    pub fn forward(&self, x: &GridFunction, act: Activation) -> Result<(GridFunction, LayerTape)> {
        let (z1, c1) = self.n1.forward(x)?;
        let a1 = act.map(&z1);
        let h1 = self.f1.forward(&a1)?;
        let (z2, c2) = self.n2.forward(&h1)?;
        let a2 = act.map(&z2);
        let mut out = self.f2.forward(&a2)?;
        let short = match &self.f3 {
            Some(f3) => f3.forward(x)?,
            None => x.clone(),
        };
        for (o, s) in out.data.iter_mut().zip(&short.data) {
            *o += s;
        }
        Ok((out, LayerTape { x: x.clone(), c1, z1, a1, c2, z2, a2 }))
    }

    pub fn backward(&self, tape: &LayerTape, dy: &GridFunction, act: Activation, grad: &mut Layer) -> Result<GridFunction> {
        let da2 = self.f2.backward(&tape.a2, dy, &mut grad.f2)?;
        let dz2 = chain(&da2, &tape.z2, act);
        let dh1 = self.n2.backward(&tape.c2, &dz2, &mut grad.n2);
        let da1 = self.f1.backward(&tape.a1, &dh1, &mut grad.f1)?;
        let dz1 = chain(&da1, &tape.z1, act);
        let mut dx = self.n1.backward(&tape.c1, &dz1, &mut grad.n1);
        let ds = match (&self.f3, &mut grad.f3) {
            (Some(f3), Some(g3)) => f3.backward(&tape.x, dy, g3)?,
            _ => dy.clone(),
        };
        for (d, s) in dx.data.iter_mut().zip(&ds.data) {
            *d += s;
        }
        Ok(dx)
    }
}

fn chain(upstream: &GridFunction, pre: &GridFunction, act: Activation) -> GridFunction {
    let data = upstream.data.iter().zip(&pre.data).map(|(u, z)| u * act.derivative(*z)).collect();
    GridFunction { spec: upstream.spec, channels: upstream.channels, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Down,
    Middle,
    Up,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub kind: BlockKind,
    pub layers: Vec<Layer>,
}

pub struct BlockTape {
    layers: Vec<LayerTape>,
    input_spec: crate::grid::GridSpec,
    before_projection: crate::grid::GridSpec,
}

impl Block {
    /// First layers keep `d_in` channels, the last maps to `d_out`.
    #[allow(clippy::too_many_arguments)]
    pub fn random(kind: BlockKind, d_in: usize, d_out: usize, depth: usize, k: usize, support: f64, group: usize, eps: f64, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let out = if l + 1 == depth { d_out } else { d_in };
            layers.push(Layer::random(d_in, out, k, support, group, eps, rng)?);
        }
        Ok(Self { kind, layers })
    }

    /// Runs the layers, concatenating `skip` after the input for up blocks,
    /// then resamples: coarser for down, finer for up, unchanged for middle.
    pub fn forward(&self, x: &GridFunction, skip: Option<&GridFunction>, act: Activation) -> Result<(GridFunction, BlockTape)> {
        let input = match (self.kind, skip) {
            (BlockKind::Up, Some(s)) => x.concat(s)?,
            (BlockKind::Up, None) => return Err(Error::MissingSkip),
            _ => x.clone(),
        };
        let mut cur = input;
        let input_spec = cur.spec;
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, tape) = layer.forward(&cur, act)?;
            tapes.push(tape);
            cur = next;
        }
        let before = cur.spec;
        let out = match self.kind {
            BlockKind::Down => project(&cur, &cur.spec.coarsened()?)?,
            BlockKind::Up => project(&cur, &cur.spec.refined())?,
            BlockKind::Middle => cur,
        };
        Ok((out, BlockTape { layers: tapes, input_spec, before_projection: before }))
    }

    /// Returns the input gradient; for up blocks, split as (input, skip).
    pub fn backward(&self, tape: &BlockTape, dy: &GridFunction, act: Activation, grad: &mut Block) -> Result<(GridFunction, Option<GridFunction>)> {
        let mut d = match self.kind {
            BlockKind::Middle => dy.clone(),
            _ => project_adjoint(dy, &tape.before_projection)?,
        };
        for (l, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(&tape.layers[l], &d, act, &mut grad.layers[l])?;
        }
        debug_assert_eq!(d.spec, tape.input_spec);
        match self.kind {
            BlockKind::Up => {
                let first = self.layers[0].d_in() / 2;
                let (a, b) = d.split(first);
                Ok((a, Some(b)))
            }
            _ => Ok((d, None)),
        }
    }
}
