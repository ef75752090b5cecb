//! Uniform rectangular grids and the fields sampled on them.
//!
//! A [`GridFunction`] stores `nx * ny * channels` values in row-major order
//! with the channel index fastest: value `(i, j, c)` lives at
//! `(j * nx + i) * channels + c`, where `i` runs along x and `j` along y.
//!
//! Halving and doubling follow the nested dyadic convention: an odd node
//! count `N` coarsens to `(N + 1) / 2` and refines to `2N - 1`, so the coarse
//! nodes are a subset of the fine ones and [`project`] between nested grids
//! is exact injection / bilinear prolongation.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidGrid(format!("node counts must be >= 2, got {nx}x{ny}")));
        }
        if !(x1 > x0) || !(y1 > y0) || !x0.is_finite() || !x1.is_finite() || !y0.is_finite() || !y1.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "extents must satisfy x1 > x0, y1 > y0: [{x0}, {x1}] x [{y0}, {y1}]"
            )));
        }
        Ok(Self { nx, ny, x0, y0, x1, y1 })
    }

    /// `n x n` nodes on the unit square.
    pub fn unit(n: usize) -> Result<Self> {
        Self::new(n, n, 0.0, 0.0, 1.0, 1.0)
    }

    /// Grid with spacing `h` in both directions, anchored at `(x0, y0)`.
    pub fn with_spacing(nx: usize, ny: usize, x0: f64, y0: f64, h: f64) -> Result<Self> {
        Self::new(nx, ny, x0, y0, x0 + h * (nx - 1) as f64, y0 + h * (ny - 1) as f64)
    }

    pub fn hx(&self) -> f64 {
        (self.x1 - self.x0) / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        (self.y1 - self.y0) / (self.ny - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.nx {
            self.x1
        } else {
            self.x0 + i as f64 * self.hx()
        }
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        if j + 1 == self.ny {
            self.y1
        } else {
            self.y0 + j as f64 * self.hy()
        }
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.nx || j + 1 == self.ny
    }

    pub fn same_extents(&self, other: &GridSpec) -> bool {
        let tol = 1e-12 * (1.0 + self.x1.abs().max(self.y1.abs()));
        (self.x0 - other.x0).abs() <= tol
            && (self.x1 - other.x1).abs() <= tol
            && (self.y0 - other.y0).abs() <= tol
            && (self.y1 - other.y1).abs() <= tol
    }

    /// Next coarser nested grid, `(N + 1) / 2` nodes per axis.
    pub fn coarsened(&self) -> Result<Self> {
        if self.nx.is_multiple_of(2) || self.ny.is_multiple_of(2) || self.nx < 3 || self.ny < 3 {
            return Err(Error::NonDyadic(format!(
                "cannot halve a {}x{} grid (odd node counts >= 3 required)",
                self.nx, self.ny
            )));
        }
        Ok(Self { nx: self.nx.div_ceil(2), ny: self.ny.div_ceil(2), ..*self })
    }

    /// Next finer nested grid, `2N - 1` nodes per axis.
    pub fn refined(&self) -> Self {
        Self { nx: 2 * self.nx - 1, ny: 2 * self.ny - 1, ..*self }
    }

    /// Trapezoidal quadrature weight of node `(i, j)`.
    #[inline]
    pub fn quad_weight(&self, i: usize, j: usize) -> f64 {
        let wx = if i == 0 || i + 1 == self.nx { 0.5 } else { 1.0 };
        let wy = if j == 0 || j + 1 == self.ny { 0.5 } else { 1.0 };
        wx * wy * self.hx() * self.hy()
    }

    pub fn quad_weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.len());
        for j in 0..self.ny {
            for i in 0..self.nx {
                w.push(self.quad_weight(i, j));
            }
        }
        w
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Piecewise-linear hat basis on `nodes` equispaced points over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineBasis {
    pub nodes: usize,
    pub lo: f64,
    pub hi: f64,
}

impl SplineBasis {
    pub fn new(nodes: usize, lo: f64, hi: f64) -> Result<Self> {
        if nodes < 2 || !(hi > lo) {
            return Err(Error::InvalidGrid(format!("spline basis needs >= 2 nodes on a proper interval, got {nodes} on [{lo}, {hi}]")));
        }
        Ok(Self { nodes, lo, hi })
    }

    /// Level `n` basis on the unit interval with `n` nodes.
    pub fn level(n: usize) -> Result<Self> {
        Self::new(n, 0.0, 1.0)
    }

    /// Returns `(i, t)` such that the spline value at `x` is
    /// `(1 - t) * c[i] + t * c[i + 1]`; `x` is clamped into the interval.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let span = (self.nodes - 1) as f64;
        let s = ((x - self.lo) / (self.hi - self.lo) * span).clamp(0.0, span);
        let mut i = s.floor() as usize;
        if i >= self.nodes - 1 {
            i = self.nodes - 2;
        }
        (i, s - i as f64)
    }

    pub fn eval(&self, coeffs: &[f64], x: f64) -> f64 {
        let (i, t) = self.locate(x);
        (1.0 - t) * coeffs[i] + t * coeffs[i + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub spec: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl GridFunction {
    pub fn new(spec: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::ShapeMismatch("grid function needs at least one channel".into()));
        }
        if data.len() != spec.len() * channels {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {} nodes x {} channels",
                data.len(),
                spec.len(),
                channels
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { spec, channels, data })
    }

    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        Self { spec, channels, data: vec![0.0; spec.len() * channels] }
    }

    pub fn constant(spec: GridSpec, value: f64) -> Self {
        Self { spec, channels: 1, data: vec![value; spec.len()] }
    }

    /// Single-channel field from a function of physical coordinates.
    pub fn from_fn(spec: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut data = Vec::with_capacity(spec.len());
        for j in 0..spec.ny {
            let y = spec.y(j);
            for i in 0..spec.nx {
                data.push(f(spec.x(i), y));
            }
        }
        Self { spec, channels: 1, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[self.spec.index(i, j) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        let k = self.spec.index(i, j) * self.channels + c;
        self.data[k] = v;
    }

    pub fn channel(&self, c: usize) -> GridFunction {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        GridFunction { spec: self.spec, channels: 1, data }
    }

    /// Channelwise concatenation `(self, other)`.
    pub fn concat(&self, other: &GridFunction) -> Result<GridFunction> {
        if self.spec != other.spec {
            return Err(Error::ShapeMismatch("concatenated fields live on different grids".into()));
        }
        let (ca, cb) = (self.channels, other.channels);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for p in 0..self.spec.len() {
            data.extend_from_slice(&self.data[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&other.data[p * cb..(p + 1) * cb]);
        }
        Ok(GridFunction { spec: self.spec, channels: ca + cb, data })
    }

    /// Splits off the first `first` channels.
    pub fn split(&self, first: usize) -> (GridFunction, GridFunction) {
        let c = self.channels;
        let rest = c - first;
        let mut a = Vec::with_capacity(self.spec.len() * first);
        let mut b = Vec::with_capacity(self.spec.len() * rest);
        for p in 0..self.spec.len() {
            a.extend_from_slice(&self.data[p * c..p * c + first]);
            b.extend_from_slice(&self.data[p * c + first..(p + 1) * c]);
        }
        (
            GridFunction { spec: self.spec, channels: first, data: a },
            GridFunction { spec: self.spec, channels: rest, data: b },
        )
    }

    pub fn scaled(&self, s: f64) -> GridFunction {
        GridFunction { data: self.data.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    fn check_same_shape(&self, other: &GridFunction) -> Result<()> {
        if self.spec != other.spec || self.channels != other.channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.spec.nx, self.spec.ny, self.channels, other.spec.nx, other.spec.ny, other.channels
            )));
        }
        Ok(())
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &GridFunction) -> Result<GridFunction> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + s * b).collect();
        Ok(GridFunction { data, ..self.clone() })
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.axpy(-1.0, other)
    }

    pub fn max_abs_diff(&self, other: &GridFunction) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Squared L2 norm with explicit per-node weights (summed over channels).
pub fn weighted_sq_norm(f: &GridFunction, weights: &[f64]) -> f64 {
    let c = f.channels;
    weights
        .iter()
        .enumerate()
        .map(|(p, w)| w * f.data[p * c..(p + 1) * c].iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// Trapezoidal L2 norm over the whole grid, summed over channels.
pub fn l2_norm(f: &GridFunction) -> f64 {
    sq_l2_norm(f).sqrt()
}

pub fn sq_l2_norm(f: &GridFunction) -> f64 {
    let spec = f.spec;
    let c = f.channels;
    let mut acc = 0.0;
    for j in 0..spec.ny {
        for i in 0..spec.nx {
            let p = spec.index(i, j);
            let s: f64 = f.data[p * c..(p + 1) * c].iter().map(|v| v * v).sum();
            acc += spec.quad_weight(i, j) * s;
        }
    }
    acc
}

/// Relative error as a squared-norm ratio `||pred - truth||^2 / ||truth||^2`.
pub fn relative_l2(pred: &GridFunction, truth: &GridFunction) -> Result<f64> {
    let diff = pred.sub(truth)?;
    let denom = sq_l2_norm(truth);
    if denom <= 0.0 {
        return Err(Error::DegenerateReference);
    }
    Ok(sq_l2_norm(&diff) / denom)
}

/// Resolution level of `f`: the node count along x.
pub fn count_dof(f: &GridFunction) -> usize {
    f.spec.nx
}

/// Maps each target node to a source cell `(i, t)` along one axis. Node
/// positions are compared in exact integer arithmetic so that nested grids
/// hit source nodes with `t == 0` exactly.
#[derive(Debug, Clone)]
struct AxisMap {
    idx: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisMap {
    fn new(ns: usize, nt: usize) -> Self {
        let (num, den) = (ns - 1, nt - 1);
        let mut idx = Vec::with_capacity(nt);
        let mut frac = Vec::with_capacity(nt);
        for k in 0..nt {
            let p = k * num;
            let mut i = p / den;
            let mut r = p % den;
            if i >= ns - 1 {
                i = ns - 2;
                r = den;
            }
            idx.push(i);
            frac.push(r as f64 / den as f64);
        }
        Self { idx, frac }
    }
}

/// Bilinear resampling of `f` onto `target` (same physical extents).
pub fn project(f: &GridFunction, target: &GridSpec) -> Result<GridFunction> {
    if !f.spec.same_extents(target) {
        return Err(Error::MismatchedExtents);
    }
    if f.spec.nx == target.nx && f.spec.ny == target.ny {
        return Ok(GridFunction { spec: *target, ..f.clone() });
    }
    let (mx, my) = (AxisMap::new(f.spec.nx, target.nx), AxisMap::new(f.spec.ny, target.ny));
    let c = f.channels;
    let snx = f.spec.nx;
    let mut out = vec![0.0; target.len() * c];
    for jt in 0..target.ny {
        let (j, ty) = (my.idx[jt], my.frac[jt]);
        for it in 0..target.nx {
            let (i, tx) = (mx.idx[it], mx.frac[it]);
            let o = (jt * target.nx + it) * c;
            let taps = [
                ((1.0 - tx) * (1.0 - ty), j * snx + i),
                (tx * (1.0 - ty), j * snx + i + 1),
                ((1.0 - tx) * ty, (j + 1) * snx + i),
                (tx * ty, (j + 1) * snx + i + 1),
            ];
            for (w, s) in taps {
                if w != 0.0 {
                    for ch in 0..c {
                        out[o + ch] += w * f.data[s * c + ch];
                    }
                }
            }
        }
    }
    Ok(GridFunction { spec: *target, channels: c, data: out })
}

/// Adjoint of [`project`]: maps a cotangent on `g.spec` back to `source`.
pub fn project_adjoint(g: &GridFunction, source: &GridSpec) -> Result<GridFunction> {
    if !g.spec.same_extents(source) {
        return Err(Error::MismatchedExtents);
    }
    if g.spec.nx == source.nx && g.spec.ny == source.ny {
        return Ok(GridFunction { spec: *source, ..g.clone() });
    }
    let target = g.spec;
    let (mx, my) = (AxisMap::new(source.nx, target.nx), AxisMap::new(source.ny, target.ny));
    let c = g.channels;
    let snx = source.nx;
    let mut out = vec![0.0; source.len() * c];
    for jt in 0..target.ny {
        let (j, ty) = (my.idx[jt], my.frac[jt]);
        for it in 0..target.nx {
            let (i, tx) = (mx.idx[it], mx.frac[it]);
            let o = (jt * target.nx + it) * c;
            let taps = [
                ((1.0 - tx) * (1.0 - ty), j * snx + i),
                (tx * (1.0 - ty), j * snx + i + 1),
                ((1.0 - tx) * ty, (j + 1) * snx + i),
                (tx * ty, (j + 1) * snx + i + 1),
            ];
            for (w, s) in taps {
                if w != 0.0 {
                    for ch in 0..c {
                        out[s * c + ch] += w * g.data[o + ch];
                    }
                }
            }
        }
    }
    Ok(GridFunction { spec: *source, channels: c, data: out })
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn read_f64_vec(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub(crate) fn write_f64_slice(w: &mut impl Write, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

impl GridFunction {
    /// `GFN1` container: magic, `u32` nx, ny, channels, then the `f64`
    /// payload, all little-endian. Extents are not stored.
    pub fn write_gfn1(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"GFN1")?;
        for v in [self.spec.nx, self.spec.ny, self.channels] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        write_f64_slice(w, &self.data)
    }

    pub fn to_gfn1_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_gfn1(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a `GFN1` container; the field is placed on the unit square.
    pub fn read_gfn1(r: &mut impl Read) -> Result<Self> {
        read_magic(r, b"GFN1")?;
        let nx = read_u32(r)? as usize;
        let ny = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        let spec = GridSpec::new(nx, ny, 0.0, 0.0, 1.0, 1.0)?;
        let data = read_f64_vec(r, nx * ny * d)?;
        GridFunction::new(spec, d, data)
    }

    /// Reads a `GFN1` container onto caller-supplied extents.
    pub fn read_gfn1_on(r: &mut impl Read, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let f = Self::read_gfn1(r)?;
        let spec = GridSpec::new(f.spec.nx, f.spec.ny, x0, y0, x1, y1)?;
        Ok(GridFunction { spec, ..f })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_has_zero_norm() {
        let f = GridFunction::zeros(GridSpec::unit(17).unwrap(), 1);
        assert_eq!(l2_norm(&f), 0.0);
    }

    #[test]
    fn unit_constant_has_unit_norm() {
        let f = GridFunction::constant(GridSpec::unit(33).unwrap(), 1.0);
        assert!((l2_norm(&f) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn norm_of_x_matches_trapezoid_oracle() {
        // Independent oracle: 1-D composite trapezoid of x^2 on 64 panels
        // equals 1/3 + h^2/6, times the unit y-integral.
        let n = 65;
        let h = 1.0 / (n - 1) as f64;
        let oracle = (1.0 / 3.0 + h * h / 6.0_f64).sqrt();
        let f = GridFunction::from_fn(GridSpec::unit(n).unwrap(), |x, _| x);
        let got = l2_norm(&f);
        assert!((got - oracle).abs() < 1e-13, "{got} vs {oracle}");
        assert!((got - (1.0_f64 / 3.0).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn relative_l2_cases() {
        let spec = GridSpec::unit(9).unwrap();
        let t = GridFunction::from_fn(spec, |x, y| 1.0 + x * y);
        assert_eq!(relative_l2(&t, &t).unwrap(), 0.0);
        let z = GridFunction::zeros(spec, 1);
        assert!((relative_l2(&z, &t).unwrap() - 1.0).abs() < 1e-15);
        let p = t.scaled(1.1);
        assert!((relative_l2(&p, &t).unwrap() - 0.01).abs() < 1e-12);
        assert!(matches!(relative_l2(&t, &z), Err(Error::DegenerateReference)));
    }

    #[test]
    fn project_identity_is_bit_exact() {
        let spec = GridSpec::unit(33).unwrap();
        let f = GridFunction::from_fn(spec, |x, y| (7.0 * x).sin() * y.exp());
        let g = project(&f, &spec).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn project_reproduces_bilinear() {
        let f = GridFunction::from_fn(GridSpec::unit(17).unwrap(), |x, y| x + y);
        let target = GridSpec::unit(33).unwrap();
        let g = project(&f, &target).unwrap();
        let exact = GridFunction::from_fn(target, |x, y| x + y);
        assert!(g.max_abs_diff(&exact).unwrap() < 1e-12);

        let f = GridFunction::from_fn(GridSpec::unit(9).unwrap(), |x, y| 1.0 - 2.0 * x + 3.0 * y + 4.0 * x * y);
        let target = GridSpec::new(13, 21, 0.0, 0.0, 1.0, 1.0).unwrap();
        let g = project(&f, &target).unwrap();
        let exact = GridFunction::from_fn(target, |x, y| 1.0 - 2.0 * x + 3.0 * y + 4.0 * x * y);
        assert!(g.max_abs_diff(&exact).unwrap() < 1e-12);
    }

    #[test]
    fn project_rejects_mismatched_extents() {
        let f = GridFunction::zeros(GridSpec::unit(5).unwrap(), 1);
        let t = GridSpec::new(5, 5, 0.0, 0.0, 2.0, 1.0).unwrap();
        assert!(matches!(project(&f, &t), Err(Error::MismatchedExtents)));
    }

    #[test]
    fn nested_coarsening_is_injection() {
        let spec = GridSpec::unit(65).unwrap();
        let f = GridFunction::from_fn(spec, |x, y| (3.0 * x).cos() + y * y);
        let c = project(&f, &spec.coarsened().unwrap()).unwrap();
        for j in 0..33 {
            for i in 0..33 {
                assert_eq!(c.get(i, j, 0), f.get(2 * i, 2 * j, 0));
            }
        }
    }

    /// Independent bilinear evaluation by direct cell search in physical
    /// coordinates.
    fn bilinear_eval(f: &GridFunction, x: f64, y: f64) -> f64 {
        let s = f.spec;
        let mut i = ((x - s.x0) / s.hx()).floor() as isize;
        let mut j = ((y - s.y0) / s.hy()).floor() as isize;
        i = i.clamp(0, s.nx as isize - 2);
        j = j.clamp(0, s.ny as isize - 2);
        let (i, j) = (i as usize, j as usize);
        let tx = (x - s.x(i)) / s.hx();
        let ty = (y - s.y(j)) / s.hy();
        f.get(i, j, 0) * (1.0 - tx) * (1.0 - ty)
            + f.get(i + 1, j, 0) * tx * (1.0 - ty)
            + f.get(i, j + 1, 0) * (1.0 - tx) * ty
            + f.get(i + 1, j + 1, 0) * tx * ty
    }

    #[test]
    fn down_up_round_trip_matches_independent_interpolation() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, 0);
        let fine = GridSpec::unit(65).unwrap();
        let coarse = GridSpec::unit(33).unwrap();
        let data: Vec<f64> = (0..fine.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = GridFunction::new(fine, 1, data).unwrap();
        let round = project(&project(&f, &coarse).unwrap(), &fine).unwrap();

        // Oracle path: sample f at coarse nodes by index, interpolate back by
        // physical-coordinate cell search.
        let mut coarse_samples = GridFunction::zeros(coarse, 1);
        for j in 0..33 {
            for i in 0..33 {
                coarse_samples.set(i, j, 0, f.get(2 * i, 2 * j, 0));
            }
        }
        let oracle = GridFunction::from_fn(fine, |x, y| bilinear_eval(&coarse_samples, x, y));
        assert!(round.max_abs_diff(&oracle).unwrap() < 1e-12);
        let dev = relative_l2(&round, &f).unwrap();
        let oracle_dev = relative_l2(&oracle, &f).unwrap();
        assert!((dev - oracle_dev).abs() <= 1e-12 * (1.0 + oracle_dev));
    }

    #[test]
    fn round_trip_error_is_second_order() {
        let smooth = |x: f64, y: f64| (2.0 * x).sin() * (3.0 * y).cos() + x * x * y;
        let mut errs = Vec::new();
        for n in [17usize, 33, 65, 129] {
            let fine = GridSpec::unit(n).unwrap();
            let f = GridFunction::from_fn(fine, smooth);
            let back = project(&project(&f, &fine.coarsened().unwrap()).unwrap(), &fine).unwrap();
            errs.push(l2_norm(&back.sub(&f).unwrap()));
        }
        for w in errs.windows(2) {
            let rate = (w[0] / w[1]).log2();
            assert!(rate > 1.8, "rate {rate} from {errs:?}");
        }
    }

    #[test]
    fn project_adjoint_is_transpose() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, 1);
        let src = GridSpec::unit(9).unwrap();
        let dst = GridSpec::unit(17).unwrap();
        let f = GridFunction::new(src, 2, (0..src.len() * 2).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let g = GridFunction::new(dst, 2, (0..dst.len() * 2).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let pf = project(&f, &dst).unwrap();
        let ptg = project_adjoint(&g, &src).unwrap();
        let lhs: f64 = pf.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.data.iter().zip(&ptg.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn count_dof_reports_level() {
        let f = GridFunction::zeros(GridSpec::unit(33).unwrap(), 1);
        assert_eq!(count_dof(&f), 33);
        let f = GridFunction::zeros(GridSpec::unit(129).unwrap(), 1);
        assert_eq!(count_dof(&f), 129);
        let f = GridFunction::zeros(GridSpec::unit(65).unwrap(), 3);
        let down = project(&f, &f.spec.coarsened().unwrap()).unwrap();
        assert_eq!(count_dof(&down), 33);
        let up = project(&down, &down.spec.refined()).unwrap();
        assert_eq!(count_dof(&up), 65);
    }

    #[test]
    fn gfn1_round_trip() {
        let spec = GridSpec::new(5, 3, 0.0, 0.0, 1.0, 1.0).unwrap();
        let f = GridFunction::new(spec, 2, (0..30).map(|k| k as f64 * 0.1 - 1.3).collect()).unwrap();
        let bytes = f.to_gfn1_bytes();
        assert_eq!(&bytes[..4], b"GFN1");
        assert_eq!(bytes.len(), 16 + 30 * 8);
        let g = GridFunction::read_gfn1(&mut bytes.as_slice()).unwrap();
        assert_eq!(f, g);
        assert_eq!(g.to_gfn1_bytes(), bytes);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(GridSpec::new(1, 4, 0.0, 0.0, 1.0, 1.0).is_err());
        assert!(GridSpec::new(4, 4, 1.0, 0.0, 1.0, 1.0).is_err());
        let spec = GridSpec::unit(3).unwrap();
        assert!(GridFunction::new(spec, 1, vec![0.0; 8]).is_err());
        assert!(GridFunction::new(spec, 1, vec![f64::NAN; 9]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn field(n: usize) -> impl Strategy<Value = GridFunction> {
            proptest::collection::vec(-10.0f64..10.0, n * n)
                .prop_map(move |d| GridFunction::new(GridSpec::unit(n).unwrap(), 1, d).unwrap())
        }

        proptest! {
            #[test]
            fn norm_triangle_and_homogeneity(f in field(9), g in field(9), s in -5.0f64..5.0) {
                let sum = f.axpy(1.0, &g).unwrap();
                prop_assert!(l2_norm(&sum) <= l2_norm(&f) + l2_norm(&g) + 1e-12);
                let scaled = f.scaled(s);
                prop_assert!((l2_norm(&scaled) - s.abs() * l2_norm(&f)).abs() <= 1e-12 * (1.0 + l2_norm(&scaled)));
            }

            #[test]
            fn gfn1_bytes_round_trip(f in field(5)) {
                let bytes = f.to_gfn1_bytes();
                let g = GridFunction::read_gfn1(&mut bytes.as_slice()).unwrap();
                prop_assert_eq!(g.to_gfn1_bytes(), bytes);
            }
        }
    }
}
