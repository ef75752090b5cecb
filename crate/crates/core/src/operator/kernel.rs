//! Interpolated convolution: kernels defined by `K x K` nodal matrices on
//! `[-a/2, a/2]^2` and evaluated anywhere in between by bilinear splines, so
//! the same parameters apply at every grid resolution.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, GridSpec};
use crate::rng::Rng;

/// `c (m x n) = op(a) (m x k) * op(b) (k x n)`, row-major, optionally
/// accumulating into `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpKernel {
    /// Nodal points per axis.
    pub k: usize,
    /// Full support width `a`; the kernel lives on `[-a/2, a/2]^2`.
    pub support: f64,
    pub d_out: usize,
    pub d_in: usize,
    /// Nodal matrices, `[(ky * k + kx) * d_out * d_in + o * d_in + i]`.
    pub nodal: Vec<f64>,
}

/// Taps of a kernel on a particular grid: integer offsets, their spline
/// stencils into the nodal array, and the per-tap quadrature weight.
#[derive(Debug, Clone)]
pub struct TapPlan {
    pub offsets: Vec<(isize, isize)>,
    /// Per tap: up to four (nodal index, spline weight) pairs.
    pub stencils: Vec<Vec<(usize, f64)>>,
    pub weight: f64,
}

fn spline_1d(k: usize, support: f64, t: f64) -> [(usize, f64); 2] {
    let u = ((t + 0.5 * support) / (support / (k - 1) as f64)).clamp(0.0, (k - 1) as f64);
    let i = (u.floor() as usize).min(k - 2);
    let f = u - i as f64;
    [(i, 1.0 - f), (i + 1, f)]
}

impl InterpKernel {
    pub fn zeros(k: usize, support: f64, d_in: usize, d_out: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("kernel needs at least 2 nodal points per axis, got {k}")));
        }
        if !(support > 0.0 && support <= 1.0) {
            return Err(Error::Config(format!("kernel support {support} outside (0, 1]")));
        }
        Ok(Self { k, support, d_out, d_in, nodal: vec![0.0; k * k * d_out * d_in] })
    }

    /// Nodal entries drawn from `U(-1/sqrt(d_in K^2), 1/sqrt(d_in K^2))`.
    pub fn random(k: usize, support: f64, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        let mut kern = Self::zeros(k, support, d_in, d_out)?;
        let bound = 1.0 / ((d_in * k * k) as f64).sqrt();
        for v in kern.nodal.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        Ok(kern)
    }

    fn block(&self) -> usize {
        self.d_out * self.d_in
    }

    /// Kernel matrix at offset `(tx, ty)`, row-major `d_out x d_in`.
    pub fn eval(&self, tx: f64, ty: f64) -> Vec<f64> {
        let bs = self.block();
        let mut out = vec![0.0; bs];
        for (iy, wy) in spline_1d(self.k, self.support, ty) {
            for (ix, wx) in spline_1d(self.k, self.support, tx) {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let node = &self.nodal[(iy * self.k + ix) * bs..(iy * self.k + ix + 1) * bs];
                for (o, v) in out.iter_mut().zip(node) {
                    *o += w * v;
                }
            }
        }
        out
    }

    pub fn plan(&self, spec: &GridSpec) -> TapPlan {
        let half = 0.5 * self.support;
        let rx = (half / spec.hx() + 1e-9).floor() as isize;
        let ry = (half / spec.hy() + 1e-9).floor() as isize;
        let mut offsets = Vec::new();
        let mut stencils = Vec::new();
        for my in -ry..=ry {
            for mx in -rx..=rx {
                let (tx, ty) = (mx as f64 * spec.hx(), my as f64 * spec.hy());
                let mut st = Vec::with_capacity(4);
                for (iy, wy) in spline_1d(self.k, self.support, ty) {
                    for (ix, wx) in spline_1d(self.k, self.support, tx) {
                        if wx * wy != 0.0 {
                            st.push((iy * self.k + ix, wx * wy));
                        }
                    }
                }
                offsets.push((mx, my));
                stencils.push(st);
            }
        }
        let q = |h: f64| h * (self.k - 1) as f64 / (self.support * self.k as f64);
        TapPlan { offsets, stencils, weight: q(spec.hx()) * q(spec.hy()) }
    }

    /// Weighted tap matrices stacked as `(taps * d_in) x d_out`.
    fn effective(&self, plan: &TapPlan) -> Vec<f64> {
        let (di, d_o, bs) = (self.d_in, self.d_out, self.block());
        let mut w = vec![0.0; plan.offsets.len() * di * d_o];
        for (t, st) in plan.stencils.iter().enumerate() {
            for &(node, s) in st {
                let m = &self.nodal[node * bs..(node + 1) * bs];
                let s = s * plan.weight;
                for o in 0..d_o {
                    for i in 0..di {
                        w[(t * di + i) * d_o + o] += s * m[o * di + i];
                    }
                }
            }
        }
        w
    }

    fn check(&self, x: &GridFunction) -> Result<()> {
        if x.channels != self.d_in {
            return Err(Error::ShapeMismatch(format!("kernel expects {} input channels, got {}", self.d_in, x.channels)));
        }
        Ok(())
    }

    pub fn forward(&self, x: &GridFunction) -> Result<GridFunction> {
        self.check(x)?;
        let plan = self.plan(&x.spec);
        let cols = im2col(x, &plan);
        let w = self.effective(&plan);
        let n = x.spec.len();
        let mut data = vec![0.0; n * self.d_out];
        gemm(n, plan.offsets.len() * self.d_in, self.d_out, &cols, false, &w, false, &mut data, false);
        Ok(GridFunction { spec: x.spec, channels: self.d_out, data })
    }

    /// Accumulates the nodal gradient into `grad` and returns the input gradient.
    pub fn backward(&self, x: &GridFunction, dy: &GridFunction, grad: &mut InterpKernel) -> Result<GridFunction> {
        self.check(x)?;
        if dy.spec != x.spec || dy.channels != self.d_out {
            return Err(Error::ShapeMismatch("upstream gradient does not match the kernel output".into()));
        }
        let plan = self.plan(&x.spec);
        let n = x.spec.len();
        let kk = plan.offsets.len() * self.d_in;
        let cols = im2col(x, &plan);
        // dW = cols^T dy
        let mut dw = vec![0.0; kk * self.d_out];
        gemm(kk, n, self.d_out, &cols, true, &dy.data, false, &mut dw, false);
        let (di, d_o, bs) = (self.d_in, self.d_out, self.block());
        for (t, st) in plan.stencils.iter().enumerate() {
            for &(node, s) in st {
                let g = &mut grad.nodal[node * bs..(node + 1) * bs];
                let s = s * plan.weight;
                for o in 0..d_o {
                    for i in 0..di {
                        g[o * di + i] += s * dw[(t * di + i) * d_o + o];
                    }
                }
            }
        }
        // dcols = dy W^T, scattered back onto the input nodes.
        let w = self.effective(&plan);
        let mut dcols = vec![0.0; n * kk];
        gemm(n, self.d_out, kk, &dy.data, false, &w, true, &mut dcols, false);
        Ok(col2im(&dcols, &x.spec, self.d_in, &plan))
    }
}

fn im2col(x: &GridFunction, plan: &TapPlan) -> Vec<f64> {
    let s = x.spec;
    let (nx, ny, d) = (s.nx as isize, s.ny as isize, x.channels);
    let taps = plan.offsets.len();
    let mut cols = vec![0.0; s.len() * taps * d];
    for j in 0..ny {
        for i in 0..nx {
            let row = ((j * nx + i) as usize) * taps * d;
            for (t, &(mx, my)) in plan.offsets.iter().enumerate() {
                let (si, sj) = (i - mx, j - my);
                if si < 0 || sj < 0 || si >= nx || sj >= ny {
                    continue;
                }
                let src = ((sj * nx + si) as usize) * d;
                cols[row + t * d..row + (t + 1) * d].copy_from_slice(&x.data[src..src + d]);
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], spec: &GridSpec, d: usize, plan: &TapPlan) -> GridFunction {
    let (nx, ny) = (spec.nx as isize, spec.ny as isize);
    let taps = plan.offsets.len();
    let mut out = vec![0.0; spec.len() * d];
    for j in 0..ny {
        for i in 0..nx {
            let row = ((j * nx + i) as usize) * taps * d;
            for (t, &(mx, my)) in plan.offsets.iter().enumerate() {
                let (si, sj) = (i - mx, j - my);
                if si < 0 || sj < 0 || si >= nx || sj >= ny {
                    continue;
                }
                let dst = ((sj * nx + si) as usize) * d;
                for c in 0..d {
                    out[dst + c] += dcols[row + t * d + c];
                }
            }
        }
    }
    GridFunction { spec: *spec, channels: d, data: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Direct summation `sum_taps w * kappa(m h) x(p - m)` with the kernel
    /// evaluated by its own spline routine.
    fn direct(k: &InterpKernel, x: &GridFunction) -> GridFunction {
        let s = x.spec;
        let mut out = GridFunction::zeros(s, k.d_out);
        let r = (0.5 * k.support / s.hx() + 1e-9).floor() as isize;
        let w1 = s.hx() * (k.k - 1) as f64 / (k.support * k.k as f64);
        for j in 0..s.ny as isize {
            for i in 0..s.nx as isize {
                for my in -r..=r {
                    for mx in -r..=r {
                        let (si, sj) = (i - mx, j - my);
                        if si < 0 || sj < 0 || si >= s.nx as isize || sj >= s.ny as isize {
                            continue;
                        }
                        let m = k.eval(mx as f64 * s.hx(), my as f64 * s.hy());
                        for o in 0..k.d_out {
                            let mut acc = out.get(i as usize, j as usize, o);
                            for c in 0..k.d_in {
                                acc += w1 * w1 * m[o * k.d_in + c] * x.get(si as usize, sj as usize, c);
                            }
                            out.set(i as usize, j as usize, o, acc);
                        }
                    }
                }
            }
        }
        out
    }

    fn random_field(spec: GridSpec, d: usize, seed: u64) -> GridFunction {
        let mut r = rng::stream(seed, 0);
        let data = (0..spec.len() * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        GridFunction::new(spec, d, data).unwrap()
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..8).map(|v| (v as f64) * 0.5 - 1.0).collect();
        let mut c = vec![0.0; 6];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((c[i * n + j] - e).abs() < 1e-12);
            }
        }
        // a read as a 3x4 matrix and transposed.
        let mut ct = vec![0.0; 4 * 4];
        gemm(4, 3, 4, &a, true, &a, false, &mut ct, false);
        let e: f64 = (0..3).map(|l| a[l * 4 + 1] * a[l * 4 + 2]).sum();
        assert!((ct[4 + 2] - e).abs() < 1e-12);
    }

    #[test]
    fn nodal_values_reproduced() {
        let kern = InterpKernel::random(5, 0.25, 2, 3, &mut rng::stream(1, 0)).unwrap();
        let h = 0.25 / 4.0;
        for ky in 0..5 {
            for kx in 0..5 {
                let m = kern.eval(-0.125 + kx as f64 * h, -0.125 + ky as f64 * h);
                let node = &kern.nodal[(ky * 5 + kx) * 6..(ky * 5 + kx + 1) * 6];
                for (a, b) in m.iter().zip(node) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let kern = InterpKernel::zeros(3, 0.25, 2, 2).unwrap();
        let x = random_field(GridSpec::unit(9).unwrap(), 2, 3);
        assert!(kern.forward(&x).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernel_on_constant() {
        // K = 3 with only the centre node set to 1 and a nominal grid (h = a/2):
        // one active tap, weight (1/K)^2.
        let spec = GridSpec::unit(17).unwrap();
        let mut kern = InterpKernel::zeros(3, 2.0 * spec.hx(), 1, 1).unwrap();
        kern.nodal[4] = 1.0;
        let c = 2.5;
        let y = kern.forward(&GridFunction::constant(spec, c)).unwrap();
        assert!((y.get(8, 8, 0) - c / 9.0).abs() < 1e-14);
        // At double resolution the half-offset taps pick up 1/2 of the centre.
        let fine = spec.refined();
        let y2 = kern.forward(&GridFunction::constant(fine, c)).unwrap();
        let expect = c * (1.0 / 6.0f64).powi(2) * (1.0f64 + 0.5 + 0.5).powi(2);
        assert!((y2.get(16, 16, 0) - expect).abs() < 1e-14);
    }

    #[test]
    fn forward_matches_direct_sum() {
        for (n, support) in [(9, 0.5), (17, 0.25), (33, 0.25)] {
            let kern = InterpKernel::random(3, support, 2, 3, &mut rng::stream(n as u64, 1)).unwrap();
            let x = random_field(GridSpec::unit(n).unwrap(), 2, 7);
            let d = direct(&kern, &x);
            assert!(kern.forward(&x).unwrap().max_abs_diff(&d).unwrap() < 1e-12);
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        let spec = GridSpec::unit(9).unwrap();
        let kern = InterpKernel::random(3, 0.5, 2, 3, &mut rng::stream(2, 1)).unwrap();
        let x = random_field(spec, 2, 4);
        let dy = random_field(spec, 3, 5);
        let mut grad = InterpKernel::zeros(3, 0.5, 2, 3).unwrap();
        let dx = kern.backward(&x, &dy, &mut grad).unwrap();
        // <dy, F x'> = <F^T dy, x'> for a probe x'.
        let probe = random_field(spec, 2, 6);
        let lhs: f64 = dy.data.iter().zip(&kern.forward(&probe).unwrap().data).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // <dy, F_theta' x> is linear in theta; the gradient is its coefficient vector.
        let mut dir = kern.clone();
        let mut r = rng::stream(9, 9);
        dir.nodal.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        let lhs: f64 = dy.data.iter().zip(&dir.forward(&x).unwrap().data).map(|(a, b)| a * b).sum();
        let rhs: f64 = grad.nodal.iter().zip(&dir.nodal).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn smooth_input_converges_across_resolutions() {
        let mut kern = InterpKernel::random(5, 0.25, 1, 1, &mut rng::stream(3, 3)).unwrap();
        kern.nodal.iter_mut().for_each(|v| *v = v.abs());
        let f = |x: f64, y: f64| (2.0 * x).sin() * (1.0 + y * y);
        // Compare each level against the next finer level on the shared nodes,
        // away from the zero-extension boundary layer.
        let mut diffs = Vec::new();
        for n in [17, 33, 65] {
            let coarse = GridSpec::unit(n).unwrap();
            let fine = GridSpec::unit(2 * n - 1).unwrap();
            let yc = kern.forward(&GridFunction::from_fn(coarse, f)).unwrap();
            let yf = kern.forward(&GridFunction::from_fn(fine, f)).unwrap();
            let mut m: f64 = 0.0;
            for j in 0..n {
                for i in 0..n {
                    let (x, y) = (coarse.x(i), coarse.y(j));
                    if !(0.2..=0.8).contains(&x) || !(0.2..=0.8).contains(&y) {
                        continue;
                    }
                    let a = yc.get(i, j, 0);
                    let b = yf.get(2 * i, 2 * j, 0);
                    m = m.max((a - b).abs() / a.abs().max(1e-3));
                }
            }
            diffs.push(m);
        }
        assert!(diffs[1] < diffs[0] && diffs[2] < diffs[1], "{diffs:?}");
    }
}
