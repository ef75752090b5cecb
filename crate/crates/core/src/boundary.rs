//! Random Dirichlet data, boundary traces, and the kernel extension that
//! lifts a trace to a field over the whole domain.
//!
//! Boundary nodes are ordered the way `psi` walks the unit square: start at
//! the top-left corner, go along the top edge towards +x, down the right
//! edge, back along the bottom and up the left edge. For other polygons
//! (rectangles, L and I shapes) the same walk is parameterized by arc length,
//! starting at the top-most, left-most corner and keeping the domain on the
//! right-hand side.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, GridSpec};
use crate::rng::Rng;

/// Coefficients of the random periodic boundary function
/// `g(s) = sum_n (n+1)^-k [a_n cos(2 pi n (s+s0) + b_n) + c_n sin(2 pi n (s+s0) + d_n)] + e_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierBoundaryParams {
    #[serde(default = "default_k")]
    pub k: f64,
    pub s0: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub e: Vec<f64>,
}

fn default_k() -> f64 {
    2.5
}

pub const DEFAULT_MODES: usize = 15;
pub const DEFAULT_DECAY: f64 = 2.5;

impl FourierBoundaryParams {
    pub fn modes(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.len();
        if n == 0 {
            return Err(Error::Config("boundary parameters need at least one mode".into()));
        }
        for (name, v) in [("b", &self.b), ("c", &self.c), ("d", &self.d), ("e", &self.e)] {
            if v.len() != n {
                return Err(Error::Config(format!("boundary array {name} has {} entries, expected {n}", v.len())));
            }
        }
        Ok(())
    }

    pub fn zeros(n: usize) -> Self {
        Self { k: DEFAULT_DECAY, s0: 0.0, a: vec![0.0; n], b: vec![0.0; n], c: vec![0.0; n], d: vec![0.0; n], e: vec![0.0; n] }
    }

    /// Draws `a, c ~ U(0.5, 1)`, `b, d ~ U(pi/4, 5 pi/4)`, `e ~ U(-1/4, 1/4)`,
    /// `s0 ~ U(0, 1)` with `N = 15`, `k = 2.5`.
    pub fn sample(rng: &mut Rng) -> Self {
        let n = DEFAULT_MODES;
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
        let a = draw(0.5, 1.0);
        let b = draw(PI / 4.0, 5.0 * PI / 4.0);
        let c = draw(0.5, 1.0);
        let d = draw(PI / 4.0, 5.0 * PI / 4.0);
        let e = draw(-0.25, 0.25);
        let s0 = rng.gen_range(0.0..1.0);
        Self { k: DEFAULT_DECAY, s0, a, b, c, d, e }
    }

    /// The parameter set recorded for the 10x10 large-square experiment.
    pub fn large_square_record() -> Self {
        Self {
            k: DEFAULT_DECAY,
            s0: 0.1660,
            a: vec![0.5647, 0.6172, 0.5058, 0.5864, 0.9923, 0.7664, 0.9588, 0.5977, 0.7735, 0.9409, 0.7905, 0.6819, 0.7892, 0.9299, 0.9494],
            b: vec![2.2939, 0.9632, 2.3627, 2.1272, 2.1576, 1.2863, 2.5159, 1.8916, 2.4059, 2.9958, 3.2609, 3.7874, 1.0620, 3.7781, 2.4301],
            c: vec![0.7819, 0.8284, 0.8038, 0.5504, 0.6545, 0.9865, 0.8683, 0.5224, 0.8027, 0.8873, 0.8411, 0.8136, 0.7337, 0.5664, 0.9318],
            d: vec![2.1178, 1.9446, 3.7620, 1.7539, 1.8797, 3.4129, 0.8300, 1.4031, 3.2959, 3.6663, 1.0197, 3.8854, 2.1395, 1.3300, 3.8331],
            e: vec![
                -0.1347, 0.0196, -0.0148, 0.0468, 0.0072, 0.0975, 0.1159, 0.1680, 0.2349, 0.2215, -0.2226, 0.1697, 0.0274, -0.1462, -0.1749,
            ],
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let p: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// Evaluates the random periodic boundary function at `s`.
pub fn sample_gtilde(params: &FourierBoundaryParams, s: f64) -> f64 {
    let mut acc = 0.0;
    for n in 1..=params.modes() {
        let i = n - 1;
        let decay = ((n + 1) as f64).powf(-params.k);
        let phase = 2.0 * PI * n as f64 * (s + params.s0);
        acc += decay * params.a[i] * (phase + params.b[i]).cos() + decay * params.c[i] * (phase + params.d[i]).sin() + params.e[i];
    }
    acc
}

/// Clockwise map from `[0, 1)` onto the unit-square boundary, starting at
/// the top-left corner.
pub fn psi(s: f64) -> (f64, f64) {
    if s < 0.25 {
        (4.0 * s, 1.0)
    } else if s < 0.5 {
        (1.0, -4.0 * s + 2.0)
    } else if s < 0.75 {
        (-4.0 * s + 3.0, 0.0)
    } else {
        (0.0, 4.0 * s - 3.0)
    }
}

/// Ordered boundary nodes of a grid-aligned polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLoop {
    /// Grid indices `(i, j)` in traversal order.
    pub nodes: Vec<(usize, usize)>,
    pub points: Vec<[f64; 2]>,
    /// Arc-length parameter in `[0, 1)`.
    pub s: Vec<f64>,
    /// Midpoint-rule arc-length weights.
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Dir {
    E,
    S,
    W,
    N,
}

impl Dir {
    fn right(self) -> Self {
        match self {
            Dir::E => Dir::S,
            Dir::S => Dir::W,
            Dir::W => Dir::N,
            Dir::N => Dir::E,
        }
    }
    fn left(self) -> Self {
        self.right().right().right()
    }
}

impl BoundaryLoop {
    pub fn rectangle(spec: &GridSpec) -> Self {
        Self::from_cells(spec, |_, _| true).expect("a full rectangle always has a boundary loop")
    }

    /// Traces the outer boundary of the union of grid cells for which
    /// `cell(i, j)` holds (cell `(i, j)` spans nodes `i..=i+1`, `j..=j+1`).
    pub fn from_cells(spec: &GridSpec, cell: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let (nx, ny) = (spec.nx, spec.ny);
        let inside = |i: isize, j: isize| -> bool {
            i >= 0 && j >= 0 && (i as usize) < nx - 1 && (j as usize) < ny - 1 && cell(i as usize, j as usize)
        };
        // A directed edge keeps the domain on its right: (right cell, left cell).
        let valid = |i: isize, j: isize, d: Dir| -> bool {
            let (r, l) = match d {
                Dir::E => ((i, j - 1), (i, j)),
                Dir::S => ((i - 1, j - 1), (i, j - 1)),
                Dir::W => ((i - 1, j), (i - 1, j - 1)),
                Dir::N => ((i, j), (i - 1, j)),
            };
            inside(r.0, r.1) && !inside(l.0, l.1)
        };
        let step = |i: isize, j: isize, d: Dir| match d {
            Dir::E => (i + 1, j),
            Dir::S => (i, j - 1),
            Dir::W => (i - 1, j),
            Dir::N => (i, j + 1),
        };
        // Start: top-most row containing domain nodes, left-most node there.
        let mut start = None;
        'outer: for j in (0..ny as isize).rev() {
            for i in 0..nx as isize {
                if valid(i, j, Dir::E) {
                    start = Some((i, j));
                    break 'outer;
                }
            }
        }
        let (si, sj) = start.ok_or_else(|| Error::InvalidLayout("domain has no cells".into()))?;
        let mut nodes = vec![(si as usize, sj as usize)];
        let (mut i, mut j, mut d) = (si, sj, Dir::E);
        let limit = 4 * nx * ny;
        loop {
            let (ni, nj) = step(i, j, d);
            (i, j) = (ni, nj);
            if (i, j) == (si, sj) {
                break;
            }
            nodes.push((i as usize, j as usize));
            if nodes.len() > limit {
                return Err(Error::InvalidLayout("boundary trace did not close".into()));
            }
            d = [d.right(), d, d.left()]
                .into_iter()
                .find(|&c| valid(i, j, c))
                .ok_or_else(|| Error::InvalidLayout(format!("boundary trace stuck at node ({i}, {j})")))?;
        }
        let points: Vec<[f64; 2]> = nodes.iter().map(|&(i, j)| [spec.x(i), spec.y(j)]).collect();
        let m = points.len();
        let seg: Vec<f64> = (0..m)
            .map(|k| {
                let (a, b) = (points[k], points[(k + 1) % m]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            })
            .collect();
        let perimeter: f64 = seg.iter().sum();
        let mut s = Vec::with_capacity(m);
        let mut acc = 0.0;
        for len in &seg {
            s.push(acc / perimeter);
            acc += len;
        }
        let weights = (0..m).map(|k| 0.5 * (seg[k] + seg[(k + m - 1) % m])).collect();
        Ok(Self { nodes, points, s, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Edge count of the polygon (direction changes along the loop).
    pub fn corner_count(&self) -> usize {
        let m = self.points.len();
        let dir = |k: usize| {
            let (a, b) = (self.points[k], self.points[(k + 1) % m]);
            let sign = |d: f64| (d > 0.0) as i8 - (d < 0.0) as i8;
            (sign(b[0] - a[0]), sign(b[1] - a[1]))
        };
        (0..m).filter(|&k| dir(k) != dir((k + m - 1) % m)).count()
    }
}

/// Dirichlet values on the boundary nodes of a rectangular grid, in loop order.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl BoundaryTrace {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        let expected = 2 * (spec.nx - 1) + 2 * (spec.ny - 1);
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!("trace of length {} on a grid needing {expected}", values.len())));
        }
        Ok(Self { spec, values })
    }

    pub fn constant(spec: GridSpec, c: f64) -> Self {
        Self { spec, values: vec![c; 2 * (spec.nx - 1) + 2 * (spec.ny - 1)] }
    }

    pub fn boundary_loop(&self) -> BoundaryLoop {
        BoundaryLoop::rectangle(&self.spec)
    }
}

pub fn trace_from_params(params: &FourierBoundaryParams, spec: &GridSpec) -> BoundaryTrace {
    let lp = BoundaryLoop::rectangle(spec);
    BoundaryTrace { spec: *spec, values: lp.s.iter().map(|&s| sample_gtilde(params, s)).collect() }
}

/// Normalized inverse-square kernel weights from every non-boundary domain
/// node to the loop nodes. Boundary nodes copy the trace exactly.
#[derive(Debug, Clone)]
pub struct ExtensionOperator {
    pub spec: GridSpec,
    loop_nodes: Vec<usize>,
    interior: Vec<usize>,
    /// Row-major `interior.len() x loop_nodes.len()`.
    weights: Vec<f64>,
}

impl ExtensionOperator {
    /// `domain` flags the nodes that receive extended values.
    pub fn new(spec: &GridSpec, lp: &BoundaryLoop, domain: &[bool]) -> Self {
        let loop_nodes: Vec<usize> = lp.nodes.iter().map(|&(i, j)| spec.index(i, j)).collect();
        let mut on_loop = vec![false; spec.len()];
        for &p in &loop_nodes {
            on_loop[p] = true;
        }
        let interior: Vec<usize> = (0..spec.len()).filter(|&p| domain[p] && !on_loop[p]).collect();
        let m = loop_nodes.len();
        let mut weights = vec![0.0; interior.len() * m];
        for (r, &p) in interior.iter().enumerate() {
            let (x, y) = (spec.x(p % spec.nx), spec.y(p / spec.nx));
            let row = &mut weights[r * m..(r + 1) * m];
            let mut total = 0.0;
            for (k, pt) in lp.points.iter().enumerate() {
                let d2 = (x - pt[0]).powi(2) + (y - pt[1]).powi(2);
                let w = lp.weights[k] / d2;
                row[k] = w;
                total += w;
            }
            for w in row.iter_mut() {
                *w /= total;
            }
        }
        Self { spec: *spec, loop_nodes, interior, weights }
    }

    pub fn rectangle(spec: &GridSpec) -> Self {
        Self::new(spec, &BoundaryLoop::rectangle(spec), &vec![true; spec.len()])
    }

    pub fn apply(&self, values: &[f64]) -> Result<GridFunction> {
        let m = self.loop_nodes.len();
        if values.len() != m {
            return Err(Error::ShapeMismatch(format!("{} boundary values for a loop of {m} nodes", values.len())));
        }
        let mut out = vec![0.0; self.spec.len()];
        for (k, &p) in self.loop_nodes.iter().enumerate() {
            out[p] = values[k];
        }
        for (r, &p) in self.interior.iter().enumerate() {
            out[p] = self.weights[r * m..(r + 1) * m].iter().zip(values).map(|(w, g)| w * g).sum();
        }
        Ok(GridFunction { spec: self.spec, channels: 1, data: out })
    }
}

pub fn extend(trace: &BoundaryTrace) -> GridFunction {
    ExtensionOperator::rectangle(&trace.spec).apply(&trace.values).expect("trace length matches its own loop")
}

/// Boundary values of a single-channel field in loop order.
pub fn extract_trace(f: &GridFunction) -> Result<BoundaryTrace> {
    if f.channels != 1 {
        return Err(Error::ShapeMismatch(format!("extract_trace needs one channel, got {}", f.channels)));
    }
    let lp = BoundaryLoop::rectangle(&f.spec);
    let values = lp.nodes.iter().map(|&(i, j)| f.get(i, j, 0)).collect();
    Ok(BoundaryTrace { spec: f.spec, values })
}
