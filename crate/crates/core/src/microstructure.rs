//! Piecewise-constant coefficient fields: Voronoi, graded Voronoi,
//! hexagonal and fiber-composite microstructures rasterized per node.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_f64_vec, read_magic, read_u32, write_f64_slice, GridFunction, GridSpec};
use crate::rng;
use crate::schwarz::SubdomainWindow;

/// Coefficient draws below this floor are resampled to keep `a` elliptic.
pub const VALUE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub cell_ids: Vec<u32>,
}

impl CoefficientField {
    pub fn new(spec: GridSpec, values: Vec<f64>, cell_ids: Vec<u32>) -> Result<Self> {
        if values.len() != spec.len() || cell_ids.len() != spec.len() {
            return Err(Error::ShapeMismatch(format!(
                "coefficient arrays of length {}/{} on a grid of {} nodes",
                values.len(),
                cell_ids.len(),
                spec.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidRecipe(format!("coefficient value {v} is not strictly positive")));
        }
        Ok(Self { spec, values, cell_ids })
    }

    pub fn constant(spec: GridSpec, value: f64) -> Result<Self> {
        Self::new(spec, vec![value; spec.len()], vec![0; spec.len()])
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.spec.index(i, j)]
    }

    pub fn to_grid_function(&self) -> GridFunction {
        GridFunction { spec: self.spec, channels: 1, data: self.values.clone() }
    }

    pub fn distinct_cells(&self) -> usize {
        self.cell_ids.iter().collect::<HashSet<_>>().len()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `CFN1` container: the `GFN1` layout (with `d = 1`) followed by the
    /// `u32` cell-id array.
    pub fn write_cfn1(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"CFN1")?;
        for v in [self.spec.nx, self.spec.ny, 1] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        write_f64_slice(w, &self.values)?;
        let mut buf = Vec::with_capacity(self.cell_ids.len() * 4);
        for id in &self.cell_ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_cfn1_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_cfn1(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a `CFN1` container onto the unit square.
    pub fn read_cfn1(r: &mut impl Read) -> Result<Self> {
        read_magic(r, b"CFN1")?;
        let nx = read_u32(r)? as usize;
        let ny = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        if d != 1 {
            return Err(Error::Format(format!("CFN1 expects one channel, found {d}")));
        }
        let spec = GridSpec::new(nx, ny, 0.0, 0.0, 1.0, 1.0)?;
        let values = read_f64_vec(r, spec.len())?;
        let mut ids = vec![0u8; spec.len() * 4];
        r.read_exact(&mut ids)?;
        let cell_ids = ids.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(spec, values, cell_ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MicrostructureKind {
    Voronoi,
    /// Centers at `(x0 + Lx u^px, y0 + Ly v^py)` for uniform `u, v`.
    GradedVoronoi { exponent_x: f64, exponent_y: f64 },
    Hexagonal,
    /// `cell_count` is the fiber count unless `fraction` is given.
    Fiber {
        radius: f64,
        fiber_value: f64,
        matrix_value: f64,
        #[serde(default)]
        fraction: Option<f64>,
    },
}

impl MicrostructureKind {
    pub fn graded(exponent: f64) -> Self {
        Self::GradedVoronoi { exponent_x: exponent, exponent_y: exponent }
    }

    /// Fiber composite with the repository's default contrast (matrix 1, fiber 10).
    pub fn fiber(radius: f64) -> Self {
        Self::Fiber { radius, fiber_value: 10.0, matrix_value: 1.0, fraction: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicrostructureRecipe {
    #[serde(flatten)]
    pub kind: MicrostructureKind,
    pub cell_count: usize,
    pub value_range: (f64, f64),
    pub seed: u64,
}

impl MicrostructureRecipe {
    pub fn voronoi(cell_count: usize, seed: u64) -> Self {
        Self { kind: MicrostructureKind::Voronoi, cell_count, value_range: (0.0, 10.0), seed }
    }

    pub fn with_kind(self, kind: MicrostructureKind) -> Self {
        Self { kind, ..self }
    }

    pub fn with_range(self, lo: f64, hi: f64) -> Self {
        Self { value_range: (lo, hi), ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.value_range;
        if !(lo >= 0.0 && hi >= lo && hi > 0.0) {
            return Err(Error::InvalidRecipe(format!("value range [{lo}, {hi}] must satisfy 0 <= lo <= hi, hi > 0")));
        }
        if hi < VALUE_FLOOR {
            return Err(Error::InvalidRecipe(format!("value range upper bound {hi} below floor {VALUE_FLOOR}")));
        }
        match self.kind {
            MicrostructureKind::Fiber { radius, fiber_value, matrix_value, fraction } => {
                if !(radius > 0.0) || !(fiber_value > 0.0) || !(matrix_value > 0.0) {
                    return Err(Error::InvalidRecipe("fiber radius and values must be positive".into()));
                }
                if let Some(f) = fraction {
                    if !(0.0..1.0).contains(&f) {
                        return Err(Error::InvalidRecipe(format!("fiber fraction {f} outside [0, 1)")));
                    }
                }
            }
            _ if self.cell_count == 0 => {
                return Err(Error::InvalidRecipe("cell_count must be >= 1".into()));
            }
            MicrostructureKind::GradedVoronoi { exponent_x, exponent_y } if !(exponent_x > 0.0 && exponent_y > 0.0) => {
                return Err(Error::InvalidRecipe("grading exponents must be positive".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Uniform draw on `[lo, hi]`, redrawn while below [`VALUE_FLOOR`].
pub fn sample_value(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi == lo {
        return lo.max(VALUE_FLOOR);
    }
    loop {
        let v = rng.gen_range(lo..=hi);
        if v >= VALUE_FLOOR {
            return v;
        }
    }
}

/// Cell centers for the Voronoi-type kinds, drawn over the grid's extents.
pub fn sample_centers(recipe: &MicrostructureRecipe, spec: &GridSpec) -> Vec<[f64; 2]> {
    let mut rng = rng::stream(recipe.seed, 0);
    let (px, py) = match recipe.kind {
        MicrostructureKind::GradedVoronoi { exponent_x, exponent_y } => (exponent_x, exponent_y),
        _ => (1.0, 1.0),
    };
    let (lx, ly) = (spec.x1 - spec.x0, spec.y1 - spec.y0);
    (0..recipe.cell_count)
        .map(|_| {
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            [spec.x0 + lx * u.powf(px), spec.y0 + ly * v.powf(py)]
        })
        .collect()
}

fn sample_values(recipe: &MicrostructureRecipe, n: usize) -> Vec<f64> {
    let mut rng = rng::stream(recipe.seed, 1);
    (0..n).map(|_| sample_value(&mut rng, recipe.value_range)).collect()
}

/// Nearest-center rasterization; ties go to the lower center index.
pub fn rasterize_voronoi(centers: &[[f64; 2]], values: &[f64], spec: &GridSpec) -> Result<CoefficientField> {
    if centers.is_empty() || centers.len() != values.len() {
        return Err(Error::InvalidRecipe(format!("{} centers with {} values", centers.len(), values.len())));
    }
    let mut vals = Vec::with_capacity(spec.len());
    let mut ids = Vec::with_capacity(spec.len());
    for j in 0..spec.ny {
        let y = spec.y(j);
        for i in 0..spec.nx {
            let x = spec.x(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, c) in centers.iter().enumerate() {
                let d = (x - c[0]) * (x - c[0]) + (y - c[1]) * (y - c[1]);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            vals.push(values[best]);
            ids.push(best as u32);
        }
    }
    CoefficientField::new(*spec, vals, ids)
}

pub fn generate_voronoi(recipe: &MicrostructureRecipe, spec: &GridSpec) -> Result<CoefficientField> {
    if !matches!(recipe.kind, MicrostructureKind::Voronoi) {
        return Err(Error::InvalidRecipe("generate_voronoi expects kind = voronoi".into()));
    }
    recipe.validate()?;
    let centers = sample_centers(recipe, spec);
    rasterize_voronoi(&centers, &sample_values(recipe, centers.len()), spec)
}

pub fn generate_graded(recipe: &MicrostructureRecipe, spec: &GridSpec) -> Result<CoefficientField> {
    if !matches!(recipe.kind, MicrostructureKind::GradedVoronoi { .. }) {
        return Err(Error::InvalidRecipe("generate_graded expects kind = graded_voronoi".into()));
    }
    recipe.validate()?;
    let centers = sample_centers(recipe, spec);
    rasterize_voronoi(&centers, &sample_values(recipe, centers.len()), spec)
}

/// Hexagonal lattice sites covering the grid's extents plus a one-spacing
/// margin, with spacing chosen so the lattice density matches
/// `cell_count / area`.
pub fn hex_lattice(cell_count: usize, spec: &GridSpec, offset: [f64; 2]) -> Vec<[f64; 2]> {
    let d = (2.0 * spec.area() / (3f64.sqrt() * cell_count as f64)).sqrt();
    let dy = 3f64.sqrt() / 2.0 * d;
    let rows = ((spec.y1 - spec.y0) / dy).ceil() as i64 + 2;
    let cols = ((spec.x1 - spec.x0) / d).ceil() as i64 + 2;
    let mut sites = Vec::new();
    for r in -1..=rows {
        let shift = if r.rem_euclid(2) == 1 { 0.5 * d } else { 0.0 };
        for c in -1..=cols {
            sites.push([spec.x0 + offset[0] * d + c as f64 * d + shift, spec.y0 + offset[1] * dy + r as f64 * dy]);
        }
    }
    sites
}

pub fn generate_hexagonal(recipe: &MicrostructureRecipe, spec: &GridSpec) -> Result<CoefficientField> {
    if !matches!(recipe.kind, MicrostructureKind::Hexagonal) {
        return Err(Error::InvalidRecipe("generate_hexagonal expects kind = hexagonal".into()));
    }
    recipe.validate()?;
    if recipe.cell_count == 1 {
        let mut rng = rng::stream(recipe.seed, 1);
        return CoefficientField::constant(*spec, sample_value(&mut rng, recipe.value_range));
    }
    let mut rng = rng::stream(recipe.seed, 0);
    let offset = [rng.gen::<f64>(), rng.gen::<f64>()];
    let sites = hex_lattice(recipe.cell_count, spec, offset);
    let field = rasterize_voronoi(&sites, &vec![1.0; sites.len()], spec)?;
    // Only cells that own at least one node get a value draw, in first-seen order.
    let mut vrng = rng::stream(recipe.seed, 1);
    let mut assigned = vec![None; sites.len()];
    let mut values = Vec::with_capacity(spec.len());
    for &id in &field.cell_ids {
        let v = *assigned[id as usize].get_or_insert_with(|| sample_value(&mut vrng, recipe.value_range));
        values.push(v);
    }
    CoefficientField::new(*spec, values, field.cell_ids)
}

/// Disk rasterization: nodes within `radius` of fiber `i` get id `i + 1`.
pub fn rasterize_fibers(centers: &[[f64; 2]], radius: f64, fiber_value: f64, matrix_value: f64, spec: &GridSpec) -> Result<CoefficientField> {
    let mut vals = vec![matrix_value; spec.len()];
    let mut ids = vec![0u32; spec.len()];
    let r2 = radius * radius;
    for j in 0..spec.ny {
        let y = spec.y(j);
        for i in 0..spec.nx {
            let x = spec.x(i);
            if let Some(k) = centers.iter().position(|c| (x - c[0]).powi(2) + (y - c[1]).powi(2) <= r2) {
                let p = spec.index(i, j);
                vals[p] = fiber_value;
                ids[p] = k as u32 + 1;
            }
        }
    }
    CoefficientField::new(*spec, vals, ids)
}

/// Rejection-sampled non-overlapping fiber centers (pairwise distance >= 2r).
pub fn sample_fiber_centers(recipe: &MicrostructureRecipe, spec: &GridSpec) -> Result<Vec<[f64; 2]>> {
    let MicrostructureKind::Fiber { radius, fraction, .. } = recipe.kind else {
        return Err(Error::InvalidRecipe("fiber centers need kind = fiber".into()));
    };
    let requested = match fraction {
        Some(f) => (f * spec.area() / (std::f64::consts::PI * radius * radius)).round() as usize,
        None => recipe.cell_count,
    };
    let budget = 1000 * requested + 1000;
    let mut rng = rng::stream(recipe.seed, 0);
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(requested);
    let min_d2 = 4.0 * radius * radius;
    let mut attempts = 0;
    while centers.len() < requested {
        if attempts == budget {
            return Err(Error::PackingFailure { placed: centers.len(), requested, attempts });
        }
        attempts += 1;
        let c = [rng.gen_range(spec.x0..=spec.x1), rng.gen_range(spec.y0..=spec.y1)];
        if centers.iter().all(|o| (o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2) >= min_d2) {
            centers.push(c);
        }
    }
    Ok(centers)
}

pub fn generate_fiber(recipe: &MicrostructureRecipe, spec: &GridSpec) -> Result<CoefficientField> {
    let MicrostructureKind::Fiber { radius, fiber_value, matrix_value, .. } = recipe.kind else {
        return Err(Error::InvalidRecipe("generate_fiber expects kind = fiber".into()));
    };
    recipe.validate()?;
    let centers = sample_fiber_centers(recipe, spec)?;
    rasterize_fibers(&centers, radius, fiber_value, matrix_value, spec)
}

pub fn generate(recipe: &MicrostructureRecipe, spec: &GridSpec) -> Result<CoefficientField> {
    match recipe.kind {
        MicrostructureKind::Voronoi => generate_voronoi(recipe, spec),
        MicrostructureKind::GradedVoronoi { .. } => generate_graded(recipe, spec),
        MicrostructureKind::Hexagonal => generate_hexagonal(recipe, spec),
        MicrostructureKind::Fiber { .. } => generate_fiber(recipe, spec),
    }
}

/// Nodal extraction of a grid-aligned window, placed on the window's
/// canonical (origin-anchored) grid.
pub fn restrict(field: &CoefficientField, window: &SubdomainWindow) -> Result<CoefficientField> {
    let s = field.spec;
    if window.i0 + window.nodes > s.nx || window.j0 + window.nodes > s.ny {
        return Err(Error::WindowOutOfBounds(format!(
            "window {} at ({}, {}) with {} nodes exceeds {}x{} grid",
            window.index, window.i0, window.j0, window.nodes, s.nx, s.ny
        )));
    }
    let n = window.nodes;
    let mut vals = Vec::with_capacity(n * n);
    let mut ids = Vec::with_capacity(n * n);
    for j in 0..n {
        let row = s.index(window.i0, window.j0 + j);
        vals.extend_from_slice(&field.values[row..row + n]);
        ids.extend_from_slice(&field.cell_ids[row..row + n]);
    }
    CoefficientField::new(window.local_spec(s.hx())?, vals, ids)
}
