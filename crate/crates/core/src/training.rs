//! Dataset generation, the squared-L2 training loss, Adam with cosine
//! annealing, and evaluation by relative L2 error.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{extend, trace_from_params, BoundaryTrace, FourierBoundaryParams};
use crate::error::{Error, Result};
use crate::fd_solver::{gradient, solve_dirichlet};
use crate::grid::{read_f64_vec, read_magic, read_u32, relative_l2, sq_l2_norm, write_f64_slice, GridFunction, GridSpec};
use crate::microstructure::{generate, CoefficientField, MicrostructureRecipe};
use crate::operator::{backward_tape, forward_tape, OperatorParams};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub a: CoefficientField,
    pub g: BoundaryTrace,
    pub u: GridFunction,
    pub grad_u: GridFunction,
}

impl Sample {
    pub fn solve(a: CoefficientField, g: BoundaryTrace) -> Result<Self> {
        let u = solve_dirichlet(&a, &g)?;
        let grad_u = gradient(&u)?;
        Ok(Self { a, g, u, grad_u })
    }

    /// Operator input: coefficient channel followed by the extended trace.
    pub fn input(&self) -> Result<GridFunction> {
        self.a.to_grid_function().concat(&extend(&self.g))
    }

    pub fn target(&self, t: Target) -> &GridFunction {
        match t {
            Target::U => &self.u,
            Target::GradU => &self.grad_u,
        }
    }
}

/// How boundary data are drawn for each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BoundaryDistribution {
    #[default]
    Fourier,
    Fixed { params: FourierBoundaryParams },
    Constant { value: f64 },
}

impl BoundaryDistribution {
    fn draw(&self, spec: &GridSpec, rng: &mut rng::Rng) -> BoundaryTrace {
        match self {
            BoundaryDistribution::Fourier => trace_from_params(&FourierBoundaryParams::sample(rng), spec),
            BoundaryDistribution::Fixed { params } => trace_from_params(params, spec),
            BoundaryDistribution::Constant { value } => BoundaryTrace::constant(*spec, *value),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GridSpec,
    pub samples: Vec<Sample>,
}

/// `n` independent samples. Sample `i` uses seed `mix(seed, i)` for its
/// microstructure and stream 1 of that seed for its boundary data.
pub fn generate_dataset(n: usize, recipe: &MicrostructureRecipe, boundary: &BoundaryDistribution, spec: &GridSpec, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    recipe.validate()?;
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = rng::mix(seed, i as u64);
            let wrap = |e: Error| Error::Sample { index: i, source: Box::new(e) };
            let a = generate(&MicrostructureRecipe { seed: s, ..*recipe }, spec).map_err(wrap)?;
            let g = boundary.draw(spec, &mut rng::stream(s, 1));
            Sample::solve(a, g).map_err(wrap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: *spec, samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { spec: self.spec, samples: idx.iter().map(|&i| self.samples[i].clone()).collect() }
    }

    /// `DSN1` container: magic; `u32` count, nx, ny; `f64` x0, y0, x1, y1;
    /// `u32` trace length, u channels (1), gradient channels (2); then per
    /// sample `a` values, `u32` cell ids, trace, `u`, gradient.
    pub fn write_dsn1(&self, w: &mut impl Write) -> Result<()> {
        let s = self.spec;
        let trace_len = 2 * (s.nx - 1) + 2 * (s.ny - 1);
        w.write_all(b"DSN1")?;
        for v in [self.len(), s.nx, s.ny] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        write_f64_slice(w, &[s.x0, s.y0, s.x1, s.y1])?;
        for v in [trace_len, 1, 2] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for smp in &self.samples {
            write_f64_slice(w, &smp.a.values)?;
            let mut ids = Vec::with_capacity(smp.a.cell_ids.len() * 4);
            for id in &smp.a.cell_ids {
                ids.extend_from_slice(&id.to_le_bytes());
            }
            w.write_all(&ids)?;
            write_f64_slice(w, &smp.g.values)?;
            write_f64_slice(w, &smp.u.data)?;
            write_f64_slice(w, &smp.grad_u.data)?;
        }
        Ok(())
    }

    pub fn read_dsn1(r: &mut impl Read) -> Result<Self> {
        read_magic(r, b"DSN1")?;
        let count = read_u32(r)? as usize;
        let (nx, ny) = (read_u32(r)? as usize, read_u32(r)? as usize);
        let ext = read_f64_vec(r, 4)?;
        let spec = GridSpec::new(nx, ny, ext[0], ext[1], ext[2], ext[3])?;
        let (trace_len, uc, gc) = (read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize);
        if trace_len != 2 * (nx - 1) + 2 * (ny - 1) || uc != 1 || gc != 2 {
            return Err(Error::Format("unsupported DSN1 channel layout".into()));
        }
        let n = spec.len();
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let values = read_f64_vec(r, n)?;
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            let ids = buf.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            let a = CoefficientField::new(spec, values, ids)?;
            let g = BoundaryTrace::new(spec, read_f64_vec(r, trace_len)?)?;
            let u = GridFunction::new(spec, 1, read_f64_vec(r, n)?)?;
            let grad_u = GridFunction::new(spec, 2, read_f64_vec(r, 2 * n)?)?;
            samples.push(Sample { a, g, u, grad_u });
        }
        Ok(Self { spec, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_dsn1(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_dsn1(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Mean over the batch of `|pred - truth|^2_L2`.
pub fn loss(preds: &[GridFunction], truths: &[GridFunction]) -> Result<f64> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} targets", preds.len(), truths.len())));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        total += sq_l2_norm(&p.sub(t)?);
    }
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    U,
    GradU,
}

impl Target {
    pub fn channels(self) -> usize {
        match self {
            Target::U => 1,
            Target::GradU => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Cosine horizon in epochs; defaults to `epochs` when zero.
    pub schedule_horizon: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub target: Target,
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 5e-5, epochs: 300, schedule_horizon: 0, batch_size: 10, seed: 0, target: Target::U, val_fraction: 0.1, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.epochs == 0 || self.batch_size == 0 || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("learning rate must be >= 0, epochs and batch size positive, validation fraction in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam decay rates must lie in [0, 1) and epsilon be positive".into()));
        }
        Ok(())
    }

    /// Step size for `epoch` (zero-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let horizon = if self.schedule_horizon == 0 { self.epochs } else { self.schedule_horizon };
        let e = epoch.min(horizon) as f64;
        0.5 * self.lr * (1.0 + (PI * e / horizon as f64).cos())
    }
}

/// First/second-moment adaptive optimizer state over the flattened parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1, beta2, eps }
    }

    pub fn step(&mut self, params: &mut OperatorParams, grad: &[f64], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        for (k, g) in grad.iter().enumerate() {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g;
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g;
        }
        if lr == 0.0 {
            return;
        }
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut k = 0;
        let (m, v, eps) = (&self.m, &self.v, self.eps);
        params.for_each_slice_mut(|s| {
            for p in s.iter_mut() {
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
                k += 1;
            }
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rls: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation RLS seen.
    pub best: OperatorParams,
    pub best_epoch: usize,
    pub last: OperatorParams,
    pub history: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

pub fn write_history_csv(history: &[EpochRecord], w: &mut impl Write) -> Result<()> {
    writeln!(w, "epoch,train_loss,val_rls,lr")?;
    for r in history {
        writeln!(w, "{},{:e},{:e},{:e}", r.epoch, r.train_loss, r.val_rls, r.lr)?;
    }
    Ok(())
}

/// Splits `n` items into (train, validation) with a seeded shuffle. A single
/// sample is used for both.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 || val_fraction == 0.0 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut rng::stream(seed, 0x5b17));
    let nv = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx[..nv].to_vec();
    let train = idx[nv..].to_vec();
    (train, val)
}

struct Prepared {
    input: GridFunction,
    target: GridFunction,
}

fn prepare(ds: &Dataset, idx: &[usize], target: Target) -> Result<Vec<Prepared>> {
    idx.par_iter().map(|&i| Ok(Prepared { input: ds.samples[i].input()?, target: ds.samples[i].target(target).clone() })).collect()
}

fn mean_rls(params: &OperatorParams, items: &[Prepared]) -> Result<f64> {
    let rls = items
        .par_iter()
        .map(|p| {
            let y = crate::operator::ppno_forward_fields(params, &p.input)?;
            relative_l2(&y, &p.target)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rls.iter().sum::<f64>() / rls.len() as f64)
}

/// Adam on the mean squared-L2 loss with a per-epoch cosine schedule.
/// `on_epoch` sees each record as it is produced.
pub fn train(config: &TrainConfig, init: OperatorParams, dataset: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training needs a nonempty dataset".into()));
    }
    if init.config.out_channels != config.target.channels() {
        return Err(Error::Config(format!(
            "operator has {} output channels but the target needs {}",
            init.config.out_channels,
            config.target.channels()
        )));
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), config.val_fraction, config.seed);
    let train_items = prepare(dataset, &train_idx, config.target)?;
    let val_items = prepare(dataset, &val_idx, config.target)?;
    let q = dataset.spec.quad_weights();

    let mut params = init;
    let mut adam = Adam::new(params.num_params(), config.beta1, config.beta2, config.adam_eps);
    let mut best = params.clone();
    let mut best_rls = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        order.shuffle(&mut rng::stream(config.seed, 1000 + epoch as u64));
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let nb = batch.len() as f64;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let item = &train_items[i];
                    let (y, tape) = forward_tape(&params, &item.input)?;
                    let diff = y.sub(&item.target)?;
                    let c = diff.channels;
                    let l: f64 = diff.data.iter().enumerate().map(|(k, d)| q[k / c] * d * d).sum();
                    let upstream = GridFunction {
                        spec: diff.spec,
                        channels: c,
                        data: diff.data.iter().enumerate().map(|(k, d)| 2.0 * q[k / c] * d / nb).collect(),
                    };
                    let (grad, _) = backward_tape(&params, &tape, &upstream)?;
                    Ok((l, grad.to_flat()))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = vec![0.0; params.num_params()];
            let mut batch_loss = 0.0;
            for (l, g) in &results {
                batch_loss += l;
                for (t, v) in total.iter_mut().zip(g) {
                    *t += v;
                }
            }
            if !batch_loss.is_finite() || total.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            epoch_loss += batch_loss;
            adam.step(&mut params, &total, lr);
        }
        let train_loss = epoch_loss / train_items.len() as f64;
        let val_rls = mean_rls(&params, &val_items)?;
        if !val_rls.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: usize::MAX });
        }
        if val_rls < best_rls {
            best_rls = val_rls;
            best = params.clone();
            best_epoch = epoch;
        }
        let rec = EpochRecord { epoch, train_loss, val_rls, lr };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome { best, best_epoch, last: params, history, train_indices: train_idx, val_indices: val_idx })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    /// Index of the sample whose RLS is the median.
    pub median_index: usize,
}

pub fn evaluate(params: &OperatorParams, dataset: &Dataset, target: Target) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation needs a nonempty dataset".into()));
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let items = prepare(dataset, &idx, target)?;
    let per_sample = items
        .par_iter()
        .map(|p| relative_l2(&crate::operator::ppno_forward_fields(params, &p.input)?, &p.target))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let mut sorted: Vec<usize> = idx;
    sorted.sort_by(|&a, &b| per_sample[a].total_cmp(&per_sample[b]));
    let median_index = sorted[sorted.len() / 2];
    Ok(EvalReport { mean, median: per_sample[median_index], median_index, per_sample })
}
