use std::io::{Read, Write};
use std::path::Path;

use lddm_core::fd_solver::SolverOptions;
use lddm_core::microstructure::generate;
use lddm_core::schwarz::{decompose, iterate, LocalSolver, OracleSolver, SurrogateSolver};
use lddm_core::training::{evaluate, generate_dataset, train, BoundaryDistribution, Dataset, EpochRecord, Target};
use lddm_core::{rng, CoefficientField, DomainShape, FourierBoundaryParams, GridFunction, GridSpec, MicrostructureRecipe, OperatorParams};
use serde_json::json;

use crate::config::{RunConfig, SolverKind};
use crate::output::{create, write_field_csv, write_pgm, ManifestBuilder};
use crate::{Cli, CliError, Command, EvaluateArgs, GenerateArgs, ReportArgs, SolveArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", cli.out_dir.display())))?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::Generate(a) => cmd_generate(cfg, a, out),
        Command::Train(a) => cmd_train(cfg, a, out),
        Command::Evaluate(a) => cmd_evaluate(cfg, a, out),
        Command::Solve(a) => cmd_solve(cfg, a, out),
        Command::Report(a) => cmd_report(cfg, a, out),
    }
}

fn cmd_generate(mut cfg: RunConfig, args: GenerateArgs, out: &Path) -> Result<(), CliError> {
    let g = &mut cfg.generate;
    if let Some(n) = args.n {
        g.n = n as usize;
    }
    if let Some(c) = args.cells {
        g.cells = c as usize;
    }
    if let Some(nx) = args.nx {
        g.nx = nx;
    }
    if g.n == 0 {
        return Err(CliError::Config("generate.n must be at least 1".into()));
    }
    let spec = GridSpec::unit(g.nx)?;
    let ds = generate_dataset(g.n, &g.recipe(g.cells), &g.boundary, &spec, cfg.seed)?;
    let path = args.output.unwrap_or_else(|| out.join("dataset.dsn1"));
    ds.save(&path)?;
    let mut m = ManifestBuilder::new("generate", cfg.seed, &cfg);
    m.artifact(&path);
    m.summary = json!({ "samples": ds.len(), "nx": spec.nx });
    m.finish(out)?;
    println!("wrote {} samples at {}x{} to {}", ds.len(), spec.nx, spec.ny, path.display());
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, args: TrainArgs, out: &Path) -> Result<(), CliError> {
    let t = &mut cfg.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.batch {
        t.batch_size = v;
    }
    if let Some(v) = args.target {
        t.target = v.into();
    }
    let o = &mut cfg.operator;
    if let Some(w) = args.widths.clone() {
        o.widths = w;
    }
    if let Some(k) = args.kernel_nodes {
        o.kernel_nodes = k;
    }
    o.out_channels = t.target.channels();
    let ds = Dataset::load(&args.data)?;
    let init = match &args.init {
        Some(p) => OperatorParams::load(p)?,
        None => OperatorParams::init(cfg.operator.clone(), &mut rng::stream(cfg.train.seed, 0x1417))?,
    };
    if cfg.train.lr == 0.0 {
        eprintln!("warning: learning rate is zero; parameters will not change");
    }
    let log_path = out.join("train_log.csv");
    let mut log = create(&log_path)?;
    writeln!(log, "epoch,train_loss,val_rls,lr")?;
    let mut log_err = None;
    let outcome = train(&cfg.train, init, &ds, |r: &EpochRecord| {
        eprintln!("epoch {:>4}  loss {:.4e}  val RLS {:.4e}  lr {:.3e}", r.epoch, r.train_loss, r.val_rls, r.lr);
        if let Err(e) = writeln!(log, "{},{:e},{:e},{:e}", r.epoch, r.train_loss, r.val_rls, r.lr).and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let best = out.join("model.ppn1");
    let last = out.join("model_last.ppn1");
    outcome.best.save(&best)?;
    outcome.last.save(&last)?;
    let h = &outcome.history;
    let mut m = ManifestBuilder::new("train", cfg.seed, &cfg);
    for p in [&best, &last, &log_path] {
        m.artifact(p);
    }
    m.summary = json!({
        "samples": ds.len(),
        "train": outcome.train_indices.len(),
        "validation": outcome.val_indices.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_rls": h[outcome.best_epoch].val_rls,
        "first_train_loss": h[0].train_loss,
        "final_train_loss": h[h.len() - 1].train_loss,
        "parameters": outcome.best.num_params(),
    });
    m.finish(out)?;
    println!("best validation RLS {:.4e} at epoch {}; checkpoint {}", h[outcome.best_epoch].val_rls, outcome.best_epoch, best.display());
    Ok(())
}

fn cmd_evaluate(cfg: RunConfig, args: EvaluateArgs, out: &Path) -> Result<(), CliError> {
    let params = OperatorParams::load(&args.ckpt)?;
    let ds = Dataset::load(&args.data)?;
    let target: Target = args.target.into();
    if params.config.out_channels != target.channels() {
        return Err(CliError::Config(format!("checkpoint predicts {} channels, target needs {}", params.config.out_channels, target.channels())));
    }
    let r = evaluate(&params, &ds, target)?;
    let json_path = out.join("eval.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&r).map_err(|e| CliError::Config(e.to_string()))? + "\n")?;
    let csv_path = out.join("eval_per_sample.csv");
    let mut w = create(&csv_path)?;
    writeln!(w, "index,rls")?;
    for (i, v) in r.per_sample.iter().enumerate() {
        writeln!(w, "{i},{v:e}")?;
    }
    w.flush()?;
    let mut m = ManifestBuilder::new("evaluate", cfg.seed, &json!({ "checkpoint": args.ckpt, "data": args.data, "target": target }));
    m.artifact(&json_path);
    m.artifact(&csv_path);
    m.summary = json!({ "mean_rls": r.mean, "median_rls": r.median, "median_index": r.median_index });
    m.finish(out)?;
    println!("mean RLS {:.4e}  median RLS {:.4e} (sample {})", r.mean, r.median, r.median_index);
    Ok(())
}

fn cmd_solve(mut cfg: RunConfig, args: SolveArgs, out: &Path) -> Result<(), CliError> {
    let s = &mut cfg.solve;
    if let Some(v) = args.shape {
        s.shape = v;
    }
    if args.layout.is_some() {
        s.layout = args.layout;
    }
    if let Some(v) = args.solver {
        s.solver = v;
    }
    if args.ckpt.is_some() {
        s.checkpoint = args.ckpt;
    }
    if let Some(v) = args.tol {
        s.tol = v;
    }
    if let Some(v) = args.tol_kind {
        s.tol_kind = v;
    }
    if let Some(v) = args.max_iter {
        s.max_iter = v;
    }
    if let Some(v) = args.mode {
        s.mode = v;
    }
    if let Some(v) = args.initial {
        s.initial = v;
    }
    if let Some(v) = args.cells_per_window {
        s.cells_per_window = v;
    }
    if let Some(v) = args.overlap {
        s.overlap = v;
    }
    if let Some(v) = args.local_nodes {
        s.local_nodes = v;
    }
    if let Some(p) = &args.boundary {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
        s.boundary = Some(FourierBoundaryParams::from_toml_str(&text)?);
    }
    if !(s.tol > 0.0) || s.max_iter == 0 || !(s.cells_per_window > 0.0) {
        return Err(CliError::Config("solve needs positive tol, max_iter and cells_per_window".into()));
    }
    let s = cfg.solve.clone();
    let shape = DomainShape::parse(&s.shape, s.layout.as_deref())?;
    let layout = decompose(&shape, s.local_nodes, s.overlap)?;
    let area: f64 = layout.node_weights.iter().sum();
    let cells = ((s.cells_per_window * area).round() as usize).max(1);
    let recipe = MicrostructureRecipe::voronoi(cells, rng::mix(cfg.seed, 1)).with_range(s.value_range.0, s.value_range.1);
    let a = generate(&recipe, &layout.global)?;
    let params = s.boundary.clone().unwrap_or_else(|| FourierBoundaryParams::sample(&mut rng::stream(cfg.seed, 2)));
    let g = layout.exterior_trace(&params);
    let direct = layout.solve_direct(&a, &g, SolverOptions::default())?;
    let solver: Box<dyn LocalSolver> = match s.solver {
        SolverKind::Oracle => Box::new(OracleSolver::new(&layout, &a, SolverOptions::default())?),
        SolverKind::Surrogate => {
            let p = s.checkpoint.as_ref().ok_or_else(|| CliError::Config("the surrogate solver needs a checkpoint (--ckpt)".into()))?;
            if !p.exists() {
                return Err(CliError::Config(format!("checkpoint {} does not exist", p.display())));
            }
            Box::new(SurrogateSolver::new(&layout, OperatorParams::load(p)?)?)
        }
    };
    let outcome = iterate(&layout, &a, &g, solver.as_ref(), &s.iterate_options(rng::mix(cfg.seed, 3)), Some(&direct))?;
    let rls = layout.relative_l2(&outcome.solution, &direct)?;

    let mut m = ManifestBuilder::new("solve", cfg.seed, &cfg);
    let files = [("solution.gfn1", &outcome.solution), ("direct.gfn1", &direct)];
    for (name, f) in files {
        let p = out.join(name);
        let mut w = create(&p)?;
        f.write_gfn1(&mut w)?;
        w.flush()?;
        m.artifact(&p);
    }
    let cp = out.join("coefficient.cfn1");
    let mut w = create(&cp)?;
    a.write_cfn1(&mut w)?;
    w.flush()?;
    m.artifact(&cp);
    let hp = out.join("history.csv");
    let mut w = create(&hp)?;
    outcome.write_history_csv(&mut w)?;
    w.flush()?;
    m.artifact(&hp);
    m.summary = json!({
        "windows": layout.windows.len(),
        "global_nodes": [layout.global.nx, layout.global.ny],
        "grains": cells,
        "converged": outcome.converged,
        "iterations": outcome.history.len(),
        "threshold": outcome.threshold,
        "final_successive": outcome.history.last().map(|r| r.successive),
        "rls_vs_direct": rls,
        "contraction_ratio": outcome.contraction_ratio(10),
    });
    m.finish(out)?;
    if !outcome.converged {
        eprintln!("warning: tolerance {:.3e} not reached within {} sweeps", outcome.threshold, s.max_iter);
    }
    println!(
        "{} windows, {} sweeps, converged: {}; RLS vs direct solve {:.4e}",
        layout.windows.len(),
        outcome.history.len(),
        outcome.converged,
        rls
    );
    Ok(())
}

fn load_field(path: &Path) -> Result<GridFunction, CliError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    match bytes.get(..4) {
        Some(b"GFN1") => Ok(GridFunction::read_gfn1(&mut bytes.as_slice())?),
        Some(b"CFN1") => Ok(CoefficientField::read_cfn1(&mut bytes.as_slice())?.to_grid_function()),
        _ => Err(CliError::Config(format!("{} is neither a GFN1 nor a CFN1 file", path.display()))),
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "field".into())
}

fn cmd_report(cfg: RunConfig, args: ReportArgs, out: &Path) -> Result<(), CliError> {
    if args.field.is_empty() && args.history.is_none() && args.ood_ckpt.is_none() {
        return Err(CliError::Usage("report needs --field, --history or --ood-ckpt".into()));
    }
    let mut m = ManifestBuilder::new("report", cfg.seed, &json!({ "fields": args.field, "history": args.history, "ood_ckpt": args.ood_ckpt, "ood_cells": args.ood_cells, "ood_n": args.ood_n }));
    for p in &args.field {
        let f = load_field(p)?;
        let name = stem(p);
        for c in 0..f.channels {
            let suffix = if f.channels > 1 { format!("_c{c}") } else { String::new() };
            let pgm = out.join(format!("{name}{suffix}.pgm"));
            let mut w = create(&pgm)?;
            write_pgm(&f, c, &mut w)?;
            w.flush()?;
            m.artifact(&pgm);
        }
        let csv = out.join(format!("{name}.csv"));
        let mut w = create(&csv)?;
        write_field_csv(&f, &mut w)?;
        w.flush()?;
        m.artifact(&csv);
    }
    if let Some(h) = &args.history {
        let path = out.join(format!("{}_errors.csv", stem(h)));
        history_table(h, &path)?;
        m.artifact(&path);
    }
    if let Some(ck) = &args.ood_ckpt {
        let path = out.join("ood.csv");
        let (rows, ratio) = ood_sweep(&cfg, ck, &args.ood_cells, args.ood_n, &path)?;
        m.artifact(&path);
        m.summary = json!({ "ood": rows, "max_min_ratio": ratio });
        println!("OOD max/min mean RLS ratio {ratio:.3}");
    }
    m.finish(out)?;
    Ok(())
}

/// Copies the iteration and error columns and adds their base-10 logarithms.
fn history_table(src: &Path, dst: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(src).map_err(|e| CliError::Config(format!("cannot read {}: {e}", src.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let (it, s) = match (col("iteration"), col("successive_error")) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(CliError::Config(format!("{} lacks iteration/successive_error columns", src.display()))),
    };
    let rls = col("iterative_error");
    let mut w = create(dst)?;
    writeln!(w, "iteration,successive_error,log10_successive,iterative_error,log10_iterative")?;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |k: usize| f.get(k).and_then(|v| v.trim().parse::<f64>().ok());
        let sv = num(s).ok_or_else(|| CliError::Config(format!("bad history row `{line}`")))?;
        let rv = rls.and_then(num);
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        writeln!(w, "{},{sv:e},{},{},{}", f[it].trim(), fmt(Some(sv.log10())), fmt(rv), fmt(rv.map(f64::log10)))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(serde::Serialize)]
struct OodRow {
    cells: usize,
    mean_rls: f64,
    median_rls: f64,
}

fn ood_sweep(cfg: &RunConfig, ckpt: &Path, cells: &[usize], n: usize, dst: &Path) -> Result<(Vec<OodRow>, f64), CliError> {
    if cells.is_empty() || n == 0 {
        return Err(CliError::Usage("OOD sweep needs grain counts and at least one sample".into()));
    }
    let params = OperatorParams::load(ckpt)?;
    let target = if params.config.out_channels == 2 { Target::GradU } else { Target::U };
    let spec = GridSpec::unit(params.config.nominal_nodes)?;
    let mut rows = Vec::new();
    for &c in cells {
        let ds = generate_dataset(n, &cfg.generate.recipe(c), &BoundaryDistribution::Fourier, &spec, rng::mix(cfg.seed, 10_000 + c as u64))?;
        let r = evaluate(&params, &ds, target)?;
        rows.push(OodRow { cells: c, mean_rls: r.mean, median_rls: r.median });
    }
    let mut w = create(dst)?;
    writeln!(w, "cells,mean_rls,median_rls")?;
    for r in &rows {
        writeln!(w, "{},{:e},{:e}", r.cells, r.mean_rls, r.median_rls)?;
    }
    w.flush()?;
    let hi = rows.iter().map(|r| r.mean_rls).fold(f64::NEG_INFINITY, f64::max);
    let lo = rows.iter().map(|r| r.mean_rls).fold(f64::INFINITY, f64::min);
    Ok((rows, hi / lo))
}
