//! Subcommand implementations.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use lrsa_core::autodiff::{grad_check, Tape};
use lrsa_core::lrsa::{
    block_flops, block_forward, dense_attention_flops, load_checkpoint, measure_block_flops, Checkpoint, LrsaConfig,
    LrsaModel, Variant, MAX_KERNEL_POINTS,
};
use lrsa_core::pde::{
    green_kernel_1d_poisson, make_dataset, sample_smooth_field, Normalization, OperatorDataset, Task,
};
use lrsa_core::spectral::{emit_decay_csv, loglog_slope, spectral_report, DEFAULT_RANK_TOL};
use lrsa_core::train::{self, evaluate_predictions, predict_dataset};
use lrsa_core::{Error, Tensor};

use crate::config::RunConfig;
use crate::manifest::RunRecord;
use crate::{AnalyzeArgs, BenchArgs, CliError, EvalArgs, GenDataArgs, GradcheckArgs, TrainArgs};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_LIMIT: f64 = 1e-4;

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json values serialise"));
}

fn write_text(path: &Path, text: &str, record: &mut RunRecord) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })?;
    record.artifact(path);
    Ok(())
}

fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

fn parse_task(name: &str) -> Result<Task, CliError> {
    name.parse().map_err(|_| {
        let all: Vec<&str> = Task::ALL.iter().map(|t| t.name()).collect();
        CliError::Usage(format!("unknown task `{name}`; expected one of {}", all.join(", ")))
    })
}

fn stats(data: &[f64]) -> (f64, f64, f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, std, min, max)
}

pub fn gen_data(args: &GenDataArgs, record: &mut RunRecord) -> Result<(), CliError> {
    let task = parse_task(&args.task)?;
    record.config = json!({
        "task": task, "n": args.n, "count": args.count, "seed": args.seed,
        "out": args.out, "force": args.force,
    });
    if dir_is_nonempty(&args.out) && !args.force {
        record.out_dir_usable = false;
        return Err(CliError::Usage(format!(
            "{} exists and is not empty; pass --force to overwrite",
            args.out.display()
        )));
    }
    let ds = make_dataset(task, args.count as usize, args.n, args.seed)?;
    ds.save(&args.out)?;
    for f in ["manifest.json", "inputs.tns", "targets.tns", "coords.tns"] {
        record.artifact(args.out.join(f));
    }
    let (im, is, imin, imax) = stats(ds.inputs.data());
    let (tm, ts, tmin, tmax) = stats(ds.targets.data());
    eprintln!("{task}: {} samples x {} points", ds.len(), ds.points());
    eprintln!("  {:<8} {:>12} {:>12} {:>12} {:>12}", "", "mean", "std", "min", "max");
    eprintln!("  {:<8} {im:>12.4e} {is:>12.4e} {imin:>12.4e} {imax:>12.4e}", "input");
    eprintln!("  {:<8} {tm:>12.4e} {ts:>12.4e} {tmin:>12.4e} {tmax:>12.4e}", "target");
    print_json(&json!({
        "task": task, "n": args.n, "count": ds.len(), "seed": args.seed, "points": ds.points(),
        "input": {"mean": im, "std": is, "min": imin, "max": imax},
        "target": {"mean": tm, "std": ts, "min": tmin, "max": tmax},
    }));
    Ok(())
}

fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    load_run_config_or(path, overrides, RunConfig::default())
}

fn load_run_config_or(path: Option<&Path>, overrides: &[String], fallback: RunConfig) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            RunConfig::parse_text(&text)?
        }
        None => fallback,
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs, record: &mut RunRecord) -> Result<(), CliError> {
    let mut cfg = load_run_config(args.config.as_deref(), &args.overrides)?;
    let ds = OperatorDataset::load(&args.data)?;
    cfg.model.d_in = ds.d_in();
    cfg.model.d_out = ds.d_out();
    cfg.model.d_phys = ds.d_phys();
    record.config = json!({"data": args.data, "out": args.out, "run": cfg.to_json()});
    cfg.model.validate()?;
    cfg.train.validate()?;
    let (train_set, test_set) = ds.split(cfg.test_fraction, cfg.train.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    write_text(&args.out.join("config.txt"), &cfg.to_text(), record)?;
    eprintln!(
        "training {} on {} ({} train / {} test), {} parameters",
        cfg.model.variant,
        ds.task,
        train_set.len(),
        test_set.len(),
        LrsaModel::new(cfg.model.clone(), cfg.train.seed)?.num_parameters()
    );
    let outcome = train::train(&cfg.model, &train_set, &test_set, &cfg.train, Some(&args.out));
    record.artifact(args.out.join("checkpoint"));
    record.artifact(args.out.join("history.csv"));
    let outcome = outcome?;
    for r in outcome.history.iter().filter(|r| r.epoch % 10 == 0 || r.epoch == outcome.history.len()) {
        eprintln!(
            "  epoch {:>4}  loss {:.4e}  test rel L2 {}  lr {:.3e}",
            r.epoch,
            r.train_loss,
            r.test_rel_l2.map_or_else(|| "n/a".into(), |v| format!("{v:.4e}")),
            r.lr
        );
    }
    let test_metrics = if test_set.is_empty() { None } else { Some(train::evaluate(&outcome.model, &test_set)?) };
    print_json(&json!({
        "epochs": outcome.history.len(),
        "steps": outcome.steps,
        "final_train_loss": outcome.history.last().map(|r| r.train_loss),
        "test": test_metrics,
        "checkpoint": args.out.join("checkpoint"),
    }));
    Ok(())
}

pub fn eval(args: &EvalArgs, record: &mut RunRecord) -> Result<(), CliError> {
    record.config = json!({"checkpoint": args.checkpoint, "data": args.data});
    let mut ds = OperatorDataset::load(&args.data)?;
    let (pred, kind) = match load_checkpoint(&args.checkpoint)? {
        Checkpoint::Oracle => (ds.targets.clone(), "oracle"),
        Checkpoint::Model { model, .. } => {
            let c = &model.config;
            if (c.d_in, c.d_out, c.d_phys) != (ds.d_in(), ds.d_out(), ds.d_phys()) {
                return Err(Error::Contract(format!(
                    "checkpoint expects (d_in, d_out, d_phys) = ({}, {}, {}), dataset has ({}, {}, {})",
                    c.d_in,
                    c.d_out,
                    c.d_phys,
                    ds.d_in(),
                    ds.d_out(),
                    ds.d_phys()
                ))
                .into());
            }
            if let Some(stats) = Normalization::load(&args.checkpoint)? {
                ds.normalization = stats;
            }
            (predict_dataset(&model, &ds)?, "lrsa")
        }
    };
    let metrics = evaluate_predictions(&pred, &ds)?;
    eprintln!("{kind} checkpoint on {} samples of {}", ds.len(), ds.task);
    print_json(&json!({"checkpoint_kind": kind, "task": ds.task, "metrics": metrics}));
    Ok(())
}

pub fn analyze_kernel(args: &AnalyzeArgs, record: &mut RunRecord) -> Result<(), CliError> {
    record.config = json!({
        "source": args.source, "n": args.n, "checkpoint": args.checkpoint, "data": args.data,
        "sample": args.sample, "layer": args.layer, "seed": args.seed, "out": args.out,
        "tol": DEFAULT_RANK_TOL,
    });
    let (kernel, extra) = match args.source.as_str() {
        "green1d" => {
            let n = args.n.ok_or_else(|| CliError::Usage("--n is required for green1d".into()))?;
            let g = green_kernel_1d_poisson(n)?.scale(1.0 / (n + 1) as f64);
            let symmetric = g.max_abs_diff(&g.t()) == 0.0;
            (g, json!({"symmetric": symmetric}))
        }
        "model" => model_kernel(args)?,
        other => return Err(CliError::Usage(format!("unknown kernel source `{other}`; expected green1d or model"))),
    };
    let report = spectral_report(&kernel, DEFAULT_RANK_TOL, None)?;
    let n = kernel.rows();
    let slope = if report.singular_values.len() >= 4 {
        let hi = 32.min(report.singular_values.len());
        loglog_slope(&report.singular_values, 2, hi).ok().map(|s| json!({"k_lo": 2, "k_hi": hi, "slope": s}))
    } else {
        None
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    let csv = args.out.join("decay.csv");
    emit_decay_csv(&report, &csv)?;
    record.artifact(&csv);
    let summary = json!({
        "source": args.source,
        "n": n,
        "error_metric": "relative Frobenius error of the best rank-r approximation",
        "numerical_rank": report.numerical_rank,
        "loglog_slope": slope,
        "details": extra,
        "report": report,
    });
    write_text(&args.out.join("report.json"), &serde_json::to_string_pretty(&summary).expect("json"), record)?;
    eprintln!("{} kernel, n = {n}: numerical rank {} at tol {:e}", args.source, report.numerical_rank, report.tol);
    for r in [1usize, 2, 4, 8, 16, 32, 64] {
        if let Some(e) = report.rank_errors.get(&r) {
            eprintln!("  rank {r:>3}: relative error {e:.3e}");
        }
    }
    let mut brief = summary;
    brief["report"] = json!({"numerical_rank": report.numerical_rank, "rank_errors": report.rank_errors});
    print_json(&brief);
    Ok(())
}

fn model_kernel(args: &AnalyzeArgs) -> Result<(Tensor, serde_json::Value), CliError> {
    let dir = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required for the model source".into()))?;
    let model = match load_checkpoint(dir)? {
        Checkpoint::Model { model, .. } => model,
        Checkpoint::Oracle => return Err(CliError::Usage("an oracle checkpoint has no kernel".into())),
    };
    let c = model.config.clone();
    let (features, coords) = match &args.data {
        Some(data) => {
            let mut ds = OperatorDataset::load(data)?;
            if let Some(stats) = Normalization::load(dir)? {
                ds.normalization = stats;
            }
            let (ps, _) = ds.sample(args.sample)?;
            (ds.normalization.normalize_inputs(&ps.features)?, ps.coords)
        }
        None => {
            let n = args.n.ok_or_else(|| CliError::Usage("--n or --data is required for the model source".into()))?;
            if c.d_phys != 1 {
                return Err(CliError::Usage("without --data only 1-d models can be probed".into()));
            }
            let mut cols = Vec::with_capacity(c.d_in);
            for ch in 0..c.d_in {
                cols.push(sample_smooth_field(n, 0.1, args.seed.wrapping_add(ch as u64))?);
            }
            let mut f = Tensor::zeros(&[n, c.d_in]);
            for (ch, col) in cols.iter().enumerate() {
                for i in 0..n {
                    f.set(i, ch, col.data()[i]);
                }
            }
            let coords = Tensor::from_vec(&[n, 1], (0..n).map(|i| i as f64 / n as f64).collect())?;
            (f, coords)
        }
    };
    if features.rows() > MAX_KERNEL_POINTS {
        return Err(Error::Resource(format!(
            "{} points exceed the kernel limit of {MAX_KERNEL_POINTS}",
            features.rows()
        ))
        .into());
    }
    let k = model.induced_kernel(args.layer, &features, &coords)?;
    let mean = k.mean_kernel()?;
    let bound = k.rank_bound;
    let tail = {
        let rep = spectral_report(&mean, DEFAULT_RANK_TOL, Some(&[]))?;
        rep.tail_ratio(bound)
    };
    Ok((
        mean,
        json!({
            "layer": args.layer,
            "variant": c.variant,
            "rank_bound": bound,
            "tail_ratio_at_bound": tail,
            "kernel": "channel-averaged induced kernel",
        }),
    ))
}

/// Depth-2 backbone small enough that checking every entry takes seconds.
pub fn gradcheck_default() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.width = 8;
    cfg.model.heads = 2;
    cfg.model.latent_count = 4;
    cfg.model.num_freqs = 2;
    cfg
}

pub fn gradcheck(args: &GradcheckArgs, record: &mut RunRecord) -> Result<(), CliError> {
    let cfg = load_run_config_or(args.config.as_deref(), &args.overrides, gradcheck_default())?;
    record.config = json!({"run": cfg.to_json(), "seed": args.seed, "n": args.n, "step": args.step});
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let model = LrsaModel::new(cfg.model.clone(), args.seed)?;
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x9c4e);
    let features = Tensor::randn(&[args.n, c.d_in], 1.0, &mut rng);
    let coords = Tensor::rand_uniform(&[args.n, c.d_phys], 0.0, 1.0, &mut rng);
    let probe = Tensor::randn(&[args.n, c.d_out], 1.0, &mut rng);
    let params: Vec<Tensor> = model.params.tensors().cloned().collect();
    // Centring on the unperturbed output keeps the scalar near zero, so its
    // own rounding does not swamp small gradient entries.
    let out0 = model.predict(&features, &coords)?;
    let report = grad_check(
        |tape, pv| {
            let f = tape.constant(features.clone());
            let out = model.forward(tape, pv, f, &coords)?;
            let c = tape.constant(out0.clone());
            let centred = tape.sub(out, c)?;
            let w = tape.constant(probe.clone());
            let prod = tape.mul(centred, w)?;
            tape.sum(prod)
        },
        &params,
        args.step,
    )?;
    let worst = report.worst.map(|(p, e)| {
        let id = model.params.ids().nth(p).expect("index from grad_check");
        json!({"parameter": model.params.name(id), "element": e})
    });
    eprintln!(
        "checked {} entries of {} tensors: max relative error {:.3e}, max absolute error {:.3e} (rounding scale {:.1e})",
        report.checked,
        params.len(),
        report.max_rel_error,
        report.max_abs_error,
        report.roundoff_scale
    );
    print_json(&json!({
        "max_rel_error": report.max_rel_error,
        "checked": report.checked,
        "worst": worst,
        "analytic": report.analytic,
        "numeric": report.numeric,
        "max_abs_error": report.max_abs_error,
        "roundoff_scale": report.roundoff_scale,
        "max_scaled_error": report.max_scaled_error,
        "limit": GRADCHECK_LIMIT,
    }));
    if !(report.max_rel_error <= GRADCHECK_LIMIT) {
        return Err(CliError::Numerical(format!(
            "max relative gradient error {:.3e} exceeds {GRADCHECK_LIMIT:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

pub fn bench(args: &BenchArgs, record: &mut RunRecord) -> Result<(), CliError> {
    let variant: Variant = args.variant.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let cfg = LrsaConfig {
        depth: 1,
        width: args.width,
        heads: args.heads,
        latent_count: args.m,
        variant,
        ..LrsaConfig::default()
    };
    record.config = json!({"model": cfg, "n_grid": args.n_grid, "repeat": args.repeat, "seed": args.seed});
    cfg.validate()?;
    if args.n_grid.is_empty() || args.n_grid.contains(&0) || args.repeat == 0 {
        return Err(CliError::Usage("--n-grid needs positive sizes and --repeat at least 1".into()));
    }
    let model = LrsaModel::new(cfg.clone(), args.seed)?;
    let mut rows = Vec::new();
    eprintln!(
        "{:>7} {:>14} {:>14} {:>16} {:>12}",
        "N", "block FLOPs", "mixing FLOPs", "dense reference", "seconds"
    );
    for &n in &args.n_grid {
        let closed = block_flops(&cfg, n);
        let measured = measure_block_flops(&cfg, n, args.seed)?;
        if measured.total != closed.total || measured.mixing != closed.mixing {
            return Err(CliError::Numerical(format!(
                "tape counted {} / {} FLOPs at N = {n}, closed form gives {} / {}",
                measured.total, measured.mixing, closed.total, closed.mixing
            )));
        }
        let dense = dense_attention_flops(n, cfg.width, cfg.heads);
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let h = Tensor::randn(&[n, cfg.width], 1.0, &mut rng);
        let coords = Tensor::from_vec(&[n, 1], (0..n).map(|i| i as f64 / n as f64).collect())?;
        let mut best = f64::INFINITY;
        for _ in 0..args.repeat {
            let mut tape = Tape::new();
            let pv = model.bind_const(&mut tape);
            let hv = tape.constant(h.clone());
            let t0 = Instant::now();
            block_forward(&mut tape, &cfg, &model.layout.layers[0], &pv, hv, &coords)?;
            best = best.min(t0.elapsed().as_secs_f64());
        }
        eprintln!("{n:>7} {:>14} {:>14} {dense:>16} {best:>12.5}", closed.total, closed.mixing);
        rows.push(json!({
            "n": n, "flops_total": closed.total, "flops_mixing": closed.mixing,
            "dense_reference": dense, "seconds": best,
        }));
    }
    let (lo, hi) = (args.n_grid[0], *args.n_grid.last().expect("non-empty"));
    let ratio = |f: &dyn Fn(usize) -> u64| f(hi) as f64 / f(lo) as f64;
    print_json(&json!({
        "m": args.m,
        "rows": rows,
        "ratio": {
            "n_lo": lo, "n_hi": hi,
            "block_total": ratio(&|n| block_flops(&cfg, n).total),
            "block_mixing": ratio(&|n| block_flops(&cfg, n).mixing),
            "dense_reference": ratio(&|n| dense_attention_flops(n, cfg.width, cfg.heads)),
        },
    }));
    Ok(())
}
