use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use lstcn_core::harness::{case_tiny_model, fusion_trial, op_suite, CaseBuilder};
use lstcn_core::{load_checkpoint, Mode, PoolMode, Scalar, Tensor};
use lstcn_data::synth::derive_seed;
use lstcn_data::{generate_dataset, SynthProtocol, MANIFEST_NAME};
use lstcn_train::ablation::{ablation_suite, ablation_table, default_grid, AblationSpec};
use lstcn_train::config::{DataSource, Precision, TrainConfig};
use lstcn_train::eval::{write_report, REPORT_KV};
use lstcn_train::metrics::{read_metrics, summarize};
use lstcn_train::train::{METRICS_FILE, RESOLVED_CONFIG};
use lstcn_train::{evaluate_model, load_run_data, train};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{
    AblateArgs, Cli, Command, EvalArgs, FusecheckArgs, GradcheckArgs, ReportArgs, SynthArgs,
    TrainArgs,
};

pub const ARTIFACTS_FILE: &str = "artifacts.tsv";
pub const FUSION_TOL: f64 = 1e-5;
/// Exit status after an interrupted training run.
pub const EXIT_INTERRUPTED: u8 = 130;

pub fn run(cli: &Cli) -> Result<ExitCode> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let code = match &cli.command {
        Command::Synth(a) => synth(cli, a)?,
        Command::Train(a) => train_cmd(cli, a)?,
        Command::Eval(a) => eval_cmd(cli, a)?,
        Command::Ablate(a) => ablate(cli, a)?,
        Command::Gradcheck(a) => gradcheck_cmd(cli, a)?,
        Command::Fusecheck(a) => fusecheck(cli, a)?,
        Command::Report(a) => report(cli, a)?,
    };
    write_artifact_manifest(&cli.out)?;
    Ok(code)
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::synthetic_default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<ExitCode> {
    let mut protocol = match &cli.config {
        Some(p) => match TrainConfig::load(p)?.data.source {
            DataSource::Synthetic { protocol } => protocol,
            DataSource::Manifest { .. } => {
                bail!("{} does not describe a synthetic data source", p.display())
            }
        },
        None => SynthProtocol::default(),
    };
    if let Some(n) = a.subjects {
        protocol.n_subjects = n;
    }
    if let Some(n) = a.frames {
        protocol.frames_per_seq = n;
    }
    if let Some(v) = &a.views {
        protocol.views = v.clone();
    }
    if let Some(c) = &a.conditions {
        protocol.conditions = c.clone();
    }
    if let Some(n) = a.seqs_per_cell {
        protocol.seqs_per_cell = n;
    }
    if a.motion_only {
        protocol.motion_only = true;
    }
    if a.vary_geometry {
        protocol.motion_only = false;
    }
    if let Some(s) = cli.seed {
        protocol.seed = s;
    }
    let index = generate_dataset(&protocol, &cli.out)?;
    println!("wrote {} sequences to {}", index.len(), cli.out.display());

    // a run config that reads the dataset just written
    let mut cfg = TrainConfig::synthetic_default();
    let conds = protocol.conditions.clone();
    cfg.data.train_filter.conditions = conds.clone();
    if let lstcn_data::Protocol::Synthetic { gallery, probe } = &mut cfg.eval.protocol {
        gallery.conditions = conds.clone();
        probe.conditions = conds;
    }
    cfg.data.source = DataSource::Manifest {
        path: PathBuf::from(MANIFEST_NAME),
        normalize: false,
    };
    cfg.seed = protocol.seed;
    cfg.deterministic = cli.deterministic || cfg.deterministic;
    write(&cli.out.join("train.toml"), &cfg.to_text())?;
    write(&cli.out.join("synth.toml"), &toml_of(&protocol))?;
    Ok(ExitCode::SUCCESS)
}

fn toml_of<T: serde::Serialize>(v: &T) -> String {
    toml::to_string(v).expect("serializable")
}

fn stop_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    flag
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(cli)?;
    if let Some(n) = a.max_iters {
        cfg.max_iters = n;
    }
    if let Some(v) = a.variant {
        cfg.variant = Some(v);
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    cfg.validate()?;
    let data = load_run_data(&cfg)?;
    let stop = stop_flag();
    let interrupted = match cfg.precision {
        Precision::F64 => train_and_maybe_eval::<f64>(&cfg, &data, cli, a.eval, &stop)?,
        Precision::F32 => train_and_maybe_eval::<f32>(&cfg, &data, cli, a.eval, &stop)?,
    };
    Ok(if interrupted {
        ExitCode::from(EXIT_INTERRUPTED)
    } else {
        ExitCode::SUCCESS
    })
}

fn train_and_maybe_eval<S: Scalar>(
    cfg: &TrainConfig,
    data: &lstcn_train::RunData,
    cli: &Cli,
    eval: bool,
    stop: &AtomicBool,
) -> Result<bool> {
    let outcome = train::<S>(cfg, &data.train, &cli.out, Some(stop))?;
    println!(
        "trained {} iterations, checkpoint {}",
        outcome.iterations,
        outcome.final_checkpoint.display()
    );
    if eval && !outcome.interrupted {
        let result = evaluate_model(&outcome.model, data, cfg.eval.include_same_view)?;
        write_report(&result, &cli.out)?;
        print!("{}", result.to_table());
    }
    Ok(outcome.interrupted)
}

/// The run config saved next to a checkpoint, for `eval` without `--config`.
fn config_near(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint
        .ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join(RESOLVED_CONFIG))
        .find(|p| p.is_file())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<ExitCode> {
    if !a.checkpoint.is_file() {
        bail!("checkpoint {} does not exist", a.checkpoint.display());
    }
    let mut cfg = match (&cli.config, config_near(&a.checkpoint)) {
        (Some(_), _) => load_config(cli)?,
        (None, Some(p)) => TrainConfig::load(&p)?,
        (None, None) => bail!(
            "no --config given and no {RESOLVED_CONFIG} next to {}",
            a.checkpoint.display()
        ),
    };
    if let Some(b) = a.include_same_view {
        cfg.eval.include_same_view = b;
    }
    let data = load_run_data(&cfg)?;
    let result = match cfg.precision {
        Precision::F64 => {
            let m = load_checkpoint::<f64>(&a.checkpoint)?;
            evaluate_model(&m, &data, cfg.eval.include_same_view)?
        }
        Precision::F32 => {
            let m = load_checkpoint::<f32>(&a.checkpoint)?;
            evaluate_model(&m, &data, cfg.eval.include_same_view)?
        }
    };
    write_report(&result, &cli.out)?;
    print!("{}", result.to_table());
    Ok(ExitCode::SUCCESS)
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<ExitCode> {
    let mut cfg = load_config(cli)?;
    if let Some(n) = a.max_iters {
        cfg.max_iters = n;
    }
    let grid: Vec<AblationSpec> = match (&a.variants, &a.pools) {
        (None, None) => default_grid(),
        (v, p) => {
            let vs = v
                .clone()
                .unwrap_or_else(|| default_grid().iter().map(|s| s.variant).collect());
            let mut vs_unique = Vec::new();
            for x in vs {
                if !vs_unique.contains(&x) {
                    vs_unique.push(x);
                }
            }
            let ps = p.clone().unwrap_or_else(|| vec![PoolMode::Max]);
            vs_unique
                .iter()
                .flat_map(|&variant| ps.iter().map(move |&pool| AblationSpec { variant, pool }))
                .collect()
        }
    };
    cfg.validate()?;
    let data = load_run_data(&cfg)?;
    let rows = match cfg.precision {
        Precision::F64 => ablation_suite::<f64>(&cfg, &grid, &data, &cli.out)?,
        Precision::F32 => ablation_suite::<f32>(&cfg, &grid, &data, &cli.out)?,
    };
    let table = ablation_table(&rows);
    write(&cli.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(cli: &Cli, a: &GradcheckArgs) -> Result<ExitCode> {
    let mut suite: Vec<(&str, CaseBuilder)> = op_suite();
    suite.push(("tiny_model", case_tiny_model));
    if let Some(names) = &a.ops {
        for n in names {
            if !suite.iter().any(|(s, _)| s == n) {
                bail!("unknown op {n:?}");
            }
        }
        suite.retain(|(s, _)| names.iter().any(|n| n == s));
    }
    let seed = cli.seed.unwrap_or(0);
    let mut out = String::new();
    let mut all_pass = true;
    for (i, (name, build)) in suite.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let (mut worst, mut failures, mut tol, mut kinks) = (0.0f64, Vec::new(), 0.0, 0);
        for trial in 0..a.trials {
            let case = build(&mut rng);
            tol = case.tol;
            let r = case.check();
            worst = worst.max(r.max_rel_error());
            kinks += r.inputs.iter().map(|x| x.skipped).sum::<usize>();
            if !r.passed {
                failures.push(format!("trial {trial}: {r}"));
            }
        }
        all_pass &= failures.is_empty();
        let line = format!(
            "{name:<22} {} trials={} max_rel_err={worst:.3e} tol={tol:.0e} kinks={kinks}",
            if failures.is_empty() { "PASS" } else { "FAIL" },
            a.trials
        );
        println!("{line}");
        let _ = writeln!(out, "{line}");
        for f in failures {
            let _ = writeln!(out, "    {f}");
        }
    }
    write(&cli.out.join("gradcheck.txt"), &out)?;
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn fusecheck(cli: &Cli, a: &FusecheckArgs) -> Result<ExitCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cli.seed.unwrap_or(0), &[0xF05E]));
    let mut worst = 0.0f64;
    for _ in 0..a.trials {
        worst = worst.max(fusion_trial(&mut rng)?);
    }
    let mut pass = worst <= FUSION_TOL;
    let mut out = format!(
        "kernel banks: trials={} max_abs_deviation={worst:.3e} tol={FUSION_TOL:.0e}\n",
        a.trials
    );
    if let Some(path) = &a.checkpoint {
        if !path.is_file() {
            bail!("checkpoint {} does not exist", path.display());
        }
        let model = load_checkpoint::<f64>(path)?;
        let mut fused = model.clone();
        fused.fuse()?;
        let cfg = model.config();
        let mut dev = 0.0f64;
        for t in [3usize, 15, 30] {
            let clip = Tensor::<f64>::rand_uniform(
                &[t, 1, cfg.in_height, cfg.in_width],
                0.0,
                1.0,
                &mut rng,
            )
            .map(|v| if v > 0.5 { 1.0 } else { 0.0 });
            let a = model.forward(&clip, Mode::Eval)?.features;
            let b = fused.forward(&clip, Mode::Eval)?.features;
            dev = dev.max(a.max_abs_diff(&b));
        }
        pass &= dev <= 1e-4;
        let _ = writeln!(
            out,
            "model {}: max_abs_deviation={dev:.3e} tol=1e-4",
            path.display()
        );
    }
    let _ = writeln!(out, "{}", if pass { "PASS" } else { "FAIL" });
    print!("{out}");
    write(&cli.out.join("fusecheck.txt"), &out)?;
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<ExitCode> {
    let dir = a.run.clone().unwrap_or_else(|| cli.out.clone());
    let mut out = String::new();
    let metrics = dir.join(METRICS_FILE);
    let mut found = false;
    if metrics.is_file() {
        found = true;
        let records = read_metrics(&metrics)?;
        match summarize(&records, 10) {
            Some(s) => {
                let _ = writeln!(out, "iterations\t{}", s.iterations);
                let _ = writeln!(out, "total loss, first 10\t{:.5}", s.first_mean_total);
                let _ = writeln!(out, "total loss, last 10\t{:.5}", s.last_mean_total);
                let _ = writeln!(out, "lowest total loss\t{:.5}", s.min_total);
                let _ = writeln!(out, "active triplets, last 10\t{:.1}", s.mean_active_last);
                let _ = writeln!(out, "final learning rate\t{:e}", s.final_lr);
            }
            None => {
                let _ = writeln!(out, "metrics log is empty");
            }
        }
    }
    let kv = dir.join(REPORT_KV);
    if kv.is_file() {
        found = true;
        let text =
            std::fs::read_to_string(&kv).with_context(|| format!("reading {}", kv.display()))?;
        for line in text.lines().filter(|l| !l.starts_with("cell.")) {
            if let Some((k, v)) = line.split_once('=') {
                let _ = writeln!(out, "{k}\t{v}");
            }
        }
    }
    let ablation = dir.join("ablation.txt");
    if ablation.is_file() {
        found = true;
        out.push('\n');
        out.push_str(
            &std::fs::read_to_string(&ablation)
                .with_context(|| format!("reading {}", ablation.display()))?,
        );
    }
    if !found {
        bail!(
            "{} holds no metrics log, eval report or ablation table",
            dir.display()
        );
    }
    print!("{out}");
    write(&cli.out.join("summary.txt"), &out)?;
    Ok(ExitCode::SUCCESS)
}

/// `relative path<TAB>bytes` for every file under `out`, sorted.
fn write_artifact_manifest(out: &Path) -> Result<()> {
    fn walk(dir: &Path, root: &Path, acc: &mut Vec<(String, u64)>) -> std::io::Result<()> {
        for e in std::fs::read_dir(dir)? {
            let e = e?;
            let p = e.path();
            if e.file_type()?.is_dir() {
                walk(&p, root, acc)?;
            } else {
                let rel = p
                    .strip_prefix(root)
                    .unwrap_or(&p)
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel != ARTIFACTS_FILE {
                    acc.push((rel, e.metadata()?.len()));
                }
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(out, out, &mut files).with_context(|| format!("listing {}", out.display()))?;
    files.sort();
    let mut text = String::new();
    for (p, n) in files {
        let _ = writeln!(text, "{p}\t{n}");
    }
    write(&out.join(ARTIFACTS_FILE), &text)
}
