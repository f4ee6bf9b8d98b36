//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use lstcn_core::harness::{case_tiny_model, fusion_trial, op_suite};
use lstcn_core::losses::{focal_loss, triplet_loss};
use lstcn_core::{
    load_checkpoint, oracle, save_checkpoint, DType, Mode, Model32, Model64, ModelConfig, PoolMode,
};
use lstcn_core::{Tape, Tensor, Variant};
use lstcn_train::{
    ablation_suite, ablation_table, load_run_data, AblationRow, AblationSpec, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn budget(what: &str, t0: Instant, limit_s: f64) -> Result<f64, String> {
    let s = t0.elapsed().as_secs_f64();
    if s > limit_s {
        return Err(format!("{what} took {s:.0}s, limit {limit_s:.0}s"));
    }
    Ok(s)
}

fn oracles() -> Outcome {
    let t0 = Instant::now();
    let mut n = 0;
    for (k, (name, case)) in oracle::suite().into_iter().enumerate() {
        let mut r = rng(1000 + k as u64);
        for i in 0..120 {
            case(&mut r, i).map_err(|e| format!("{name} instance {i}: {e}"))?;
            n += 1;
        }
    }
    let s = budget("oracles", t0, 60.0)?;
    Ok(format!("{n} instances over 6 op groups, {s:.1}s"))
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut suite = op_suite();
    suite.push(("tiny_model", case_tiny_model));
    let (mut worst, mut kinks) = (0.0f64, 0);
    for (k, (name, build)) in suite.iter().enumerate() {
        let mut r = rng(2000 + k as u64);
        for trial in 0..50 {
            let report = build(&mut r).check();
            if !report.passed {
                return Err(format!("{name} trial {trial}: {report}"));
            }
            worst = worst.max(report.max_rel_error());
            kinks += report.inputs.iter().map(|x| x.skipped).sum::<usize>();
        }
    }
    let s = budget("gradcheck", t0, 300.0)?;
    Ok(format!(
        "{} ops x 50 trials, worst rel err {worst:.2e}, {kinks} kink elements skipped, {s:.1}s",
        suite.len()
    ))
}

fn fusion(trained: &Path, data: &lstcn_train::RunData) -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(3000);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        worst = worst.max(fusion_trial(&mut r).map_err(|e| e.to_string())?);
    }
    if worst > 1e-5 {
        return Err(format!("kernel bank deviation {worst:.3e} > 1e-5"));
    }
    let model = load_checkpoint::<f64>(trained).map_err(|e| e.to_string())?;
    let mut fused = model.clone();
    fused.fuse().map_err(|e| e.to_string())?;
    let mut model_dev = 0.0f64;
    for seq in data.gallery.iter().chain(&data.probe) {
        let clip = seq.full_tensor::<f64>();
        let a = model
            .forward(&clip, Mode::Eval)
            .map_err(|e| e.to_string())?
            .features;
        let b = fused
            .forward(&clip, Mode::Eval)
            .map_err(|e| e.to_string())?
            .features;
        model_dev = model_dev.max(a.max_abs_diff(&b));
    }
    if model_dev > 1e-4 {
        return Err(format!(
            "trained model eval features deviate {model_dev:.3e} > 1e-4"
        ));
    }
    let s = budget("fusion", t0, 60.0)?;
    Ok(format!(
        "banks {worst:.2e} over 100 trials, trained model {model_dev:.2e} over {} sequences, {s:.1}s",
        data.gallery.len() + data.probe.len()
    ))
}

fn losses() -> Outcome {
    let mut r = rng(4000);
    let mut worst_t = 0.0f64;
    for _ in 0..300 {
        let (b, p, d) = (r.gen_range(2..=12), r.gen_range(1..=3), r.gen_range(1..=4));
        let ids = r.gen_range(2..=4);
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..ids)).collect();
        let x: Vec<f64> = (0..b * p * d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::<f64>::new();
        let v = tape.param(Tensor::from_vec(vec![b, p, d], x.clone()).map_err(|e| e.to_string())?);
        let (l, _) = triplet_loss(&mut tape, v, &labels, 0.2, false).map_err(|e| e.to_string())?;
        let want = oracle::triplet_loss(&x, [b, p, d], &labels, 0.2);
        worst_t = worst_t.max((tape.value(l).item() - want).abs() / want.abs().max(1.0));
    }
    if worst_t > 1e-12 {
        return Err(format!(
            "triplet deviates {worst_t:.2e} from the all-triplets oracle"
        ));
    }
    let mut worst_f = 0.0f64;
    for _ in 0..300 {
        let (b, c) = (r.gen_range(1..=8), r.gen_range(2..=6));
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
        let z: Vec<f64> = (0..b * c).map(|_| r.gen_range(-4.0..4.0)).collect();
        let mut tape = Tape::<f64>::new();
        let v = tape.param(Tensor::from_vec(vec![b, c], z.clone()).map_err(|e| e.to_string())?);
        let f = focal_loss(&mut tape, v, &labels, 0.0).map_err(|e| e.to_string())?;
        let ce = oracle::cross_entropy(&z, c, &labels);
        worst_f = worst_f.max((tape.value(f).item() - ce).abs() / ce.max(1.0));
    }
    if worst_f > 1e-12 {
        return Err(format!(
            "focal(gamma=0) deviates {worst_f:.2e} from cross-entropy"
        ));
    }
    let mut tape = Tape::<f64>::new();
    let v = tape.param(Tensor::zeros(&[1, 4]));
    let f = focal_loss(&mut tape, v, &[0], 2.0).map_err(|e| e.to_string())?;
    let uniform = tape.value(f).item();
    if (uniform - 0.779791).abs() > 1e-5 {
        return Err(format!("uniform 4-class focal {uniform} != 0.779791"));
    }
    Ok(format!(
        "triplet {worst_t:.1e}, focal/CE {worst_f:.1e} over 300 instances each, uniform focal {uniform:.6}"
    ))
}

fn row<'a>(rows: &'a [AblationRow], v: Variant) -> &'a AblationRow {
    rows.iter()
        .find(|r| r.spec.variant == v)
        .expect("variant was run")
}

fn temporal_signal(rows: &[AblationRow]) -> Outcome {
    let (full, stat) = (row(rows, Variant::GbspLstc), row(rows, Variant::StaticOnly));
    let gap = 100.0 * (full.aggregate - stat.aggregate);
    let secs = full.seconds + stat.seconds;
    let msg = format!(
        "full {:.1}%, static_only {:.1}%, gap {gap:.1} points, {secs:.0}s",
        100.0 * full.aggregate,
        100.0 * stat.aggregate
    );
    if full.aggregate >= 0.85 && stat.aggregate <= 0.40 && gap >= 30.0 && secs <= 900.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn pooling_head(rows: &[AblationRow]) -> Outcome {
    let (lstp, gstp) = (row(rows, Variant::GbspLstc), row(rows, Variant::GstpHead));
    let secs = lstp.seconds + gstp.seconds;
    let msg = format!(
        "lstp {:.1}%, gstp {:.1}%, {secs:.0}s",
        100.0 * lstp.aggregate,
        100.0 * gstp.aggregate
    );
    if 100.0 * lstp.aggregate >= 100.0 * gstp.aggregate - 1.0 && secs <= 1800.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn lstcn(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lstcn"))
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "lstcn {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn pipeline(root: &Path) -> Result<PathBuf, String> {
    let _ = std::fs::remove_dir_all(root);
    let data = root.join("data");
    let run = root.join("run");
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());
    lstcn(&["--seed", "0", "--deterministic", "--out", d, "synth"])?;
    let cfg = data.join("train.toml");
    let c = cfg.to_str().unwrap();
    lstcn(&[
        "--config",
        c,
        "--deterministic",
        "--out",
        r,
        "train",
        "--max-iters",
        "200",
    ])?;
    let ckpt = run.join("model.ckpt");
    lstcn(&[
        "--config",
        c,
        "--out",
        r,
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ])?;
    Ok(run)
}

fn determinism(work: &Path) -> Outcome {
    let t0 = Instant::now();
    let a = pipeline(&work.join("det_a"))?;
    let b = pipeline(&work.join("det_b"))?;
    for f in [
        "metrics.tsv",
        "eval_report.txt",
        "eval_report.kv",
        "model.ckpt",
    ] {
        let (x, y) = (std::fs::read(a.join(f)), std::fs::read(b.join(f)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            (Ok(_), Ok(_)) => return Err(format!("{f} differs between runs")),
            (e1, e2) => return Err(format!("{f}: {:?} / {:?}", e1.err(), e2.err())),
        }
    }
    Ok(format!(
        "synth -> train 200 -> eval twice: metrics, reports and checkpoint byte-identical, {:.0}s",
        t0.elapsed().as_secs_f64()
    ))
}

fn shapes(work: &Path) -> Outcome {
    let cfg = ModelConfig::default();
    let model = Model32::with_init(cfg.clone(), &mut rng(5000)).map_err(|e| e.to_string())?;
    for t in [3usize, 15, 30, 61] {
        let x = Tensor::<f32>::rand_uniform(&[t, 1, 64, 44], 0.0, 1.0, &mut rng(t as u64));
        let out = model.forward(&x, Mode::Eval).map_err(|e| e.to_string())?;
        if out.features.shape() != [43, 256] {
            return Err(format!("T={t}: features {:?}", out.features.shape()));
        }
        let trace = model.layer_shapes(t).map_err(|e| e.to_string())?;
        let want: Vec<(&str, Vec<usize>)> = vec![
            ("stem", vec![t, 64, 32, 22]),
            ("static.0", vec![t, 128, 16, 11]),
            ("static.1", vec![t, 256, 16, 11]),
            ("static.parts", vec![1, 256, 16]),
            ("lstc.h.strips", vec![1, 64, t, 32]),
            ("lstc.h.0", vec![1, 128, t, 16]),
            ("lstc.h.1", vec![1, 256, t, 16]),
            ("lstc.h.head", vec![1, 256, 16]),
            ("lstc.v.strips", vec![1, 64, t, 22]),
            ("lstc.v.0", vec![1, 128, t, 11]),
            ("lstc.v.1", vec![1, 256, t, 11]),
            ("lstc.v.head", vec![1, 256, 11]),
            ("parts", vec![1, 256, 43]),
            ("features", vec![1, 43, 256]),
        ];
        let got: Vec<(&str, Vec<usize>)> =
            trace.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
        if got != want {
            return Err(format!("T={t}: layer shapes {got:?}"));
        }
    }
    let m64 = Model64::with_init(cfg, &mut rng(5001)).map_err(|e| e.to_string())?;
    let (p1, p2) = (work.join("shape_a.ckpt"), work.join("shape_b.ckpt"));
    save_checkpoint(&m64, &p1, DType::F64).map_err(|e| e.to_string())?;
    let back = load_checkpoint::<f64>(&p1).map_err(|e| e.to_string())?;
    save_checkpoint(&back, &p2, DType::F64).map_err(|e| e.to_string())?;
    let same_params = m64
        .store()
        .entries()
        .iter()
        .zip(back.store().entries())
        .all(|(a, b)| {
            a.name == b.name
                && a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let same_file = std::fs::read(&p1).ok() == std::fs::read(&p2).ok();
    if !(same_params && same_file) {
        return Err(format!(
            "checkpoint round trip: params identical {same_params}, file identical {same_file}"
        ));
    }
    Ok("features [43,256] and 14 layer shapes for T in {3,15,30,61}; checkpoint round trip bit-identical".into())
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, r: Outcome) {
    let (tag, msg) = match &r {
        Ok(m) => ("PASS", m.as_str()),
        Err(m) => ("FAIL", m.as_str()),
    };
    println!("criterion {id} {name:<20} {tag}  {msg}");
    results.push(r.is_ok());
}

fn main() -> ExitCode {
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&work).expect("work dir");
    let mut results = Vec::new();

    report(&mut results, 1, "oracle equivalence", oracles());
    report(&mut results, 2, "gradient checks", gradients());

    // criteria 3, 5 and 6 share the synthetic runs
    let base = TrainConfig::synthetic_default();
    let specs: Vec<AblationSpec> = [Variant::GbspLstc, Variant::StaticOnly, Variant::GstpHead]
        .into_iter()
        .map(|variant| AblationSpec {
            variant,
            pool: PoolMode::Max,
        })
        .collect();
    let runs = load_run_data(&base)
        .map_err(|e| e.to_string())
        .and_then(|data| {
            ablation_suite::<f64>(&base, &specs, &data, &work.join("synthetic"))
                .map(|rows| (data, rows))
                .map_err(|e| e.to_string())
        });
    match &runs {
        Ok((data, rows)) => {
            print!("{}", ablation_table(rows));
            let full = work
                .join("synthetic")
                .join(specs[0].label())
                .join("model.ckpt");
            report(&mut results, 3, "fusion equivalence", fusion(&full, data));
        }
        Err(e) => report(&mut results, 3, "fusion equivalence", Err(e.clone())),
    }
    report(&mut results, 4, "loss correctness", losses());
    match &runs {
        Ok((_, rows)) => {
            report(&mut results, 5, "temporal signal", temporal_signal(rows));
            report(&mut results, 6, "pooling head order", pooling_head(rows));
        }
        Err(e) => {
            report(&mut results, 5, "temporal signal", Err(e.clone()));
            report(&mut results, 6, "pooling head order", Err(e.clone()));
        }
    }
    report(&mut results, 7, "determinism", determinism(&work));
    report(&mut results, 8, "shape contract", shapes(&work));

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
