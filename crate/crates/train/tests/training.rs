use lstcn_core::Model64;
use lstcn_train::{load_run_data, read_metrics, train, TrainConfig, TrainError};

fn short_config(iters: u64) -> TrainConfig {
    TrainConfig {
        max_iters: iters,
        checkpoint_every: 0,
        ..TrainConfig::synthetic_default()
    }
}

#[test]
fn loss_falls_over_two_hundred_iterations() {
    let cfg = short_config(200);
    let data = load_run_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train::<f64>(&cfg, &data.train, dir.path(), None).unwrap();
    assert_eq!(out.iterations, 200);
    assert!(out.final_checkpoint.exists());
    let recs = read_metrics(&dir.path().join("metrics.tsv")).unwrap();
    assert_eq!(recs.len(), 200);
    let mean =
        |r: &[lstcn_train::MetricsRecord]| r.iter().map(|m| m.total).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&recs[..10]), mean(&recs[190..]));
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn same_seed_same_metrics() {
    let cfg = short_config(20);
    let data = load_run_data(&cfg).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma: Model64 = train(&cfg, &data.train, a.path(), None).unwrap().model;
    let mb: Model64 = train(&cfg, &data.train, b.path(), None).unwrap().model;
    let read = |d: &std::path::Path| std::fs::read(d.join("metrics.tsv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(ma.store().entries(), mb.store().entries());
}

#[test]
fn long_schedule_steps() {
    let cfg = TrainConfig::casia_b_default("m.tsv".into());
    assert_eq!(cfg.lr_schedule.at(0), 0.1);
    assert_eq!(cfg.lr_schedule.at(19_999), 0.1);
    assert_eq!(cfg.lr_schedule.at(25_000), 0.01);
    assert_eq!(cfg.lr_schedule.at(59_999), 0.001);
}

#[test]
fn bad_config_is_reported() {
    let text = short_config(10)
        .to_text()
        .replace("frames_per_clip = 30", "frames_per_clip = 2");
    assert!(matches!(
        TrainConfig::from_text(&text),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn relative_manifest_resolves_next_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_config(10);
    cfg.data.source = lstcn_train::DataSource::Manifest {
        path: "d/manifest.tsv".into(),
        normalize: false,
    };
    let path = dir.path().join("run.toml");
    std::fs::write(&path, cfg.to_text()).unwrap();
    let loaded = TrainConfig::load(&path).unwrap();
    match loaded.data.source {
        lstcn_train::DataSource::Manifest { path: m, .. } => {
            assert_eq!(m, dir.path().join("d/manifest.tsv"))
        }
        other => panic!("{other:?}"),
    }
}
