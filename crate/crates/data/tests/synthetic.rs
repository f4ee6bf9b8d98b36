use std::collections::BTreeMap;
use std::path::Path;

use lstcn_data::{
    generate_dataset, generate_sequences, Condition, DatasetIndex, SilhouetteSequence,
    SynthProtocol,
};

fn protocol(seqs_per_cell: u32) -> SynthProtocol {
    SynthProtocol {
        n_subjects: 10,
        frames_per_seq: 40,
        views: vec![0, 30],
        conditions: vec![Condition::Nm],
        motion_only: true,
        seed: 0,
        seqs_per_cell,
        ..SynthProtocol::default()
    }
}

fn mean_image(seqs: &[&SilhouetteSequence]) -> Vec<f64> {
    let (h, w) = seqs[0].frame_size();
    let mut acc = vec![0.0; h * w];
    let mut n = 0.0;
    for s in seqs {
        for f in s.frames() {
            for (a, &p) in acc.iter_mut().zip(f.pixels()) {
                *a += f64::from(p);
            }
            n += 1.0;
        }
    }
    acc.iter().map(|v| v / n).collect()
}

#[test]
fn motion_only_subjects_share_mean_silhouette() {
    let seqs = generate_sequences(&protocol(4)).unwrap();
    for view in [0, 30] {
        let mut by_subject: BTreeMap<&str, Vec<&SilhouetteSequence>> = BTreeMap::new();
        for s in seqs.iter().filter(|s| s.key.view_deg == view) {
            by_subject.entry(&s.key.subject_id).or_default().push(s);
        }
        let means: Vec<Vec<f64>> = by_subject.values().map(|v| mean_image(v)).collect();
        assert_eq!(means.len(), 10);
        for a in &means {
            for b in &means {
                let l1 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
                assert!(l1 <= 0.02, "view {view}: mean L1 {l1}");
            }
        }
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_writes_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&protocol(1), a.path()).unwrap();
    generate_dataset(&protocol(1), b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 20 * 40 + 1);
    assert!(ta == tb, "datasets differ");
}

#[test]
fn manifest_lists_every_sequence() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&protocol(1), dir.path()).unwrap();
    let index = DatasetIndex::read_manifest(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(index.len(), 20);
    assert_eq!(index.subjects().len(), 10);
    for seq in index.load_all(false).unwrap() {
        assert_eq!(seq.len(), 40);
        assert_eq!(seq.frame_size(), (64, 44));
        assert_eq!(seq.key.condition, Condition::Nm);
    }
}

#[test]
fn different_seed_changes_phases() {
    let a = generate_sequences(&protocol(1)).unwrap();
    let b = generate_sequences(&SynthProtocol {
        seed: 1,
        ..protocol(1)
    })
    .unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| x.frames() != y.frames()));
}
