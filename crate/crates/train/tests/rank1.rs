use lstcn_core::Model64;
use lstcn_data::{generate_sequences, Condition, SequenceKey, SynthProtocol};
use lstcn_train::{desk_model, extract_embeddings, rank1, EmbeddingTable};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn key(subject: usize, view: i32, seq: u32) -> SequenceKey {
    SequenceKey {
        subject_id: format!("{subject:03}"),
        condition: Condition::Synth,
        view_deg: view,
        seq_index: seq,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

/// `n` subjects with one random prototype each; probes add noise of scale `noise`.
fn tables(
    n: usize,
    parts: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> (EmbeddingTable, EmbeddingTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gallery = EmbeddingTable::new(parts, dim);
    let mut probe = EmbeddingTable::new(parts, dim);
    for s in 0..n {
        let proto = gaussian(&mut rng, parts * dim);
        for view in [0, 30] {
            gallery.push(key(s, view, 1), &proto);
            let noisy: Vec<f64> = proto
                .iter()
                .map(|v| v + noise * gaussian(&mut rng, 1)[0])
                .collect();
            probe.push(key(s, view, 2), &noisy);
        }
    }
    (gallery, probe)
}

#[test]
fn identical_rows_match_perfectly() {
    let (g, _) = tables(12, 3, 5, 0.0, 1);
    let mut p = g.clone();
    for k in &mut p.keys {
        k.seq_index = 2;
    }
    let r = rank1(&g, &p, true).unwrap();
    assert_eq!(r.aggregate(), 1.0);
    let r = rank1(&g, &p, false).unwrap();
    assert_eq!(r.aggregate(), 1.0);
}

#[test]
fn one_hot_embeddings_match_perfectly() {
    let n = 8;
    let mut g = EmbeddingTable::new(1, n);
    let mut p = EmbeddingTable::new(1, n);
    for s in 0..n {
        let mut v = vec![0.0; n];
        v[s] = 1.0;
        g.push(key(s, 0, 1), &v);
        v[s] = 3.0;
        p.push(key(s, 0, 2), &v);
    }
    assert_eq!(rank1(&g, &p, true).unwrap().aggregate(), 1.0);
}

#[test]
fn unrelated_embeddings_score_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 50;
    let mut g = EmbeddingTable::new(2, 8);
    let mut p = EmbeddingTable::new(2, 8);
    for s in 0..n {
        g.push(key(s, 0, 1), &gaussian(&mut rng, 16));
        for i in 0..20 {
            p.push(key(s, 0, 2 + i), &gaussian(&mut rng, 16));
        }
    }
    let acc = rank1(&g, &p, true).unwrap().aggregate();
    assert!(acc < 0.05, "{acc} vs chance {}", 1.0 / n as f64);
}

#[test]
fn rotation_leaves_result_unchanged() {
    let (g, p) = tables(20, 3, 6, 0.8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = gaussian(&mut rng, 6);
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let v: Vec<f64> = v.iter().map(|x| x / vn).collect();
    // Householder reflection applied to every part
    let reflect = |t: &EmbeddingTable| {
        let mut out = EmbeddingTable::new(t.n_parts, t.dim);
        for (i, k) in t.keys.iter().enumerate() {
            let row: Vec<f64> = t
                .row(i)
                .chunks(t.dim)
                .flat_map(|x| {
                    let d: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
                    x.iter()
                        .zip(&v)
                        .map(move |(a, b)| a - 2.0 * d * b)
                        .collect::<Vec<_>>()
                })
                .collect();
            out.push(k.clone(), &row);
        }
        out
    };
    let a = rank1(&g, &p, true).unwrap();
    let b = rank1(&reflect(&g), &reflect(&p), true).unwrap();
    assert!(
        a.aggregate() > 0.2 && a.aggregate() < 1.0,
        "{}",
        a.aggregate()
    );
    assert_eq!(a.cells, b.cells);
}

#[test]
fn gallery_order_does_not_matter() {
    let (g, p) = tables(20, 2, 4, 1.0, 4);
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let mut shuffled = EmbeddingTable::new(g.n_parts, g.dim);
    for &i in &order {
        shuffled.push(g.keys[i].clone(), g.row(i));
    }
    assert_eq!(
        rank1(&g, &p, true).unwrap(),
        rank1(&shuffled, &p, true).unwrap()
    );
}

#[test]
fn embeddings_are_unit_parts_and_deterministic() {
    let protocol = SynthProtocol {
        n_subjects: 3,
        frames_per_seq: 20,
        views: vec![0],
        seqs_per_cell: 1,
        ..SynthProtocol::default()
    };
    let mut seqs = generate_sequences(&protocol).unwrap();
    seqs.push(seqs[0].clone());
    let model = Model64::with_init(desk_model(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let table = extract_embeddings(&model, &seqs).unwrap();
    assert_eq!(table.len(), 4);
    assert_eq!(table.n_parts, model.n_parts());
    assert_eq!(table.row(0), table.row(3));
    for i in 0..table.len() {
        for part in table.row(i).chunks(table.dim) {
            let n = part.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-10, "{n}");
        }
    }
}
