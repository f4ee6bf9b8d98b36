//! Training clip sampling and (p, k) batches.

use std::collections::BTreeMap;

use lstcn_core::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::sequence::SilhouetteSequence;
use crate::DataError;

pub const CLIP_LEN: usize = 30;
/// Sequences shorter than this are never used for training.
pub const MIN_TRAIN_FRAMES: usize = 15;
/// Shortest sequence the network accepts at evaluation.
pub const MIN_EVAL_FRAMES: usize = 3;

/// Frame indices of one training clip of `clip_len` frames, or `None` when
/// the sequence is too short. Sequences no longer than `clip_len` are tiled
/// cyclically from frame 0; longer ones get a uniformly random window.
pub fn clip_indices<R: Rng + ?Sized>(t: usize, clip_len: usize, rng: &mut R) -> Option<Vec<usize>> {
    if t < MIN_TRAIN_FRAMES || clip_len == 0 {
        return None;
    }
    if t <= clip_len {
        return Some((0..clip_len).map(|i| i % t).collect());
    }
    let start = rng.gen_range(0..=t - clip_len);
    Some((start..start + clip_len).collect())
}

/// `[clip_len, 1, H, W]` clip, or `None` for a rejected sequence.
pub fn sample_training_clip<S: Scalar, R: Rng + ?Sized>(
    seq: &SilhouetteSequence,
    clip_len: usize,
    rng: &mut R,
) -> Option<Tensor<S>> {
    clip_indices(seq.len(), clip_len, rng).map(|idx| seq.to_tensor(&idx))
}

/// Contiguous integer labels for subject ids, in sorted id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    ids: Vec<String>,
}

impl LabelMap {
    pub fn from_sequences(seqs: &[SilhouetteSequence]) -> Self {
        let mut ids: Vec<String> = seqs.iter().map(|s| s.key.subject_id.clone()).collect();
        ids.sort();
        ids.dedup();
        LabelMap { ids }
    }

    pub fn label(&self, subject: &str) -> Option<usize> {
        self.ids.binary_search_by(|s| s.as_str().cmp(subject)).ok()
    }

    pub fn subject(&self, label: usize) -> &str {
        &self.ids[label]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub struct PkBatch<S> {
    /// `[p*k, clip_len, 1, H, W]`, grouped by subject.
    pub clips: Tensor<S>,
    pub labels: Vec<usize>,
    /// Index into the source slice for each clip.
    pub sources: Vec<usize>,
}

/// Training sequences grouped by subject label.
pub struct PkSampler {
    by_label: BTreeMap<usize, Vec<usize>>,
    clip_len: usize,
    frame: (usize, usize),
}

impl PkSampler {
    /// Sequences shorter than [`MIN_TRAIN_FRAMES`] are skipped.
    pub fn new(
        seqs: &[SilhouetteSequence],
        labels: &LabelMap,
        clip_len: usize,
    ) -> Result<Self, DataError> {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut frame = None;
        for (i, s) in seqs.iter().enumerate() {
            if s.len() < MIN_TRAIN_FRAMES {
                continue;
            }
            if *frame.get_or_insert(s.frame_size()) != s.frame_size() {
                return Err(DataError::Invalid(format!(
                    "sequence {} has frame size {:?}, expected {:?}",
                    s.key,
                    s.frame_size(),
                    frame.unwrap()
                )));
            }
            let label = labels.label(&s.key.subject_id).ok_or_else(|| {
                DataError::Invalid(format!("subject {} has no label", s.key.subject_id))
            })?;
            by_label.entry(label).or_default().push(i);
        }
        let frame = frame.ok_or_else(|| {
            DataError::Invalid("no sequence has enough frames for training".into())
        })?;
        Ok(PkSampler {
            by_label,
            clip_len,
            frame,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.by_label.len()
    }

    /// `p` distinct subjects, `k` clips each. A subject with fewer than `k`
    /// sequences has its sequences drawn with replacement.
    pub fn sample<S: Scalar, R: Rng + ?Sized>(
        &self,
        seqs: &[SilhouetteSequence],
        p: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<PkBatch<S>, DataError> {
        if self.by_label.len() < p {
            return Err(DataError::Invalid(format!(
                "batch needs {p} subjects but only {} have trainable sequences",
                self.by_label.len()
            )));
        }
        let labels: Vec<usize> = self.by_label.keys().copied().collect();
        let chosen: Vec<usize> = labels.choose_multiple(rng, p).copied().collect();
        let (h, w) = self.frame;
        let mut data = Vec::with_capacity(p * k * self.clip_len * h * w);
        let (mut out_labels, mut sources) = (Vec::new(), Vec::new());
        for label in chosen {
            let pool = &self.by_label[&label];
            let picks: Vec<usize> = if pool.len() >= k {
                pool.choose_multiple(rng, k).copied().collect()
            } else {
                (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
            };
            for src in picks {
                let idx = clip_indices(seqs[src].len(), self.clip_len, rng)
                    .expect("pool holds long sequences");
                data.extend_from_slice(seqs[src].to_tensor::<S>(&idx).data());
                out_labels.push(label);
                sources.push(src);
            }
        }
        let clips = Tensor::from_vec(vec![p * k, self.clip_len, 1, h, w], data)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        Ok(PkBatch {
            clips,
            labels: out_labels,
            sources,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::BinaryImage;
    use crate::sequence::{Condition, SequenceKey};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(subject: &str, idx: u32, t: usize) -> SilhouetteSequence {
        let key = SequenceKey {
            subject_id: subject.into(),
            condition: Condition::Synth,
            view_deg: 0,
            seq_index: idx,
        };
        let frames = (0..t)
            .map(|i| BinaryImage::from_fn(4, 3, |y, x| (y * 3 + x) == i % 12))
            .collect();
        SilhouetteSequence::new(key, frames).unwrap()
    }

    #[test]
    fn clip_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(clip_indices(14, 30, &mut rng).is_none());
        let c = clip_indices(20, 30, &mut rng).unwrap();
        let want: Vec<usize> = (0..20).chain(0..10).collect();
        assert_eq!(c, want);
        assert_eq!(
            clip_indices(30, 30, &mut rng).unwrap(),
            (0..30).collect::<Vec<_>>()
        );
        let a = clip_indices(100, 30, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = clip_indices(100, 30, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert_eq!(a[29] - a[0], 29);
    }

    #[test]
    fn pk_batch_counts() {
        let mut seqs = Vec::new();
        for s in 0..8 {
            let n = if s == 0 { 3 } else { 8 };
            for i in 0..n {
                seqs.push(seq(&format!("{s:03}"), i + 1, 20 + i as usize));
            }
        }
        let labels = LabelMap::from_sequences(&seqs);
        let sampler = PkSampler::new(&seqs, &labels, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sampler.sample::<f64, _>(&seqs, 8, 8, &mut rng).unwrap();
        assert_eq!(b.clips.shape(), &[64, 30, 1, 4, 3]);
        let mut distinct = b.labels.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 8);
        // the 3-sequence subject still contributes 8 clips
        assert_eq!(b.labels.iter().filter(|&&l| l == 0).count(), 8);
        let b = sampler.sample::<f64, _>(&seqs, 2, 1, &mut rng).unwrap();
        assert_eq!(b.labels.len(), 2);
        assert_ne!(b.labels[0], b.labels[1]);
        assert!(sampler.sample::<f64, _>(&seqs, 9, 1, &mut rng).is_err());
    }
}
