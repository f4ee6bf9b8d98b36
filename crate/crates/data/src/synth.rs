//! Procedural walking silhouettes: a thick stick figure whose limbs swing
//! sinusoidally, viewed through a horizontal squash and shear.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::BinaryImage;
use crate::index::{DatasetIndex, IndexEntry, MANIFEST_NAME};
use crate::normalize::{normalize_frame, OUT_HEIGHT, OUT_WIDTH};
use crate::sequence::{casia_path, save_sequence, Condition, SequenceKey, SilhouetteSequence};
use crate::DataError;

/// Canvas pixels per output pixel.
const SUPERSAMPLE: usize = 3;
const MARGIN: f64 = 6.0;
const LEG_WIDTH: f64 = 5.0;
const ARM_WIDTH: f64 = 3.0;
/// Arm swing relative to leg swing, opposite sign.
const ARM_RATIO: f64 = 0.6;
const SHEAR: f64 = 0.15;
const MIN_SQUASH: f64 = 0.3;
const COAT_DILATION: f64 = 2.0;
const BAG_AXES: (f64, f64) = (4.0, 6.0);

pub const FREQ_BOUNDS: (f64, f64) = (0.02, 0.25);
pub const MIN_FREQ_SEPARATION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkerSpec {
    pub subject_id: String,
    pub torso_width: f64,
    pub torso_height: f64,
    pub head_radius: f64,
    pub leg_length: f64,
    pub arm_length: f64,
    /// Cycles per frame.
    pub stride_freq: f64,
    pub phase0: f64,
    /// Peak leg angle from vertical, radians.
    pub swing_amp: f64,
    pub view_deg: i32,
    pub condition: Condition,
}

impl WalkerSpec {
    fn figure_height(&self) -> f64 {
        2.0 * self.head_radius + self.torso_height + self.leg_length + LEG_WIDTH / 2.0
    }

    fn figure_width(&self) -> f64 {
        let legs = 2.0 * self.leg_length * self.swing_amp.sin() + LEG_WIDTH;
        let arms = 2.0 * self.arm_length * (ARM_RATIO * self.swing_amp).sin() + ARM_WIDTH;
        let mut w = self
            .torso_width
            .max(legs)
            .max(arms)
            .max(2.0 * self.head_radius);
        if self.condition == Condition::Bg {
            w = w.max(self.torso_width + 4.0 * BAG_AXES.0);
        }
        if self.condition == Condition::Cl {
            w += 2.0 * COAT_DILATION;
        }
        w
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| {
            Err(DataError::Invalid(format!(
                "walker {}: {m}",
                self.subject_id
            )))
        };
        let dims = [
            self.torso_width,
            self.torso_height,
            self.head_radius,
            self.leg_length,
            self.arm_length,
        ];
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return bad("body dimensions must be positive".into());
        }
        if !(self.stride_freq > FREQ_BOUNDS.0 && self.stride_freq < FREQ_BOUNDS.1) {
            return bad(format!(
                "stride_freq {} outside {FREQ_BOUNDS:?}",
                self.stride_freq
            ));
        }
        if !(self.swing_amp >= 0.0 && self.swing_amp < PI / 3.0) {
            return bad(format!("swing_amp {} outside [0, pi/3)", self.swing_amp));
        }
        if !matches!(
            self.condition,
            Condition::Nm | Condition::Bg | Condition::Cl
        ) {
            return bad(format!("condition {} is not NM, BG or CL", self.condition));
        }
        if self.figure_height() > OUT_HEIGHT as f64 || self.figure_width() > OUT_WIDTH as f64 {
            return bad(format!(
                "figure {:.1}x{:.1} does not fit {OUT_HEIGHT}x{OUT_WIDTH}",
                self.figure_height(),
                self.figure_width()
            ));
        }
        Ok(())
    }

    /// Leg angle at frame `t`.
    pub fn leg_angle(&self, t: usize) -> f64 {
        self.swing_amp * (2.0 * PI * self.stride_freq * t as f64 + self.phase0).sin()
    }
}

fn segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (a.0 + s * dx - p.0, a.1 + s * dy - p.1);
    ex * ex + ey * ey
}

struct Pose {
    /// Points are `(x, y)` in figure units, y downward.
    head: (f64, f64),
    shoulder_y: f64,
    hip: (f64, f64),
    feet: [(f64, f64); 2],
    arm_root: (f64, f64),
    hands: [(f64, f64); 2],
}

fn pose(spec: &WalkerSpec, t: usize, cx: f64) -> Pose {
    let top = MARGIN;
    let head = (cx, top + spec.head_radius);
    let shoulder_y = top + 2.0 * spec.head_radius - 1.0;
    let hip = (cx, shoulder_y + spec.torso_height);
    let th = spec.leg_angle(t);
    let feet = [th, -th].map(|a| {
        (
            cx + spec.leg_length * a.sin(),
            hip.1 + spec.leg_length * a.cos(),
        )
    });
    let arm_root = (cx, shoulder_y + ARM_WIDTH / 2.0);
    let hands = [-ARM_RATIO * th, ARM_RATIO * th].map(|a| {
        (
            cx + spec.arm_length * a.sin(),
            arm_root.1 + spec.arm_length * a.cos(),
        )
    });
    Pose {
        head,
        shoulder_y,
        hip,
        feet,
        arm_root,
        hands,
    }
}

fn inside(spec: &WalkerSpec, p: &Pose, q: (f64, f64)) -> bool {
    let (x, y) = q;
    let r2 = |r: f64| r * r;
    if r2(x - p.head.0) + r2(y - p.head.1) <= r2(spec.head_radius) {
        return true;
    }
    if (x - p.hip.0).abs() <= spec.torso_width / 2.0 && y >= p.shoulder_y && y <= p.hip.1 {
        return true;
    }
    if p.feet
        .iter()
        .any(|&f| segment_dist2(q, p.hip, f) <= r2(LEG_WIDTH / 2.0))
    {
        return true;
    }
    if p.hands
        .iter()
        .any(|&h| segment_dist2(q, p.arm_root, h) <= r2(ARM_WIDTH / 2.0))
    {
        return true;
    }
    if spec.condition == Condition::Bg {
        let c = (
            p.hip.0 - spec.torso_width / 2.0 - BAG_AXES.0 + 1.0,
            p.hip.1 - 0.3 * spec.torso_height,
        );
        if r2((x - c.0) / BAG_AXES.0) + r2((y - c.1) / BAG_AXES.1) <= 1.0 {
            return true;
        }
    }
    false
}

fn dilate(img: &BinaryImage, radius: f64) -> BinaryImage {
    let r = radius.floor() as i64;
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= radius * radius)
        .collect();
    let (h, w) = (img.height() as i64, img.width() as i64);
    BinaryImage::from_fn(img.height(), img.width(), |y, x| {
        offsets.iter().any(|&(dy, dx)| {
            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
            yy >= 0 && xx >= 0 && yy < h && xx < w && img.get(yy as usize, xx as usize)
        })
    })
}

/// Supersampled canvas before normalization.
fn render_canvas(spec: &WalkerSpec, t: usize) -> BinaryImage {
    let ss = SUPERSAMPLE as f64;
    let (fh, fw) = (
        OUT_HEIGHT as f64 + 2.0 * MARGIN,
        OUT_WIDTH as f64 + 4.0 * MARGIN,
    );
    let cx = fw / 2.0;
    let p = pose(spec, t, cx);
    let squash = (spec.view_deg as f64).to_radians().cos().max(MIN_SQUASH);
    let shear = SHEAR * (spec.view_deg as f64).to_radians().sin();
    let canvas = BinaryImage::from_fn((fh * ss) as usize, (fw * ss) as usize, |py, px| {
        let y = (py as f64 + 0.5) / ss;
        let xv = (px as f64 + 0.5) / ss;
        let x = cx + (xv - cx - shear * (y - p.hip.1)) / squash;
        inside(spec, &p, (x, y))
    });
    if spec.condition == Condition::Cl {
        dilate(&canvas, COAT_DILATION * ss)
    } else {
        canvas
    }
}

/// One normalized 64 x 44 frame of the walker at frame index `t`.
pub fn render_walker(spec: &WalkerSpec, t: usize) -> BinaryImage {
    normalize_frame(&render_canvas(spec, t)).expect("walker always has foreground")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthProtocol {
    pub n_subjects: usize,
    pub frames_per_seq: usize,
    pub views: Vec<i32>,
    pub conditions: Vec<Condition>,
    /// Shared body geometry and swing amplitude; subjects differ in stride
    /// frequency and phase only.
    pub motion_only: bool,
    pub seed: u64,
    /// Sequences per (subject, view, condition).
    #[serde(default = "one")]
    pub seqs_per_cell: u32,
    /// Range stride frequencies are drawn from, cycles per frame.
    #[serde(default = "default_freq_range")]
    pub freq_range: (f64, f64),
}

fn one() -> u32 {
    1
}

fn default_freq_range() -> (f64, f64) {
    (0.03, 0.12)
}

impl Default for SynthProtocol {
    fn default() -> Self {
        SynthProtocol {
            n_subjects: 10,
            frames_per_seq: 40,
            views: vec![0, 30],
            conditions: vec![Condition::Nm],
            motion_only: true,
            seed: 0,
            seqs_per_cell: 4,
            freq_range: default_freq_range(),
        }
    }
}

impl SynthProtocol {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(format!("synthetic protocol: {m}")));
        if self.n_subjects < 2 {
            return bad(format!("n_subjects {} < 2", self.n_subjects));
        }
        if self.frames_per_seq < 15 {
            return bad(format!("frames_per_seq {} < 15", self.frames_per_seq));
        }
        if self.views.is_empty() || self.conditions.is_empty() || self.seqs_per_cell == 0 {
            return bad("views, conditions and seqs_per_cell must be non-empty".into());
        }
        let (lo, hi) = self.freq_range;
        if !(lo > FREQ_BOUNDS.0 && hi < FREQ_BOUNDS.1 && lo < hi) {
            return bad(format!(
                "freq_range {:?} must lie inside {FREQ_BOUNDS:?}",
                self.freq_range
            ));
        }
        let need = (self.n_subjects - 1) as f64 * MIN_FREQ_SEPARATION;
        if need > hi - lo {
            return bad(format!(
                "{} subjects need a frequency span of {need:.3} but the range spans {:.3}",
                self.n_subjects,
                hi - lo
            ));
        }
        Ok(())
    }
}

/// Deterministic seed for a labelled stream.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = splitmix(z ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn subject_id(i: usize) -> String {
    format!("{:03}", i + 1)
}

/// Per-subject walker template (view NM, before per-sequence phase).
pub fn subject_specs(protocol: &SynthProtocol) -> Result<Vec<WalkerSpec>, DataError> {
    protocol.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(protocol.seed, &[0]));
    let n = protocol.n_subjects;
    let (lo, hi) = protocol.freq_range;
    // sorted uniform draws with a guaranteed gap, then shuffled
    let slack = (hi - lo) - (n - 1) as f64 * MIN_FREQ_SEPARATION;
    let mut base: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=slack)).collect();
    base.sort_by(|a, b| a.total_cmp(b));
    let mut freqs: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, b)| lo + b + i as f64 * MIN_FREQ_SEPARATION)
        .collect();
    rand::seq::SliceRandom::shuffle(freqs.as_mut_slice(), &mut rng);

    let shared = (
        12.0, // torso width
        20.0, // torso height
        5.0,  // head radius
        28.0, // leg length
        18.0, // arm length
        0.45, // swing amplitude
    );
    let specs = freqs
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let g = if protocol.motion_only {
                shared
            } else {
                (
                    rng.gen_range(10.0..14.0),
                    rng.gen_range(18.0..23.0),
                    rng.gen_range(4.0..6.0),
                    rng.gen_range(24.0..30.0),
                    rng.gen_range(15.0..21.0),
                    rng.gen_range(0.3..0.55),
                )
            };
            WalkerSpec {
                subject_id: subject_id(i),
                torso_width: g.0,
                torso_height: g.1,
                head_radius: g.2,
                leg_length: g.3,
                arm_length: g.4,
                stride_freq: f,
                phase0: rng.gen_range(0.0..2.0 * PI),
                swing_amp: g.5,
                view_deg: 0,
                condition: Condition::Nm,
            }
        })
        .collect::<Vec<_>>();
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

fn condition_code(c: Condition) -> u64 {
    match c {
        Condition::Nm => 1,
        Condition::Bg => 2,
        Condition::Cl => 3,
        Condition::Synth => 4,
    }
}

/// Render one sequence. The phase offset depends only on
/// `(seed, subject, view, condition, seq_index)`.
pub fn render_sequence(
    protocol: &SynthProtocol,
    template: &WalkerSpec,
    view_deg: i32,
    condition: Condition,
    seq_index: u32,
) -> Result<SilhouetteSequence, DataError> {
    let subject_no: u64 = template.subject_id.parse().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        protocol.seed,
        &[
            1,
            subject_no,
            view_deg as i64 as u64,
            condition_code(condition),
            seq_index as u64,
        ],
    ));
    let spec = WalkerSpec {
        view_deg,
        condition,
        phase0: template.phase0 + rng.gen_range(0.0..2.0 * PI),
        ..template.clone()
    };
    spec.validate()?;
    let frames = (0..protocol.frames_per_seq)
        .map(|t| render_walker(&spec, t))
        .collect();
    SilhouetteSequence::new(
        SequenceKey {
            subject_id: spec.subject_id.clone(),
            condition,
            view_deg,
            seq_index,
        },
        frames,
    )
}

/// Every sequence of the protocol, in subject, view, condition, index order.
pub fn generate_sequences(protocol: &SynthProtocol) -> Result<Vec<SilhouetteSequence>, DataError> {
    let mut out = Vec::new();
    for template in subject_specs(protocol)? {
        for &view in &protocol.views {
            for &cond in &protocol.conditions {
                for i in 1..=protocol.seqs_per_cell {
                    out.push(render_sequence(protocol, &template, view, cond, i)?);
                }
            }
        }
    }
    Ok(out)
}

/// Write all sequences as PNG frames under `out_dir` in the
/// `<subject>/<cond>-<nn>/<view>` layout, plus `manifest.tsv`.
pub fn generate_dataset(
    protocol: &SynthProtocol,
    out_dir: &Path,
) -> Result<DatasetIndex, DataError> {
    let mut entries = Vec::new();
    for seq in generate_sequences(protocol)? {
        let dir = out_dir.join(casia_path(&seq.key));
        save_sequence(&seq, &dir)?;
        entries.push(IndexEntry {
            key: seq.key.clone(),
            path: dir,
        });
    }
    let index = DatasetIndex::new(entries)?;
    index.write_manifest(&out_dir.join(MANIFEST_NAME))?;
    Ok(index)
}
