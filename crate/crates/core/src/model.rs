//! The dual-branch gait network: a shared stem, a static 2-D convolution
//! branch pooled over time, and a local spatiotemporal branch fed by strip
//! pooling with lateral connections from the static branch.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::TensorError;
use crate::kernels::{BatchStats, ReduceMode};
use crate::layers::{self, LstcBankVars, LstcKernelBank, NormStep, PoolMode, DEFAULT_GEM_P};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;

fn at(layer: impl Into<String>) -> impl FnOnce(TensorError) -> ModelError {
    let layer = layer.into();
    move |source| ModelError::Layer { layer, source }
}

/// Source of the dynamic branch's strip features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// No dynamic branch.
    StaticOnly,
    /// Global spatial pooling, a single strip.
    Gsp,
    Horizontal,
    Vertical,
    Bidirectional,
}

/// Temporal pooling head of the dynamic branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Per-strip pooling over time.
    Lstp,
    /// Pooling over the whole time x strip plane.
    Gstp,
}

/// Named ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    StaticOnly,
    GspLstc,
    HOnly,
    VOnly,
    GbspLstc,
    GstpHead,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::StaticOnly,
        Variant::GspLstc,
        Variant::HOnly,
        Variant::VOnly,
        Variant::GbspLstc,
        Variant::GstpHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::StaticOnly => "static_only",
            Variant::GspLstc => "gsp_lstc",
            Variant::HOnly => "h_only",
            Variant::VOnly => "v_only",
            Variant::GbspLstc => "gbsp_lstc",
            Variant::GstpHead => "gstp_head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        let (branch, head) = match self {
            Variant::StaticOnly => (Branch::StaticOnly, Head::Lstp),
            Variant::GspLstc => (Branch::Gsp, Head::Lstp),
            Variant::HOnly => (Branch::Horizontal, Head::Lstp),
            Variant::VOnly => (Branch::Vertical, Head::Lstp),
            Variant::GbspLstc => (Branch::Bidirectional, Head::Lstp),
            Variant::GstpHead => (Branch::Bidirectional, Head::Gstp),
        };
        cfg.branch = branch;
        cfg.head = head;
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_height: usize,
    pub in_width: usize,
    pub stem_channels: usize,
    /// Output channels of static Conv Blocks 2 and 3.
    pub static_channels: [usize; 2],
    /// Output channels of LSTC Blocks 1 and 2.
    pub lstc_channels: [usize; 2],
    pub stem_kernel: usize,
    pub conv_kernel: usize,
    pub lstc_kernel: usize,
    /// Stride of the first stem convolution (1 in the reference network).
    pub stem_stride: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub static_strips: usize,
    pub branch: Branch,
    pub head: Head,
    pub asymmetric: bool,
    /// Pooling used by strip pooling and the lateral connections.
    pub strip_pool: PoolMode,
    /// Pooling used by the temporal head.
    pub temporal_pool: PoolMode,
    pub gem_p: f64,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    /// The reference network on 64 x 44 silhouettes.
    fn default() -> Self {
        ModelConfig {
            in_height: 64,
            in_width: 44,
            stem_channels: 64,
            static_channels: [128, 256],
            lstc_channels: [128, 256],
            stem_kernel: 5,
            conv_kernel: 3,
            lstc_kernel: 3,
            stem_stride: 1,
            embed_dim: 256,
            n_classes: 74,
            static_strips: 16,
            branch: Branch::Bidirectional,
            head: Head::Lstp,
            asymmetric: true,
            strip_pool: PoolMode::Max,
            temporal_pool: PoolMode::Max,
            gem_p: DEFAULT_GEM_P,
            leaky_slope: 0.01,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// Where a part feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartTag {
    StaticStrip(usize),
    DynHoriz(usize),
    DynVert(usize),
    DynGlobal(usize),
}

impl fmt::Display for PartTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartTag::StaticStrip(i) => write!(f, "static-strip {i}"),
            PartTag::DynHoriz(i) => write!(f, "dyn-horiz {i}"),
            PartTag::DynVert(i) => write!(f, "dyn-vert {i}"),
            PartTag::DynGlobal(i) => write!(f, "dyn-global {i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Horizontal,
    Vertical,
    Global,
}

impl Direction {
    fn key(self) -> &'static str {
        match self {
            Direction::Horizontal => "h",
            Direction::Vertical => "v",
            Direction::Global => "g",
        }
    }
}

/// Spatial extents at each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageDims {
    /// After the stem (`f_b`).
    pub base: (usize, usize),
    /// After static Block 2 pooling (also Block 3).
    pub deep: (usize, usize),
}

impl ModelConfig {
    pub fn stage_dims(&self) -> StageDims {
        let pad = self.stem_kernel / 2;
        let conv_out = |x: usize| (x + 2 * pad - self.stem_kernel) / self.stem_stride + 1;
        let base = (conv_out(self.in_height) / 2, conv_out(self.in_width) / 2);
        StageDims {
            base,
            deep: (base.0 / 2, base.1 / 2),
        }
    }

    fn directions(&self) -> Vec<Direction> {
        match self.branch {
            Branch::StaticOnly => vec![],
            Branch::Gsp => vec![Direction::Global],
            Branch::Horizontal => vec![Direction::Horizontal],
            Branch::Vertical => vec![Direction::Vertical],
            Branch::Bidirectional => vec![Direction::Horizontal, Direction::Vertical],
        }
    }

    /// Provenance of every part in output order.
    pub fn part_tags(&self) -> Vec<PartTag> {
        let mut tags: Vec<PartTag> = (0..self.static_strips).map(PartTag::StaticStrip).collect();
        let deep = self.stage_dims().deep;
        for d in self.directions() {
            let strips = match (self.head, d) {
                (Head::Gstp, _) | (_, Direction::Global) => 1,
                (Head::Lstp, Direction::Horizontal) => deep.0,
                (Head::Lstp, Direction::Vertical) => deep.1,
            };
            for i in 0..strips {
                tags.push(match (self.head, d) {
                    (Head::Gstp, _) | (_, Direction::Global) => PartTag::DynGlobal(i),
                    (_, Direction::Horizontal) => PartTag::DynHoriz(i),
                    (_, Direction::Vertical) => PartTag::DynVert(i),
                });
            }
        }
        tags
    }

    pub fn n_parts(&self) -> usize {
        self.part_tags().len()
    }

    pub fn validate(&self) -> ModelResult<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.stem_kernel % 2 == 0 || self.conv_kernel % 2 == 0 || self.lstc_kernel % 2 == 0 {
            return bad("kernel sizes must be odd".into());
        }
        if self.stem_stride == 0 {
            return bad("stem_stride must be >= 1".into());
        }
        let dims = self.stage_dims();
        if dims.deep.0 == 0 || dims.deep.1 == 0 {
            return bad(format!(
                "input {}x{} too small for the network",
                self.in_height, self.in_width
            ));
        }
        if self.static_strips == 0 || dims.deep.0 % self.static_strips != 0 {
            return bad(format!(
                "static_strips {} must divide deep feature height {}",
                self.static_strips, dims.deep.0
            ));
        }
        if self.branch != Branch::StaticOnly {
            if self.lstc_channels != self.static_channels {
                return bad(format!(
                    "lateral connections need lstc_channels {:?} == static_channels {:?}",
                    self.lstc_channels, self.static_channels
                ));
            }
            // strip-axis pooling in LSTC Block 1 must land on the Block 2 strip counts
            for (s, want) in [(dims.base.0, dims.deep.0), (dims.base.1, dims.deep.1)] {
                if s / 2 != want {
                    return bad(format!(
                        "strip count {s} halves to {} but lateral path has {want}",
                        s / 2
                    ));
                }
            }
        }
        let chans = [
            self.stem_channels,
            self.static_channels[0],
            self.static_channels[1],
            self.embed_dim,
        ];
        if chans.contains(&0) || self.n_classes == 0 {
            return bad("channel counts and n_classes must be positive".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!(
                "leaky_slope {} must lie in (0, 1)",
                self.leaky_slope
            ));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_eps must be > 0 and bn_momentum in (0, 1]".into());
        }
        if !(self.gem_p >= 1.0) {
            return bad(format!("gem_p {} must be >= 1", self.gem_p));
        }
        Ok(())
    }

    /// Serialize as `key = value` text.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    fn strip_mode(&self) -> ReduceMode {
        self.strip_pool.reduce(self.gem_p)
    }

    fn temporal_mode(&self) -> ReduceMode {
        self.temporal_pool.reduce(self.gem_p)
    }
}

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct ConvUnit {
    name: String,
    weight: ParamId,
    bn: BnIds,
    pad: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct LstcUnit {
    name: String,
    square: ParamId,
    spatial: ParamId,
    temporal: ParamId,
    bias: ParamId,
    bn: BnIds,
    fused: Option<Tensor<f64>>,
}

#[derive(Debug, Clone)]
struct LstcPath {
    dir: Direction,
    /// Two blocks of two units each.
    blocks: [[LstcUnit; 2]; 2],
}

/// Whether a forward pass normalizes with batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-part embeddings of one sequence.
#[derive(Debug, Clone)]
pub struct PartFeatureSet<S> {
    /// `[n_parts, embed_dim]`
    pub features: Tensor<S>,
    /// `[n_parts, n_classes]`, training mode only.
    pub logits: Option<Tensor<S>>,
    pub parts: Vec<PartTag>,
}

/// Tape handles produced by [`LstcnModel::forward_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[N, n_parts, embed_dim]`
    pub features: Var,
    /// `[N, n_parts, n_classes]`
    pub logits: Option<Var>,
}

/// Batch statistics gathered in training mode, to be folded into running stats.
pub struct BnUpdates<S> {
    items: Vec<(BnIds, BatchStats<S>)>,
}

/// `(stage name, activation shape)` pairs.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

fn record<S: Scalar>(trace: &mut Option<&mut ShapeTrace>, tape: &Tape<S>, name: &str, v: Var) {
    if let Some(t) = trace {
        t.push((name.to_string(), tape.shape(v).to_vec()));
    }
}

/// Full parameter set of the network.
#[derive(Debug, Clone)]
pub struct LstcnModel<S: Scalar> {
    config: ModelConfig,
    store: ParamStore<S>,
    stem: [ConvUnit; 2],
    static_blocks: [[ConvUnit; 2]; 2],
    paths: Vec<LstcPath>,
    part_fc_weight: ParamId,
    part_fc_bias: ParamId,
    cls_bn: BnIds,
    cls_weight: ParamId,
    cls_bias: ParamId,
}

fn add_bn<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, c: usize) -> BnIds {
    BnIds {
        gamma: store.add(format!("{prefix}.bn.gamma"), Tensor::ones(&[c]), true),
        beta: store.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[c]), true),
        mean: store.add(
            format!("{prefix}.bn.running_mean"),
            Tensor::zeros(&[c]),
            false,
        ),
        var: store.add(
            format!("{prefix}.bn.running_var"),
            Tensor::ones(&[c]),
            false,
        ),
    }
}

fn add_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    name: String,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
) -> ConvUnit {
    ConvUnit {
        weight: store.add(
            format!("{name}.weight"),
            Tensor::zeros(&[c_out, c_in, k, k]),
            true,
        ),
        bn: add_bn(store, &name, c_out),
        pad: k / 2,
        stride,
        name,
    }
}

fn add_lstc<S: Scalar>(
    store: &mut ParamStore<S>,
    name: String,
    c_in: usize,
    c_out: usize,
    a: usize,
) -> LstcUnit {
    LstcUnit {
        square: store.add(
            format!("{name}.square"),
            Tensor::zeros(&[c_out, c_in, a, a]),
            true,
        ),
        spatial: store.add(
            format!("{name}.spatial_1d"),
            Tensor::zeros(&[c_out, c_in, 1, a]),
            true,
        ),
        temporal: store.add(
            format!("{name}.temporal_1d"),
            Tensor::zeros(&[c_out, c_in, a, 1]),
            true,
        ),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true),
        bn: add_bn(store, &name, c_out),
        fused: None,
        name,
    }
}

impl<S: Scalar> LstcnModel<S> {
    /// Allocate every parameter (weights zero, batch norm identity).
    pub fn new(config: ModelConfig) -> ModelResult<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = &config;
        let stem = [
            add_conv(
                &mut store,
                "stem.0".into(),
                1,
                c.stem_channels,
                c.stem_kernel,
                c.stem_stride,
            ),
            add_conv(
                &mut store,
                "stem.1".into(),
                c.stem_channels,
                c.stem_channels,
                c.conv_kernel,
                1,
            ),
        ];
        let [c2, c3] = c.static_channels;
        let static_blocks = [
            [
                add_conv(
                    &mut store,
                    "static.0.0".into(),
                    c.stem_channels,
                    c2,
                    c.conv_kernel,
                    1,
                ),
                add_conv(&mut store, "static.0.1".into(), c2, c2, c.conv_kernel, 1),
            ],
            [
                add_conv(&mut store, "static.1.0".into(), c2, c3, c.conv_kernel, 1),
                add_conv(&mut store, "static.1.1".into(), c3, c3, c.conv_kernel, 1),
            ],
        ];
        let [l1, l2] = c.lstc_channels;
        let a = c.lstc_kernel;
        let paths = c
            .directions()
            .into_iter()
            .map(|dir| {
                let k = dir.key();
                LstcPath {
                    dir,
                    blocks: [
                        [
                            add_lstc(&mut store, format!("lstc.{k}.0.0"), c.stem_channels, l1, a),
                            add_lstc(&mut store, format!("lstc.{k}.0.1"), l1, l1, a),
                        ],
                        [
                            add_lstc(&mut store, format!("lstc.{k}.1.0"), l1, l2, a),
                            add_lstc(&mut store, format!("lstc.{k}.1.1"), l2, l2, a),
                        ],
                    ],
                }
            })
            .collect();
        let parts = c.n_parts();
        let e = c.embed_dim;
        let part_fc_weight = store.add("part_fc.weight", Tensor::zeros(&[parts, e, c3]), true);
        let part_fc_bias = store.add("part_fc.bias", Tensor::zeros(&[parts, e]), true);
        let cls_bn = add_bn(&mut store, "classifier", parts * e);
        let cls_weight = store.add(
            "classifier.weight",
            Tensor::zeros(&[parts, c.n_classes, e]),
            true,
        );
        let cls_bias = store.add(
            "classifier.bias",
            Tensor::zeros(&[parts, c.n_classes]),
            true,
        );
        Ok(LstcnModel {
            config,
            store,
            stem,
            static_blocks,
            paths,
            part_fc_weight,
            part_fc_bias,
            cls_bn,
            cls_weight,
            cls_bias,
        })
    }

    /// Allocate and draw initial weights.
    pub fn with_init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> ModelResult<Self> {
        let mut m = Self::new(config)?;
        m.init_params(rng);
        Ok(m)
    }

    /// Fan-in scaled normal weights for leaky ReLU, unit/zero batch norm,
    /// zero biases. Draw order follows parameter registration order.
    pub fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let gain = (2.0 / (1.0 + self.config.leaky_slope.powi(2))).sqrt();
        for entry in self.store.entries_mut() {
            let shape = entry.value.shape().to_vec();
            let name = entry.name.as_str();
            entry.value = if name.ends_with(".bn.gamma") || name.ends_with(".bn.running_var") {
                Tensor::ones(&shape)
            } else if !is_weight(name) {
                Tensor::zeros(&shape)
            } else {
                let std = gain / (fan_in(name, &shape) as f64).sqrt();
                Tensor::randn(&shape, std, rng)
            };
        }
        for p in &mut self.paths {
            for block in &mut p.blocks {
                for u in block {
                    u.fused = None;
                }
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        self.clear_fusion();
        &mut self.store
    }

    pub fn n_parts(&self) -> usize {
        self.config.n_parts()
    }

    /// Expected fan-in target std of a weight entry.
    pub fn init_std(&self, name: &str) -> Option<f64> {
        let id = self.store.find(name)?;
        if !is_weight(name) {
            return None;
        }
        let gain = (2.0 / (1.0 + self.config.leaky_slope.powi(2))).sqrt();
        Some(gain / (fan_in(name, self.store.get(id).shape()) as f64).sqrt())
    }

    fn clear_fusion(&mut self) {
        for p in &mut self.paths {
            for block in &mut p.blocks {
                for u in block {
                    u.fused = None;
                }
            }
        }
    }

    /// Kernel bank of the LSTC unit named like `lstc.h.0.1`.
    pub fn lstc_bank(&self, unit: &str) -> Option<LstcKernelBank<S>> {
        let u = self.units().find(|u| u.name == unit)?;
        Some(self.bank_of(u))
    }

    /// Names of all LSTC units.
    pub fn lstc_units(&self) -> Vec<String> {
        self.units().map(|u| u.name.clone()).collect()
    }

    fn units(&self) -> impl Iterator<Item = &LstcUnit> {
        self.paths.iter().flat_map(|p| p.blocks.iter().flatten())
    }

    fn bank_of(&self, u: &LstcUnit) -> LstcKernelBank<S> {
        LstcKernelBank {
            square: self.store.get(u.square).clone(),
            spatial_1d: self.store.get(u.spatial).clone(),
            temporal_1d: self.store.get(u.temporal).clone(),
            bias: self.store.get(u.bias).clone(),
            asymmetric: self.config.asymmetric,
            fused: u.fused.as_ref().map(|f| f.cast()),
        }
    }

    /// Replace every asymmetric LSTC unit's three kernels with one fused
    /// kernel for eval-mode inference.
    pub fn fuse(&mut self) -> ModelResult<()> {
        if !self.config.asymmetric {
            return Err(ModelError::Config(
                "model has no asymmetric branches to fuse".into(),
            ));
        }
        let mut fused = Vec::new();
        for u in self.units() {
            let bank = self.bank_of(u);
            fused.push(
                bank.fused_kernel()
                    .map_err(at(u.name.clone()))?
                    .cast::<f64>(),
            );
        }
        let mut it = fused.into_iter();
        for p in &mut self.paths {
            for block in &mut p.blocks {
                for u in block {
                    u.fused = it.next();
                }
            }
        }
        Ok(())
    }

    pub fn is_fused(&self) -> bool {
        self.units().next().is_some() && self.units().all(|u| u.fused.is_some())
    }

    /// Single clip `[T, 1, H, W]` forward. Running statistics are not updated.
    pub fn forward(&self, clip: &Tensor<S>, mode: Mode) -> ModelResult<PartFeatureSet<S>> {
        let s = clip.shape();
        if s.len() != 4 {
            return Err(ModelError::Input(format!(
                "clip must be [T,1,H,W], got {s:?}"
            )));
        }
        let batch = clip
            .reshape(&[1, s[0], s[1], s[2], s[3]])
            .map_err(|e| ModelError::Input(e.to_string()))?;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.constant(batch);
        let (out, _) = self.forward_on_tape(&mut tape, &bound, x, mode)?;
        let features = squeeze_first(tape.value(out.features));
        let logits = out.logits.map(|l| squeeze_first(tape.value(l)));
        Ok(PartFeatureSet {
            features,
            logits,
            parts: self.config.part_tags(),
        })
    }

    /// Forward over clips `[N, T, 1, H, W]` already on the tape.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        clips: Var,
        mode: Mode,
    ) -> ModelResult<(ForwardVars, BnUpdates<S>)> {
        self.forward_inner(tape, bound, clips, mode, None)
    }

    /// Named activation shapes of an eval forward over one all-zero clip of
    /// `t` frames, in execution order. Framewise stages report `[T, C, H, W]`;
    /// sequence stages keep the leading batch axis of 1.
    pub fn layer_shapes(&self, t: usize) -> ModelResult<ShapeTrace> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, t, 1, cfg.in_height, cfg.in_width]));
        let mut trace = ShapeTrace::new();
        self.forward_inner(&mut tape, &bound, x, Mode::Eval, Some(&mut trace))?;
        Ok(trace)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        clips: Var,
        mode: Mode,
        mut trace: Option<&mut ShapeTrace>,
    ) -> ModelResult<(ForwardVars, BnUpdates<S>)> {
        let cfg = &self.config;
        let shape = tape.shape(clips).to_vec();
        if shape.len() != 5 || shape[2] != 1 {
            return Err(ModelError::Input(format!(
                "clips must be [N,T,1,H,W], got {shape:?}"
            )));
        }
        let (n, t) = (shape[0], shape[1]);
        if t < 3 {
            return Err(ModelError::Input(format!(
                "sequence has {t} frames, at least 3 required"
            )));
        }
        if shape[3] != cfg.in_height || shape[4] != cfg.in_width {
            return Err(ModelError::Input(format!(
                "frames are {}x{} but the model expects {}x{}",
                shape[3], shape[4], cfg.in_height, cfg.in_width
            )));
        }
        let mut updates = BnUpdates { items: Vec::new() };
        let frames = tape
            .reshape(clips, &[n * t, 1, cfg.in_height, cfg.in_width])
            .map_err(at("input"))?;

        // shared stem, frames folded into the batch axis
        let mut x = frames;
        for u in &self.stem {
            x = self.conv_unit(tape, bound, x, u, mode, &mut updates)?;
        }
        let f_b = tape.maxpool2d(x, (2, 2), (2, 2)).map_err(at("stem.pool"))?;
        record(&mut trace, tape, "stem", f_b);

        // static branch
        let mut x = f_b;
        for u in &self.static_blocks[0] {
            x = self.conv_unit(tape, bound, x, u, mode, &mut updates)?;
        }
        let s2 = tape
            .maxpool2d(x, (2, 2), (2, 2))
            .map_err(at("static.0.pool"))?;
        record(&mut trace, tape, "static.0", s2);
        let mut x = s2;
        for u in &self.static_blocks[1] {
            x = self.conv_unit(tape, bound, x, u, mode, &mut updates)?;
        }
        let s3 = x;
        record(&mut trace, tape, "static.1", s3);
        let static_parts = self.static_head(tape, s3, n, t)?;
        record(&mut trace, tape, "static.parts", static_parts);

        // dynamic branch
        let mut parts = vec![static_parts];
        for path in &self.paths {
            let out = self.dynamic_path(
                tape,
                bound,
                path,
                f_b,
                s2,
                s3,
                n,
                t,
                mode,
                &mut updates,
                &mut trace,
            )?;
            parts.push(out);
        }
        let all = tape.concat(&parts, 2).map_err(at("parts.concat"))?;
        record(&mut trace, tape, "parts", all);
        // [N, C, P] -> [P, N, C]
        let by_part = tape.permute(all, &[2, 0, 1]).map_err(at("parts.permute"))?;
        let emb = tape
            .grouped_linear(
                by_part,
                bound.var(self.part_fc_weight),
                Some(bound.var(self.part_fc_bias)),
            )
            .map_err(at("part_fc"))?;
        let features = tape.permute(emb, &[1, 0, 2]).map_err(at("part_fc"))?;
        record(&mut trace, tape, "features", features);

        let logits = match mode {
            Mode::Train => Some(self.classifier(tape, bound, features, mode, &mut updates)?),
            Mode::Eval => None,
        };
        Ok((ForwardVars { features, logits }, updates))
    }

    fn norm_step<'a>(&'a self, bound: &BoundParams, bn: &BnIds, mode: Mode) -> NormStep<'a, S> {
        match mode {
            Mode::Train => NormStep::Train {
                gamma: bound.var(bn.gamma),
                beta: bound.var(bn.beta),
                eps: self.config.bn_eps,
            },
            Mode::Eval => NormStep::Eval {
                gamma: bound.var(bn.gamma),
                beta: bound.var(bn.beta),
                running_mean: self.store.get(bn.mean).data(),
                running_var: self.store.get(bn.var).data(),
                eps: self.config.bn_eps,
            },
        }
    }

    fn conv_unit(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        x: Var,
        u: &ConvUnit,
        mode: Mode,
        updates: &mut BnUpdates<S>,
    ) -> ModelResult<Var> {
        let y = tape
            .conv2d(
                x,
                bound.var(u.weight),
                None,
                (u.pad, u.pad),
                (u.stride, u.stride),
            )
            .map_err(at(u.name.clone()))?;
        let (y, stats) = layers::normalize(tape, y, self.norm_step(bound, &u.bn, mode))
            .map_err(at(u.name.clone()))?;
        if let Some(s) = stats {
            updates.items.push((u.bn, s));
        }
        tape.leaky_relu(y, self.config.leaky_slope)
            .map_err(at(u.name.clone()))
    }

    fn lstc_unit(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        x: Var,
        u: &LstcUnit,
        mode: Mode,
        updates: &mut BnUpdates<S>,
    ) -> ModelResult<Var> {
        let name = u.name.clone();
        let y = match (&u.fused, mode) {
            (Some(fused), Mode::Eval) => {
                let k = tape.constant(fused.cast());
                layers::lstc_conv_fused(tape, x, k, Some(bound.var(u.bias)))
                    .map_err(at(name.clone()))?
            }
            _ => {
                let asym = self.config.asymmetric;
                let bank = LstcBankVars {
                    square: bound.var(u.square),
                    spatial_1d: asym.then(|| bound.var(u.spatial)),
                    temporal_1d: asym.then(|| bound.var(u.temporal)),
                    bias: Some(bound.var(u.bias)),
                };
                layers::lstc_conv(tape, x, &bank).map_err(at(name.clone()))?
            }
        };
        let (y, stats) = layers::normalize(tape, y, self.norm_step(bound, &u.bn, mode))
            .map_err(at(name.clone()))?;
        if let Some(s) = stats {
            updates.items.push((u.bn, s));
        }
        tape.leaky_relu(y, self.config.leaky_slope)
            .map_err(at(name))
    }

    /// `[N*T, C, H, W]` -> `[N, C, static_strips]`
    fn static_head(&self, tape: &mut Tape<S>, s3: Var, n: usize, t: usize) -> ModelResult<Var> {
        let s = tape.shape(s3).to_vec();
        let seq = tape
            .reshape(s3, &[n, t, s[1], s[2], s[3]])
            .map_err(at("static.head"))?;
        let pooled = layers::temporal_max(tape, seq).map_err(at("static.temporal_max"))?;
        layers::horizontal_strip_pool(tape, pooled, self.config.static_strips)
            .map_err(at("static.strip_pool"))
    }

    /// Strip features of `[N*T, C, H, W]` along `dir`, laid out as `[N, C, T, S]`.
    fn strips(
        &self,
        tape: &mut Tape<S>,
        f: Var,
        dir: Direction,
        n: usize,
        t: usize,
        layer: &str,
    ) -> ModelResult<Var> {
        let mode = self.config.strip_mode();
        let s = match dir {
            Direction::Horizontal => layers::gbsp(tape, f, mode).map_err(at(layer))?.horiz,
            Direction::Vertical => layers::gbsp(tape, f, mode).map_err(at(layer))?.vert,
            Direction::Global => layers::gsp(tape, f, mode).map_err(at(layer))?,
        };
        let shp = tape.shape(s).to_vec();
        let seq = tape
            .reshape(s, &[n, t, shp[1], shp[2]])
            .map_err(at(layer))?;
        tape.permute(seq, &[0, 2, 1, 3]).map_err(at(layer))
    }

    #[allow(clippy::too_many_arguments)]
    fn dynamic_path(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        path: &LstcPath,
        f_b: Var,
        s2: Var,
        s3: Var,
        n: usize,
        t: usize,
        mode: Mode,
        updates: &mut BnUpdates<S>,
        trace: &mut Option<&mut ShapeTrace>,
    ) -> ModelResult<Var> {
        let key = path.dir.key();
        let mut x = self.strips(tape, f_b, path.dir, n, t, &format!("lstc.{key}.gbsp"))?;
        record(trace, tape, &format!("lstc.{key}.strips"), x);
        for u in &path.blocks[0] {
            x = self.lstc_unit(tape, bound, x, u, mode, updates)?;
        }
        if tape.shape(x)[3] >= 2 {
            x = tape
                .maxpool2d(x, (1, 2), (1, 2))
                .map_err(at(format!("lstc.{key}.0.pool")))?;
        }
        let lat = self.strips(tape, s2, path.dir, n, t, &format!("lstc.{key}.lateral.0"))?;
        x = tape
            .add(x, lat)
            .map_err(at(format!("lstc.{key}.lateral.0")))?;
        record(trace, tape, &format!("lstc.{key}.0"), x);
        for u in &path.blocks[1] {
            x = self.lstc_unit(tape, bound, x, u, mode, updates)?;
        }
        let lat = self.strips(tape, s3, path.dir, n, t, &format!("lstc.{key}.lateral.1"))?;
        x = tape
            .add(x, lat)
            .map_err(at(format!("lstc.{key}.lateral.1")))?;
        record(trace, tape, &format!("lstc.{key}.1"), x);
        let head_mode = self.config.temporal_mode();
        let out = match self.config.head {
            Head::Lstp => {
                layers::lstp(tape, x, head_mode).map_err(at(format!("lstc.{key}.lstp")))?
            }
            Head::Gstp => {
                let g = layers::gstp(tape, x, head_mode).map_err(at(format!("lstc.{key}.gstp")))?;
                let c = tape.shape(g)[1];
                tape.reshape(g, &[n, c, 1])
                    .map_err(at(format!("lstc.{key}.gstp")))?
            }
        };
        record(trace, tape, &format!("lstc.{key}.head"), out);
        Ok(out)
    }

    /// Per-part BN then per-part linear: `[N, P, E]` -> `[N, P, K]`.
    fn classifier(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        features: Var,
        mode: Mode,
        updates: &mut BnUpdates<S>,
    ) -> ModelResult<Var> {
        let s = tape.shape(features).to_vec();
        let (n, p, e) = (s[0], s[1], s[2]);
        let flat = tape
            .reshape(features, &[n, p * e])
            .map_err(at("classifier.bn"))?;
        let (y, stats) = layers::normalize(tape, flat, self.norm_step(bound, &self.cls_bn, mode))
            .map_err(at("classifier.bn"))?;
        if let Some(st) = stats {
            updates.items.push((self.cls_bn, st));
        }
        let y = tape.reshape(y, &[n, p, e]).map_err(at("classifier"))?;
        let y = tape.permute(y, &[1, 0, 2]).map_err(at("classifier"))?;
        let logits = tape
            .grouped_linear(
                y,
                bound.var(self.cls_weight),
                Some(bound.var(self.cls_bias)),
            )
            .map_err(at("classifier"))?;
        tape.permute(logits, &[1, 0, 2]).map_err(at("classifier"))
    }

    /// Fold training-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: BnUpdates<S>) {
        let momentum = self.config.bn_momentum;
        for (ids, stats) in updates.items {
            let mut mean = self.store.get(ids.mean).clone();
            let mut var = self.store.get(ids.var).clone();
            layers::update_running_stats(mean.data_mut(), var.data_mut(), &stats, momentum);
            *self.store.get_mut(ids.mean) = mean;
            *self.store.get_mut(ids.var) = var;
        }
    }

    /// First non-finite parameter, if any.
    pub fn first_non_finite_param(&self) -> Option<&str> {
        self.store
            .entries()
            .iter()
            .find(|e| e.value.first_non_finite().is_some())
            .map(|e| e.name.as_str())
    }

    /// Build a model around an existing parameter store (used by checkpoint loading).
    pub(crate) fn replace_store(&mut self, store: ParamStore<S>) {
        self.store = store;
        self.clear_fusion();
    }
}

fn squeeze_first<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    t.reshape(&t.shape()[1..]).expect("leading unit axis")
}

fn is_weight(name: &str) -> bool {
    name.ends_with(".weight")
        || name.ends_with(".square")
        || name.ends_with(".spatial_1d")
        || name.ends_with(".temporal_1d")
}

fn fan_in(name: &str, shape: &[usize]) -> usize {
    if name.starts_with("part_fc") || name.starts_with("classifier") {
        // [groups, out, in]
        shape[2]
    } else {
        shape[1..].iter().product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            in_height: 16,
            in_width: 12,
            stem_channels: 2,
            static_channels: [3, 4],
            lstc_channels: [3, 4],
            stem_kernel: 3,
            embed_dim: 5,
            n_classes: 3,
            static_strips: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_has_43_parts() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.stage_dims().base, (32, 22));
        assert_eq!(cfg.stage_dims().deep, (16, 11));
        assert_eq!(cfg.n_parts(), 43);
    }

    #[test]
    fn part_counts_per_variant() {
        let mut cfg = ModelConfig::default();
        let mut counts = Vec::new();
        for v in Variant::ALL {
            v.apply(&mut cfg);
            counts.push(cfg.n_parts());
        }
        assert_eq!(counts, vec![16, 17, 32, 27, 43, 18]);
    }

    #[test]
    fn tiny_forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = LstcnModel::<f64>::with_init(tiny(), &mut rng).unwrap();
        for t in [3, 7] {
            let clip = Tensor::rand_uniform(&[t, 1, 16, 12], 0.0, 1.0, &mut rng);
            let out = m.forward(&clip, Mode::Eval).unwrap();
            assert_eq!(out.features.shape(), &[m.n_parts(), 5]);
            assert!(out.logits.is_none());
            let out = m.forward(&clip, Mode::Train).unwrap();
            assert_eq!(out.logits.unwrap().shape(), &[m.n_parts(), 3]);
        }
    }

    #[test]
    fn short_clip_is_rejected() {
        let m = LstcnModel::<f64>::new(tiny()).unwrap();
        let clip = Tensor::zeros(&[2, 1, 16, 12]);
        let err = m.forward(&clip, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("at least 3"), "{err}");
    }

    #[test]
    fn mismatched_lateral_channels_rejected() {
        let cfg = ModelConfig {
            lstc_channels: [3, 5],
            ..tiny()
        };
        assert!(matches!(
            LstcnModel::<f64>::new(cfg),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn fused_eval_matches_unfused() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = LstcnModel::<f64>::with_init(tiny(), &mut rng).unwrap();
        let clip = Tensor::rand_uniform(&[5, 1, 16, 12], 0.0, 1.0, &mut rng);
        let a = m.forward(&clip, Mode::Eval).unwrap().features;
        m.fuse().unwrap();
        assert!(m.is_fused());
        let b = m.forward(&clip, Mode::Eval).unwrap().features;
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn config_text_round_trips() {
        let cfg = tiny();
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("bogus = 1").is_err());
    }
}
