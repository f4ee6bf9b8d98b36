//! Randomized self-checks: finite-difference gradients for every tape op
//! and fused versus three-branch LSTC inference.

use rand::{Rng, RngCore};

use crate::error::Result;
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::kernels::ReduceMode;
use crate::layers::{self, LstcKernelBank};
use crate::losses::{focal_loss, joint_loss, triplet_loss, LossConfig};
use crate::model::{Branch, Head, LstcnModel, Mode, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::PoolMode;

pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
pub const FD_EPS: f64 = 1e-6;

type Objective = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One gradcheck instance: inputs and the scalar function of them.
pub struct GradCase {
    pub inputs: Vec<Tensor<f64>>,
    pub f: Objective,
    pub tol: f64,
}

impl GradCase {
    pub fn check(&self) -> GradcheckReport {
        gradcheck(&self.f, &self.inputs, FD_EPS, self.tol)
    }
}

pub type CaseBuilder = fn(&mut dyn RngCore) -> GradCase;

fn randn(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<f64> {
    Tensor::rand_uniform(shape, 0.5, 2.0, rng)
}

/// `sum(y * w)` for a fixed random `w`, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

/// Builds a case whose objective is `project(op(inputs))`. The output shape
/// is found by running `op` once on the inputs.
fn projected(
    inputs: Vec<Tensor<f64>>,
    rng: &mut dyn RngCore,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = op(&mut tape, &vars).expect("case builds");
    let w = randn(tape.shape(out), rng);
    GradCase {
        inputs,
        f: Box::new(move |t, v| {
            let y = op(t, v)?;
            project(t, y, &w)
        }),
        tol: OP_TOL,
    }
}

fn dims(rng: &mut dyn RngCore, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn labels_for(b: usize) -> Vec<usize> {
    (0..b).map(|i| i % 3).collect()
}

fn case_conv2d(rng: &mut dyn RngCore) -> GradCase {
    let (n, ci, co) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
    let (kh, kw) = (dims(rng, 1, 3), dims(rng, 1, 3));
    let (h, w) = (dims(rng, kh, 6), dims(rng, kw, 6));
    let pad = (dims(rng, 0, kh / 2 + 1), dims(rng, 0, kw / 2 + 1));
    let stride = (dims(rng, 1, 2), dims(rng, 1, 2));
    let inputs = vec![
        randn(&[n, ci, h, w], rng),
        randn(&[co, ci, kh, kw], rng),
        randn(&[co], rng),
    ];
    projected(inputs, rng, move |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), pad, stride)
    })
}

fn case_maxpool2d(rng: &mut dyn RngCore) -> GradCase {
    let (kh, kw) = (dims(rng, 1, 2), dims(rng, 1, 2));
    let shape = [
        dims(rng, 1, 2),
        dims(rng, 1, 2),
        kh * dims(rng, 1, 3),
        kw * dims(rng, 1, 3),
    ];
    projected(vec![randn(&shape, rng)], rng, move |t, v| {
        t.maxpool2d(v[0], (kh, kw), (kh, kw))
    })
}

fn case_batchnorm_train(rng: &mut dyn RngCore) -> GradCase {
    let c = dims(rng, 1, 3);
    let inputs = vec![
        randn(&[3, c, 2, 2], rng),
        positive(&[c], rng),
        randn(&[c], rng),
    ];
    projected(inputs, rng, |t, v| {
        Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0)
    })
}

fn case_batchnorm_eval(rng: &mut dyn RngCore) -> GradCase {
    let c = dims(rng, 1, 3);
    let mean: Vec<f64> = randn(&[c], rng).into_data();
    let var: Vec<f64> = positive(&[c], rng).into_data();
    let inputs = vec![
        randn(&[2, c, 3], rng),
        positive(&[c], rng),
        randn(&[c], rng),
    ];
    projected(inputs, rng, move |t, v| {
        t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
    })
}

fn case_leaky_relu(rng: &mut dyn RngCore) -> GradCase {
    let n = dims(rng, 2, 12);
    projected(vec![randn(&[n], rng)], rng, |t, v| t.leaky_relu(v[0], 0.01))
}

fn reduce_case(rng: &mut dyn RngCore, mode: ReduceMode) -> GradCase {
    let shape = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 2, 4)];
    let axes: Vec<usize> = match dims(rng, 0, 2) {
        0 => vec![2],
        1 => vec![0],
        _ => vec![1, 2],
    };
    let x = match mode {
        ReduceMode::Gem(_) => positive(&shape, rng),
        _ => randn(&shape, rng),
    };
    projected(vec![x], rng, move |t, v| t.reduce(v[0], &axes, mode))
}

fn case_reduce_max(rng: &mut dyn RngCore) -> GradCase {
    reduce_case(rng, ReduceMode::Max)
}

fn case_reduce_mean(rng: &mut dyn RngCore) -> GradCase {
    reduce_case(rng, ReduceMode::Mean)
}

fn case_reduce_gem(rng: &mut dyn RngCore) -> GradCase {
    reduce_case(rng, ReduceMode::Gem(crate::layers::DEFAULT_GEM_P))
}

fn case_grouped_linear(rng: &mut dyn RngCore) -> GradCase {
    let (g, n, di, dout) = (
        dims(rng, 1, 3),
        dims(rng, 1, 3),
        dims(rng, 1, 4),
        dims(rng, 1, 4),
    );
    let inputs = vec![
        randn(&[g, n, di], rng),
        randn(&[g, dout, di], rng),
        randn(&[g, dout], rng),
    ];
    projected(inputs, rng, |t, v| t.grouped_linear(v[0], v[1], Some(v[2])))
}

fn case_linear(rng: &mut dyn RngCore) -> GradCase {
    let (n, di, dout) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4));
    let inputs = vec![
        randn(&[n, di], rng),
        randn(&[dout, di], rng),
        randn(&[dout], rng),
    ];
    projected(inputs, rng, |t, v| t.linear(v[0], v[1], Some(v[2])))
}

fn binary_case(rng: &mut dyn RngCore, which: u8) -> GradCase {
    let shape = [dims(rng, 1, 3), dims(rng, 1, 4)];
    let inputs = vec![randn(&shape, rng), randn(&shape, rng)];
    projected(inputs, rng, move |t, v| match which {
        0 => t.add(v[0], v[1]),
        1 => t.sub(v[0], v[1]),
        _ => t.mul(v[0], v[1]),
    })
}

fn case_add(rng: &mut dyn RngCore) -> GradCase {
    binary_case(rng, 0)
}

fn case_sub(rng: &mut dyn RngCore) -> GradCase {
    binary_case(rng, 1)
}

fn case_mul(rng: &mut dyn RngCore) -> GradCase {
    binary_case(rng, 2)
}

fn case_scale(rng: &mut dyn RngCore) -> GradCase {
    let c: f64 = rng.gen_range(-2.0..2.0);
    projected(vec![randn(&[dims(rng, 1, 6)], rng)], rng, move |t, v| {
        t.scale(v[0], c)
    })
}

fn case_concat(rng: &mut dyn RngCore) -> GradCase {
    let axis = dims(rng, 0, 1);
    let mut a = [2, 3];
    let mut b = [2, 3];
    a[axis] = dims(rng, 1, 3);
    b[axis] = dims(rng, 1, 3);
    projected(vec![randn(&a, rng), randn(&b, rng)], rng, move |t, v| {
        t.concat(&[v[0], v[1]], axis)
    })
}

fn case_slice(rng: &mut dyn RngCore) -> GradCase {
    let len = dims(rng, 2, 6);
    let start = dims(rng, 0, len - 1);
    let take = dims(rng, 1, len - start);
    projected(vec![randn(&[2, len], rng)], rng, move |t, v| {
        t.slice(v[0], 1, start, take)
    })
}

fn case_reshape(rng: &mut dyn RngCore) -> GradCase {
    projected(vec![randn(&[2, 3, 2], rng)], rng, |t, v| {
        t.reshape(v[0], &[3, 4])
    })
}

fn case_permute(rng: &mut dyn RngCore) -> GradCase {
    projected(vec![randn(&[2, 3, 4], rng)], rng, |t, v| {
        t.permute(v[0], &[2, 0, 1])
    })
}

fn case_transpose(rng: &mut dyn RngCore) -> GradCase {
    projected(vec![randn(&[2, 3, 4], rng)], rng, |t, v| {
        t.transpose(v[0], 0, 2)
    })
}

fn case_log_softmax(rng: &mut dyn RngCore) -> GradCase {
    let shape = [dims(rng, 1, 3), dims(rng, 2, 5)];
    projected(vec![randn(&shape, rng)], rng, |t, v| t.log_softmax(v[0]))
}

fn case_softmax(rng: &mut dyn RngCore) -> GradCase {
    let shape = [dims(rng, 1, 3), dims(rng, 2, 5)];
    projected(vec![randn(&shape, rng)], rng, |t, v| t.softmax(v[0]))
}

fn case_log(rng: &mut dyn RngCore) -> GradCase {
    projected(vec![positive(&[dims(rng, 1, 6)], rng)], rng, |t, v| {
        t.log(v[0])
    })
}

fn case_exp(rng: &mut dyn RngCore) -> GradCase {
    projected(vec![randn(&[dims(rng, 1, 6)], rng)], rng, |t, v| {
        t.exp(v[0])
    })
}

fn case_sum(rng: &mut dyn RngCore) -> GradCase {
    projected(vec![randn(&[2, dims(rng, 1, 4)], rng)], rng, |t, v| {
        t.sum(v[0])
    })
}

fn case_mean(rng: &mut dyn RngCore) -> GradCase {
    projected(vec![randn(&[2, dims(rng, 1, 4)], rng)], rng, |t, v| {
        t.mean(v[0])
    })
}

fn case_pairwise_distance(rng: &mut dyn RngCore) -> GradCase {
    let shape = [dims(rng, 1, 2), dims(rng, 2, 5), dims(rng, 1, 4)];
    projected(vec![randn(&shape, rng)], rng, |t, v| {
        t.pairwise_distance(v[0])
    })
}

fn pool_mode(rng: &mut dyn RngCore) -> ReduceMode {
    match dims(rng, 0, 2) {
        0 => ReduceMode::Max,
        1 => ReduceMode::Mean,
        _ => ReduceMode::Gem(crate::layers::DEFAULT_GEM_P),
    }
}

/// Positive inputs keep the generalized mean away from its clamp at zero.
fn pool_input(shape: &[usize], mode: ReduceMode, rng: &mut dyn RngCore) -> Tensor<f64> {
    match mode {
        ReduceMode::Gem(_) => positive(shape, rng),
        _ => randn(shape, rng),
    }
}

fn case_gbsp(rng: &mut dyn RngCore) -> GradCase {
    let mode = pool_mode(rng);
    let x = pool_input(
        &[2, dims(rng, 1, 2), dims(rng, 2, 4), dims(rng, 2, 4)],
        mode,
        rng,
    );
    projected(vec![x], rng, move |t, v| {
        let s = layers::gbsp(t, v[0], mode)?;
        let h = t.reshape(s.horiz, &[t.shape(s.horiz).iter().product()])?;
        let w = t.reshape(s.vert, &[t.shape(s.vert).iter().product()])?;
        t.concat(&[h, w], 0)
    })
}

fn case_gsp(rng: &mut dyn RngCore) -> GradCase {
    let mode = pool_mode(rng);
    let x = pool_input(
        &[2, dims(rng, 1, 2), dims(rng, 2, 4), dims(rng, 2, 4)],
        mode,
        rng,
    );
    projected(vec![x], rng, move |t, v| layers::gsp(t, v[0], mode))
}

fn case_gstp(rng: &mut dyn RngCore) -> GradCase {
    let mode = pool_mode(rng);
    let x = pool_input(
        &[2, dims(rng, 1, 3), dims(rng, 2, 5), dims(rng, 1, 4)],
        mode,
        rng,
    );
    projected(vec![x], rng, move |t, v| layers::gstp(t, v[0], mode))
}

fn case_lstp(rng: &mut dyn RngCore) -> GradCase {
    let mode = pool_mode(rng);
    let x = pool_input(
        &[2, dims(rng, 1, 3), dims(rng, 2, 5), dims(rng, 1, 4)],
        mode,
        rng,
    );
    projected(vec![x], rng, move |t, v| layers::lstp(t, v[0], mode))
}

fn case_temporal_max(rng: &mut dyn RngCore) -> GradCase {
    let x = randn(&[1, dims(rng, 2, 4), 2, 3, 2], rng);
    projected(vec![x], rng, |t, v| layers::temporal_max(t, v[0]))
}

fn case_horizontal_strip_pool(rng: &mut dyn RngCore) -> GradCase {
    let strips = dims(rng, 1, 3);
    let x = randn(
        &[
            2,
            dims(rng, 1, 2),
            strips * dims(rng, 1, 2),
            dims(rng, 1, 3),
        ],
        rng,
    );
    projected(vec![x], rng, move |t, v| {
        layers::horizontal_strip_pool(t, v[0], strips)
    })
}

fn case_alstc(rng: &mut dyn RngCore) -> GradCase {
    let (ci, co) = (dims(rng, 1, 3), dims(rng, 1, 3));
    let a = if dims(rng, 0, 1) == 0 { 3 } else { 5 };
    let inputs = vec![
        randn(
            &[dims(rng, 1, 2), ci, dims(rng, 2, 5), dims(rng, 1, 4)],
            rng,
        ),
        randn(&[co, ci, a, a], rng),
        randn(&[co, ci, 1, a], rng),
        randn(&[co, ci, a, 1], rng),
        randn(&[co], rng),
    ];
    projected(inputs, rng, |t, v| {
        let bank = layers::LstcBankVars {
            square: v[1],
            spatial_1d: Some(v[2]),
            temporal_1d: Some(v[3]),
            bias: Some(v[4]),
        };
        layers::lstc_conv(t, v[0], &bank)
    })
}

fn case_triplet(rng: &mut dyn RngCore) -> GradCase {
    let b = dims(rng, 4, 8);
    let labels = labels_for(b);
    let x = randn(&[b, dims(rng, 1, 2), dims(rng, 2, 4)], rng);
    GradCase {
        inputs: vec![x],
        f: Box::new(move |t, v| Ok(triplet_loss(t, v[0], &labels, 0.2, false)?.0)),
        tol: OP_TOL,
    }
}

fn case_focal(rng: &mut dyn RngCore) -> GradCase {
    let b = dims(rng, 2, 5);
    let labels = labels_for(b);
    let gamma = [0.0, 1.0, 2.0][dims(rng, 0, 2)];
    let x = randn(&[b, dims(rng, 1, 2), 3], rng);
    GradCase {
        inputs: vec![x],
        f: Box::new(move |t, v| focal_loss(t, v[0], &labels, gamma)),
        tol: OP_TOL,
    }
}

fn case_joint(rng: &mut dyn RngCore) -> GradCase {
    let (b, p) = (dims(rng, 4, 6), dims(rng, 1, 2));
    let labels = labels_for(b);
    let cfg = LossConfig {
        lambda: rng.gen_range(0.1..1.0),
        ..LossConfig::default()
    };
    GradCase {
        inputs: vec![randn(&[b, p, 3], rng), randn(&[b, p, 3], rng)],
        f: Box::new(move |t, v| Ok(joint_loss(t, v[0], Some(v[1]), &labels, &cfg)?.0)),
        tol: OP_TOL,
    }
}

/// Smallest network that exercises every stage: 8 x 6 frames, channels
/// 4 / 8 / 8, both dynamic paths, trained-mode batch norm.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        in_height: 8,
        in_width: 6,
        stem_channels: 4,
        static_channels: [8, 8],
        lstc_channels: [8, 8],
        stem_kernel: 3,
        conv_kernel: 3,
        lstc_kernel: 3,
        stem_stride: 1,
        embed_dim: 4,
        n_classes: 2,
        static_strips: 2,
        branch: Branch::Bidirectional,
        head: Head::Lstp,
        asymmetric: true,
        strip_pool: PoolMode::Max,
        temporal_pool: PoolMode::Max,
        ..ModelConfig::default()
    }
}

/// Joint loss of the tiny network on four clips of four frames, as a
/// function of the clips and of one parameter tensor per stage.
pub fn case_tiny_model(rng: &mut dyn RngCore) -> GradCase {
    let model =
        LstcnModel::<f64>::with_init(tiny_model_config(), rng).expect("tiny config is valid");
    let names = [
        "stem.0.weight",
        "static.0.0.weight",
        "lstc.h.0.0.square",
        "lstc.v.1.1.temporal_1d",
        "part_fc.weight",
        "classifier.weight",
    ];
    let ids: Vec<_> = names
        .iter()
        .map(|n| {
            model
                .store()
                .find(n)
                .unwrap_or_else(|| panic!("missing parameter {n}"))
        })
        .collect();
    let mut inputs = vec![randn(&[4, 4, 1, 8, 6], rng)];
    inputs.extend(ids.iter().map(|&id| model.store().get(id).clone()));
    let labels = vec![0, 0, 1, 1];
    GradCase {
        inputs,
        f: Box::new(move |t, v| {
            let mut bound = model.store().bind(t, false);
            for (id, var) in ids.iter().zip(&v[1..]) {
                bound.set(*id, *var);
            }
            let (out, _) = model
                .forward_on_tape(t, &bound, v[0], Mode::Train)
                .map_err(|e| crate::TensorError::invalid("tiny_model", e.to_string()))?;
            Ok(joint_loss(t, out.features, out.logits, &labels, &LossConfig::default())?.0)
        }),
        tol: COMPOSITE_TOL,
    }
}

/// Every differentiable op with a builder for random instances.
pub fn op_suite() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("conv2d", case_conv2d),
        ("maxpool2d", case_maxpool2d),
        ("batchnorm_train", case_batchnorm_train),
        ("batchnorm_eval", case_batchnorm_eval),
        ("leaky_relu", case_leaky_relu),
        ("reduce_max", case_reduce_max),
        ("reduce_mean", case_reduce_mean),
        ("reduce_gem", case_reduce_gem),
        ("grouped_linear", case_grouped_linear),
        ("linear", case_linear),
        ("add", case_add),
        ("sub", case_sub),
        ("mul", case_mul),
        ("scale", case_scale),
        ("concat", case_concat),
        ("slice", case_slice),
        ("reshape", case_reshape),
        ("permute", case_permute),
        ("transpose", case_transpose),
        ("log_softmax", case_log_softmax),
        ("softmax", case_softmax),
        ("log", case_log),
        ("exp", case_exp),
        ("sum", case_sum),
        ("mean", case_mean),
        ("pairwise_distance", case_pairwise_distance),
        ("gbsp", case_gbsp),
        ("gsp", case_gsp),
        ("gstp", case_gstp),
        ("lstp", case_lstp),
        ("temporal_max", case_temporal_max),
        ("horizontal_strip_pool", case_horizontal_strip_pool),
        ("alstc", case_alstc),
        ("triplet_loss", case_triplet),
        ("focal_loss", case_focal),
        ("joint_loss", case_joint),
    ]
}

/// Max absolute difference between three-branch and fused LSTC outputs on
/// a random bank and input.
pub fn fusion_trial(rng: &mut dyn RngCore) -> Result<f64> {
    let (ci, co) = (dims(rng, 1, 6), dims(rng, 1, 6));
    let a = [3, 5, 7][dims(rng, 0, 2)];
    let mut bank = LstcKernelBank::<f64>::random(co, ci, a, 1.0, true, rng)?;
    bank.bias = randn(&[co], rng);
    let x = randn(
        &[dims(rng, 1, 3), ci, dims(rng, 1, 12), dims(rng, 1, 12)],
        rng,
    );
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let vars = bank.bind(&mut tape, false);
    let three = layers::lstc_conv(&mut tape, xv, &vars)?;
    bank.fuse()?;
    let fused = tape.constant(bank.fused.clone().expect("just fused"));
    let one = layers::lstc_conv_fused(&mut tape, xv, fused, vars.bias)?;
    Ok(tape.value(three).max_abs_diff(tape.value(one)))
}
