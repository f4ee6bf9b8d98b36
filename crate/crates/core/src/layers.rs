//! Strip pooling, local spatiotemporal convolution and the pooling heads.
//!
//! Shapes follow the convention that the spatiotemporal plane of an LSTC input
//! is `(T, S)`: time along rows, strips along columns, with feature channels
//! in front (`[N, C, T, S]`). Pooling helpers act on trailing axes so that the
//! same code serves a single clip and a batch of clips.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::kernels::{BatchStats, ReduceMode};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pooling type selectable for strip, lateral and temporal pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Mean,
    /// Generalized mean with a fixed exponent.
    Gem,
}

/// Default generalized-mean exponent.
pub const DEFAULT_GEM_P: f64 = 6.5;

impl PoolMode {
    pub fn reduce(self, gem_p: f64) -> ReduceMode {
        match self {
            PoolMode::Max => ReduceMode::Max,
            PoolMode::Mean => ReduceMode::Mean,
            PoolMode::Gem => ReduceMode::Gem(gem_p),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Mean => "mean",
            PoolMode::Gem => "gem",
        })
    }
}

/// Horizontal (width-pooled) and vertical (height-pooled) strip features.
#[derive(Debug, Clone, Copy)]
pub struct StripFeatures {
    /// `[..., H]`
    pub horiz: Var,
    /// `[..., W]`
    pub vert: Var,
}

fn need_rank<S: Scalar>(tape: &Tape<S>, x: Var, min: usize, op: &'static str) -> Result<usize> {
    let r = tape.shape(x).len();
    if r < min {
        return Err(TensorError::shape(
            op,
            format!(
                "input rank {r} below required {min} (shape {:?})",
                tape.shape(x)
            ),
        ));
    }
    Ok(r)
}

/// Global bidirectional strip pooling of `[..., H, W]`.
pub fn gbsp<S: Scalar>(tape: &mut Tape<S>, f: Var, mode: ReduceMode) -> Result<StripFeatures> {
    let r = need_rank(tape, f, 2, "gbsp")?;
    let horiz = tape.reduce(f, &[r - 1], mode)?;
    let vert = tape.reduce(f, &[r - 2], mode)?;
    Ok(StripFeatures { horiz, vert })
}

/// Global spatial pooling of `[..., H, W]` to `[..., 1]`.
pub fn gsp<S: Scalar>(tape: &mut Tape<S>, f: Var, mode: ReduceMode) -> Result<Var> {
    let r = need_rank(tape, f, 2, "gsp")?;
    let pooled = tape.reduce(f, &[r - 2, r - 1], mode)?;
    let mut shape = tape.shape(f)[..r - 2].to_vec();
    shape.push(1);
    tape.reshape(pooled, &shape)
}

/// Global spatiotemporal pooling of `[..., C, T, S]` to `[..., C]`.
pub fn gstp<S: Scalar>(tape: &mut Tape<S>, f: Var, mode: ReduceMode) -> Result<Var> {
    let r = need_rank(tape, f, 3, "gstp")?;
    tape.reduce(f, &[r - 2, r - 1], mode)
}

/// Per-strip temporal pooling of `[..., C, T, S]` to `[..., C, S]`.
pub fn lstp<S: Scalar>(tape: &mut Tape<S>, f: Var, mode: ReduceMode) -> Result<Var> {
    let r = need_rank(tape, f, 3, "lstp")?;
    tape.reduce(f, &[r - 2], mode)
}

/// Frame-set max of `[..., T, C, H, W]` to `[..., C, H, W]`.
pub fn temporal_max<S: Scalar>(tape: &mut Tape<S>, f: Var) -> Result<Var> {
    let r = need_rank(tape, f, 4, "temporal_max")?;
    tape.reduce(f, &[r - 4], ReduceMode::Max)
}

/// Split `H` of `[..., C, H, W]` into `n_strips` equal bands; each band's
/// feature is its max plus its mean. Output `[..., C, n_strips]`.
pub fn horizontal_strip_pool<S: Scalar>(
    tape: &mut Tape<S>,
    f: Var,
    n_strips: usize,
) -> Result<Var> {
    let r = need_rank(tape, f, 3, "horizontal_strip_pool")?;
    let shape = tape.shape(f).to_vec();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    if n_strips == 0 || h % n_strips != 0 {
        return Err(TensorError::invalid(
            "horizontal_strip_pool",
            format!("{n_strips} strips do not divide height {h}"),
        ));
    }
    let mut banded = shape[..r - 2].to_vec();
    banded.push(n_strips);
    banded.push(h / n_strips * w);
    let x = tape.reshape(f, &banded)?;
    let mx = tape.reduce(x, &[r - 1], ReduceMode::Max)?;
    let mn = tape.reduce(x, &[r - 1], ReduceMode::Mean)?;
    tape.add(mx, mn)
}

/// The square, 1-D spatial and 1-D temporal kernels of one (A)LSTC layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstcKernelBank<S> {
    /// `[C_out, C_in, a, a]`
    pub square: Tensor<S>,
    /// `[C_out, C_in, 1, a]`, spans the strip axis.
    pub spatial_1d: Tensor<S>,
    /// `[C_out, C_in, a, 1]`, spans the time axis.
    pub temporal_1d: Tensor<S>,
    /// `[C_out]`
    pub bias: Tensor<S>,
    pub asymmetric: bool,
    /// `[C_out, C_in, a, a]`, set by [`LstcKernelBank::fuse`].
    pub fused: Option<Tensor<S>>,
}

impl<S: Scalar> LstcKernelBank<S> {
    pub fn new(
        square: Tensor<S>,
        spatial_1d: Tensor<S>,
        temporal_1d: Tensor<S>,
        bias: Tensor<S>,
        asymmetric: bool,
    ) -> Result<Self> {
        let bank = LstcKernelBank {
            square,
            spatial_1d,
            temporal_1d,
            bias,
            asymmetric,
            fused: None,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Normal draws with standard deviation `std` for all three kernels, zero bias.
    pub fn random<R: Rng + ?Sized>(
        c_out: usize,
        c_in: usize,
        a: usize,
        std: f64,
        asymmetric: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            Tensor::randn(&[c_out, c_in, a, a], std, rng),
            Tensor::randn(&[c_out, c_in, 1, a], std, rng),
            Tensor::randn(&[c_out, c_in, a, 1], std, rng),
            Tensor::zeros(&[c_out]),
            asymmetric,
        )
    }

    pub fn kernel_size(&self) -> usize {
        self.square.dim(2)
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "lstc_bank";
        let s = self.square.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(TensorError::shape(
                OP,
                format!("square kernel must be [Co,Ci,a,a], got {s:?}"),
            ));
        }
        let (co, ci, a) = (s[0], s[1], s[2]);
        if a % 2 == 0 {
            return Err(TensorError::invalid(
                OP,
                format!("kernel size {a} must be odd"),
            ));
        }
        if self.spatial_1d.shape() != [co, ci, 1, a] {
            return Err(TensorError::shape(
                OP,
                format!(
                    "spatial kernel {:?}, expected {:?}",
                    self.spatial_1d.shape(),
                    [co, ci, 1, a]
                ),
            ));
        }
        if self.temporal_1d.shape() != [co, ci, a, 1] {
            return Err(TensorError::shape(
                OP,
                format!(
                    "temporal kernel {:?}, expected {:?}",
                    self.temporal_1d.shape(),
                    [co, ci, a, 1]
                ),
            ));
        }
        if self.bias.shape() != [co] {
            return Err(TensorError::shape(
                OP,
                format!("bias {:?}, expected [{co}]", self.bias.shape()),
            ));
        }
        Ok(())
    }

    /// Center-aligned sum of the three kernels into one `a x a` kernel.
    pub fn fused_kernel(&self) -> Result<Tensor<S>> {
        self.validate()?;
        let a = self.kernel_size();
        let mut fused = self.square.clone();
        if !self.asymmetric {
            return Ok(fused);
        }
        let c = a / 2;
        let planes = self.square.dim(0) * self.square.dim(1);
        let f = fused.data_mut();
        for p in 0..planes {
            for j in 0..a {
                // 1 x a kernel occupies the center row
                f[p * a * a + c * a + j] += self.spatial_1d.data()[p * a + j];
            }
            for i in 0..a {
                // a x 1 kernel occupies the center column
                f[p * a * a + i * a + c] += self.temporal_1d.data()[p * a + i];
            }
        }
        Ok(fused)
    }

    /// Store the fused kernel for inference.
    pub fn fuse(&mut self) -> Result<()> {
        if !self.asymmetric {
            return Err(TensorError::invalid(
                "fuse_kernels",
                "bank has asymmetric branches disabled",
            ));
        }
        self.fused = Some(self.fused_kernel()?);
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> LstcBankVars {
        let mut leaf = |t: &Tensor<S>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LstcBankVars {
            square: leaf(&self.square),
            spatial_1d: self.asymmetric.then(|| leaf(&self.spatial_1d)),
            temporal_1d: self.asymmetric.then(|| leaf(&self.temporal_1d)),
            bias: Some(leaf(&self.bias)),
        }
    }
}

/// Fold eval-mode batch norm into a kernel and bias:
/// `w' = w * g / sqrt(v + eps)`, `b' = (b - m) * g / sqrt(v + eps) + beta`.
pub fn fold_batchnorm<S: Scalar>(
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    bn: &BatchNormParams<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let co = kernel.dim(0);
    if bn.gamma.numel() != co || bias.numel() != co {
        return Err(TensorError::shape(
            "fold_batchnorm",
            "channel counts differ",
        ));
    }
    let per = kernel.numel() / co;
    let eps = S::lit(bn.eps);
    let mut w = kernel.clone();
    let mut b = bias.clone();
    for o in 0..co {
        let k = bn.gamma.data()[o] / (bn.running_var.data()[o] + eps).sqrt();
        w.data_mut()[o * per..(o + 1) * per]
            .iter_mut()
            .for_each(|v| *v *= k);
        b.data_mut()[o] = (bias.data()[o] - bn.running_mean.data()[o]) * k + bn.beta.data()[o];
    }
    Ok((w, b))
}

/// Tape handles of a kernel bank; absent 1-D kernels mean the plain LSTC layer.
#[derive(Debug, Clone, Copy)]
pub struct LstcBankVars {
    pub square: Var,
    pub spatial_1d: Option<Var>,
    pub temporal_1d: Option<Var>,
    pub bias: Option<Var>,
}

fn check_lstc_input<S: Scalar>(tape: &Tape<S>, x: Var) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(TensorError::shape(
            "lstc",
            format!("input must be [N,C,T,S], got {s:?}"),
        ));
    }
    Ok(())
}

/// `same`-padded, stride-1 convolution over the `(T, S)` plane. With 1-D
/// kernels present, the three branch outputs are summed.
pub fn lstc_conv<S: Scalar>(tape: &mut Tape<S>, x: Var, bank: &LstcBankVars) -> Result<Var> {
    check_lstc_input(tape, x)?;
    let a = tape.shape(bank.square)[2];
    if a % 2 == 0 {
        return Err(TensorError::invalid(
            "lstc",
            format!("kernel size {a} must be odd"),
        ));
    }
    let p = a / 2;
    let mut out = tape.conv2d(x, bank.square, bank.bias, (p, p), (1, 1))?;
    if let Some(k) = bank.spatial_1d {
        let y = tape.conv2d(x, k, None, (0, p), (1, 1))?;
        out = tape.add(out, y)?;
    }
    if let Some(k) = bank.temporal_1d {
        let y = tape.conv2d(x, k, None, (p, 0), (1, 1))?;
        out = tape.add(out, y)?;
    }
    Ok(out)
}

/// Single-kernel inference path for a fused bank.
pub fn lstc_conv_fused<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    fused: Var,
    bias: Option<Var>,
) -> Result<Var> {
    check_lstc_input(tape, x)?;
    let a = tape.shape(fused)[2];
    let p = a / 2;
    tape.conv2d(x, fused, bias, (p, p), (1, 1))
}

/// Batch-norm parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub eps: f64,
    pub momentum: f64,
}

impl<S: Scalar> BatchNormParams<S> {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Blend batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, stats: &BatchStats<S>) {
        update_running_stats(
            self.running_mean.data_mut(),
            self.running_var.data_mut(),
            stats,
            self.momentum,
        );
    }
}

pub fn update_running_stats<S: Scalar>(
    mean: &mut [S],
    var: &mut [S],
    stats: &BatchStats<S>,
    momentum: f64,
) {
    let m = S::lit(momentum);
    let keep = S::one() - m;
    let unbias = if stats.count > 1 {
        S::lit(stats.count as f64 / (stats.count as f64 - 1.0))
    } else {
        S::one()
    };
    for c in 0..mean.len() {
        mean[c] = keep * mean[c] + m * stats.mean[c];
        var[c] = keep * var[c] + m * stats.var[c] * unbias;
    }
}

/// How a layer normalizes its convolution output.
pub enum NormStep<'a, S> {
    Bypass,
    Train {
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Eval {
        gamma: Var,
        beta: Var,
        running_mean: &'a [S],
        running_var: &'a [S],
        eps: f64,
    },
}

/// Apply a [`NormStep`]; returns batch statistics in training mode.
pub fn normalize<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    step: NormStep<'_, S>,
) -> Result<(Var, Option<BatchStats<S>>)> {
    match step {
        NormStep::Bypass => Ok((x, None)),
        NormStep::Train { gamma, beta, eps } => {
            let (y, stats) = tape.batchnorm_train(x, gamma, beta, eps)?;
            Ok((y, Some(stats)))
        }
        NormStep::Eval {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        } => Ok((
            tape.batchnorm_eval(x, gamma, beta, running_mean, running_var, eps)?,
            None,
        )),
    }
}

/// Convolution, normalization and leaky ReLU of one (A)LSTC layer.
/// `slope = None` skips the activation.
pub fn lstc_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    bank: &LstcBankVars,
    norm: NormStep<'_, S>,
    slope: Option<f64>,
) -> Result<(Var, Option<BatchStats<S>>)> {
    let y = lstc_conv(tape, x, bank)?;
    let (y, stats) = normalize(tape, y, norm)?;
    let y = match slope {
        Some(s) => tape.leaky_relu(y, s)?,
        None => y,
    };
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn centre_identity(c: usize, a: usize, scale: f64) -> Tensor<f64> {
        let mut k = Tensor::zeros(&[c, c, a, a]);
        for i in 0..c {
            k.set(&[i, i, a / 2, a / 2], scale);
        }
        k
    }

    #[test]
    fn single_spike_lands_in_both_strip_sets() {
        let mut tape = Tape::<f64>::new();
        let mut f = Tensor::zeros(&[3, 2, 4, 5]);
        f.set(&[1, 1, 2, 3], 1.0);
        let x = tape.constant(f);
        let s = gbsp(&mut tape, x, ReduceMode::Max).unwrap();
        let h = tape.value(s.horiz);
        let v = tape.value(s.vert);
        assert_eq!(h.shape(), &[3, 2, 4]);
        assert_eq!(v.shape(), &[3, 2, 5]);
        assert_eq!(h.sum(), 1.0);
        assert_eq!(h.at(&[1, 1, 2]), 1.0);
        assert_eq!(v.sum(), 1.0);
        assert_eq!(v.at(&[1, 1, 3]), 1.0);
    }

    #[test]
    fn constant_input_constant_strips_for_all_modes() {
        for mode in [
            ReduceMode::Max,
            ReduceMode::Mean,
            ReduceMode::Gem(DEFAULT_GEM_P),
        ] {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::full(&[2, 3, 4, 5], 0.7));
            let s = gbsp(&mut tape, x, mode).unwrap();
            for &v in tape
                .value(s.horiz)
                .data()
                .iter()
                .chain(tape.value(s.vert).data())
            {
                assert!((v - 0.7).abs() < 1e-12, "{mode:?}: {v}");
            }
        }
    }

    #[test]
    fn gsp_max_dominates_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(&[4, 3, 6, 5], 1.0, &mut rng));
        let mx = gsp(&mut tape, x, ReduceMode::Max).unwrap();
        let mn = gsp(&mut tape, x, ReduceMode::Mean).unwrap();
        assert_eq!(tape.shape(mx), &[4, 3, 1]);
        for (a, b) in tape.value(mx).data().iter().zip(tape.value(mn).data()) {
            assert!(a >= b);
        }
    }

    #[test]
    fn lstp_ramp_and_distinct_strip_maxima() {
        let mut tape = Tape::<f64>::new();
        let ramp = Tensor::from_fn(&[2, 5, 3], |i| ((i / 3) % 5) as f64);
        let x = tape.constant(ramp);
        let out = lstp(&mut tape, x, ReduceMode::Max).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 4.0));

        // strip 0 peaks at t=1, strip 1 peaks at t=4
        let mut f = Tensor::zeros(&[1, 6, 2]);
        f.set(&[0, 1, 0], 3.0);
        f.set(&[0, 4, 1], 5.0);
        let x = tape.constant(f);
        let local = lstp(&mut tape, x, ReduceMode::Max).unwrap();
        let global = gstp(&mut tape, x, ReduceMode::Max).unwrap();
        assert_eq!(tape.value(local).data(), &[3.0, 5.0]);
        assert_eq!(tape.value(global).data(), &[5.0]);
    }

    #[test]
    fn gstp_spike_and_shape() {
        let mut tape = Tape::<f64>::new();
        let mut f = Tensor::zeros(&[4, 7, 3]);
        f.set(&[2, 5, 1], 9.0);
        let x = tape.constant(f);
        let g = gstp(&mut tape, x, ReduceMode::Max).unwrap();
        assert_eq!(tape.shape(g), &[4]);
        assert_eq!(tape.value(g).at(&[2]), 9.0);
    }

    #[test]
    fn temporal_max_single_frame_is_squeeze() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::<f64>::randn(&[1, 2, 3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(f.clone());
        let y = temporal_max(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), f.data());
        assert_eq!(tape.shape(y), &[2, 3, 4]);
    }

    #[test]
    fn strip_pool_constant_and_divisibility() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[3, 8, 5], 1.5));
        let y = horizontal_strip_pool(&mut tape, x, 4).unwrap();
        assert_eq!(tape.shape(y), &[3, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
        assert!(horizontal_strip_pool(&mut tape, x, 3).is_err());
    }

    #[test]
    fn identity_square_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::<f64>::randn(&[1, 3, 7, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let bank = LstcKernelBank::new(
            centre_identity(3, 3, 1.0),
            Tensor::zeros(&[3, 3, 1, 3]),
            Tensor::zeros(&[3, 3, 3, 1]),
            Tensor::zeros(&[3]),
            false,
        )
        .unwrap();
        let vars = bank.bind(&mut tape, false);
        let (y, _) = lstc_forward(&mut tape, x, &vars, NormStep::Bypass, None).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn three_thirds_of_identity_sum_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let input = Tensor::<f64>::randn(&[2, 2, 6, 4], 1.0, &mut rng);
        let mut spatial = Tensor::zeros(&[2, 2, 1, 3]);
        let mut temporal = Tensor::zeros(&[2, 2, 3, 1]);
        for c in 0..2 {
            spatial.set(&[c, c, 0, 1], 1.0 / 3.0);
            temporal.set(&[c, c, 1, 0], 1.0 / 3.0);
        }
        let bank = LstcKernelBank::new(
            centre_identity(2, 3, 1.0 / 3.0),
            spatial,
            temporal,
            Tensor::zeros(&[2]),
            true,
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let vars = bank.bind(&mut tape, false);
        let y = lstc_conv(&mut tape, x, &vars).unwrap();
        assert!(tape.value(y).max_abs_diff(&input) < 1e-15);
    }

    #[test]
    fn fusion_with_zero_1d_kernels_is_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bank = LstcKernelBank::<f64>::random(3, 2, 3, 1.0, true, &mut rng).unwrap();
        bank.spatial_1d = Tensor::zeros(&[3, 2, 1, 3]);
        bank.temporal_1d = Tensor::zeros(&[3, 2, 3, 1]);
        bank.fuse().unwrap();
        assert_eq!(bank.fused.as_ref().unwrap(), &bank.square);
    }

    #[test]
    fn fusion_places_spatial_kernel_on_centre_row() {
        let spatial = Tensor::from_fn(&[1, 1, 1, 3], |j| (j + 1) as f64);
        let mut bank = LstcKernelBank::new(
            Tensor::zeros(&[1, 1, 3, 3]),
            spatial,
            Tensor::zeros(&[1, 1, 3, 1]),
            Tensor::zeros(&[1]),
            true,
        )
        .unwrap();
        bank.fuse().unwrap();
        assert_eq!(
            bank.fused.unwrap().data(),
            &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn even_kernel_rejected() {
        let err = LstcKernelBank::<f64>::new(
            Tensor::zeros(&[1, 1, 2, 2]),
            Tensor::zeros(&[1, 1, 1, 2]),
            Tensor::zeros(&[1, 1, 2, 1]),
            Tensor::zeros(&[1]),
            true,
        )
        .unwrap_err();
        assert!(err.to_string().contains("odd"));
    }

    #[test]
    fn lstc_keeps_time_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for t in [1, 2, 3, 9] {
            let bank = LstcKernelBank::<f64>::random(4, 3, 3, 0.3, true, &mut rng).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[2, 3, t, 5], 1.0, &mut rng));
            let vars = bank.bind(&mut tape, false);
            let y = lstc_conv(&mut tape, x, &vars).unwrap();
            assert_eq!(tape.shape(y), &[2, 4, t, 5]);
        }
    }
}
