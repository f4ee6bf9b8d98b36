//! Direct loop implementations of the pooling, convolution and loss
//! kernels, and randomized comparisons of the tape ops against them.

use rand::{Rng, RngCore};

use crate::kernels::ReduceMode;
use crate::layers::{self, LstcBankVars, DEFAULT_GEM_P};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Relative tolerance of the non-max comparisons.
pub const REL: f64 = 1e-12;

pub type Check = std::result::Result<(), String>;

fn close(got: &Tensor<f64>, want: &Tensor<f64>, what: &str) -> Check {
    if got.shape() != want.shape() {
        return Err(format!(
            "{what}: shape {:?} vs {:?}",
            got.shape(),
            want.shape()
        ));
    }
    for (i, (&g, &w)) in got.data().iter().zip(want.data()).enumerate() {
        if !((g - w).abs() <= REL * w.abs().max(1.0)) {
            return Err(format!("{what}: element {i}: {g} vs {w}"));
        }
    }
    Ok(())
}

fn exact(got: &Tensor<f64>, want: &Tensor<f64>, what: &str) -> Check {
    if got.shape() != want.shape() {
        return Err(format!(
            "{what}: shape {:?} vs {:?}",
            got.shape(),
            want.shape()
        ));
    }
    match got.data().iter().zip(want.data()).position(|(g, w)| g != w) {
        Some(i) => Err(format!(
            "{what}: element {i}: {} vs {}",
            got.data()[i],
            want.data()[i]
        )),
        None => Ok(()),
    }
}

fn check_mode(got: &Tensor<f64>, want: &Tensor<f64>, mode: ReduceMode, what: &str) -> Check {
    match mode {
        ReduceMode::Max => exact(got, want, what),
        _ => close(got, want, what),
    }
}

fn randn(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn fail(what: &str) -> impl FnOnce(crate::TensorError) -> String + '_ {
    move |e| format!("{what}: {e}")
}

/// Cross-correlation with zero padding.
pub fn conv2d(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    pad: (usize, usize),
    stride: (usize, usize),
) -> Tensor<f64> {
    let (n, ci, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, kh, kw) = (k.dim(0), k.dim(2), k.dim(3));
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for ni in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride.0 + i) as isize - pad.0 as isize;
                                let ix = (xo * stride.1 + j) as isize - pad.1 as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at(&[ni, c, iy as usize, ix as usize])
                                        * k.at(&[o, c, i, j]);
                                }
                            }
                        }
                    }
                    out.set(&[ni, o, y, xo], acc);
                }
            }
        }
    }
    out
}

/// Reduction of a flat slice.
pub fn reduce(vals: &[f64], mode: ReduceMode) -> f64 {
    match mode {
        ReduceMode::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ReduceMode::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
        ReduceMode::Gem(p) => {
            let m = vals.iter().map(|v| v.max(0.0).powf(p)).sum::<f64>() / vals.len() as f64;
            m.powf(1.0 / p)
        }
    }
}

fn mode_of(i: usize) -> ReduceMode {
    [
        ReduceMode::Max,
        ReduceMode::Mean,
        ReduceMode::Gem(DEFAULT_GEM_P),
    ][i % 3]
}

/// Positive inputs for GeM so the clamp at zero is not the only thing tested.
fn pool_input(shape: &[usize], mode: ReduceMode, rng: &mut dyn RngCore) -> Tensor<f64> {
    match mode {
        ReduceMode::Gem(_) => Tensor::rand_uniform(shape, 0.1, 2.0, rng),
        _ => randn(shape, rng),
    }
}

fn check_conv2d(rng: &mut dyn RngCore, _: usize) -> Check {
    let (n, ci, co) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
    );
    let (kh, kw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (h, w) = (rng.gen_range(kh..=9), rng.gen_range(kw..=9));
    let pad = (rng.gen_range(0..=kh / 2), rng.gen_range(0..=kw / 2));
    let stride = (rng.gen_range(1..=2), rng.gen_range(1..=2));
    let x = randn(&[n, ci, h, w], rng);
    let k = randn(&[co, ci, kh, kw], rng);
    let b = rng.gen_bool(0.5).then(|| randn(&[co], rng));
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let bv = b.clone().map(|b| tape.constant(b));
    let y = tape
        .conv2d(xv, kv, bv, pad, stride)
        .map_err(fail("conv2d"))?;
    close(
        tape.value(y),
        &conv2d(&x, &k, b.as_ref(), pad, stride),
        "conv2d",
    )?;
    Ok(())
}

fn check_maxpool2d(rng: &mut dyn RngCore, _: usize) -> Check {
    let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (oh, ow) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    // leftover rows and columns that do not fill a window are dropped
    let (h, w) = (
        oh * kh + rng.gen_range(0..kh),
        ow * kw + rng.gen_range(0..kw),
    );
    let x = randn(&[n, c, h, w], rng);
    let mut want = Tensor::zeros(&[n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..kh {
                        for j in 0..kw {
                            m = m.max(x.at(&[ni, ci, y * kh + i, xo * kw + j]));
                        }
                    }
                    want.set(&[ni, ci, y, xo], m);
                }
            }
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape
        .maxpool2d(xv, (kh, kw), (kh, kw))
        .map_err(fail("maxpool2d"))?;
    exact(tape.value(y), &want, "maxpool2d")?;
    Ok(())
}

fn check_gbsp_gsp(rng: &mut dyn RngCore, i: usize) -> Check {
    let mode = mode_of(i);
    let (n, c, h, w) = (
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
        rng.gen_range(1..=6),
        rng.gen_range(1..=6),
    );
    let x = pool_input(&[n, c, h, w], mode, rng);
    let mut horiz = Tensor::zeros(&[n, c, h]);
    let mut vert = Tensor::zeros(&[n, c, w]);
    let mut global = Tensor::zeros(&[n, c, 1]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let row: Vec<f64> = (0..w).map(|xi| x.at(&[ni, ci, y, xi])).collect();
                horiz.set(&[ni, ci, y], reduce(&row, mode));
            }
            for xi in 0..w {
                let col: Vec<f64> = (0..h).map(|y| x.at(&[ni, ci, y, xi])).collect();
                vert.set(&[ni, ci, xi], reduce(&col, mode));
            }
            let all: Vec<f64> = (0..h)
                .flat_map(|y| (0..w).map(move |xi| (y, xi)))
                .map(|(y, xi)| x.at(&[ni, ci, y, xi]))
                .collect();
            global.set(&[ni, ci, 0], reduce(&all, mode));
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let s = layers::gbsp(&mut tape, xv, mode).map_err(fail("gbsp"))?;
    check_mode(tape.value(s.horiz), &horiz, mode, "gbsp horizontal")?;
    check_mode(tape.value(s.vert), &vert, mode, "gbsp vertical")?;
    let g = layers::gsp(&mut tape, xv, mode).map_err(fail("gsp"))?;
    check_mode(tape.value(g), &global, mode, "gsp")?;
    Ok(())
}

fn check_gstp_lstp(rng: &mut dyn RngCore, i: usize) -> Check {
    let mode = mode_of(i);
    let (n, c, t, s) = (
        rng.gen_range(1..=3),
        rng.gen_range(1..=4),
        rng.gen_range(1..=8),
        rng.gen_range(1..=6),
    );
    let x = pool_input(&[n, c, t, s], mode, rng);
    let mut plane = Tensor::zeros(&[n, c]);
    let mut strips = Tensor::zeros(&[n, c, s]);
    for ni in 0..n {
        for ci in 0..c {
            let all: Vec<f64> = (0..t)
                .flat_map(|ti| (0..s).map(move |si| (ti, si)))
                .map(|(ti, si)| x.at(&[ni, ci, ti, si]))
                .collect();
            plane.set(&[ni, ci], reduce(&all, mode));
            for si in 0..s {
                let over_time: Vec<f64> = (0..t).map(|ti| x.at(&[ni, ci, ti, si])).collect();
                strips.set(&[ni, ci, si], reduce(&over_time, mode));
            }
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = layers::gstp(&mut tape, xv, mode).map_err(fail("gstp"))?;
    check_mode(tape.value(g), &plane, mode, "gstp")?;
    let l = layers::lstp(&mut tape, xv, mode).map_err(fail("lstp"))?;
    check_mode(tape.value(l), &strips, mode, "lstp")?;
    Ok(())
}

fn check_horizontal_strip_pool(rng: &mut dyn RngCore, _: usize) -> Check {
    let n_strips = rng.gen_range(1..=4);
    let band = rng.gen_range(1..=3);
    let (n, c, w) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(1..=5),
    );
    let h = n_strips * band;
    let x = randn(&[n, c, h, w], rng);
    let mut want = Tensor::zeros(&[n, c, n_strips]);
    for ni in 0..n {
        for ci in 0..c {
            for s in 0..n_strips {
                let vals: Vec<f64> = (s * band..(s + 1) * band)
                    .flat_map(|y| (0..w).map(move |xi| (y, xi)))
                    .map(|(y, xi)| x.at(&[ni, ci, y, xi]))
                    .collect();
                let v = reduce(&vals, ReduceMode::Max) + reduce(&vals, ReduceMode::Mean);
                want.set(&[ni, ci, s], v);
            }
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = layers::horizontal_strip_pool(&mut tape, xv, n_strips)
        .map_err(fail("horizontal_strip_pool"))?;
    close(tape.value(y), &want, "horizontal_strip_pool")?;
    Ok(())
}

fn check_alstc(rng: &mut dyn RngCore, _: usize) -> Check {
    let a = [1, 3, 5][rng.gen_range(0..3)];
    let p = a / 2;
    let (n, ci, co) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
    );
    let (t, s) = (rng.gen_range(1..=7), rng.gen_range(1..=6));
    let x = randn(&[n, ci, t, s], rng);
    let sq = randn(&[co, ci, a, a], rng);
    let sp = randn(&[co, ci, 1, a], rng);
    let tm = randn(&[co, ci, a, 1], rng);
    let b = randn(&[co], rng);
    let want_sq = conv2d(&x, &sq, Some(&b), (p, p), (1, 1));
    let want_sp = conv2d(&x, &sp, None, (0, p), (1, 1));
    let want_tm = conv2d(&x, &tm, None, (p, 0), (1, 1));
    let want = Tensor::from_fn(want_sq.shape(), |i| {
        want_sq.data()[i] + want_sp.data()[i] + want_tm.data()[i]
    });
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let bank = LstcBankVars {
        square: tape.constant(sq),
        spatial_1d: Some(tape.constant(sp)),
        temporal_1d: Some(tape.constant(tm)),
        bias: Some(tape.constant(b)),
    };
    let y = layers::lstc_conv(&mut tape, xv, &bank).map_err(fail("lstc_conv"))?;
    if tape.value(y).shape() != [n, co, t, s] {
        return Err(format!(
            "alstc: same padding must keep (T, S), got {:?}",
            tape.value(y).shape()
        ));
    }
    close(tape.value(y), &want, "alstc")?;
    Ok(())
}

/// Batch-all triplet loss over `[B, P, D]` features, every triplet enumerated.
pub fn triplet_loss(x: &[f64], shape: [usize; 3], labels: &[usize], margin: f64) -> f64 {
    let [b, p, d] = shape;
    let dist = |i: usize, j: usize, part: usize| -> f64 {
        (0..d)
            .map(|k| {
                let u = x[(i * p + part) * d + k] - x[(j * p + part) * d + k];
                u * u
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut acc = 0.0;
    for part in 0..p {
        let (mut sum, mut active) = (0.0, 0usize);
        for a in 0..b {
            for pos in (0..b).filter(|&q| q != a && labels[q] == labels[a]) {
                for n in (0..b).filter(|&q| labels[q] != labels[a]) {
                    let h = margin + dist(a, pos, part) - dist(a, n, part);
                    if h > 0.0 {
                        sum += h;
                        active += 1;
                    }
                }
            }
        }
        if active > 0 {
            acc += sum / active as f64;
        }
    }
    acc / p as f64
}

/// Mean softmax cross-entropy of `[B, C]` logits.
pub fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z = &logits[r * classes..(r + 1) * classes];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / labels.len() as f64
}

/// One random instance of a comparison; `i` cycles the reduction mode.
pub type OracleCase = fn(&mut dyn RngCore, usize) -> Check;

pub fn suite() -> Vec<(&'static str, OracleCase)> {
    vec![
        ("conv2d", check_conv2d),
        ("maxpool2d", check_maxpool2d),
        ("gbsp+gsp", check_gbsp_gsp),
        ("gstp+lstp", check_gstp_lstp),
        ("horizontal_strip_pool", check_horizontal_strip_pool),
        ("alstc", check_alstc),
    ]
}
