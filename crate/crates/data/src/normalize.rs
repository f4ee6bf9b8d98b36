//! Bounding-box crop, height-64 isotropic rescale and centroid centering
//! into a 64 x 44 frame.

use crate::image::BinaryImage;
use crate::sequence::SilhouetteSequence;
use crate::DataError;

pub const OUT_HEIGHT: usize = 64;
pub const OUT_WIDTH: usize = 44;
/// Output column the foreground centroid is rounded onto.
pub const CENTER_COL: usize = 22;

const MAX_CENTERING_PASSES: usize = 4;
const MAX_SETTLING_PASSES: usize = 8;

fn centroid_col(img: &BinaryImage) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.get(y, x) {
                sum += x as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Bilinear sample with zero outside the image.
fn sample(img: &BinaryImage, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let px = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= img.height() as f64 || xx >= img.width() as f64 {
            0.0
        } else {
            f64::from(u8::from(img.get(yy as usize, xx as usize)))
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let w = wy * wx;
            if w > 0.0 {
                v += w * px(y0 + dy, x0 + dx);
            }
        }
    }
    v
}

/// One resampling pass. `ratio` is source pixels per output pixel and
/// `offset` the source column that lands on [`CENTER_COL`].
fn resample(img: &BinaryImage, y0: usize, y_last: usize, ratio: f64, offset: f64) -> BinaryImage {
    let src_x = |j: usize| offset + (j as f64 - CENTER_COL as f64) * ratio;
    let mut out = BinaryImage::from_fn(OUT_HEIGHT, OUT_WIDTH, |i, j| {
        sample(img, y0 as f64 + i as f64 * ratio, src_x(j)) >= 0.5
    });
    // keep the extreme rows so the output spans exactly OUT_HEIGHT rows
    for (i, sy) in [(0, y0), (OUT_HEIGHT - 1, y_last)] {
        if (0..OUT_WIDTH).any(|j| out.get(i, j)) {
            continue;
        }
        let cols: Vec<f64> = (0..img.width())
            .filter(|&x| img.get(sy, x))
            .map(|x| (x as f64 - offset) / ratio.max(f64::MIN_POSITIVE) + CENTER_COL as f64)
            .collect();
        let inside: Vec<usize> = cols
            .iter()
            .map(|c| c.round())
            .filter(|c| (0.0..OUT_WIDTH as f64).contains(c))
            .map(|c| c as usize)
            .collect();
        if inside.is_empty() {
            let nearest = cols
                .iter()
                .map(|c| c.round().clamp(0.0, (OUT_WIDTH - 1) as f64) as usize)
                .min_by_key(|&c| c.abs_diff(CENTER_COL))
                .expect("extreme row has foreground");
            out.set(i, nearest, true);
        } else {
            for c in inside {
                out.set(i, c, true);
            }
        }
    }
    out
}

/// Normalize one frame to 64 x 44. Returns `None` for an empty frame.
///
/// Rows are cropped to the foreground bounding box and rescaled (same factor
/// on both axes, bilinear, corner-aligned) to 64 rows, then re-binarized at
/// 0.5. Columns are placed so the rounded foreground centroid sits on column
/// 22, cropping or zero-padding to 44. A frame that is already normalized is
/// returned unchanged.
pub fn normalize_frame(frame: &BinaryImage) -> Option<BinaryImage> {
    // a pass that cannot hit the centre column exactly is repeated on its own
    // output until nothing moves
    let mut out = normalize_pass(frame)?;
    for _ in 0..MAX_SETTLING_PASSES {
        let next = normalize_pass(&out)?;
        if next == out {
            break;
        }
        out = next;
    }
    Some(out)
}

fn normalize_pass(frame: &BinaryImage) -> Option<BinaryImage> {
    let (y0, y1, _, _) = frame.bounding_box()?;
    let ratio = if OUT_HEIGHT > 1 {
        (y1 - y0 - 1) as f64 / (OUT_HEIGHT - 1) as f64
    } else {
        1.0
    };
    let mut offset = centroid_col(frame)?.round();
    let mut best: Option<(usize, BinaryImage)> = None;
    for _ in 0..MAX_CENTERING_PASSES {
        let out = resample(frame, y0, y1 - 1, ratio, offset);
        let c = centroid_col(&out).expect("extreme rows are kept").round() as i64;
        let miss = c.abs_diff(CENTER_COL as i64) as usize;
        if miss == 0 {
            return Some(out);
        }
        if best.as_ref().map_or(true, |(m, _)| miss < *m) {
            best = Some((miss, out));
        }
        offset += (c - CENTER_COL as i64) as f64 * ratio.max(1e-9);
    }
    best.map(|(_, img)| img)
}

/// Normalize every frame, dropping empty ones. Returns the sequence and the
/// number of dropped frames.
pub fn normalize_sequence(
    seq: &SilhouetteSequence,
) -> Result<(SilhouetteSequence, usize), DataError> {
    let frames: Vec<BinaryImage> = seq.frames().iter().filter_map(normalize_frame).collect();
    let dropped = seq.len() - frames.len();
    if frames.is_empty() {
        return Err(DataError::Invalid(format!(
            "sequence {} has no foreground in any frame",
            seq.key
        )));
    }
    Ok((SilhouetteSequence::new(seq.key.clone(), frames)?, dropped))
}
