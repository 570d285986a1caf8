//! Binary morphology: erosion, dilation and opening with square
//! structuring elements.
//!
//! Masks are binary tensors of rank >= 2; the operations act on the
//! trailing two axes of every leading slice. Pixels outside the image
//! are background (0), so erosion always clears a border ring and
//! dilation never wraps. The square structuring element of radius `r`
//! covers `(2r+1) x (2r+1)` pixels, which lets both operations run as
//! two separable 1D min/max passes.

use crate::error::{Error, Result};
use crate::tensor::Tensor as GenericTensor;

type Tensor = GenericTensor<f64>;

fn validate(mask: &Tensor, radius: usize) -> Result<(usize, usize, usize)> {
    if radius == 0 {
        return Err(Error::InvalidArgument(
            "structuring element radius must be at least 1".into(),
        ));
    }
    let shape = mask.shape();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "morphology needs rank >= 2, got {shape:?}"
        )));
    }
    for (i, &v) in mask.data().iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "mask is not binary: element {i} is {v}"
            )));
        }
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let slices = mask.numel() / (h * w);
    Ok((slices, h, w))
}

/// Separable sliding window over rows then columns. `erode` takes the
/// minimum over the window (out-of-bounds = 0); dilation the maximum.
fn apply(mask: &Tensor, radius: usize, erode_mode: bool) -> Result<Tensor> {
    let (slices, h, w) = validate(mask, radius)?;
    let src = mask.data();
    let mut out = vec![0.0f64; src.len()];
    let mut tmp = vec![0.0f64; h * w];
    let pick = |acc: f64, v: f64| {
        if erode_mode {
            acc.min(v)
        } else {
            acc.max(v)
        }
    };
    for s in 0..slices {
        let plane = &src[s * h * w..(s + 1) * h * w];
        // Horizontal pass into tmp.
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = if erode_mode { 1.0 } else { 0.0 };
                for dx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                    acc = pick(acc, row[dx]);
                }
                // Windows that poke out of bounds see background.
                if erode_mode && (x < radius || x + radius >= w) {
                    acc = 0.0;
                }
                tmp[y * w + x] = acc;
            }
        }
        // Vertical pass into out.
        let oplane = &mut out[s * h * w..(s + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = if erode_mode { 1.0 } else { 0.0 };
                for dy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                    acc = pick(acc, tmp[dy * w + x]);
                }
                if erode_mode && (y < radius || y + radius >= h) {
                    acc = 0.0;
                }
                oplane[y * w + x] = acc;
            }
        }
    }
    Tensor::from_vec(mask.shape(), out)
}

/// Erosion: a pixel survives only if the whole structuring element
/// around it is foreground (out-of-bounds counts as background).
pub fn erode(mask: &Tensor, radius: usize) -> Result<Tensor> {
    apply(mask, radius, true)
}

/// Dilation: a pixel lights up if any foreground pixel falls inside
/// the structuring element around it.
pub fn dilate(mask: &Tensor, radius: usize) -> Result<Tensor> {
    apply(mask, radius, false)
}

/// Morphological opening (erosion then dilation): removes components
/// the structuring element cannot cover while preserving larger shapes.
pub fn open(mask: &Tensor, radius: usize) -> Result<Tensor> {
    dilate(&erode(mask, radius)?, radius)
}

/// Post-processing entry point used on generator outputs.
pub fn morpho_clean(mask: &Tensor, radius: usize) -> Result<Tensor> {
    open(mask, radius)
}
