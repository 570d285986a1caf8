//! Dataset ingestion and preprocessing: bilinear resizing, intensity
//! rescaling, Gaussian regularization, mask binarization, manifest I/O,
//! and deterministic (optionally stratified) train/val/test splitting.
//!
//! Preprocessing order is resize, then rescale to [0, 1], then smooth;
//! masks are resized the same way and thresholded with no smoothing so
//! they stay strictly binary.

use crate::error::{Error, Result};
use crate::pgm::RawImage;
use crate::shape_analysis::{ShapeLabel, Subtype};
use crate::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Standard deviation of the preprocessing Gaussian.
pub const SMOOTH_SIGMA: f64 = 0.5;
/// Taps kept on each side of the truncated Gaussian.
pub const SMOOTH_RADIUS: usize = 2;
/// Mask binarization threshold applied after resizing.
pub const MASK_THRESHOLD: f64 = 0.5;

/// One image/mask pair with optional labels, ready for training.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    /// `[1, R, R]` intensities in `[0, 1]`.
    pub image: Tensor,
    /// `[1, R, R]` values exactly 0 or 1.
    pub mask: Tensor,
    pub shape_label: Option<ShapeLabel>,
    pub subtype_label: Option<Subtype>,
}

impl SamplePair {
    pub fn new(
        id: impl Into<String>,
        image: Tensor,
        mask: Tensor,
        shape_label: Option<ShapeLabel>,
        subtype_label: Option<Subtype>,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidArgument(
                "sample id must be nonempty".into(),
            ));
        }
        let shape = image.shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 || shape[1] != shape[2] {
            return Err(Error::ShapeMismatch(format!(
                "sample '{id}': image shape {shape:?} is not [1, R, R]"
            )));
        }
        if mask.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "sample '{id}': mask shape {:?} differs from image {shape:?}",
                mask.shape()
            )));
        }
        for &v in image.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "sample '{id}': image value {v} outside [0, 1]"
                )));
            }
        }
        for &v in mask.data() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "sample '{id}': mask value {v} is not binary"
                )));
            }
        }
        Ok(Self {
            id,
            image,
            mask,
            shape_label,
            subtype_label,
        })
    }

    /// Square spatial extent.
    pub fn resolution(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Bilinear resampling of a `[H, W]` tensor to `[out_h, out_w]` using
/// half-pixel centers; source coordinates are clamped at the borders.
pub fn bilinear_resize(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = match src.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "bilinear_resize expects rank 2, got {other:?}"
            )))
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "bilinear_resize target extents must be positive".into(),
        ));
    }
    let data = src.data();
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx =
                ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = sx - x0 as f64;
            let v00 = data[y0 * w + x0];
            let v01 = data[y0 * w + x1];
            let v10 = data[y1 * w + x0];
            let v11 = data[y1 * w + x1];
            let top = v00 + (v01 - v00) * wx;
            let bottom = v10 + (v11 - v10) * wx;
            out.push(top + (bottom - top) * wy);
        }
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

/// Normalized truncated Gaussian taps `[-radius ..= radius]`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive and finite, got {sigma}"
        )));
    }
    if radius == 0 {
        return Err(Error::InvalidArgument(
            "gaussian radius must be at least 1".into(),
        ));
    }
    let mut taps = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as isize)..=(radius as isize) {
        let x = i as f64;
        taps.push((-x * x / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    Ok(taps)
}

/// Mirrors an index into `0..n` (symmetric reflection about the array
/// edge, so index -1 maps to 0 and index n maps to n-1).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian smoothing of a `[H, W]` tensor with symmetric
/// border reflection. The normalized kernel makes every output a convex
/// combination of inputs, so the value range never expands.
pub fn gaussian_blur(src: &Tensor, sigma: f64, radius: usize) -> Result<Tensor> {
    let (h, w) = match src.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "gaussian_blur expects rank 2, got {other:?}"
            )))
        }
    };
    let taps = gaussian_kernel(sigma, radius)?;
    let r = radius as isize;
    let data = src.data();
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, tap) in taps.iter().enumerate() {
                let sx = reflect(x as isize + k as isize - r, w);
                acc += tap * data[y * w + sx];
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, tap) in taps.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - r, h);
                acc += tap * rows[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Tensor::from_vec(&[h, w], out)
}

/// Converts a raw raster to a `[H, W]` float tensor of its samples.
fn raster_to_tensor(raw: &RawImage) -> Result<Tensor> {
    let data: Vec<f64> = raw.pixels.iter().map(|&p| p as f64).collect();
    Tensor::from_vec(&[raw.height, raw.width], data)
}

/// Full image preprocessing: bilinear resize to `resolution`, rescale
/// by the raster's declared maximum into `[0, 1]`, then Gaussian
/// smoothing (sigma 0.5, radius 2). Output shape `[1, R, R]`.
pub fn preprocess(raw: &RawImage, resolution: usize) -> Result<Tensor> {
    if resolution == 0 {
        return Err(Error::InvalidArgument(
            "target resolution must be positive".into(),
        ));
    }
    let full = raster_to_tensor(raw)?;
    let resized = bilinear_resize(&full, resolution, resolution)?;
    let max = raw.maxval as f64;
    let scaled = resized.map(|v| v / max);
    let smoothed = gaussian_blur(&scaled, SMOOTH_SIGMA, SMOOTH_RADIUS)?;
    // Resize and smoothing are convex; the clamp only strips float
    // round-off so the [0, 1] invariant holds exactly.
    let clamped = smoothed.map(|v| v.clamp(0.0, 1.0));
    clamped.reshape(&[1, resolution, resolution])
}

/// Mask ingestion: bilinear resize, rescale, then hard threshold
/// (value >= threshold becomes 1). No smoothing, so the result is
/// strictly binary. Output shape `[1, R, R]`.
pub fn binarize_mask(
    raw: &RawImage,
    resolution: usize,
    threshold: f64,
) -> Result<Tensor> {
    if resolution == 0 {
        return Err(Error::InvalidArgument(
            "target resolution must be positive".into(),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask threshold must lie strictly inside (0, 1), got {threshold}"
        )));
    }
    let full = raster_to_tensor(raw)?;
    let resized = bilinear_resize(&full, resolution, resolution)?;
    let max = raw.maxval as f64;
    let binary = resized.map(|v| if v / max >= threshold { 1.0 } else { 0.0 });
    binary.reshape(&[1, resolution, resolution])
}

/// Which optional label drives stratified splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratifyBy {
    Shape,
    Subtype,
}

/// Train/val/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub stratify_by: Option<StratifyBy>,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            train,
            val,
            test,
            seed,
            stratify_by: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn stratified(mut self, by: StratifyBy) -> Self {
        self.stratify_by = Some(by);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
        ] {
            if !(0.0..=1.0).contains(&f) || !f.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} fraction {f} outside [0, 1]"
                )));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Allocates `n` items to the three buckets by largest remainder:
/// floors first, then the leftover goes to the largest fractional
/// parts (ties favour train, then val).
fn allocate(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut remainders = [0f64; 3];
    let mut assigned = 0usize;
    for (i, f) in fractions.iter().enumerate() {
        let ideal = n as f64 * f;
        counts[i] = ideal.floor() as usize;
        remainders[i] = ideal - ideal.floor();
        assigned += counts[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        remainders[b]
            .partial_cmp(&remainders[a])
            .expect("remainders are finite")
            .then(a.cmp(&b))
    });
    for k in 0..(n - assigned) {
        counts[order[k % 3]] += 1;
    }
    counts
}

/// Splits samples into train/val/test. Deterministic for a fixed seed:
/// strata are visited in label-code order, each stratum is shuffled
/// with a stream drawn from the shared generator, and counts follow the
/// largest-remainder rule so stratified proportions hold within one
/// sample per stratum.
pub fn split(
    samples: Vec<SamplePair>,
    spec: &SplitSpec,
) -> Result<(Vec<SamplePair>, Vec<SamplePair>, Vec<SamplePair>)> {
    spec.validate()?;
    // Group indices per stratum with a deterministic key order.
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, sample) in samples.iter().enumerate() {
        let key = match spec.stratify_by {
            None => 0,
            Some(StratifyBy::Shape) => match sample.shape_label {
                Some(label) => label.code(),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "sample '{}' lacks the shape label required for \
                         stratified splitting",
                        sample.id
                    )))
                }
            },
            Some(StratifyBy::Subtype) => match sample.subtype_label {
                Some(label) => label.code(),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "sample '{}' lacks the subtype label required for \
                         stratified splitting",
                        sample.id
                    )))
                }
            },
        };
        strata.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fractions = [spec.train, spec.val, spec.test];
    let mut buckets: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for indices in strata.values() {
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        let counts = allocate(shuffled.len(), fractions);
        let mut cursor = 0usize;
        for (b, &count) in counts.iter().enumerate() {
            buckets[b].extend_from_slice(&shuffled[cursor..cursor + count]);
            cursor += count;
        }
    }
    // Move the samples out in bucket order without cloning tensors.
    let mut slots: Vec<Option<SamplePair>> =
        samples.into_iter().map(Some).collect();
    let mut take = |indices: &[usize]| -> Vec<SamplePair> {
        indices
            .iter()
            .map(|&i| slots[i].take().expect("each index moved once"))
            .collect()
    };
    let train = take(&buckets[0]);
    let val = take(&buckets[1]);
    let test = take(&buckets[2]);
    Ok((train, val, test))
}

/// One manifest row: id, raster paths, optional labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub shape: Option<ShapeLabel>,
    pub subtype: Option<Subtype>,
}

const MANIFEST_COLUMNS: [&str; 5] = ["id", "image", "mask", "shape", "subtype"];

/// Writes a dataset manifest (CSV, header `id,image,mask,shape,subtype`,
/// empty cells for missing labels). Output is byte-stable.
pub fn write_manifest(path: &Path, rows: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{}", MANIFEST_COLUMNS.join(",")).expect("string write");
    for row in rows {
        let shape = row.shape.map(|s| s.to_string()).unwrap_or_default();
        let subtype = row.subtype.map(|s| s.to_string()).unwrap_or_default();
        for (field, value) in
            [("id", &row.id), ("image", &row.image), ("mask", &row.mask)]
        {
            if value.contains(',') || value.contains('\n') {
                return Err(Error::InvalidArgument(format!(
                    "manifest {field} '{value}' may not contain commas or \
                     newlines"
                )));
            }
        }
        writeln!(
            out,
            "{},{},{},{},{}",
            row.id, row.image, row.mask, shape, subtype
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Resolves a manifest-relative path.
fn resolve(base: &Path, relative: &str) -> PathBuf {
    let p = Path::new(relative);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every pair named by a manifest, preprocessing images and
/// binarizing masks at `resolution`. Rows are validated eagerly and
/// errors carry the offending line number.
pub fn load_dataset(manifest: &Path, resolution: usize) -> Result<Vec<SamplePair>> {
    let base = manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| {
            Error::Format(format!("manifest {}: {e}", manifest.display()))
        })?;
    let headers = reader.headers().map_err(|e| {
        Error::Format(format!("manifest {}: {e}", manifest.display()))
    })?;
    let got: Vec<&str> = headers.iter().collect();
    if got != MANIFEST_COLUMNS {
        return Err(Error::Format(format!(
            "manifest {}: header {:?} must be {:?}",
            manifest.display(),
            got,
            MANIFEST_COLUMNS
        )));
    }
    let mut pairs = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            Error::Format(format!("manifest {}: {e}", manifest.display()))
        })?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or_default();
        let context = |msg: String| {
            Error::Format(format!(
                "manifest {} line {line}: {msg}",
                manifest.display()
            ))
        };
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(context("empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(context(format!("duplicate id '{id}'")));
        }
        let shape = match &record[3] {
            "" => None,
            text => Some(
                text.parse::<ShapeLabel>()
                    .map_err(|e| context(e.to_string()))?,
            ),
        };
        let subtype = match &record[4] {
            "" => None,
            text => Some(
                text.parse::<Subtype>()
                    .map_err(|e| context(e.to_string()))?,
            ),
        };
        let image_path = resolve(&base, &record[1]);
        let mask_path = resolve(&base, &record[2]);
        let image_raw = crate::pgm::read_pgm(&image_path).map_err(|e| {
            context(format!("image '{}': {e}", image_path.display()))
        })?;
        let mask_raw = crate::pgm::read_pgm(&mask_path).map_err(|e| {
            context(format!("mask '{}': {e}", mask_path.display()))
        })?;
        let image = preprocess(&image_raw, resolution)
            .map_err(|e| context(format!("image '{id}': {e}")))?;
        let mask = binarize_mask(&mask_raw, resolution, MASK_THRESHOLD)
            .map_err(|e| context(format!("mask '{id}': {e}")))?;
        pairs.push(SamplePair::new(id, image, mask, shape, subtype)?);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgm::{write_pgm8, RawImage};
    use proptest::prelude::*;

    fn raw8(width: usize, height: usize, pixels: Vec<u16>) -> RawImage {
        RawImage::new(width, height, 255, pixels).unwrap()
    }

    fn tiny_pair(
        id: &str,
        shape: Option<ShapeLabel>,
        subtype: Option<Subtype>,
    ) -> SamplePair {
        let image = Tensor::zeros(&[1, 2, 2]).unwrap();
        let mask = Tensor::zeros(&[1, 2, 2]).unwrap();
        SamplePair::new(id, image, mask, shape, subtype).unwrap()
    }

    #[test]
    fn kernel_taps_are_frozen_constants() {
        let taps = gaussian_kernel(0.5, 2).unwrap();
        let expect = [
            0.00026386508273735414,
            0.10645077197359151,
            0.78657072588734223,
            0.10645077197359151,
            0.00026386508273735414,
        ];
        assert_eq!(taps.len(), 5);
        for (t, e) in taps.iter().zip(expect) {
            assert!((t - e).abs() < 1e-15, "tap {t} vs {e}");
        }
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_rejects_bad_parameters() {
        assert!(gaussian_kernel(0.0, 2).is_err());
        assert!(gaussian_kernel(-1.0, 2).is_err());
        assert!(gaussian_kernel(f64::NAN, 2).is_err());
        assert!(gaussian_kernel(0.5, 0).is_err());
    }

    #[test]
    fn constant_image_survives_pipeline() {
        let raw = raw8(5, 7, vec![100; 35]);
        let out = preprocess(&raw, 4).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        let expect = 100.0 / 255.0;
        for &v in out.data() {
            assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        }
    }

    #[test]
    fn range_endpoints_map_to_unit_interval() {
        let white = preprocess(&raw8(3, 3, vec![255; 9]), 3).unwrap();
        for &v in white.data() {
            assert!((v - 1.0).abs() < 1e-12);
            assert!(v <= 1.0);
        }
        let black = preprocess(&raw8(3, 3, vec![0; 9]), 3).unwrap();
        for &v in black.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn impulse_response_matches_kernel_product() {
        // Identity-size resize keeps the impulse centered at (8, 8);
        // the response must be the separable product of kernel taps.
        let mut pixels = vec![0u16; 16 * 16];
        pixels[8 * 16 + 8] = 255;
        let out = preprocess(&raw8(16, 16, pixels), 16).unwrap();
        let taps = gaussian_kernel(SMOOTH_SIGMA, SMOOTH_RADIUS).unwrap();
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                let y = (8 + dy) as usize;
                let x = (8 + dx) as usize;
                let got = out.data()[y * 16 + x];
                let expect = if dy.abs() <= 2 && dx.abs() <= 2 {
                    taps[(dy + 2) as usize] * taps[(dx + 2) as usize]
                } else {
                    0.0
                };
                assert!(
                    (got - expect).abs() < 1e-10,
                    "offset ({dy},{dx}): {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn checkerboard_upscale_matches_hand_grid() {
        let src = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = bilinear_resize(&src, 4, 4).unwrap();
        let expect = [
            [1.0, 0.75, 0.25, 0.0],
            [0.75, 0.625, 0.375, 0.25],
            [0.25, 0.375, 0.625, 0.75],
            [0.0, 0.25, 0.75, 1.0],
        ];
        for y in 0..4 {
            for x in 0..4 {
                let got = out.data()[y * 4 + x];
                assert!(
                    (got - expect[y][x]).abs() < 1e-12,
                    "({y},{x}): {got} vs {}",
                    expect[y][x]
                );
            }
        }
    }

    #[test]
    fn downscale_averages_blocks() {
        // 4x4 -> 2x2 with half-pixel centers lands each sample on the
        // exact center of a 2x2 block, averaging its four values.
        let src = Tensor::from_vec(
            &[4, 4],
            vec![
                0.0, 4.0, 8.0, 12.0, //
                2.0, 6.0, 10.0, 14.0, //
                1.0, 5.0, 9.0, 13.0, //
                3.0, 7.0, 11.0, 15.0,
            ],
        )
        .unwrap();
        let out = bilinear_resize(&src, 2, 2).unwrap();
        let expect = [3.0, 11.0, 4.0, 12.0];
        for (got, want) in out.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn binarize_checkerboard_threshold() {
        let raw = raw8(2, 2, vec![255, 0, 0, 255]);
        let mask = binarize_mask(&raw, 4, 0.5).unwrap();
        let expect = [
            1.0, 1.0, 0.0, 0.0, //
            1.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 1.0, //
            0.0, 0.0, 1.0, 1.0,
        ];
        assert_eq!(mask.shape(), &[1, 4, 4]);
        assert_eq!(mask.data(), expect.as_slice());
    }

    #[test]
    fn binarize_handles_extremes_and_validates() {
        let white = binarize_mask(&raw8(3, 2, vec![255; 6]), 2, 0.5).unwrap();
        assert!(white.data().iter().all(|&v| v == 1.0));
        let black = binarize_mask(&raw8(3, 2, vec![0; 6]), 2, 0.5).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        assert!(binarize_mask(&raw8(2, 2, vec![0; 4]), 2, 0.0).is_err());
        assert!(binarize_mask(&raw8(2, 2, vec![0; 4]), 2, 1.0).is_err());
        assert!(binarize_mask(&raw8(2, 2, vec![0; 4]), 0, 0.5).is_err());
    }

    #[test]
    fn blur_sixteen_bit_scale() {
        let raw = RawImage::new(2, 2, 65535, vec![65535; 4]).unwrap();
        let out = preprocess(&raw, 2).unwrap();
        for &v in out.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hundred_samples_split_seventy_fifteen_fifteen() {
        let samples: Vec<SamplePair> = (0..100)
            .map(|i| tiny_pair(&format!("s{i:03}"), None, None))
            .collect();
        let spec = SplitSpec::new(0.7, 0.15, 0.15, 42).unwrap();
        let (train, val, test) = split(samples, &spec).unwrap();
        assert_eq!(train.len(), 70);
        assert_eq!(val.len(), 15);
        assert_eq!(test.len(), 15);
    }

    #[test]
    fn degenerate_split_all_train() {
        let samples: Vec<SamplePair> =
            (0..9).map(|i| tiny_pair(&format!("s{i}"), None, None)).collect();
        let spec = SplitSpec::new(1.0, 0.0, 0.0, 7).unwrap();
        let (train, val, test) = split(samples, &spec).unwrap();
        assert_eq!(train.len(), 9);
        assert!(val.is_empty());
        assert!(test.is_empty());
    }

    #[test]
    fn stratified_forty_samples_counts() {
        let samples: Vec<SamplePair> = (0..40)
            .map(|i| {
                tiny_pair(
                    &format!("s{i:02}"),
                    Some(ShapeLabel::from_code(i % 4).unwrap()),
                    None,
                )
            })
            .collect();
        let spec = SplitSpec::new(0.5, 0.25, 0.25, 11)
            .unwrap()
            .stratified(StratifyBy::Shape);
        let (train, val, test) = split(samples, &spec).unwrap();
        for label in ShapeLabel::ALL {
            let count = |bucket: &[SamplePair]| {
                bucket
                    .iter()
                    .filter(|s| s.shape_label == Some(label))
                    .count()
            };
            // Largest remainder: floor gives 5/2/2 and the leftover
            // goes to val (earlier bucket wins the remainder tie).
            assert_eq!(count(&train), 5, "{label} train");
            assert_eq!(count(&val), 3, "{label} val");
            assert_eq!(count(&test), 2, "{label} test");
        }
    }

    #[test]
    fn split_is_deterministic_for_fixed_seed() {
        let build = || -> Vec<SamplePair> {
            (0..23)
                .map(|i| {
                    tiny_pair(
                        &format!("s{i:02}"),
                        Some(ShapeLabel::from_code(i % 3).unwrap()),
                        None,
                    )
                })
                .collect()
        };
        let spec = SplitSpec::new(0.6, 0.2, 0.2, 99)
            .unwrap()
            .stratified(StratifyBy::Shape);
        let ids = |bucket: &[SamplePair]| -> Vec<String> {
            bucket.iter().map(|s| s.id.clone()).collect()
        };
        let (a1, b1, c1) = split(build(), &spec).unwrap();
        let (a2, b2, c2) = split(build(), &spec).unwrap();
        assert_eq!(ids(&a1), ids(&a2));
        assert_eq!(ids(&b1), ids(&b2));
        assert_eq!(ids(&c1), ids(&c2));
    }

    #[test]
    fn split_validates_fractions_and_labels() {
        assert!(SplitSpec::new(0.5, 0.2, 0.2, 0).is_err());
        assert!(SplitSpec::new(-0.1, 0.6, 0.5, 0).is_err());
        assert!(SplitSpec::new(f64::NAN, 0.5, 0.5, 0).is_err());
        let spec = SplitSpec::new(0.7, 0.15, 0.15, 0)
            .unwrap()
            .stratified(StratifyBy::Subtype);
        let samples = vec![tiny_pair("a", None, None)];
        assert!(split(samples, &spec).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn split_partitions_and_stratifies(
            n in 1usize..120,
            seed in 0u64..1000,
            pick in 0usize..3,
        ) {
            let fractions = [
                (0.7, 0.15, 0.15),
                (0.5, 0.25, 0.25),
                (0.8, 0.1, 0.1),
            ][pick];
            let samples: Vec<SamplePair> = (0..n)
                .map(|i| {
                    tiny_pair(
                        &format!("s{i:03}"),
                        Some(ShapeLabel::from_code(i % 4).unwrap()),
                        None,
                    )
                })
                .collect();
            let mut all_ids: Vec<String> =
                samples.iter().map(|s| s.id.clone()).collect();
            all_ids.sort();
            let spec = SplitSpec::new(fractions.0, fractions.1, fractions.2, seed)
                .unwrap()
                .stratified(StratifyBy::Shape);
            let (train, val, test) = split(samples, &spec).unwrap();

            // Exhaustive and disjoint partition.
            let mut got: Vec<String> = train
                .iter()
                .chain(&val)
                .chain(&test)
                .map(|s| s.id.clone())
                .collect();
            got.sort();
            prop_assert_eq!(&got, &all_ids);

            // Stratified proportions hold within one sample per class.
            for label in ShapeLabel::ALL {
                let class_n = (0..n).filter(|i| i % 4 == label.code()).count();
                let in_bucket = |bucket: &[SamplePair]| {
                    bucket
                        .iter()
                        .filter(|s| s.shape_label == Some(label))
                        .count() as f64
                };
                for (frac, bucket) in [
                    (fractions.0, &train),
                    (fractions.1, &val),
                    (fractions.2, &test),
                ] {
                    let ideal = class_n as f64 * frac;
                    prop_assert!(
                        (in_bucket(bucket) - ideal).abs() <= 1.0 + 1e-9,
                        "class {} bucket dev too large", label
                    );
                }
            }
        }
    }

    #[test]
    fn sample_pair_validation() {
        let image = Tensor::full(&[1, 2, 2], 0.5).unwrap();
        let mask = Tensor::zeros(&[1, 2, 2]).unwrap();
        assert!(SamplePair::new("ok", image.clone(), mask.clone(), None, None)
            .is_ok());
        assert!(SamplePair::new("", image.clone(), mask.clone(), None, None)
            .is_err());
        let bad_image = Tensor::full(&[1, 2, 2], 1.5).unwrap();
        assert!(SamplePair::new("a", bad_image, mask.clone(), None, None)
            .is_err());
        let soft_mask = Tensor::full(&[1, 2, 2], 0.5).unwrap();
        assert!(SamplePair::new("b", image.clone(), soft_mask, None, None)
            .is_err());
        let rect = Tensor::zeros(&[1, 2, 3]).unwrap();
        assert!(SamplePair::new("c", rect.clone(), rect, None, None).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let white = vec![255u8; 16];
        let quarters = {
            let mut px = vec![0u8; 16];
            for y in 0..2 {
                for x in 0..2 {
                    px[y * 4 + x] = 255;
                }
            }
            px
        };
        for (name, pixels) in
            [("a", &white), ("b", &quarters), ("c", &white)]
        {
            write_pgm8(&dir.path().join(format!("{name}_img.pgm")), 4, 4, pixels)
                .unwrap();
            write_pgm8(&dir.path().join(format!("{name}_msk.pgm")), 4, 4, pixels)
                .unwrap();
        }
        let rows = vec![
            ManifestEntry {
                id: "a".into(),
                image: "a_img.pgm".into(),
                mask: "a_msk.pgm".into(),
                shape: Some(ShapeLabel::Round),
                subtype: Some(Subtype::LuminalA),
            },
            ManifestEntry {
                id: "b".into(),
                image: "b_img.pgm".into(),
                mask: "b_msk.pgm".into(),
                shape: Some(ShapeLabel::Oval),
                subtype: None,
            },
            ManifestEntry {
                id: "c".into(),
                image: "c_img.pgm".into(),
                mask: "c_msk.pgm".into(),
                shape: None,
                subtype: None,
            },
        ];
        let manifest = dir.path().join("manifest.csv");
        write_manifest(&manifest, &rows).unwrap();
        let pairs = load_dataset(&manifest, 4).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].id, "a");
        assert_eq!(pairs[0].shape_label, Some(ShapeLabel::Round));
        assert_eq!(pairs[0].subtype_label, Some(Subtype::LuminalA));
        assert_eq!(pairs[1].shape_label, Some(ShapeLabel::Oval));
        assert_eq!(pairs[1].subtype_label, None);
        assert_eq!(pairs[2].shape_label, None);
        assert_eq!(pairs[0].resolution(), 4);
        assert!(pairs[0].mask.data().iter().all(|&v| v == 1.0));
        let b_fg: f64 = pairs[1].mask.data().iter().sum();
        assert!(b_fg > 0.0 && b_fg < 16.0);
    }

    #[test]
    fn manifest_header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(&manifest, "id,image,mask,shape,subtype\n").unwrap();
        assert!(load_dataset(&manifest, 4).unwrap().is_empty());
    }

    #[test]
    fn manifest_errors_name_lines() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm8(&dir.path().join("x.pgm"), 2, 2, &[0, 0, 0, 0]).unwrap();

        // Missing mask file on line 3.
        let manifest = dir.path().join("m1.csv");
        std::fs::write(
            &manifest,
            "id,image,mask,shape,subtype\n\
             a,x.pgm,x.pgm,,\n\
             b,x.pgm,missing.pgm,,\n",
        )
        .unwrap();
        let err = load_dataset(&manifest, 2).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("missing.pgm"), "{err}");

        // Duplicate id on line 3.
        let manifest = dir.path().join("m2.csv");
        std::fs::write(
            &manifest,
            "id,image,mask,shape,subtype\n\
             a,x.pgm,x.pgm,,\n\
             a,x.pgm,x.pgm,,\n",
        )
        .unwrap();
        let err = load_dataset(&manifest, 2).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("duplicate id"), "{err}");

        // Bad label names its line.
        let manifest = dir.path().join("m3.csv");
        std::fs::write(
            &manifest,
            "id,image,mask,shape,subtype\n\
             a,x.pgm,x.pgm,triangular,\n",
        )
        .unwrap();
        let err = load_dataset(&manifest, 2).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        // Wrong header is rejected.
        let manifest = dir.path().join("m4.csv");
        std::fs::write(&manifest, "id,img,mask,shape,subtype\na,x,y,,\n")
            .unwrap();
        assert!(load_dataset(&manifest, 2).is_err());
    }

    #[test]
    fn manifest_rejects_commas_in_fields() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ManifestEntry {
            id: "a,b".into(),
            image: "x.pgm".into(),
            mask: "y.pgm".into(),
            shape: None,
            subtype: None,
        }];
        assert!(write_manifest(&dir.path().join("m.csv"), &rows).is_err());
    }
}
