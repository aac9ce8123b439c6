//! Image I/O, the Gaussian downsampler used to synthesize low-resolution inputs,
//! interpolation baselines and the 8-bit evaluation metrics.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma};

use crate::error::{check_len, Error, Result};
use crate::plane::{reflect, Plane};
use crate::reconstruction::MeasurementModel;
use crate::scalar::Real;

/// Images are stored in `[0, 1]`; learning and reconstruction work in gray
/// levels, i.e. with values multiplied by this factor.
pub const GRAY_LEVELS: f64 = 255.0;

/// Values may exceed `[0, 1]` by this much (rounding in unit-sum filters) and
/// are stored unchanged.
const RANGE_SLACK: f64 = 1e-9;

/// A grayscale image with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    plane: Plane<f64>,
    bit_depth: u8,
}

impl GrayImage {
    pub fn new(plane: Plane<f64>, bit_depth: u8) -> Result<Self> {
        if bit_depth != 8 && bit_depth != 16 {
            return Err(Error::InvalidArgument(format!(
                "bit depth must be 8 or 16, got {bit_depth}"
            )));
        }
        if let Some((i, v)) = plane
            .as_slice()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= -RANGE_SLACK && **v <= 1.0 + RANGE_SLACK))
        {
            return Err(Error::InvalidArgument(format!(
                "pixel {i} has value {v}, outside [0, 1]"
            )));
        }
        Ok(Self { plane, bit_depth })
    }

    /// Clamps into `[0, 1]` first; non-finite values are still rejected.
    pub fn from_clamped(plane: Plane<f64>, bit_depth: u8) -> Result<Self> {
        if plane.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel value".into()));
        }
        Self::new(plane.map(|v| v.clamp(0.0, 1.0)), bit_depth)
    }

    pub fn plane(&self) -> &Plane<f64> {
        &self.plane
    }

    pub fn into_plane(self) -> Plane<f64> {
        self.plane
    }

    pub fn width(&self) -> usize {
        self.plane.width()
    }

    pub fn height(&self) -> usize {
        self.plane.height()
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }
}

/// A depth map with a per-pixel validity mask (`true` = measured).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub image: GrayImage,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(image: GrayImage, valid: Vec<bool>) -> Result<Self> {
        check_len("depth validity mask", image.plane.len(), valid.len())?;
        Ok(Self { image, valid })
    }

    /// Raw zeros are missing measurements.
    pub fn from_image(image: GrayImage) -> Self {
        let valid = image.plane.as_slice().iter().map(|&v| v > 0.0).collect();
        Self { image, valid }
    }

    pub fn fully_valid(image: GrayImage) -> Self {
        let valid = vec![true; image.plane.len()];
        Self { image, valid }
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn luma(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) / 255.0
}

/// Loads PGM/PPM or PNG (8/16-bit gray, 8-bit RGB) into `[0, 1]`; color is
/// converted to luma with weights `0.299, 0.587, 0.114`.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let decoded = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (data, depth): (Vec<f64>, u8) = match decoded {
        DynamicImage::ImageLuma8(buf) => (buf.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(), 8),
        DynamicImage::ImageLuma16(buf) => (buf.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect(), 16),
        DynamicImage::ImageRgb8(buf) => (buf.pixels().map(|p| luma(p[0], p[1], p[2]).min(1.0)).collect(), 8),
        other => {
            return Err(img_err(format!(
                "unsupported pixel format {:?} (expected 8/16-bit gray or 8-bit RGB)",
                other.color()
            )))
        }
    };
    GrayImage::new(Plane::new(w, h, data)?, depth)
}

/// Round-half-up quantization to `0..=max`.
pub fn quantize(v: f64, max: u32) -> u32 {
    let q = (v.clamp(0.0, 1.0) * f64::from(max) + 0.5).floor();
    (q as u32).min(max)
}

/// Saves as 8- or 16-bit grayscale; the container follows the extension
/// (`.pgm` for binary PGM, otherwise PNG).
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>, bit_depth: u8) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let format = if is_pgm {
        image::ImageFormat::Pnm
    } else {
        image::ImageFormat::Png
    };
    let result = match bit_depth {
        8 => {
            let data = img.plane.as_slice().iter().map(|&v| quantize(v, 255) as u8).collect();
            ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w, h, data)
                .expect("buffer size matches")
                .save_with_format(path, format)
        }
        16 => {
            let data = img
                .plane
                .as_slice()
                .iter()
                .map(|&v| quantize(v, 65535) as u16)
                .collect();
            ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w, h, data)
                .expect("buffer size matches")
                .save_with_format(path, format)
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "bit depth must be 8 or 16, got {other}"
            )))
        }
    };
    result.map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Blur with the `(2d-1) x (2d-1)` Gaussian (`sigma = d/3`) and keep every
/// `d`-th pixel starting at the origin. Shares its kernel path with
/// [`MeasurementModel::apply`].
pub fn gaussian_downsample(img: &GrayImage, d: usize) -> Result<DepthMap> {
    if d < 1 {
        return Err(Error::InvalidArgument("downsampling factor must be >= 1".into()));
    }
    let model = MeasurementModel::<f64>::new(d, img.width(), img.height(), None)?;
    let values = model.apply(img.plane())?;
    let lr = Plane::new(model.lr_width(), model.lr_height(), values)?;
    Ok(DepthMap::fully_valid(GrayImage::new(lr, img.bit_depth)?))
}

/// [`gaussian_downsample`] of a depth map with holes. A low-resolution sample is
/// valid only if every pixel under its blur footprint is; invalid samples are
/// stored as 0.
pub fn downsample_depth(depth: &DepthMap, d: usize) -> Result<DepthMap> {
    let lr = gaussian_downsample(&depth.image, d)?;
    let model = MeasurementModel::<f64>::new(d, depth.width(), depth.height(), None)?;
    let valid = model.footprint_valid(&depth.valid)?;
    let mut plane = lr.image.into_plane();
    for (v, &ok) in plane.as_mut_slice().iter_mut().zip(&valid) {
        if !ok {
            *v = 0.0;
        }
    }
    DepthMap::new(GrayImage::new(plane, depth.image.bit_depth)?, valid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
    Bicubic,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            "bicubic" => Ok(Self::Bicubic),
            other => Err(Error::InvalidArgument(format!(
                "unknown interpolation method '{other}' (expected nearest, bilinear or bicubic)"
            ))),
        }
    }
}

/// Catmull-Rom kernel (`a = -0.5`).
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for every output position along one axis. Output
/// pixel `x` samples input coordinate `x / d`, matching the decimation phase.
fn axis_taps(method: Interpolation, d: usize, len_in: usize, len_out: usize) -> Vec<Vec<(usize, f64)>> {
    (0..len_out)
        .map(|x| {
            let base = (x / d) as isize;
            let frac = (x % d) as f64 / d as f64;
            match method {
                Interpolation::Nearest => vec![(reflect(base, len_in), 1.0)],
                Interpolation::Bilinear => vec![(reflect(base, len_in), 1.0 - frac), (reflect(base + 1, len_in), frac)],
                Interpolation::Bicubic => (-1..=2)
                    .map(|t| (reflect(base + t, len_in), cubic_weight(frac - t as f64)))
                    .collect(),
            }
        })
        .collect()
}

/// Weighted sum written relative to the first tap, so constant signals are
/// reproduced exactly even when the weights do not sum to one in floating point.
fn blend<T: Real>(taps: &[(usize, f64)], f: impl Fn(usize) -> T) -> T {
    let anchor = f(taps[0].0);
    let mut acc = anchor;
    for &(i, w) in taps {
        acc += T::of(w) * (f(i) - anchor);
    }
    acc
}

/// Separable interpolation of `lr` by factor `d` onto a `width x height` grid.
pub fn interpolate<T: Real>(
    lr: &Plane<T>,
    d: usize,
    method: Interpolation,
    width: usize,
    height: usize,
) -> Result<Plane<T>> {
    if d < 1 || width == 0 || height == 0 {
        return Err(Error::InvalidArgument(
            "interpolation needs d >= 1 and a non-empty target".into(),
        ));
    }
    let col_taps = axis_taps(method, d, lr.width(), width);
    let row_taps = axis_taps(method, d, lr.height(), height);
    // horizontal pass over every LR row, then vertical
    let mut tmp = vec![T::zero(); lr.height() * width];
    for r in 0..lr.height() {
        for (x, taps) in col_taps.iter().enumerate() {
            tmp[r * width + x] = blend(taps, |i| lr.get(r, i));
        }
    }
    let mut out = vec![T::zero(); width * height];
    for (y, taps) in row_taps.iter().enumerate() {
        for x in 0..width {
            out[y * width + x] = blend(taps, |i| tmp[i * width + x]);
        }
    }
    Plane::new(width, height, out)
}

/// Interpolates to `d` times the input size; results are clamped to `[0, 1]`.
pub fn upsample_baseline(lr: &GrayImage, d: usize, method: Interpolation) -> Result<GrayImage> {
    let out = interpolate(lr.plane(), d, method, lr.width() * d, lr.height() * d)?;
    GrayImage::from_clamped(out, lr.bit_depth)
}

fn paired_8bit<'a>(est: &'a GrayImage, gt: &'a DepthMap) -> Result<impl Iterator<Item = (i64, i64)> + 'a> {
    if !est.plane.same_size(gt.image.plane()) {
        return Err(Error::SizeMismatch(format!(
            "estimate {}x{}, ground truth {}x{}",
            est.width(),
            est.height(),
            gt.width(),
            gt.height()
        )));
    }
    if gt.valid_count() == 0 {
        return Err(Error::NoValidMeasurements);
    }
    Ok(est
        .plane
        .as_slice()
        .iter()
        .zip(gt.image.plane().as_slice())
        .zip(&gt.valid)
        .filter(|(_, &ok)| ok)
        .map(|((&e, &g), _)| (i64::from(quantize(e, 255)), i64::from(quantize(g, 255)))))
}

/// Percentage of valid pixels whose 8-bit error exceeds `delta`.
pub fn bad_pixel_rate(est: &GrayImage, gt: &DepthMap, delta: f64) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be >= 0, got {delta}")));
    }
    let (mut bad, mut total) = (0usize, 0usize);
    for (e, g) in paired_8bit(est, gt)? {
        total += 1;
        if ((e - g).abs() as f64) > delta {
            bad += 1;
        }
    }
    Ok(100.0 * bad as f64 / total as f64)
}

/// Root-mean-square error on the 0..=255 scale over valid pixels.
pub fn rmse_8bit(est: &GrayImage, gt: &DepthMap) -> Result<f64> {
    let (mut sum, mut total) = (0f64, 0usize);
    for (e, g) in paired_8bit(est, gt)? {
        total += 1;
        sum += ((e - g) * (e - g)) as f64;
    }
    Ok((sum / total as f64).sqrt())
}
