//! Color arithmetic under the diagonal (von Kries) illuminant model.
//!
//! An [`Illuminant`] is a triplet of positive per-channel gains. Casting an
//! image multiplies channel `c` by `ρ_c`; correcting divides by it. Neither
//! operation clips: clipping is always an explicit, separate step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 2.2;
pub const DEFAULT_TARGET_MEAN: f64 = 0.5;

/// Per-channel illuminant gains `(ρ_R, ρ_G, ρ_B)`, all strictly positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Illuminant([f64; 3]);

impl Illuminant {
    pub const NEUTRAL: Illuminant = Illuminant([1.0; 3]);

    pub fn new(r: f64, g: f64, b: f64) -> Result<Self> {
        Self::from_rgb([r, g, b])
    }

    pub fn from_rgb(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(Illuminant(rgb))
        } else {
            Err(Error::invalid(format!("illuminant components must be finite and positive, got {rgb:?}")))
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.0
    }

    pub fn r(&self) -> f64 {
        self.0[0]
    }

    pub fn g(&self) -> f64 {
        self.0[1]
    }

    pub fn b(&self) -> f64 {
        self.0[2]
    }

    /// Canonical representative with `ρ_G = 1`.
    pub fn green_normalized(&self) -> Illuminant {
        let g = self.0[1];
        Illuminant([self.0[0] / g, 1.0, self.0[2] / g])
    }

    pub fn scaled(&self, s: f64) -> Result<Illuminant> {
        Illuminant::from_rgb(self.0.map(|v| v * s))
    }

    pub fn powf(&self, p: f64) -> Result<Illuminant> {
        Illuminant::from_rgb(self.0.map(|v| v.powf(p)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Linear,
    GammaEncoded,
}

/// Axis-aligned rectangle `[x0, x1) × [y0, y1)` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl MaskRect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(format!("mask ({x0},{y0})-({x1},{y1}) has zero area")));
        }
        Ok(MaskRect { x0, y0, x1, y1 })
    }

    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > width || self.y1 > height {
            return Err(Error::invalid(format!(
                "mask ({},{})-({},{}) is not a valid region of a {width}×{height} image",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// `height × width × 3` RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    space: ColorSpace,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, space: ColorSpace) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{width}×{height} RGB image needs {} values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
            space,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3], space: ColorSpace) -> Result<Self> {
        let pixels = std::iter::repeat(rgb).take(width * height).flatten().collect();
        Image::new(width, height, pixels, space)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn with_space(mut self, space: ColorSpace) -> Image {
        self.space = space;
        self
    }

    /// `min(max(v, 0), 1)` on every value.
    pub fn clipped(&self) -> Image {
        self.map_values(|v| v.clamp(0.0, 1.0))
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    fn map_channels(&self, gains: [f64; 3]) -> Image {
        let mut out = self.clone();
        for px in out.pixels.chunks_exact_mut(3) {
            px[0] *= gains[0];
            px[1] *= gains[1];
            px[2] *= gains[2];
        }
        out
    }

    /// Channel-planar copy `[3 × H × W]` for network input.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[n + i] = px[1];
            out[2 * n + i] = px[2];
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, planar: &[f64], space: ColorSpace) -> Result<Image> {
        let n = width * height;
        if planar.len() != 3 * n {
            return Err(Error::invalid("planar buffer does not match image size"));
        }
        let pixels = (0..n).flat_map(|i| [planar[i], planar[n + i], planar[2 * n + i]]).collect();
        Image::new(width, height, pixels, space)
    }

    /// Per-channel means over pixels outside `mask`, with the pixel count.
    pub fn channel_means(&self, mask: Option<&MaskRect>) -> Result<([f64; 3], usize)> {
        if let Some(m) = mask {
            m.validate_for(self.width, self.height)?;
        }
        let mut sum = [0.0; 3];
        let mut count = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.is_some_and(|m| m.contains(x, y)) {
                    continue;
                }
                let p = self.pixel(x, y);
                sum[0] += p[0];
                sum[1] += p[1];
                sum[2] += p[2];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("no unmasked pixels to compute statistics over"));
        }
        Ok((sum.map(|s| s / count as f64), count))
    }
}

/// Von Kries correction: channel `c` divided by `ρ_c`. Does not clip.
pub fn correct(img: &Image, rho: &Illuminant) -> Image {
    img.map_channels(rho.0.map(|v| 1.0 / v))
}

/// Applies an illuminant: channel `c` multiplied by `ρ_c`. Does not clip.
pub fn cast(img: &Image, rho: &Illuminant) -> Image {
    img.map_channels(rho.0)
}

/// Angle in degrees between two RGB triplets; magnitude is irrelevant.
pub fn angular_error_rgb(estimate: [f64; 3], reference: [f64; 3]) -> Result<f64> {
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let (ne, nr) = (dot(estimate, estimate).sqrt(), dot(reference, reference).sqrt());
    if !(ne > 0.0 && nr > 0.0) || !ne.is_finite() || !nr.is_finite() {
        return Err(Error::invalid("angular error of a zero or non-finite vector"));
    }
    // atan2 of |a×b| and a·b stays accurate near 0° where acos loses digits.
    let (a, b) = (estimate.map(|v| v / ne), reference.map(|v| v / nr));
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    Ok(dot(cross, cross).sqrt().atan2(dot(a, b)).to_degrees())
}

/// Angular recovery error in degrees between an estimated and a reference illuminant.
pub fn angular_error(estimate: &Illuminant, reference: &Illuminant) -> f64 {
    angular_error_rgb(estimate.0, reference.0).expect("illuminants are positive")
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("gamma must be finite and positive, got {gamma}")))
    }
}

/// Power `1/γ` on every value of a linear image.
pub fn gamma_encode(img: &Image, gamma: f64) -> Result<Image> {
    check_gamma(gamma)?;
    if img.space != ColorSpace::Linear {
        return Err(Error::invalid("image is already gamma encoded"));
    }
    let inv = 1.0 / gamma;
    Ok(img.map_values(|v| v.max(0.0).powf(inv)).with_space(ColorSpace::GammaEncoded))
}

/// Power `γ` on every value of a gamma-encoded image.
pub fn gamma_decode(img: &Image, gamma: f64) -> Result<Image> {
    check_gamma(gamma)?;
    if img.space != ColorSpace::GammaEncoded {
        return Err(Error::invalid("image is already linear"));
    }
    Ok(img.map_values(|v| v.max(0.0).powf(gamma)).with_space(ColorSpace::Linear))
}

/// A linear gain `a` appears as `a^(1/γ)` after encoding; this undoes that.
pub fn illuminant_to_linear(encoded: &Illuminant, gamma: f64) -> Result<Illuminant> {
    check_gamma(gamma)?;
    encoded.powf(gamma)
}

/// Inverse of [`illuminant_to_linear`].
pub fn illuminant_to_encoded(linear: &Illuminant, gamma: f64) -> Result<Illuminant> {
    check_gamma(gamma)?;
    linear.powf(1.0 / gamma)
}

fn check_target(target_mean: f64) -> Result<()> {
    if target_mean > 0.0 && target_mean.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("target mean must be positive, got {target_mean}")))
    }
}

/// Scales all channels by one factor so the mean over unmasked values equals
/// `target_mean`. Returns the image and the applied factor.
///
/// The result is not clipped: clipping would bend the chromaticity of bright
/// pixels, and any estimator that is positively homogeneous in the image must
/// give the same direction before and after.
pub fn global_normalize(img: &Image, target_mean: f64, mask: Option<&MaskRect>) -> Result<(Image, f64)> {
    check_target(target_mean)?;
    let (means, _) = img.channel_means(mask)?;
    let mean = (means[0] + means[1] + means[2]) / 3.0;
    if !(mean > 0.0) {
        return Err(Error::invalid("cannot globally normalize an all-black image"));
    }
    let scale = target_mean / mean;
    Ok((img.map_values(|v| v * scale), scale))
}

/// Divides channel `c` by `d_c = mean_c / target_mean` and clips. Returns the
/// image and the support illuminant `d`.
pub fn channel_normalize(img: &Image, target_mean: f64, mask: Option<&MaskRect>) -> Result<(Image, Illuminant)> {
    check_target(target_mean)?;
    let (means, _) = img.channel_means(mask)?;
    if means.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::invalid(format!("channel normalization needs positive channel means, got {means:?}")));
    }
    let support = Illuminant::from_rgb(means.map(|m| m / target_mean))?;
    Ok((correct(img, &support).clipped(), support))
}

/// Component-wise product: the illuminant of casting by `inner` then `outer`.
pub fn compose(outer: &Illuminant, inner: &Illuminant) -> Illuminant {
    Illuminant([outer.0[0] * inner.0[0], outer.0[1] * inner.0[1], outer.0[2] * inner.0[2]])
}

/// Gray-world estimate: channel means over unmasked pixels, green-normalized.
pub fn grayworld(img: &Image, mask: Option<&MaskRect>) -> Result<Illuminant> {
    let (means, _) = img.channel_means(mask)?;
    Ok(Illuminant::from_rgb(means)?.green_normalized())
}

/// Arithmetic mean of green-normalized illuminants.
pub fn mean_illuminant(items: &[Illuminant]) -> Result<Illuminant> {
    if items.is_empty() {
        return Err(Error::invalid("mean of an empty illuminant list"));
    }
    let mut s = [0.0; 3];
    for it in items {
        let g = it.green_normalized();
        for c in 0..3 {
            s[c] += g.0[c];
        }
    }
    Illuminant::from_rgb(s.map(|v| v / items.len() as f64))
}

/// Moves the predictions' mean onto `gt_mean`: each prediction is multiplied
/// by `gt_mean / mean(predictions)`, both means green-normalized.
pub fn bias_shift(predictions: &[Illuminant], gt_mean: &Illuminant) -> Result<Vec<Illuminant>> {
    let pred_mean = mean_illuminant(predictions)?;
    let target = gt_mean.green_normalized();
    let shift = Illuminant([
        target.0[0] / pred_mean.0[0],
        target.0[1] / pred_mean.0[1],
        target.0[2] / pred_mean.0[2],
    ]);
    Ok(predictions.iter().map(|p| compose(&shift, &p.green_normalized())).collect())
}
