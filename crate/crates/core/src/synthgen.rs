//! Synthetic classification scenes where hue alone identifies the class,
//! plus the Gaussian illuminant jitter sampler.
//!
//! A scene is a noisy, nearly neutral background with one to three ellipses
//! or rectangles painted in the class color. The background keeps the scene
//! average close to gray, so the illuminant of a cast scene is recoverable
//! from image statistics, while the objects carry the class signal.

use std::path::Path;

use rand::Rng;

use crate::colorops::{angular_error_rgb, ColorSpace, Illuminant, Image};
use crate::dataio::{
    write_illuminants_csv, write_image, write_labels_csv, write_manifest, DatasetManifest, IlluminantMode, Split,
    MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::rng;

pub const PALETTE_SATURATION: f64 = 0.6;
pub const PALETTE_VALUE: f64 = 0.7;

/// One RGB color per class, at equally spaced hues.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPalette {
    colors: Vec<[f64; 3]>,
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn rgb_hue(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    h * 60.0
}

impl ClassPalette {
    pub fn new(n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::invalid("palette needs at least one class"));
        }
        let colors = (0..n_classes)
            .map(|k| hsv_to_rgb(360.0 * k as f64 / n_classes as f64, PALETTE_SATURATION, PALETTE_VALUE))
            .collect();
        Ok(ClassPalette { colors })
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, class_id: usize) -> [f64; 3] {
        self.colors[class_id]
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    /// Smallest circular hue distance between two classes, in degrees.
    pub fn min_hue_separation(&self) -> f64 {
        let mut best = 360.0f64;
        for i in 0..self.colors.len() {
            for j in i + 1..self.colors.len() {
                let d = (rgb_hue(self.colors[i]) - rgb_hue(self.colors[j])).abs();
                best = best.min(d.min(360.0 - d));
            }
        }
        best
    }

    /// Index of the palette color with the smallest angular distance to `rgb`.
    pub fn nearest(&self, rgb: [f64; 3]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, &c) in self.colors.iter().enumerate() {
            let e = angular_error_rgb(rgb, c).unwrap_or(f64::INFINITY);
            if e < best.0 {
                best = (e, k);
            }
        }
        best.1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Side length of the square image; must be even.
    pub image_size: usize,
    /// Inclusive range of the number of shapes.
    pub n_shapes: (usize, usize),
    /// Per-pixel, per-channel background noise std.
    pub background_chroma_noise: f64,
    /// Per-pixel background luminance noise std (shared by all channels).
    pub background_luma_noise: f64,
    /// Half-width of the uniform per-image shift of the background level around 0.5.
    pub background_level_jitter: f64,
    /// Per-image, per-channel background tint std; zero mean, so the background stays neutral on average.
    pub background_tint: f64,
    /// Half-width of the uniform brightness factor applied to each shape.
    pub lightness_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 48,
            n_shapes: (1, 3),
            background_chroma_noise: 0.03,
            background_luma_noise: 0.05,
            background_level_jitter: 0.15,
            background_tint: 0.025,
            lightness_jitter: 0.15,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(Error::invalid(format!("image size {} must be even and at least 8", self.image_size)));
        }
        let (lo, hi) = self.n_shapes;
        if lo == 0 || lo > hi {
            return Err(Error::invalid(format!("shape count range {lo}..={hi} is invalid")));
        }
        for (name, v) in [
            ("background_chroma_noise", self.background_chroma_noise),
            ("background_luma_noise", self.background_luma_noise),
            ("background_level_jitter", self.background_level_jitter),
            ("background_tint", self.background_tint),
            ("lightness_jitter", self.lightness_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.lightness_jitter >= 1.0 {
            return Err(Error::invalid("lightness_jitter must be below 1"));
        }
        Ok(())
    }
}

/// Gaussian illuminant jitter; components are clamped below at `floor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterConfig {
    pub mean: f64,
    pub std: f64,
    pub floor: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            mean: 1.0,
            std: 0.3,
            floor: 0.05,
        }
    }
}

impl JitterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0) || !(self.std >= 0.0) || !self.mean.is_finite() || !self.std.is_finite() {
            return Err(Error::invalid(format!("invalid jitter config {self:?}")));
        }
        Ok(())
    }
}

/// Three independent Box–Muller draws, each clamped below at `cfg.floor`.
pub fn sample_illuminant<R: Rng + ?Sized>(cfg: &JitterConfig, rng: &mut R) -> Illuminant {
    let mut draw = || rng::normal(rng, cfg.mean, cfg.std).max(cfg.floor);
    let (r, g, b) = (draw(), draw(), draw());
    Illuminant::new(r, g, b).expect("floor keeps components positive")
}

/// A rendered scene with the per-pixel object coverage.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Image,
    pub object_mask: Vec<bool>,
}

impl Scene {
    pub fn object_fraction(&self) -> f64 {
        self.object_mask.iter().filter(|&&m| m).count() as f64 / self.object_mask.len() as f64
    }

    /// Mean color of the object pixels, if any.
    pub fn mean_object_color(&self) -> Option<[f64; 3]> {
        let mut s = [0.0; 3];
        let mut n = 0;
        for (px, &m) in self.image.pixels().chunks_exact(3).zip(&self.object_mask) {
            if m {
                s[0] += px[0];
                s[1] += px[1];
                s[2] += px[2];
                n += 1;
            }
        }
        (n > 0).then(|| s.map(|v| v / n as f64))
    }
}

pub fn render_scene<R: Rng + ?Sized>(class_id: usize, palette: &ClassPalette, spec: &SceneSpec, rng: &mut R) -> Result<Scene> {
    spec.validate()?;
    if class_id >= palette.len() {
        return Err(Error::invalid(format!("class {class_id} out of range for {} classes", palette.len())));
    }
    let n = spec.image_size;
    let level = if spec.background_level_jitter > 0.0 {
        0.5 + rng.gen_range(-spec.background_level_jitter..spec.background_level_jitter)
    } else {
        0.5
    };
    let tint: [f64; 3] = std::array::from_fn(|_| spec.background_tint * rng::standard_normal(rng));
    let mut pixels = Vec::with_capacity(n * n * 3);
    for _ in 0..n * n {
        let luma = level + spec.background_luma_noise * rng::standard_normal(rng);
        for t in tint {
            let v = luma + t + spec.background_chroma_noise * rng::standard_normal(rng);
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    let mut image = Image::new(n, n, pixels, ColorSpace::GammaEncoded)?;
    let mut object_mask = vec![false; n * n];

    let (lo, hi) = spec.n_shapes;
    let count = rng.gen_range(lo..=hi);
    let base = palette.color(class_id);
    let size = n as f64;
    for _ in 0..count {
        let rx = rng.gen_range(0.1..0.2) * size;
        let ry = rng.gen_range(0.1..0.2) * size;
        let cx = rng.gen_range(rx..size - rx);
        let cy = rng.gen_range(ry..size - ry);
        let ellipse = rng.gen_bool(0.5);
        let f = if spec.lightness_jitter > 0.0 {
            1.0 + rng.gen_range(-spec.lightness_jitter..spec.lightness_jitter)
        } else {
            1.0
        };
        let color = base.map(|c| (c * f).clamp(0.0, 1.0));
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    image.set_pixel(x, y, color);
                    object_mask[y * n + x] = true;
                }
            }
        }
    }
    Ok(Scene { image, object_mask })
}

/// Renders one gamma-encoded scene of class `class_id`.
pub fn generate_scene<R: Rng + ?Sized>(class_id: usize, palette: &ClassPalette, spec: &SceneSpec, rng: &mut R) -> Result<Image> {
    render_scene(class_id, palette, spec, rng).map(|s| s.image)
}

/// Parameters of [`build_dataset`].
#[derive(Clone, Debug)]
pub struct DatasetPlan {
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub scene: SceneSpec,
    /// Distribution of the test-split evaluation illuminants.
    pub test_jitter: JitterConfig,
    pub seed: u64,
}

pub fn image_filename(index: usize) -> String {
    format!("{index:06}.ppm")
}

/// Writes a balanced synthetic dataset to `out_dir`.
///
/// Image `i` of a split has class `i mod K` and is rendered from its own
/// stream `(seed, "scene-<split>", i)`. Test images are stored clean with
/// their evaluation illuminants in `test/illuminants.csv`.
pub fn build_dataset(plan: &DatasetPlan, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    plan.scene.validate()?;
    plan.test_jitter.validate()?;
    if plan.n_train == 0 || plan.n_test == 0 {
        return Err(Error::invalid("both splits need at least one image"));
    }
    let palette = ClassPalette::new(plan.n_classes)?;
    for (split, count) in [(Split::Train, plan.n_train), (Split::Test, plan.n_test)] {
        let dir = out.join(split.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let label = format!("scene-{split}");
        let mut labels = Vec::with_capacity(count);
        let mut ills = Vec::new();
        for i in 0..count {
            let class_id = i % plan.n_classes;
            let mut r = rng::stream(plan.seed, &label, i as u64);
            let img = generate_scene(class_id, &palette, &plan.scene, &mut r)?;
            let name = image_filename(i);
            write_image(dir.join(&name), &img)?;
            labels.push((name.clone(), class_id));
            if split == Split::Test {
                let mut jr = rng::stream(plan.seed, "test-illuminant", i as u64);
                ills.push((name, sample_illuminant(&plan.test_jitter, &mut jr)));
            }
        }
        write_labels_csv(&dir.join("labels.csv"), &labels)?;
        if split == Split::Test {
            write_illuminants_csv(&dir.join("illuminants.csv"), &ills)?;
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        image_size: Some(plan.scene.image_size),
        n_classes: Some(plan.n_classes),
        splits: [(Split::Train, plan.n_train), (Split::Test, plan.n_test)].into_iter().collect(),
        seed: plan.seed,
        color_space: ColorSpace::GammaEncoded,
        illuminants: IlluminantMode::Deferred,
        groups: None,
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}
