//! Dataset directory layout.
//!
//! ```text
//! root/manifest.json
//! root/<split>/*.ppm
//! root/<split>/labels.csv        filename,class_id
//! root/<split>/illuminants.csv   filename,r,g,b
//! root/<split>/masks.csv         filename,x0,y0,x1,y1   (optional)
//! ```
//!
//! A split needs at least one of `labels.csv` and `illuminants.csv`. Every
//! `.ppm` in the split directory must be referenced, every referenced file
//! must exist, and the total must equal the manifest count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ppm::read_image;
use crate::colorops::{cast, ColorSpace, Illuminant, Image, MaskRect};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// How `illuminants.csv` relates to the stored pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlluminantMode {
    /// Images were captured under the listed illuminant (benchmarks).
    Embedded,
    /// Images are stored clean; the listed illuminant is cast (and clipped)
    /// onto them at use time.
    Deferred,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    /// Square side length, or `None` when image sizes vary.
    pub image_size: Option<usize>,
    pub n_classes: Option<usize>,
    pub splits: BTreeMap<Split, usize>,
    pub seed: u64,
    pub color_space: ColorSpace,
    pub illuminants: IlluminantMode,
    /// Optional test-split grouping (e.g. camera model) for per-group averages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<BTreeMap<String, Vec<String>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub filename: String,
    pub image: Image,
    pub label: Option<usize>,
    /// Green-normalized ground truth, when the split provides one.
    pub illuminant: Option<Illuminant>,
    /// The illuminant exactly as listed. Deferred datasets cast this one, so
    /// the image brightness follows the sampled magnitude.
    pub listed_illuminant: Option<Illuminant>,
    pub mask: Option<MaskRect>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub split: Split,
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The image as an estimator should see it: for deferred datasets the
    /// listed illuminant is cast onto the clean pixels and clipped.
    pub fn observed(&self, index: usize) -> Image {
        let item = &self.items[index];
        match (self.manifest.illuminants, item.listed_illuminant) {
            (IlluminantMode::Deferred, Some(rho)) => cast(&item.image, &rho).clipped(),
            _ => item.image.clone(),
        }
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.items
            .iter()
            .map(|it| it.label.ok_or_else(|| Error::Dataset(format!("{} has no class label", it.filename))))
            .collect()
    }
}

/// Zero-fills the pixels inside `rect`.
pub fn apply_mask(img: &Image, rect: &MaskRect) -> Result<Image> {
    rect.validate_for(img.width(), img.height())?;
    let mut out = img.clone();
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            out.set_pixel(x, y, [0.0; 3]);
        }
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Dataset(e.to_string()))?;
    write_text(&root.join("manifest.json"), &(text + "\n"))
}

fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let m: DatasetManifest =
        serde_json::from_str(&read_text(&path)?).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "manifest version {} is not supported (expected {MANIFEST_VERSION})",
            m.version
        )));
    }
    Ok(m)
}

fn check_filename(name: &str) -> Result<()> {
    let p = Path::new(name);
    if name.is_empty() || p.is_absolute() || name.contains(['/', '\\', ',']) || name == "." || name == ".." {
        return Err(Error::Dataset(format!("filename `{name}` must be a plain relative file name")));
    }
    Ok(())
}

pub fn write_labels_csv(path: &Path, rows: &[(String, usize)]) -> Result<()> {
    let mut s = String::from("filename,class_id\n");
    for (f, l) in rows {
        check_filename(f)?;
        s += &format!("{f},{l}\n");
    }
    write_text(path, &s)
}

pub fn write_illuminants_csv(path: &Path, rows: &[(String, Illuminant)]) -> Result<()> {
    let mut s = String::from("filename,r,g,b\n");
    for (f, rho) in rows {
        check_filename(f)?;
        let [r, g, b] = rho.rgb();
        s += &format!("{f},{r},{g},{b}\n");
    }
    write_text(path, &s)
}

pub fn write_masks_csv(path: &Path, rows: &[(String, MaskRect)]) -> Result<()> {
    let mut s = String::from("filename,x0,y0,x1,y1\n");
    for (f, m) in rows {
        check_filename(f)?;
        s += &format!("{f},{},{},{},{}\n", m.x0, m.y0, m.x1, m.y1);
    }
    write_text(path, &s)
}

/// Parses a headed CSV into `filename → remaining fields`, rejecting
/// duplicates and rows with the wrong arity.
fn read_csv(path: &Path, header: &[&str]) -> Result<Option<BTreeMap<String, Vec<String>>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, msg: String| Error::Dataset(format!("{}:{}: {msg}", path.display(), line + 1));
    match lines.next() {
        Some((_, h)) if h.split(',').map(str::trim).eq(header.iter().copied()) => {}
        Some((i, h)) => return Err(bad(i, format!("expected header `{}`, found `{h}`", header.join(",")))),
        None => return Err(bad(0, "empty file".into())),
    }
    let mut rows = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != header.len() {
            return Err(bad(i, format!("expected {} fields, found {}", header.len(), fields.len())));
        }
        let name = fields[0].clone();
        check_filename(&name).map_err(|e| bad(i, e.to_string()))?;
        if rows.insert(name.clone(), fields[1..].to_vec()).is_some() {
            return Err(bad(i, format!("duplicate filename `{name}`")));
        }
    }
    Ok(Some(rows))
}

fn parse_field<T: std::str::FromStr>(path: &Path, file: &str, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Dataset(format!("{}: bad value `{field}` for {file}", path.display())))
}

/// Loads one split, validating it against the manifest and the directory
/// contents.
pub fn load_dataset(root: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    let expected = *manifest
        .splits
        .get(&split)
        .ok_or_else(|| Error::Dataset(format!("manifest has no `{split}` split")))?;
    let dir = root.join(split.dir_name());

    let labels_path = dir.join("labels.csv");
    let ills_path = dir.join("illuminants.csv");
    let masks_path = dir.join("masks.csv");
    let labels = read_csv(&labels_path, &["filename", "class_id"])?;
    let ills = read_csv(&ills_path, &["filename", "r", "g", "b"])?;
    let masks = read_csv(&masks_path, &["filename", "x0", "y0", "x1", "y1"])?;

    let names: BTreeSet<String> = match (&labels, &ills) {
        (None, None) => {
            return Err(Error::Dataset(format!(
                "{} has neither labels.csv nor illuminants.csv",
                dir.display()
            )))
        }
        (Some(l), None) => l.keys().cloned().collect(),
        (None, Some(i)) => i.keys().cloned().collect(),
        (Some(l), Some(i)) => {
            if !l.keys().eq(i.keys()) {
                return Err(Error::Dataset(format!(
                    "labels.csv and illuminants.csv in {} list different files",
                    dir.display()
                )));
            }
            l.keys().cloned().collect()
        }
    };
    if let Some(m) = &masks {
        if let Some(extra) = m.keys().find(|k| !names.contains(*k)) {
            return Err(Error::Dataset(format!("masks.csv references unknown file `{extra}`")));
        }
    }
    if names.len() != expected {
        return Err(Error::Dataset(format!(
            "manifest declares {expected} `{split}` images but the CSVs list {}",
            names.len()
        )));
    }
    let on_disk = list_ppm(&dir)?;
    if let Some(stray) = on_disk.iter().find(|f| !names.contains(*f)) {
        return Err(Error::Dataset(format!("{} is not referenced by any CSV", dir.join(stray).display())));
    }

    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let path = dir.join(&name);
        if !on_disk.contains(&name) {
            return Err(Error::Dataset(format!("referenced file {} does not exist", path.display())));
        }
        let image = read_image(&path)?.with_space(manifest.color_space);
        if let Some(s) = manifest.image_size {
            if image.width() != s || image.height() != s {
                return Err(Error::Dataset(format!(
                    "{} is {}×{}, manifest says {s}×{s}",
                    path.display(),
                    image.width(),
                    image.height()
                )));
            }
        }
        let label = match &labels {
            Some(l) => {
                let v: usize = parse_field(&labels_path, &name, &l[&name][0])?;
                if let Some(k) = manifest.n_classes {
                    if v >= k {
                        return Err(Error::Dataset(format!("{name}: class {v} out of range for {k} classes")));
                    }
                }
                Some(v)
            }
            None => None,
        };
        let listed_illuminant = match &ills {
            Some(i) => {
                let row = &i[&name];
                let mut rgb = [0.0; 3];
                for c in 0..3 {
                    rgb[c] = parse_field(&ills_path, &name, &row[c])?;
                }
                let rho = Illuminant::from_rgb(rgb).map_err(|e| Error::Dataset(format!("{name}: {e}")))?;
                Some(rho)
            }
            None => None,
        };
        let illuminant = listed_illuminant.map(|rho| rho.green_normalized());
        let mask = match masks.as_ref().and_then(|m| m.get(&name)) {
            Some(row) => {
                let mut v = [0usize; 4];
                for c in 0..4 {
                    v[c] = parse_field(&masks_path, &name, &row[c])?;
                }
                let rect = MaskRect::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::Dataset(format!("{name}: {e}")))?;
                rect.validate_for(image.width(), image.height())
                    .map_err(|e| Error::Dataset(format!("{name}: {e}")))?;
                Some(rect)
            }
            None => None,
        };
        items.push(LabeledImage {
            filename: name,
            image,
            label,
            illuminant,
            listed_illuminant,
            mask,
        });
    }
    Ok(Dataset {
        manifest,
        split,
        items,
    })
}

fn list_ppm(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path: PathBuf = entry.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            out.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    Ok(out)
}
