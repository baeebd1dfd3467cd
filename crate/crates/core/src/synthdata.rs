//! Synthetic multi-annotator segmentation task with a known discrete label
//! distribution, and its on-disk format.
//!
//! Each image shows one noisy filled ellipse. Every annotator draws a mode
//! (for example the plain blob or the blob dilated by two pixels), perturbs
//! the contour and rasterizes the result. A dataset directory holds
//! `manifest.json` plus binary PGM files for images and masks.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{iou, BinaryMask};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const FOREGROUND: f64 = 0.8;
const BACKGROUND: f64 = 0.2;
const PIXEL_NOISE: f64 = 0.05;

/// Morphological transform applied to an annotator's contour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskTransform {
    Base,
    Dilate(u32),
    Erode(u32),
}

impl fmt::Display for MaskTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskTransform::Base => write!(f, "base"),
            MaskTransform::Dilate(r) => write!(f, "dilate{r}"),
            MaskTransform::Erode(r) => write!(f, "erode{r}"),
        }
    }
}

impl FromStr for MaskTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let radius = |rest: &str| {
            rest.parse::<u32>()
                .ok()
                .filter(|r| *r >= 1)
                .ok_or_else(|| Error::invalid(format!("bad mask transform {s:?}")))
        };
        if s == "base" {
            Ok(MaskTransform::Base)
        } else if let Some(rest) = s.strip_prefix("dilate") {
            Ok(MaskTransform::Dilate(radius(rest)?))
        } else if let Some(rest) = s.strip_prefix("erode") {
            Ok(MaskTransform::Erode(radius(rest)?))
        } else {
            Err(Error::invalid(format!(
                "unknown mask transform {s:?} (expected base, dilateN or erodeN)"
            )))
        }
    }
}

impl MaskTransform {
    pub fn apply(&self, mask: &BinaryMask) -> BinaryMask {
        match *self {
            MaskTransform::Base => mask.clone(),
            MaskTransform::Dilate(r) => morph(mask, r, true),
            MaskTransform::Erode(r) => morph(mask, r, false),
        }
    }
}

/// Disk structuring element of radius `r`.
fn morph(mask: &BinaryMask, r: u32, dilate: bool) -> BinaryMask {
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let r = r as i64;
    let mut out = BinaryMask::empty(mask.height(), mask.width());
    for y in 0..h {
        for x in 0..w {
            let mut hit = !dilate;
            'disk: for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (yy, xx) = (y + dy, x + dx);
                    let v = yy >= 0 && yy < h && xx >= 0 && xx < w && mask.get(yy as usize, xx as usize);
                    if dilate && v {
                        hit = true;
                        break 'disk;
                    }
                    if !dilate && !v {
                        hit = false;
                        break 'disk;
                    }
                }
            }
            out.set(y as usize, x as usize, hit);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mode {
    pub transform: MaskTransform,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub image_size: usize,
    pub modes: Vec<Mode>,
    /// Contour jitter std in pixels, applied to both radii.
    pub jitter_std: f64,
    pub annotators: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            modes: vec![
                Mode {
                    transform: MaskTransform::Base,
                    prob: 0.7,
                },
                Mode {
                    transform: MaskTransform::Dilate(2),
                    prob: 0.3,
                },
            ],
            jitter_std: 0.5,
            annotators: 2,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::invalid("image_size must be at least 8"));
        }
        if self.modes.is_empty() {
            return Err(Error::invalid("at least one mode is required"));
        }
        if self.modes.iter().any(|m| !(m.prob >= 0.0 && m.prob <= 1.0)) {
            return Err(Error::invalid("mode probabilities must lie in [0, 1]"));
        }
        let total: f64 = self.modes.iter().map(|m| m.prob).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mode probabilities must sum to 1, got {total}"
            )));
        }
        if self.annotators < 2 {
            return Err(Error::invalid("at least 2 annotators are required"));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::invalid("jitter std must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn mode_probs(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.prob).collect()
    }

    fn draw_mode(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, m) in self.modes.iter().enumerate() {
            acc += m.prob;
            if u < acc {
                return k;
            }
        }
        // Rounding left `acc` just under 1; take the last mode with mass.
        self.modes.iter().rposition(|m| m.prob > 0.0).unwrap_or(0)
    }
}

/// Ellipse geometry in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Blob {
    fn random(size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        Self {
            cx: rng.random_range(s * 5.0 / 16.0..=s * 11.0 / 16.0),
            cy: rng.random_range(s * 5.0 / 16.0..=s * 11.0 / 16.0),
            rx: rng.random_range(s / 8.0..=s / 4.0),
            ry: rng.random_range(s / 8.0..=s / 4.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    }

    fn contains(&self, x: f64, y: f64, rx: f64, ry: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / rx;
        let v = (-dx * s + dy * c) / ry;
        u * u + v * v <= 1.0
    }

    pub fn rasterize(&self, size: usize, rx: f64, ry: f64) -> BinaryMask {
        let mut m = BinaryMask::empty(size, size);
        if rx <= 0.0 || ry <= 0.0 {
            return m;
        }
        for y in 0..size {
            for x in 0..size {
                m.set(y, x, self.contains(x as f64, y as f64, rx, ry));
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One image with its annotator masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub id: String,
    pub split: Split,
    pub blob: Blob,
    /// Row-major grey levels, `image_size²` bytes.
    pub image: Vec<u8>,
    pub masks: Vec<BinaryMask>,
    pub mode_ids: Vec<usize>,
}

impl MaskSet {
    /// Image scaled to `[0, 1]`.
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|v| *v as f64 / 255.0).collect()
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(&self.image);
        for m in &self.masks {
            h.update(mask_bytes(m));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub samples: Vec<MaskSet>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&MaskSet> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Empirical frequency of each mode over all annotator draws.
    pub fn mode_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.spec.modes.len()];
        for s in &self.samples {
            for &k in &s.mode_ids {
                counts[k] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        counts.iter().map(|c| *c as f64 / total.max(1) as f64).collect()
    }

    /// Noise-free mask of every mode for `blob`.
    pub fn templates(&self, blob: &Blob) -> Vec<BinaryMask> {
        templates(&self.spec, blob)
    }
}

pub fn templates(spec: &TaskSpec, blob: &Blob) -> Vec<BinaryMask> {
    let base = blob.rasterize(spec.image_size, blob.rx, blob.ry);
    spec.modes.iter().map(|m| m.transform.apply(&base)).collect()
}

/// Index of the mode template with the highest IoU; ties go to the lower index.
pub fn classify(spec: &TaskSpec, blob: &Blob, mask: &BinaryMask) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, t) in templates(spec, blob).iter().enumerate() {
        let score = iou(t, mask)?;
        if score > best.1 {
            best = (k, score);
        }
    }
    Ok(best.0)
}

/// Split sizes for `count` samples: three quarters train, an eighth each
/// for validation and test.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let train = count * 3 / 4;
    let val = count / 8;
    (train, val, count - train - val)
}

pub fn generate(spec: &TaskSpec, count: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let (train, val, _) = split_sizes(count);
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            generate_one(spec, seed, i, split)
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

fn generate_one(spec: &TaskSpec, seed: u64, index: usize, split: Split) -> MaskSet {
    let mut rng = rng::stream(seed, index as u64);
    let size = spec.image_size;
    let blob = Blob::random(size, &mut rng);
    let pixel_noise = Normal::new(0.0, PIXEL_NOISE).expect("valid std");
    let base = blob.rasterize(size, blob.rx, blob.ry);
    let image = base
        .bits()
        .iter()
        .map(|&inside| {
            let v = if inside { FOREGROUND } else { BACKGROUND } + pixel_noise.sample(&mut rng);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();

    let jitter = Normal::new(0.0, spec.jitter_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut masks = Vec::with_capacity(spec.annotators);
    let mut mode_ids = Vec::with_capacity(spec.annotators);
    for _ in 0..spec.annotators {
        let k = spec.draw_mode(&mut rng);
        let (jx, jy) = if spec.jitter_std > 0.0 {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let contour = blob.rasterize(size, blob.rx + jx, blob.ry + jy);
        masks.push(spec.modes[k].transform.apply(&contour));
        mode_ids.push(k);
    }
    MaskSet {
        id: format!("s{index:05}"),
        split,
        blob,
        image,
        masks,
        mode_ids,
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestMode {
    name: String,
    prob: f64,
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    image: String,
    masks: Vec<String>,
    mode_ids: Vec<usize>,
    split: Split,
    blob: Blob,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    image_size: usize,
    modes: Vec<ManifestMode>,
    jitter_std: f64,
    annotators: usize,
    samples: Vec<ManifestSample>,
}

fn mask_bytes(m: &BinaryMask) -> Vec<u8> {
    m.bits().iter().map(|b| if *b { 255 } else { 0 }).collect()
}

fn encode_pgm(w: usize, h: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Parses a binary PGM with maxval ≤ 255.
fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM".into());
    }
    let num = |t: String| t.parse::<usize>().map_err(|_| format!("bad header field {t:?}"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let data_start = pos + 1;
    let need = w * h;
    if bytes.len() < data_start + need {
        return Err(format!(
            "truncated pixel data ({} of {need} bytes)",
            bytes.len().saturating_sub(data_start)
        ));
    }
    Ok((w, h, bytes[data_start..data_start + need].to_vec()))
}

fn image_path(id: &str) -> String {
    format!("images/{id}.pgm")
}

fn mask_path(id: &str, k: usize) -> String {
    format!("masks/{id}_{k}.pgm")
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let size = dataset.spec.image_size;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    dataset.samples.par_iter().try_for_each(|s| -> Result<()> {
        let p = dir.join(image_path(&s.id));
        fs::write(&p, encode_pgm(size, size, &s.image)).map_err(|e| Error::io(&p, e))?;
        for (k, m) in s.masks.iter().enumerate() {
            let p = dir.join(mask_path(&s.id, k));
            fs::write(&p, encode_pgm(m.width(), m.height(), &mask_bytes(m)))
                .map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    })?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        image_size: size,
        modes: dataset
            .spec
            .modes
            .iter()
            .map(|m| ManifestMode {
                name: m.transform.to_string(),
                prob: m.prob,
            })
            .collect(),
        jitter_std: dataset.spec.jitter_std,
        annotators: dataset.spec.annotators,
        samples: dataset
            .samples
            .iter()
            .map(|s| ManifestSample {
                id: s.id.clone(),
                image: image_path(&s.id),
                masks: (0..s.masks.len()).map(|k| mask_path(&s.id, k)).collect(),
                mode_ids: s.mode_ids.clone(),
                split: s.split,
                blob: s.blob,
                checksum: s.checksum(),
            })
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("malformed manifest {}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let modes = manifest
        .modes
        .iter()
        .map(|m| {
            Ok(Mode {
                transform: m.name.parse()?,
                prob: m.prob,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = TaskSpec {
        image_size: manifest.image_size,
        modes,
        jitter_std: manifest.jitter_std,
        annotators: manifest.annotators,
    };
    spec.validate()
        .map_err(|e| Error::Dataset(format!("manifest task spec: {e}")))?;

    let samples = manifest
        .samples
        .par_iter()
        .map(|s| load_sample(dir, &spec, s))
        .collect::<Result<Vec<_>>>()?;
    let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Dataset("duplicate sample ids in manifest".into()));
    }
    Ok(Dataset { spec, samples })
}

fn load_sample(dir: &Path, spec: &TaskSpec, s: &ManifestSample) -> Result<MaskSet> {
    let fail = |what: String| Error::Dataset(format!("sample {}: {what}", s.id));
    let read = |rel: &str| -> Result<(usize, usize, Vec<u8>)> {
        let p = dir.join(rel);
        let bytes = fs::read(&p).map_err(|e| fail(format!("cannot read {}: {e}", p.display())))?;
        decode_pgm(&bytes).map_err(|e| fail(format!("{rel}: {e}")))
    };
    let (w, h, image) = read(&s.image)?;
    if w != spec.image_size || h != spec.image_size {
        return Err(fail(format!(
            "image is {w}x{h}, manifest says {0}x{0}",
            spec.image_size
        )));
    }
    if s.masks.len() != s.mode_ids.len() {
        return Err(fail("mask and mode_id counts differ".into()));
    }
    if let Some(k) = s.mode_ids.iter().find(|k| **k >= spec.modes.len()) {
        return Err(fail(format!("mode id {k} out of range")));
    }
    let mut masks = Vec::with_capacity(s.masks.len());
    for rel in &s.masks {
        let (mw, mh, data) = read(rel)?;
        if (mw, mh) != (w, h) {
            return Err(fail(format!(
                "mask {rel} is {mw}x{mh} but the image is {w}x{h}"
            )));
        }
        masks.push(BinaryMask::new(mh, mw, data.iter().map(|v| *v > 127).collect())?);
    }
    let sample = MaskSet {
        id: s.id.clone(),
        split: s.split,
        blob: s.blob,
        image,
        masks,
        mode_ids: s.mode_ids.clone(),
    };
    if sample.checksum() != s.checksum {
        return Err(fail("checksum mismatch".into()));
    }
    Ok(sample)
}
