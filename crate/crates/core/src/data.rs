//! Dataset plumbing: annotated images, manifest files, PNG IO, a synthetic
//! multi-face scene generator, and the identity codebook.
//!
//! Manifests are whitespace-separated lines `path W H x0 y0 x1 y1 ...` with
//! normalized boxes, one image per line; `#` starts a comment. Paths must
//! not contain whitespace. Images travel as PNG so stored watermark
//! residuals survive byte-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, FaceBox};
use crate::graph::Real;
use crate::noise;
use crate::stego::MessageMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// One dataset record: an image location plus its normalized face boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub faces: Vec<[f64; 4]>,
    pub split: Split,
}

impl AnnotatedImage {
    pub fn new(
        image_path: impl Into<PathBuf>,
        width: u32,
        height: u32,
        faces: Vec<[f64; 4]>,
    ) -> Result<Self> {
        let rec = AnnotatedImage {
            image_path: image_path.into(),
            width,
            height,
            faces,
            split: Split::Train,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        for v in &self.faces {
            geometry::validate_norm_box(v)?;
        }
        Ok(())
    }

    /// Boxes in pixel coordinates for this image's dimensions.
    pub fn face_boxes(&self) -> Result<Vec<FaceBox>> {
        self.faces
            .iter()
            .map(|v| FaceBox::from_normalized(*v, self.width, self.height))
            .collect()
    }
}

/// Chooses which boxes an image is processed with. The default passthrough
/// trusts stored annotations, so forensic runs are deterministic; an external
/// detector can be plugged in as a closure.
pub trait FaceDetector {
    fn detect(&self, image: &Array3<f64>, record: &AnnotatedImage) -> Result<Vec<[f64; 4]>>;
}

/// Returns the stored annotations unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnnotationDetector;

impl FaceDetector for AnnotationDetector {
    fn detect(&self, _image: &Array3<f64>, record: &AnnotatedImage) -> Result<Vec<[f64; 4]>> {
        Ok(record.faces.clone())
    }
}

/// Adapter for an externally supplied detection function.
pub struct DetectorFn<F>(pub F);

impl<F> FaceDetector for DetectorFn<F>
where
    F: Fn(&Array3<f64>) -> Result<Vec<[f64; 4]>>,
{
    fn detect(&self, image: &Array3<f64>, _record: &AnnotatedImage) -> Result<Vec<[f64; 4]>> {
        (self.0)(image)
    }
}

fn manifest_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Parse a manifest file into validated records. Records get the `Train`
/// split; callers repartition as needed.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotatedImage>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let image_path = tok.next().expect("non-empty line has a token");
        let mut next_num = |what: &str| -> Result<f64> {
            let t = tok
                .next()
                .ok_or_else(|| manifest_err(path, line_no, format!("missing {what}")))?;
            t.parse::<f64>()
                .map_err(|_| manifest_err(path, line_no, format!("invalid {what}: {t:?}")))
        };
        let width = next_num("width")?;
        let height = next_num("height")?;
        if width.fract() != 0.0 || height.fract() != 0.0 || width < 1.0 || height < 1.0 {
            return Err(manifest_err(path, line_no, "dimensions must be positive integers"));
        }
        let mut coords = Vec::new();
        for t in tok {
            let v: f64 = t
                .parse()
                .map_err(|_| manifest_err(path, line_no, format!("invalid coordinate: {t:?}")))?;
            coords.push(v);
        }
        if coords.len() % 4 != 0 {
            return Err(manifest_err(
                path,
                line_no,
                format!("expected 4 coordinates per face, got {} values", coords.len()),
            ));
        }
        let faces: Vec<[f64; 4]> = coords.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        for f in &faces {
            geometry::validate_norm_box(f)
                .map_err(|e| manifest_err(path, line_no, e.to_string()))?;
        }
        out.push(AnnotatedImage {
            image_path: PathBuf::from(image_path),
            width: width as u32,
            height: height as u32,
            faces,
            split: Split::Train,
        });
    }
    Ok(out)
}

/// Write records in the manifest format read by [`load_annotations`].
/// Coordinates use shortest round-trippable decimal form.
pub fn save_annotations(path: &Path, records: &[AnnotatedImage]) -> Result<()> {
    let mut text = String::new();
    for rec in records {
        rec.validate()?;
        let p = rec.image_path.to_string_lossy();
        if p.split_whitespace().count() != 1 {
            return Err(Error::validation(format!(
                "manifest paths must not contain whitespace: {p:?}"
            )));
        }
        let _ = write!(text, "{} {} {}", p, rec.width, rec.height);
        for f in &rec.faces {
            let _ = write!(text, " {} {} {} {}", f[0], f[1], f[2], f[3]);
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load a PNG (or any image the backend decodes) as channel-first floats in
/// `[0,1]`.
pub fn load_image_file<F: Real>(path: &Path) -> Result<Array3<F>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(noise::from_rgb8(img.as_raw(), h, w))
}

/// Load the record's image relative to `base_dir` and verify its dimensions
/// match the annotation.
pub fn load_image<F: Real>(record: &AnnotatedImage, base_dir: &Path) -> Result<Array3<F>> {
    let path = base_dir.join(&record.image_path);
    let img = load_image_file::<F>(&path)?;
    let (_, h, w) = img.dim();
    if (w as u32, h as u32) != (record.width, record.height) {
        return Err(Error::validation(format!(
            "{}: annotation says {}x{}, file is {}x{}",
            path.display(),
            record.width,
            record.height,
            w,
            h
        )));
    }
    Ok(img)
}

/// Save a `[0,1]` image as 8-bit PNG.
pub fn save_image<F: Real>(path: &Path, image: &Array3<F>) -> Result<()> {
    let (rgb, w, h) = noise::to_rgb8(image);
    let buf: image::RgbImage = image::ImageBuffer::from_raw(w, h, rgb)
        .ok_or_else(|| Error::validation("image buffer size mismatch"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
}

/// A generated scene: pixel data plus its exact annotation.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: Array3<f64>,
    pub record: AnnotatedImage,
}

/// Procedural multi-face scenes with pixel-exact annotations. Faces are laid
/// out on a shuffled grid so they never overlap; sizes are drawn around
/// 64 px (sd 24) and clamped to `[16, cell - 4]`.
pub fn generate_synthetic_dataset(
    count: usize,
    canvas: (u32, u32),
    faces_per_image: std::ops::RangeInclusive<usize>,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<SyntheticScene>> {
    let (w, h) = canvas;
    if w < 128 || h < 128 {
        return Err(Error::validation("canvas must be at least 128x128"));
    }
    let (lo, hi) = (*faces_per_image.start(), *faces_per_image.end());
    if lo < 1 || hi > 8 || lo > hi {
        return Err(Error::validation("faces per image must lie within [1, 8]"));
    }
    let grid = (hi as f64).sqrt().ceil() as u32;
    let (cell_w, cell_h) = (w / grid, h / grid);
    let max_side = (cell_w.min(cell_h) as f64 - 4.0).floor();
    if max_side < 16.0 {
        return Err(Error::validation(format!(
            "cannot pack {hi} faces of at least 16 px on a {w}x{h} canvas"
        )));
    }
    let size_dist = rand_distr::Normal::new(64.0_f64, 24.0).expect("valid normal");
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let mut image = background(w as usize, h as usize, rng);
        let n = rng.random_range(lo..=hi);
        let mut cells: Vec<(u32, u32)> =
            (0..grid).flat_map(|cy| (0..grid).map(move |cx| (cx, cy))).collect();
        cells.shuffle(rng);
        let mut faces = Vec::with_capacity(n);
        for &(cx, cy) in cells.iter().take(n) {
            let side = size_dist.sample(rng).clamp(16.0, max_side).round() as u32;
            let x0 = cx * cell_w + rng.random_range(0..=(cell_w - side));
            let y0 = cy * cell_h + rng.random_range(0..=(cell_h - side));
            render_face(&mut image, x0, y0, side, rng);
            faces.push([
                x0 as f64 / w as f64,
                y0 as f64 / h as f64,
                (x0 + side) as f64 / w as f64,
                (y0 + side) as f64 / h as f64,
            ]);
        }
        let record = AnnotatedImage::new(format!("scene-{i:05}.png"), w, h, faces)?;
        scenes.push(SyntheticScene { image, record });
    }
    Ok(scenes)
}

fn background(w: usize, h: usize, rng: &mut ChaCha20Rng) -> Array3<f64> {
    let phase: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>() * std::f64::consts::TAU);
    let tint: [f64; 3] = std::array::from_fn(|_| 0.3 + 0.35 * rng.random::<f64>());
    let grain: f64 = 0.02 + 0.02 * rng.random::<f64>();
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let wave = 0.5
                + 0.2 * ((x as f64 / 17.0 + phase[0]).sin() + (y as f64 / 23.0 + phase[1]).cos())
                + 0.1 * ((x as f64 / 5.0 + phase[2]).sin() * (y as f64 / 7.0 + phase[3]).cos());
            let noise = grain * (rng.random::<f64>() - 0.5);
            for c in 0..3 {
                out[[c, y, x]] = (tint[c] * wave + noise).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn render_face(image: &mut Array3<f64>, x0: u32, y0: u32, side: u32, rng: &mut ChaCha20Rng) {
    let params = noise::donor_params(rng);
    for dy in 0..side {
        for dx in 0..side {
            let u = (dx as f64 + 0.5) / side as f64;
            let v = (dy as f64 + 0.5) / side as f64;
            let px = noise::donor_pixel(&params, u, v);
            for c in 0..3 {
                image[[c, (y0 + dy) as usize, (x0 + dx) as usize]] = px[c];
            }
        }
    }
}

/// Write scenes as PNG files plus a manifest, returning the manifest path.
pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for scene in scenes {
        save_image(&dir.join(&scene.record.image_path), &scene.image)?;
        records.push(scene.record.clone());
    }
    let manifest = dir.join("manifest.txt");
    save_annotations(&manifest, &records)?;
    Ok(manifest)
}

/// Identity codebook: maps identity IDs to payload codewords kept pairwise
/// far apart in Hamming distance so decoding tolerates residual bit errors.
///
/// Mutation needs `&mut self`; shared reads are safe across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityRegistry {
    payload_len: usize,
    min_distance: usize,
    entries: BTreeMap<String, Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    version: u32,
    payload_len: usize,
    min_distance: usize,
    entries: BTreeMap<String, String>,
}

const REGISTRY_VERSION: u32 = 1;

/// Minimum pairwise codeword distance for the default 15-bit payload.
pub const DEFAULT_MIN_DISTANCE: usize = 5;

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

impl IdentityRegistry {
    pub fn new(payload_len: usize, min_distance: usize) -> Result<Self> {
        if payload_len == 0 {
            return Err(Error::validation("payload length must be positive"));
        }
        if min_distance == 0 || min_distance > payload_len {
            return Err(Error::validation(
                "minimum distance must lie in [1, payload_len]",
            ));
        }
        Ok(IdentityRegistry {
            payload_len,
            min_distance,
            entries: BTreeMap::new(),
        })
    }

    pub fn payload_len(&self) -> usize {
        self.payload_len
    }

    pub fn min_distance(&self) -> usize {
        self.min_distance
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn codeword(&self, id: &str) -> Option<&[u8]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    /// Add one identity. Rejects duplicate IDs and codewords closer than the
    /// minimum distance to any existing entry.
    pub fn insert(&mut self, id: impl Into<String>, codeword: Vec<u8>) -> Result<()> {
        let id = id.into();
        if codeword.len() != self.payload_len {
            return Err(Error::validation(format!(
                "codeword for {id:?} has {} bits, registry uses {}",
                codeword.len(),
                self.payload_len
            )));
        }
        if codeword.iter().any(|&b| b > 1) {
            return Err(Error::validation(format!("codeword for {id:?} has non-binary entries")));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::validation(format!("identity {id:?} already registered")));
        }
        for (other, cw) in &self.entries {
            let d = hamming(cw, &codeword);
            if d < self.min_distance {
                return Err(Error::validation(format!(
                    "codeword for {id:?} is distance {d} from {other:?}, minimum is {}",
                    self.min_distance
                )));
            }
        }
        self.entries.insert(id, codeword);
        Ok(())
    }

    /// Fill the registry with `count` fresh identities named `id-NNNN` using
    /// rejection sampling. Errors when the code space cannot fit more
    /// codewords at this distance.
    pub fn generate(&mut self, count: usize, rng: &mut ChaCha20Rng) -> Result<()> {
        let max_attempts = 20_000usize;
        let start = self.entries.len();
        for k in 0..count {
            let mut placed = false;
            for _ in 0..max_attempts {
                let cw: Vec<u8> = (0..self.payload_len).map(|_| rng.random_range(0..2u8)).collect();
                let ok = self
                    .entries
                    .values()
                    .all(|other| hamming(other, &cw) >= self.min_distance);
                if ok {
                    self.entries.insert(format!("id-{:04}", start + k), cw);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::validation(format!(
                    "could not place codeword {} of {count} at distance {} in {} bits",
                    k + 1,
                    self.min_distance,
                    self.payload_len
                )));
            }
        }
        Ok(())
    }

    /// Radius within which a decoded payload still resolves to an identity.
    pub fn match_radius(&self) -> f64 {
        self.payload_len as f64 / 4.0
    }

    /// Nearest identity by Hamming distance, or `None` when the best match
    /// is farther than the radius or tied between two identities.
    pub fn match_codeword(&self, bits: &[u8]) -> Option<(&str, usize)> {
        if bits.len() != self.payload_len {
            return None;
        }
        let mut best: Option<(&str, usize)> = None;
        let mut tied = false;
        for (id, cw) in &self.entries {
            let d = hamming(cw, bits);
            match best {
                Some((_, bd)) if d > bd => {}
                Some((_, bd)) if d == bd => tied = true,
                _ => {
                    best = Some((id, d));
                    tied = false;
                }
            }
        }
        match best {
            Some((id, d)) if !tied && (d as f64) <= self.match_radius() => Some((id, d)),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = RegistryFile {
            version: REGISTRY_VERSION,
            payload_len: self.payload_len,
            min_distance: self.min_distance,
            entries: self
                .entries
                .iter()
                .map(|(id, cw)| {
                    (id.clone(), cw.iter().map(|&b| char::from(b'0' + b)).collect())
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RegistryFile = serde_json::from_str(&text)?;
        if file.version != REGISTRY_VERSION {
            return Err(Error::validation(format!(
                "registry version {} is not supported (expected {REGISTRY_VERSION})",
                file.version
            )));
        }
        let mut reg = IdentityRegistry::new(file.payload_len, file.min_distance)?;
        for (id, bits) in file.entries {
            let cw: Result<Vec<u8>> = bits
                .chars()
                .map(|c| match c {
                    '0' => Ok(0u8),
                    '1' => Ok(1u8),
                    other => Err(Error::validation(format!(
                        "registry entry {id:?} has invalid bit {other:?}"
                    ))),
                })
                .collect();
            reg.insert(id, cw?)?;
        }
        Ok(reg)
    }
}

/// Draw one registry identity per face, uniformly with replacement.
pub fn assign_messages(
    registry: &IdentityRegistry,
    n_faces: usize,
    rng: &mut ChaCha20Rng,
) -> Result<MessageMatrix> {
    if registry.is_empty() && n_faces > 0 {
        return Err(Error::validation("cannot assign messages from an empty registry"));
    }
    let ids: Vec<&str> = registry.ids().collect();
    let mut bits = Array2::zeros((n_faces, registry.payload_len()));
    let mut identities = Vec::with_capacity(n_faces);
    for i in 0..n_faces {
        let id = ids[rng.random_range(0..ids.len())];
        let cw = registry.codeword(id).expect("listed id resolves");
        for (j, &b) in cw.iter().enumerate() {
            bits[[i, j]] = b;
        }
        identities.push(Some(id.to_string()));
    }
    MessageMatrix::from_bits(bits, identities)
}

/// Histograms (8 px bins) and mean of absolute face sizes across a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionStats {
    pub bin_px: f64,
    pub hist_w: Vec<usize>,
    pub hist_h: Vec<usize>,
    pub mean_w: f64,
    pub mean_h: f64,
    pub n_faces: usize,
}

pub fn face_resolution_stats(records: &[AnnotatedImage]) -> Result<ResolutionStats> {
    let bin_px = 8.0;
    let mut widths = Vec::new();
    let mut heights = Vec::new();
    for rec in records {
        for f in &rec.faces {
            let p = geometry::to_absolute(f, rec.width, rec.height)?;
            widths.push(p[2] - p[0]);
            heights.push(p[3] - p[1]);
        }
    }
    if widths.is_empty() {
        return Err(Error::validation("no faces in dataset"));
    }
    let max = widths
        .iter()
        .chain(heights.iter())
        .fold(0.0_f64, |m, &v| m.max(v));
    let bins = (max / bin_px).floor() as usize + 1;
    let mut hist_w = vec![0usize; bins];
    let mut hist_h = vec![0usize; bins];
    for &v in &widths {
        hist_w[(v / bin_px).floor() as usize] += 1;
    }
    for &v in &heights {
        hist_h[(v / bin_px).floor() as usize] += 1;
    }
    let n = widths.len();
    Ok(ResolutionStats {
        bin_px,
        hist_w,
        hist_h,
        mean_w: widths.iter().sum::<f64>() / n as f64,
        mean_h: heights.iter().sum::<f64>() / n as f64,
        n_faces: n,
    })
}
