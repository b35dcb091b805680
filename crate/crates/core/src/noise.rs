//! Distortion pool with exact parameter records and ground-truth tamper masks.
//!
//! Benign distortions (JPEG, blur, saturation, hue, additive noise) model
//! what happens to an image in normal circulation; they leave the tamper mask
//! empty. The malicious distortion replaces face interiors with a
//! procedurally generated donor face, feathered so the outermost band of the
//! box keeps an attenuated copy of the original signal; its mask is the
//! rasterized union of the swapped boxes, and the swapped boxes are reported
//! for supervision.
//!
//! Every distortion is replayable: the sampled parameters (including noise
//! and donor seeds) fully determine the output, and the graph path and the
//! value path share one implementation.

use ndarray::{Array2, Array3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::FaceBox;
use crate::graph::{Graph, Real, Var};

/// Distortion category a training branch draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    /// Anything in the pool, benign or malicious.
    Arbitrary,
    /// Benign transforms only.
    Common,
    /// Face replacement, optionally recompressed by one benign transform.
    Malicious,
}

/// One concrete distortion with all parameters pinned.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Distortion {
    Identity,
    /// Real codec round trip at the given quality.
    Jpeg { quality: u8 },
    /// Separable Gaussian blur, kernel size in {3, 5}.
    Blur { ksize: usize, sigma: f64 },
    /// Chroma gain `1 +/- factor` in luma/chroma space.
    Saturation { factor: f64, increase: bool },
    /// Chroma plane rotation by `2*pi*factor`, sign from `increase`.
    Hue { factor: f64, increase: bool },
    /// Additive Gaussian pixel noise, replayable from `seed`.
    Noise { sigma: f64, seed: u64 },
    /// Donor-face replacement inside a random non-empty subset of the boxes.
    /// `feather` is the inner blend band as a fraction of the short box side;
    /// `then` optionally re-applies one benign distortion afterwards.
    FaceSwap {
        seed: u64,
        feather: f64,
        then: Option<Box<Distortion>>,
    },
}

impl Distortion {
    pub fn is_malicious(&self) -> bool {
        matches!(self, Distortion::FaceSwap { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Distortion::Identity => Ok(()),
            Distortion::Jpeg { quality } => {
                if !(1..=100).contains(quality) {
                    return Err(Error::validation(format!("jpeg quality {quality} out of [1,100]")));
                }
                Ok(())
            }
            Distortion::Blur { ksize, sigma } => {
                if *ksize != 3 && *ksize != 5 {
                    return Err(Error::validation(format!("blur kernel {ksize} not in {{3,5}}")));
                }
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::validation("blur sigma must be positive"));
                }
                Ok(())
            }
            Distortion::Saturation { factor, .. } | Distortion::Hue { factor, .. } => {
                if !(0.0..=1.0).contains(factor) {
                    return Err(Error::validation(format!("color factor {factor} out of [0,1]")));
                }
                Ok(())
            }
            Distortion::Noise { sigma, .. } => {
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::validation("noise sigma must be non-negative"));
                }
                Ok(())
            }
            Distortion::FaceSwap { feather, then, .. } => {
                if !(0.0..=0.5).contains(feather) {
                    return Err(Error::validation(format!("feather {feather} out of [0,0.5]")));
                }
                match then.as_deref() {
                    Some(d) if d.is_malicious() => Err(Error::validation("face swap cannot compose another swap")),
                    Some(d) => d.validate(),
                    None => Ok(()),
                }
            }
        }
    }
}

/// Parameter ranges the pool samples from.
pub const JPEG_QUALITY_RANGE: (u8, u8) = (50, 95);
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.5, 1.5);
pub const COLOR_FACTOR_RANGE: (f64, f64) = (0.2, 0.3);
pub const NOISE_SIGMA_RANGE: (f64, f64) = (0.005, 0.05);
pub const SWAP_FEATHER: f64 = 0.25;
/// Chance a face swap is followed by one benign distortion.
pub const SWAP_COMPOSE_PROB: f64 = 0.5;

fn sample_benign(rng: &mut ChaCha20Rng, include_identity: bool) -> Distortion {
    let lo = usize::from(!include_identity);
    match rng.random_range(lo..6) {
        0 => Distortion::Identity,
        1 => Distortion::Jpeg {
            quality: rng.random_range(JPEG_QUALITY_RANGE.0..=JPEG_QUALITY_RANGE.1),
        },
        2 => Distortion::Blur {
            ksize: *[3usize, 5].choose(rng).expect("nonempty"),
            sigma: rng.random_range(BLUR_SIGMA_RANGE.0..BLUR_SIGMA_RANGE.1),
        },
        3 => Distortion::Saturation {
            factor: rng.random_range(COLOR_FACTOR_RANGE.0..COLOR_FACTOR_RANGE.1),
            increase: rng.random(),
        },
        4 => Distortion::Hue {
            factor: rng.random_range(COLOR_FACTOR_RANGE.0..COLOR_FACTOR_RANGE.1),
            increase: rng.random(),
        },
        _ => Distortion::Noise {
            sigma: rng.random_range(NOISE_SIGMA_RANGE.0..NOISE_SIGMA_RANGE.1),
            seed: rng.random(),
        },
    }
}

fn sample_swap(rng: &mut ChaCha20Rng) -> Distortion {
    let then = if rng.random::<f64>() < SWAP_COMPOSE_PROB {
        Some(Box::new(sample_benign(rng, false)))
    } else {
        None
    };
    Distortion::FaceSwap {
        seed: rng.random(),
        feather: SWAP_FEATHER,
        then,
    }
}

/// Draws one distortion for the given branch.
pub fn sample_branch(kind: BranchKind, rng: &mut ChaCha20Rng) -> Distortion {
    match kind {
        BranchKind::Common => sample_benign(rng, true),
        BranchKind::Malicious => sample_swap(rng),
        BranchKind::Arbitrary => {
            if rng.random_range(0..7) == 6 {
                sample_swap(rng)
            } else {
                sample_benign(rng, true)
            }
        }
    }
}

/// Which faces a given swap seed replaces; never empty for `n_faces > 0`.
pub fn swap_selection(seed: u64, n_faces: usize) -> Vec<bool> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5e1e_c7ed);
    let mut sel = vec![false; n_faces];
    if n_faces == 0 {
        return sel;
    }
    for s in sel.iter_mut() {
        *s = rng.random::<f64>() < 0.5;
    }
    if sel.iter().all(|&s| !s) {
        sel[rng.random_range(0..n_faces)] = true;
    }
    sel
}

/// Half-open rasterization of boxes: rows `floor(y0)..ceil(y1)`, columns
/// `floor(x0)..ceil(x1)`, clipped to the canvas.
pub fn rasterize_mask(boxes: &[FaceBox], h: usize, w: usize) -> Array2<u8> {
    let mut mask = Array2::<u8>::zeros((h, w));
    for b in boxes {
        let [x0, y0, x1, y1] = b.pixels();
        let xa = (x0.floor().max(0.0) as usize).min(w);
        let xb = (x1.ceil().max(0.0) as usize).min(w);
        let ya = (y0.floor().max(0.0) as usize).min(h);
        let yb = (y1.ceil().max(0.0) as usize).min(h);
        for y in ya..yb {
            for x in xa..xb {
                mask[[y, x]] = 1;
            }
        }
    }
    mask
}

/// Ground truth for one distortion: tamper mask plus the replaced boxes.
pub fn ground_truth(dist: &Distortion, boxes: &[FaceBox], h: usize, w: usize) -> (Array2<u8>, Vec<FaceBox>) {
    match dist {
        Distortion::FaceSwap { seed, .. } => {
            let sel = swap_selection(*seed, boxes.len());
            let fake: Vec<FaceBox> = boxes
                .iter()
                .zip(&sel)
                .filter_map(|(b, &s)| s.then_some(*b))
                .collect();
            (rasterize_mask(&fake, h, w), fake)
        }
        _ => (Array2::zeros((h, w)), Vec::new()),
    }
}

/// Normalized Gaussian taps for a `ksize`-wide blur.
pub fn gaussian_kernel(ksize: usize, sigma: f64) -> Vec<f64> {
    let r = (ksize / 2) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// JPEG luma/chroma analysis matrix (centered chroma, no offsets).
const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

const YCC_TO_RGB: [[f64; 3]; 3] = [
    [1.0, 0.0, 1.402],
    [1.0, -0.344_136, -0.714_136],
    [1.0, 1.772, 0.0],
];

fn mat_mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

/// RGB matrix scaling both chroma channels by `gain`; luma is untouched.
pub fn saturation_matrix(gain: f64) -> [[f64; 3]; 3] {
    let d = [[1.0, 0.0, 0.0], [0.0, gain, 0.0], [0.0, 0.0, gain]];
    mat_mul3(&YCC_TO_RGB, &mat_mul3(&d, &RGB_TO_YCC))
}

/// RGB matrix rotating the chroma plane by `angle` radians.
pub fn hue_matrix(angle: f64) -> [[f64; 3]; 3] {
    let (sin, cos) = angle.sin_cos();
    let d = [[1.0, 0.0, 0.0], [0.0, cos, -sin], [0.0, sin, cos]];
    mat_mul3(&YCC_TO_RGB, &mat_mul3(&d, &RGB_TO_YCC))
}

pub(crate) fn to_rgb8<F: Real>(image: &Array3<F>) -> (Vec<u8>, u32, u32) {
    let (_, h, w) = image.dim();
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image[[c, y, x]].to_f64().clamp(0.0, 1.0);
                buf.push((v * 255.0).round() as u8);
            }
        }
    }
    (buf, w as u32, h as u32)
}

pub(crate) fn from_rgb8<F: Real>(buf: &[u8], h: usize, w: usize) -> Array3<F> {
    let mut out = Array3::<F>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[c, y, x]] = F::from_f64(buf[(y * w + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    out
}

/// Real JPEG round trip on the quantized image.
pub fn jpeg_round_trip<F: Real>(image: &Array3<F>, quality: u8) -> Result<Array3<F>> {
    let (_, h, w) = image.dim();
    let (rgb, iw, ih) = to_rgb8(image);
    let mut encoded = Vec::new();
    let mut encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut encoded, quality);
    encoder
        .encode(&rgb, iw, ih, image::ExtendedColorType::Rgb8)
        .map_err(Error::Image)?;
    let decoded = image::load_from_memory_with_format(&encoded, image::ImageFormat::Jpeg)?.into_rgb8();
    if decoded.width() != iw || decoded.height() != ih {
        return Err(Error::validation("jpeg round trip changed dimensions"));
    }
    Ok(from_rgb8(decoded.as_raw(), h, w))
}

/// Replayable per-pixel Gaussian noise field.
pub fn noise_field<F: Real>(sigma: f64, seed: u64, dim: (usize, usize, usize)) -> Array3<F> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0).expect("valid normal");
    Array3::from_shape_fn(dim, |_| F::from_f64(sigma * dist.sample(&mut rng)))
}

/// Donor face and blend weights for one box, both at canvas resolution over
/// the box's raster region. Alpha is 0 at the box border and saturates to 1
/// a feather-band inside, so the border keeps an attenuated original signal.
struct SwapOverlay<F: Real> {
    keep: Array3<F>,  // 1 - alpha over the full canvas
    donor: Array3<F>, // donor * alpha over the full canvas
}

pub(crate) fn donor_pixel(rng_consts: &DonorParams, u: f64, v: f64) -> [f64; 3] {
    let p = rng_consts;
    // smooth skin base with a soft radial falloff
    let cx = u - 0.5;
    let cy = v - 0.5;
    let radial = 1.0 - 0.55 * (cx * cx * 1.8 + cy * cy).sqrt();
    let mut px = [p.base[0] * radial, p.base[1] * radial, p.base[2] * radial];
    // darker blobs: two eyes and a mouth
    let features = [
        (0.32 + p.jitter[0], 0.38 + p.jitter[1], 0.085, 0.55),
        (0.68 + p.jitter[2], 0.38 + p.jitter[3], 0.085, 0.55),
        (0.5 + p.jitter[4], 0.72 + p.jitter[5], 0.16, 0.35),
    ];
    for &(fx, fy, fr, depth) in &features {
        let d2 = ((u - fx) / fr).powi(2) + ((v - fy) / (fr * 0.6)).powi(2);
        let fall = (-d2).exp();
        for ch in px.iter_mut() {
            *ch *= 1.0 - depth * fall;
        }
    }
    // gentle horizontal shading so the donor is never a flat constant
    let shade = 1.0 + p.shade * (u - 0.5);
    [
        (px[0] * shade).clamp(0.0, 1.0),
        (px[1] * shade).clamp(0.0, 1.0),
        (px[2] * shade).clamp(0.0, 1.0),
    ]
}

pub(crate) struct DonorParams {
    base: [f64; 3],
    jitter: [f64; 6],
    shade: f64,
}

pub(crate) fn donor_params(rng: &mut ChaCha20Rng) -> DonorParams {
    let r = 0.55 + 0.35 * rng.random::<f64>();
    DonorParams {
        base: [r, r * (0.72 + 0.1 * rng.random::<f64>()), r * (0.55 + 0.12 * rng.random::<f64>())],
        jitter: std::array::from_fn(|_| 0.05 * (rng.random::<f64>() - 0.5)),
        shade: 0.3 * (rng.random::<f64>() - 0.5),
    }
}

fn swap_overlay<F: Real>(seed: u64, boxes: &[FaceBox], sel: &[bool], h: usize, w: usize) -> SwapOverlay<F> {
    let mut keep = Array3::<F>::from_elem((3, h, w), F::one());
    let mut donor = Array3::<F>::zeros((3, h, w));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for (b, &selected) in boxes.iter().zip(sel) {
        // burn one donor per face regardless of selection so the overlay of
        // face i does not depend on which other faces were selected
        let params = donor_params(&mut rng);
        if !selected {
            continue;
        }
        let [x0, y0, x1, y1] = b.pixels();
        let (bw, bh) = (x1 - x0, y1 - y0);
        let feather_px = (SWAP_FEATHER * bw.min(bh)).max(1e-9);
        let xa = x0.floor().max(0.0) as usize;
        let xb = (x1.ceil() as usize).min(w);
        let ya = y0.floor().max(0.0) as usize;
        let yb = (y1.ceil() as usize).min(h);
        for y in ya..yb {
            let cy = y as f64 + 0.5;
            if cy <= y0 || cy >= y1 {
                continue;
            }
            for x in xa..xb {
                let cx = x as f64 + 0.5;
                if cx <= x0 || cx >= x1 {
                    continue;
                }
                let edge = (cx - x0).min(x1 - cx).min(cy - y0).min(y1 - cy);
                let alpha = (edge / feather_px).min(1.0);
                let u = (cx - x0) / bw;
                let v = (cy - y0) / bh;
                let px = donor_pixel(&params, u, v);
                for c in 0..3 {
                    let old_keep = keep[[c, y, x]].to_f64();
                    keep[[c, y, x]] = F::from_f64(old_keep * (1.0 - alpha));
                    let old_donor = donor[[c, y, x]].to_f64();
                    donor[[c, y, x]] = F::from_f64(old_donor * (1.0 - alpha) + px[c] * alpha);
                }
            }
        }
    }
    SwapOverlay { keep, donor }
}

/// Applies `dist` to an image node in a graph, returning the distorted image
/// node. Codec steps contribute straight-through gradients; everything else
/// is differentiable exactly as computed.
pub fn apply_graph<F: Real>(
    g: &Graph<F>,
    image: Var,
    boxes: &[FaceBox],
    dist: &Distortion,
) -> Result<Var> {
    dist.validate()?;
    let dim = {
        let shape = g.shape(image);
        assert_eq!(shape.len(), 3, "distortions act on (3,H,W) images");
        (shape[0], shape[1], shape[2])
    };
    let (h, w) = (dim.1, dim.2);
    let out = match dist {
        Distortion::Identity => image,
        Distortion::Jpeg { quality } => {
            let value = g.value_cloned(image);
            let arr = value.into_dimensionality::<ndarray::Ix3>().expect("image rank");
            let coded = jpeg_round_trip(&arr, *quality)?;
            g.replace_st(image, coded.into_dyn())
        }
        Distortion::Blur { ksize, sigma } => {
            let k = gaussian_kernel(*ksize, *sigma);
            let once = g.blur1d(image, &k, true);
            g.clamp01(g.blur1d(once, &k, false))
        }
        Distortion::Saturation { factor, increase } => {
            let gain = if *increase { 1.0 + factor } else { 1.0 - factor };
            g.clamp01(g.color_mat(image, saturation_matrix(gain)))
        }
        Distortion::Hue { factor, increase } => {
            let angle = 2.0 * std::f64::consts::PI * factor * if *increase { 1.0 } else { -1.0 };
            g.clamp01(g.color_mat(image, hue_matrix(angle)))
        }
        Distortion::Noise { sigma, seed } => {
            let field = noise_field::<F>(*sigma, *seed, dim);
            let n = g.constant(field.into_dyn());
            g.clamp01(g.add(image, n))
        }
        Distortion::FaceSwap { seed, feather: _, then } => {
            let sel = swap_selection(*seed, boxes.len());
            let overlay = swap_overlay::<F>(*seed, boxes, &sel, h, w);
            let keep = g.constant(overlay.keep.into_dyn());
            let donor = g.constant(overlay.donor.into_dyn());
            let swapped = g.add(g.mul(image, keep), donor);
            match then.as_deref() {
                Some(benign) => apply_graph(g, swapped, boxes, benign)?,
                None => swapped,
            }
        }
    };
    Ok(out)
}

/// Distorted image, exact parameters, and tamper ground truth.
#[derive(Debug, Clone)]
pub struct DistortionOutcome<F: Real> {
    pub image: Array3<F>,
    pub dist: Distortion,
    pub mask: Array2<u8>,
    pub fake_boxes: Vec<FaceBox>,
}

/// Value-path application with ground truth attached.
pub fn apply<F: Real>(image: &Array3<F>, boxes: &[FaceBox], dist: &Distortion) -> Result<DistortionOutcome<F>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::validation("distortions act on 3-channel images"));
    }
    let g = Graph::<F>::new();
    let node = g.constant(image.clone().into_dyn());
    let out = apply_graph(&g, node, boxes, dist)?;
    let distorted = g
        .value_cloned(out)
        .into_dimensionality::<ndarray::Ix3>()
        .expect("image rank");
    let (mask, fake_boxes) = ground_truth(dist, boxes, h, w);
    Ok(DistortionOutcome {
        image: distorted,
        dist: dist.clone(),
        mask,
        fake_boxes,
    })
}

/// Single audit line describing a distortion and its parameters.
pub fn describe(dist: &Distortion) -> String {
    match dist {
        Distortion::Identity => "identity".to_string(),
        Distortion::Jpeg { quality } => format!("jpeg quality={quality}"),
        Distortion::Blur { ksize, sigma } => format!("blur ksize={ksize} sigma={sigma:.4}"),
        Distortion::Saturation { factor, increase } => {
            format!("saturation factor={factor:.4} {}", if *increase { "up" } else { "down" })
        }
        Distortion::Hue { factor, increase } => {
            format!("hue factor={factor:.4} {}", if *increase { "up" } else { "down" })
        }
        Distortion::Noise { sigma, seed } => format!("noise sigma={sigma:.4} seed={seed}"),
        Distortion::FaceSwap { seed, feather, then } => {
            let tail = match then.as_deref() {
                Some(d) => format!(" then {}", describe(d)),
                None => String::new(),
            };
            format!("faceswap seed={seed} feather={feather:.2}{tail}")
        }
    }
}
