//! Boxes, IoU, and the differentiable crop/paste resamplers.
//!
//! Faces are axis-aligned boxes given in normalized coordinates; embedding
//! crops each face to a fixed patch with bilinear interpolation and pastes the
//! stego residual back at the original position and scale. Both directions
//! are linear in the pixel values, so their adjoints (used for training) are
//! exact gather/scatter transposes of the forward sampling plans.
//!
//! Coordinate conventions, used everywhere in this crate:
//! - pixel `i` occupies `[i, i+1)` and has its center at `i + 0.5`;
//! - a box `[x0, y0, x1, y1]` spans continuous coordinates, never rounded
//!   during sampling (rounding happens only at mask rasterization);
//! - crop samples with border replication (boxes are inside the image);
//! - paste samples the residual patch with zero padding, so its footprint
//!   extends at most one pixel beyond the box edges.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::graph::Real;

/// Patch resolution the stego kernel operates on.
pub const DEFAULT_PATCH: (usize, usize) = (64, 64);

fn check_finite4(v: &[f64; 4], what: &str) -> Result<()> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::validation(format!("{what}: non-finite coordinate {v:?}")));
    }
    Ok(())
}

/// Validates `[x0, y0, x1, y1]` normalized coordinates: inside `[0,1]`, min < max.
pub fn validate_norm_box(v: &[f64; 4]) -> Result<()> {
    check_finite4(v, "normalized box")?;
    let [x0, y0, x1, y1] = *v;
    if !(0.0..=1.0).contains(&x0) || !(0.0..=1.0).contains(&x1) || !(0.0..=1.0).contains(&y0) || !(0.0..=1.0).contains(&y1) {
        return Err(Error::validation(format!("normalized box out of [0,1]: {v:?}")));
    }
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::validation(format!("degenerate box (min >= max): {v:?}")));
    }
    Ok(())
}

/// Validates an absolute-pixel box: min < max on both axes.
pub fn validate_abs_box(p: &[f64; 4]) -> Result<()> {
    check_finite4(p, "absolute box")?;
    let [x0, y0, x1, y1] = *p;
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::validation(format!("degenerate box (min >= max): {p:?}")));
    }
    Ok(())
}

/// Scales a normalized box to absolute pixel coordinates (element-wise with
/// `[W, H, W, H]`, kept floating-point).
pub fn to_absolute(v: &[f64; 4], image_w: u32, image_h: u32) -> Result<[f64; 4]> {
    validate_norm_box(v)?;
    let (w, h) = (image_w as f64, image_h as f64);
    Ok([v[0] * w, v[1] * h, v[2] * w, v[3] * h])
}

/// Inverse of [`to_absolute`].
pub fn to_normalized(p: &[f64; 4], image_w: u32, image_h: u32) -> Result<[f64; 4]> {
    validate_abs_box(p)?;
    let (w, h) = (image_w as f64, image_h as f64);
    let v = [p[0] / w, p[1] / h, p[2] / w, p[3] / h];
    validate_norm_box(&v)?;
    Ok(v)
}

/// Intersection over union of two absolute boxes; 0 when disjoint.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    validate_abs_box(a)?;
    validate_abs_box(b)?;
    let ix0 = a[0].max(b[0]);
    let iy0 = a[1].max(b[1]);
    let ix1 = a[2].min(b[2]);
    let iy1 = a[3].min(b[3]);
    let iw = (ix1 - ix0).max(0.0);
    let ih = (iy1 - iy0).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    Ok(inter / union)
}

/// One face region: normalized and absolute coordinates plus the dimensions
/// of the image they refer to.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FaceBox {
    v: [f64; 4],
    p: [f64; 4],
    image_w: u32,
    image_h: u32,
}

impl FaceBox {
    pub fn from_normalized(v: [f64; 4], image_w: u32, image_h: u32) -> Result<Self> {
        if image_w == 0 || image_h == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        let p = to_absolute(&v, image_w, image_h)?;
        Ok(FaceBox { v, p, image_w, image_h })
    }

    pub fn from_pixels(p: [f64; 4], image_w: u32, image_h: u32) -> Result<Self> {
        if image_w == 0 || image_h == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        validate_abs_box(&p)?;
        if p[0] < 0.0 || p[1] < 0.0 || p[2] > image_w as f64 || p[3] > image_h as f64 {
            return Err(Error::validation(format!(
                "absolute box {p:?} exceeds image {image_w}x{image_h}"
            )));
        }
        let v = [
            p[0] / image_w as f64,
            p[1] / image_h as f64,
            p[2] / image_w as f64,
            p[3] / image_h as f64,
        ];
        Ok(FaceBox { v, p, image_w, image_h })
    }

    pub fn normalized(&self) -> [f64; 4] {
        self.v
    }

    pub fn pixels(&self) -> [f64; 4] {
        self.p
    }

    pub fn image_dims(&self) -> (u32, u32) {
        (self.image_w, self.image_h)
    }

    pub fn width_px(&self) -> f64 {
        self.p[2] - self.p[0]
    }

    pub fn height_px(&self) -> f64 {
        self.p[3] - self.p[1]
    }
}

/// A batch of `N x 3 x h x w` face patches with the boxes they came from.
#[derive(Debug, Clone)]
pub struct PatchBatch<F: Real> {
    data: Array4<F>,
    boxes: Vec<FaceBox>,
}

impl<F: Real> PatchBatch<F> {
    pub fn new(data: Array4<F>, boxes: Vec<FaceBox>) -> Result<Self> {
        let (n, c, h, w) = data.dim();
        if n != boxes.len() {
            return Err(Error::validation(format!(
                "patch count {n} != box count {}",
                boxes.len()
            )));
        }
        if c != 3 {
            return Err(Error::validation(format!("patches must have 3 channels, got {c}")));
        }
        if n > 0 && (h == 0 || w == 0) {
            return Err(Error::validation("patch size must be positive"));
        }
        let (lo, hi) = (F::zero(), F::one());
        if data.iter().any(|&x| !(x >= lo && x <= hi)) {
            return Err(Error::validation("patch values must lie in [0, 1]"));
        }
        Ok(PatchBatch { data, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn patch_size(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.2, d.3)
    }

    pub fn data(&self) -> &Array4<F> {
        &self.data
    }

    pub fn into_data(self) -> Array4<F> {
        self.data
    }

    pub fn boxes(&self) -> &[FaceBox] {
        &self.boxes
    }
}

/// One bilinear sample: the four source indices (flattened spatial) plus the
/// fractional offsets. Weights derive as `(1-fy)(1-fx), (1-fy)fx, ...`.
#[derive(Debug, Clone, Copy)]
struct CropSample {
    i00: u32,
    i01: u32,
    i10: u32,
    i11: u32,
    fx: f64,
    fy: f64,
}

/// Precomputed gather plan for cropping every box of an image to `h x w`.
#[derive(Debug, Clone)]
pub struct CropPlan {
    image_h: usize,
    image_w: usize,
    patch_h: usize,
    patch_w: usize,
    boxes: Vec<Vec<CropSample>>,
}

impl CropPlan {
    pub fn n_boxes(&self) -> usize {
        self.boxes.len()
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (self.patch_h, self.patch_w)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_h, self.image_w)
    }
}

fn check_box_dims(boxes: &[FaceBox], image_h: usize, image_w: usize) -> Result<()> {
    for (i, b) in boxes.iter().enumerate() {
        let (bw, bh) = b.image_dims();
        if bw as usize != image_w || bh as usize != image_h {
            return Err(Error::validation(format!(
                "box {i} belongs to a {bw}x{bh} image, expected {image_w}x{image_h}"
            )));
        }
    }
    Ok(())
}

/// Builds the bilinear gather plan mapping image pixels to patch pixels.
pub fn plan_crop(boxes: &[FaceBox], patch: (usize, usize), image_h: usize, image_w: usize) -> Result<CropPlan> {
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 {
        return Err(Error::validation("patch size must be positive"));
    }
    check_box_dims(boxes, image_h, image_w)?;
    let mut per_box = Vec::with_capacity(boxes.len());
    for b in boxes {
        let [x0, y0, x1, y1] = b.pixels();
        let bw = x1 - x0;
        let bh = y1 - y0;
        let mut samples = Vec::with_capacity(ph * pw);
        for r in 0..ph {
            let sy = y0 + (r as f64 + 0.5) * bh / ph as f64 - 0.5;
            let fy0 = sy.floor();
            let fy = sy - fy0;
            let ylo = (fy0 as i64).clamp(0, image_h as i64 - 1) as u32;
            let yhi = (fy0 as i64 + 1).clamp(0, image_h as i64 - 1) as u32;
            for c in 0..pw {
                let sx = x0 + (c as f64 + 0.5) * bw / pw as f64 - 0.5;
                let fx0 = sx.floor();
                let fx = sx - fx0;
                let xlo = (fx0 as i64).clamp(0, image_w as i64 - 1) as u32;
                let xhi = (fx0 as i64 + 1).clamp(0, image_w as i64 - 1) as u32;
                samples.push(CropSample {
                    i00: ylo * image_w as u32 + xlo,
                    i01: ylo * image_w as u32 + xhi,
                    i10: yhi * image_w as u32 + xlo,
                    i11: yhi * image_w as u32 + xhi,
                    fx,
                    fy,
                });
            }
        }
        per_box.push(samples);
    }
    Ok(CropPlan {
        image_h,
        image_w,
        patch_h: ph,
        patch_w: pw,
        boxes: per_box,
    })
}

/// Gather: samples every planned patch pixel from the image.
///
/// Evaluated in lerp form `a + t(b-a)` so constant regions come out
/// bit-exact and grid-aligned boxes reproduce the source pixels.
pub fn crop_with_plan<F: Real>(image: &Array3<F>, plan: &CropPlan) -> Array4<F> {
    let n = plan.boxes.len();
    let (ph, pw) = (plan.patch_h, plan.patch_w);
    let img = image.as_slice().expect("image must be contiguous");
    let hw = plan.image_h * plan.image_w;
    let mut out = Array4::<F>::zeros((n, 3, ph, pw));
    {
        let o = out.as_slice_mut().expect("contiguous");
        for (bi, samples) in plan.boxes.iter().enumerate() {
            for ch in 0..3 {
                let base_in = ch * hw;
                let base_out = (bi * 3 + ch) * ph * pw;
                for (k, s) in samples.iter().enumerate() {
                    let fx = F::from_f64(s.fx);
                    let fy = F::from_f64(s.fy);
                    let v00 = img[base_in + s.i00 as usize];
                    let v01 = img[base_in + s.i01 as usize];
                    let v10 = img[base_in + s.i10 as usize];
                    let v11 = img[base_in + s.i11 as usize];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    o[base_out + k] = top + fy * (bot - top);
                }
            }
        }
    }
    out
}

/// Adjoint of [`crop_with_plan`]: scatters patch cotangents back onto the
/// image with the transposed bilinear weights.
pub fn crop_adjoint<F: Real>(grad_patches: &Array4<F>, plan: &CropPlan) -> Array3<F> {
    let (ph, pw) = (plan.patch_h, plan.patch_w);
    let hw = plan.image_h * plan.image_w;
    let mut grad = Array3::<F>::zeros((3, plan.image_h, plan.image_w));
    let g = grad.as_slice_mut().expect("contiguous");
    let gp = grad_patches.as_slice().expect("contiguous");
    for (bi, samples) in plan.boxes.iter().enumerate() {
        for ch in 0..3 {
            let base_g = ch * hw;
            let base_p = (bi * 3 + ch) * ph * pw;
            for (k, s) in samples.iter().enumerate() {
                let go = gp[base_p + k];
                let fx = F::from_f64(s.fx);
                let fy = F::from_f64(s.fy);
                let one = F::one();
                g[base_g + s.i00 as usize] += (one - fy) * (one - fx) * go;
                g[base_g + s.i01 as usize] += (one - fy) * fx * go;
                g[base_g + s.i10 as usize] += fy * (one - fx) * go;
                g[base_g + s.i11 as usize] += fy * fx * go;
            }
        }
    }
    grad
}

#[derive(Debug, Clone, Copy)]
struct PasteTap {
    patch_idx: u32,
    weight: f64,
}

#[derive(Debug, Clone)]
struct PasteSample {
    img_idx: u32,
    taps: [PasteTap; 4],
    n_taps: u8,
}

/// Precomputed scatter plan pasting `h x w` residual patches back into an
/// image at their boxes' positions and scales.
#[derive(Debug, Clone)]
pub struct PastePlan {
    image_h: usize,
    image_w: usize,
    patch_h: usize,
    patch_w: usize,
    boxes: Vec<Vec<PasteSample>>,
}

impl PastePlan {
    pub fn n_boxes(&self) -> usize {
        self.boxes.len()
    }

    /// Spatial indices (flattened) every box may touch; used by locality tests.
    pub fn support(&self) -> Vec<Vec<u32>> {
        self.boxes
            .iter()
            .map(|ss| ss.iter().map(|s| s.img_idx).collect())
            .collect()
    }
}

/// Builds the paste plan. For each image pixel whose center falls inside the
/// box grown by at most one pixel, the residual patch is sampled bilinearly
/// (zero padding outside the patch); zero-weight taps are dropped so the
/// recorded support is exactly the set of pixels the paste can modify.
pub fn plan_paste(boxes: &[FaceBox], patch: (usize, usize), image_h: usize, image_w: usize) -> Result<PastePlan> {
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 {
        return Err(Error::validation("patch size must be positive"));
    }
    check_box_dims(boxes, image_h, image_w)?;
    let mut per_box = Vec::with_capacity(boxes.len());
    for b in boxes {
        let [x0, y0, x1, y1] = b.pixels();
        let bw = x1 - x0;
        let bh = y1 - y0;
        // natural bilinear extent, capped at the declared one-pixel halo
        let halo_x = (bw / (2.0 * pw as f64)).min(1.0);
        let halo_y = (bh / (2.0 * ph as f64)).min(1.0);
        let xa = ((x0 - halo_x - 0.5).floor() as i64).max(0) as usize;
        let xb = (((x1 + halo_x - 0.5).ceil() as i64) + 1).min(image_w as i64) as usize;
        let ya = ((y0 - halo_y - 0.5).floor() as i64).max(0) as usize;
        let yb = (((y1 + halo_y - 0.5).ceil() as i64) + 1).min(image_h as i64) as usize;
        let mut samples = Vec::new();
        for yy in ya..yb {
            let cy = yy as f64 + 0.5;
            if cy <= y0 - halo_y || cy >= y1 + halo_y {
                continue;
            }
            let v = (cy - y0) * ph as f64 / bh - 0.5;
            let vf = v.floor();
            let fy = v - vf;
            let ry0 = vf as i64;
            for xx in xa..xb {
                let cx = xx as f64 + 0.5;
                if cx <= x0 - halo_x || cx >= x1 + halo_x {
                    continue;
                }
                let u = (cx - x0) * pw as f64 / bw - 0.5;
                let uf = u.floor();
                let fx = u - uf;
                let rx0 = uf as i64;
                let mut taps = [PasteTap { patch_idx: 0, weight: 0.0 }; 4];
                let mut n_taps = 0u8;
                for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                    let py = ry0 + dy;
                    if py < 0 || py >= ph as i64 || wy == 0.0 {
                        continue;
                    }
                    for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                        let px = rx0 + dx;
                        if px < 0 || px >= pw as i64 || wx == 0.0 {
                            continue;
                        }
                        taps[n_taps as usize] = PasteTap {
                            patch_idx: (py as u32) * pw as u32 + px as u32,
                            weight: wy * wx,
                        };
                        n_taps += 1;
                    }
                }
                if n_taps > 0 {
                    samples.push(PasteSample {
                        img_idx: (yy * image_w + xx) as u32,
                        taps,
                        n_taps,
                    });
                }
            }
        }
        per_box.push(samples);
    }
    Ok(PastePlan {
        image_h,
        image_w,
        patch_h: ph,
        patch_w: pw,
        boxes: per_box,
    })
}

/// Scatter: adds the resampled residual patches onto a copy of the image.
/// Pixels outside every plan support keep their exact input bits. No clamp.
pub fn paste_with_plan<F: Real>(image: &Array3<F>, residual: &Array4<F>, plan: &PastePlan) -> Array3<F> {
    let (n, c, h, w) = residual.dim();
    assert_eq!(n, plan.boxes.len(), "residual batch does not match plan");
    assert_eq!((c, h, w), (3, plan.patch_h, plan.patch_w), "residual shape does not match plan");
    let mut out = image.clone();
    let hw = plan.image_h * plan.image_w;
    let o = out.as_slice_mut().expect("contiguous");
    let r = residual.as_slice().expect("contiguous");
    for (bi, samples) in plan.boxes.iter().enumerate() {
        for ch in 0..3 {
            let base_r = (bi * 3 + ch) * h * w;
            let base_o = ch * hw;
            for s in samples {
                let mut acc = F::zero();
                for t in &s.taps[..s.n_taps as usize] {
                    acc += F::from_f64(t.weight) * r[base_r + t.patch_idx as usize];
                }
                o[base_o + s.img_idx as usize] += acc;
            }
        }
    }
    out
}

/// Adjoint of the residual path of [`paste_with_plan`]: gathers image
/// cotangents into patch cotangents. (The image path is the identity.)
pub fn paste_adjoint_patches<F: Real>(grad_image: &Array3<F>, plan: &PastePlan) -> Array4<F> {
    let (ph, pw) = (plan.patch_h, plan.patch_w);
    let hw = plan.image_h * plan.image_w;
    let mut grad = Array4::<F>::zeros((plan.boxes.len(), 3, ph, pw));
    let g = grad.as_slice_mut().expect("contiguous");
    let gi = grad_image.as_slice().expect("contiguous");
    for (bi, samples) in plan.boxes.iter().enumerate() {
        for ch in 0..3 {
            let base_g = (bi * 3 + ch) * ph * pw;
            let base_i = ch * hw;
            for s in samples {
                let go = gi[base_i + s.img_idx as usize];
                for t in &s.taps[..s.n_taps as usize] {
                    g[base_g + t.patch_idx as usize] += F::from_f64(t.weight) * go;
                }
            }
        }
    }
    grad
}

fn image_dims<F: Real>(image: &Array3<F>) -> Result<(usize, usize)> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::validation(format!("image must have 3 channels, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::validation("image must be non-empty"));
    }
    Ok((h, w))
}

/// Crops and bilinearly resamples every face region to `patch` resolution.
pub fn crop_resample<F: Real>(image: &Array3<F>, boxes: &[FaceBox], patch: (usize, usize)) -> Result<PatchBatch<F>> {
    let (h, w) = image_dims(image)?;
    let plan = plan_crop(boxes, patch, h, w)?;
    let data = crop_with_plan(image, &plan);
    // crop of an in-range image is a convex combination, but clamp away
    // any 1-ulp excursion so the batch invariant is unconditional
    let data = data.mapv(|x| x.max(F::zero()).min(F::one()));
    PatchBatch::new(data, boxes.to_vec())
}

/// Pastes the stego-minus-cover residual of every face back into the image at
/// its original position and scale, then clamps once to `[0, 1]`.
///
/// Pixels with no residual footprint are bit-identical to the input.
pub fn paste_residual<F: Real>(image: &Array3<F>, stego: &PatchBatch<F>, cover: &PatchBatch<F>) -> Result<Array3<F>> {
    let (h, w) = image_dims(image)?;
    if stego.data().dim() != cover.data().dim() {
        return Err(Error::validation(format!(
            "stego {:?} and cover {:?} batches must be shape-aligned",
            stego.data().dim(),
            cover.data().dim()
        )));
    }
    if stego.boxes() != cover.boxes() {
        return Err(Error::validation("stego and cover batches must carry the same boxes"));
    }
    let residual = stego.data() - cover.data();
    let plan = plan_paste(stego.boxes(), stego.patch_size(), h, w)?;
    let out = paste_with_plan(image, &residual, &plan);
    Ok(clamp01(out))
}

/// Clamps to `[0, 1]`; in-range values keep their exact bits.
pub fn clamp01<F: Real>(mut a: Array3<F>) -> Array3<F> {
    a.mapv_inplace(|x| {
        if x < F::zero() {
            F::zero()
        } else if x > F::one() {
            F::one()
        } else {
            x
        }
    });
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_norm_box(rng: &mut impl Rng) -> [f64; 4] {
        loop {
            let mut xs = [rng.random::<f64>(), rng.random::<f64>()];
            let mut ys = [rng.random::<f64>(), rng.random::<f64>()];
            xs.sort_by(f64::total_cmp);
            ys.sort_by(f64::total_cmp);
            if xs[1] - xs[0] > 1e-3 && ys[1] - ys[0] > 1e-3 {
                return [xs[0], ys[0], xs[1], ys[1]];
            }
        }
    }

    #[test]
    fn to_absolute_full_frame() {
        let p = to_absolute(&[0.0, 0.0, 1.0, 1.0], 1024, 700).unwrap();
        assert_eq!(p, [0.0, 0.0, 1024.0, 700.0]);
    }

    #[test]
    fn to_absolute_elementwise() {
        let p = to_absolute(&[0.25, 0.5, 0.75, 1.0], 100, 200).unwrap();
        assert_eq!(p, [25.0, 100.0, 75.0, 200.0]);
    }

    #[test]
    fn to_absolute_rejects_degenerate() {
        assert!(to_absolute(&[0.5, 0.2, 0.5, 0.8], 64, 64).is_err());
        assert!(to_absolute(&[0.6, 0.2, 0.5, 0.8], 64, 64).is_err());
    }

    #[test]
    fn absolute_normalized_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let v = rand_norm_box(&mut rng);
            let w = rng.random_range(8u32..2048);
            let h = rng.random_range(8u32..2048);
            let p = to_absolute(&v, w, h).unwrap();
            let back = to_normalized(&p, w, h).unwrap();
            for k in 0..4 {
                assert!((back[k] - v[k]).abs() <= 1e-9, "{back:?} vs {v:?}");
            }
        }
    }

    #[test]
    fn iou_identical_and_disjoint() {
        assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn iou_overlap_matches_rasterization_oracle() {
        let a = [0.0, 0.0, 2.0, 2.0];
        let b = [1.0, 1.0, 3.0, 3.0];
        let got = iou(&a, &b).unwrap();
        assert!((got - 1.0 / 7.0).abs() < 1e-12);
        // rasterize both boxes on a 1000x-per-unit grid and count cells
        let scale = 1000.0;
        let mut inter = 0u64;
        let mut union = 0u64;
        for yy in 0..(3.0 * scale) as u64 {
            for xx in 0..(3.0 * scale) as u64 {
                let cx = (xx as f64 + 0.5) / scale;
                let cy = (yy as f64 + 0.5) / scale;
                let in_a = cx > a[0] && cx < a[2] && cy > a[1] && cy < a[3];
                let in_b = cx > b[0] && cx < b[2] && cy > b[1] && cy < b[3];
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        let raster = inter as f64 / union as f64;
        assert!((got - raster).abs() <= 1e-3, "analytic {got} vs raster {raster}");
    }

    #[test]
    fn iou_symmetry_random() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..500 {
            let a = to_absolute(&rand_norm_box(&mut rng), 100, 100).unwrap();
            let b = to_absolute(&rand_norm_box(&mut rng), 100, 100).unwrap();
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            assert_eq!(ab.to_bits(), ba.to_bits());
            assert_eq!(iou(&a, &a).unwrap(), 1.0);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    fn rand_image(rng: &mut impl Rng, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>())
    }

    #[test]
    fn crop_constant_image_gives_constant_patch() {
        let img = Array3::from_elem((3, 20, 30), 0.37_f64);
        let b = FaceBox::from_pixels([3.7, 2.1, 17.3, 15.9], 30, 20).unwrap();
        let patch = crop_resample(&img, &[b], (8, 8)).unwrap();
        for &v in patch.data().iter() {
            assert_eq!(v, 0.37);
        }
    }

    #[test]
    fn crop_grid_aligned_box_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let img = rand_image(&mut rng, 16, 16);
        let b = FaceBox::from_pixels([4.0, 6.0, 12.0, 14.0], 16, 16).unwrap();
        let patch = crop_resample(&img, &[b], (8, 8)).unwrap();
        for ch in 0..3 {
            for r in 0..8 {
                for c in 0..8 {
                    assert_eq!(patch.data()[[0, ch, r, c]], img[[ch, 6 + r, 4 + c]]);
                }
            }
        }
    }

    #[test]
    fn crop_empty_batch_is_valid() {
        let img = Array3::from_elem((3, 8, 8), 0.5_f64);
        let patch = crop_resample::<f64>(&img, &[], (4, 4)).unwrap();
        assert!(patch.is_empty());
        assert_eq!(patch.data().dim(), (0, 3, 4, 4));
    }

    #[test]
    fn crop_rejects_out_of_bounds_box() {
        assert!(FaceBox::from_pixels([-1.0, 0.0, 4.0, 4.0], 8, 8).is_err());
        assert!(FaceBox::from_pixels([0.0, 0.0, 9.0, 4.0], 8, 8).is_err());
    }

    #[test]
    fn paste_zero_residual_is_bit_identical() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let img = rand_image(&mut rng, 24, 24);
        let b = FaceBox::from_pixels([3.3, 4.7, 15.2, 18.9], 24, 24).unwrap();
        let cover = crop_resample(&img, &[b], (8, 8)).unwrap();
        let out = paste_residual(&img, &cover.clone(), &cover).unwrap();
        assert_eq!(img.as_slice().unwrap().len(), out.as_slice().unwrap().len());
        for (a, b) in img.iter().zip(out.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn paste_locality_outside_halo() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..50 {
            let img = rand_image(&mut rng, 32, 32).mapv(|x| 0.25 + 0.5 * x);
            let v = rand_norm_box(&mut rng);
            let b = FaceBox::from_normalized(v, 32, 32).unwrap();
            let cover = crop_resample(&img, &[b], (6, 6)).unwrap();
            let mut stego_data = cover.data().clone();
            stego_data.mapv_inplace(|x| (x + 0.1).min(1.0));
            let stego = PatchBatch::new(stego_data, vec![b]).unwrap();
            let out = paste_residual(&img, &stego, &cover).unwrap();
            let [x0, y0, x1, y1] = b.pixels();
            for yy in 0..32usize {
                for xx in 0..32usize {
                    let cx = xx as f64 + 0.5;
                    let cy = yy as f64 + 0.5;
                    let inside_halo = cx > x0 - 1.0 && cx < x1 + 1.0 && cy > y0 - 1.0 && cy < y1 + 1.0;
                    if !inside_halo {
                        for ch in 0..3 {
                            assert_eq!(out[[ch, yy, xx]].to_bits(), img[[ch, yy, xx]].to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn paste_constant_residual_grid_aligned() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let img = rand_image(&mut rng, 16, 16).mapv(|x| 0.2 + 0.5 * x);
        let b = FaceBox::from_pixels([4.0, 4.0, 12.0, 12.0], 16, 16).unwrap();
        let cover = crop_resample(&img, &[b], (8, 8)).unwrap();
        let delta = 0.125_f64;
        let stego = PatchBatch::new(cover.data().mapv(|x| x + delta), vec![b]).unwrap();
        let out = paste_residual(&img, &stego, &cover).unwrap();
        for yy in 0..16usize {
            for xx in 0..16usize {
                for ch in 0..3 {
                    let expect = if (4..12).contains(&yy) && (4..12).contains(&xx) {
                        img[[ch, yy, xx]] + delta
                    } else {
                        img[[ch, yy, xx]]
                    };
                    assert_eq!(out[[ch, yy, xx]], expect);
                }
            }
        }
    }

    #[test]
    fn crop_paste_round_trip_grid_aligned() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let img = rand_image(&mut rng, 20, 20).mapv(|x| 0.1 + 0.8 * x);
        let b1 = FaceBox::from_pixels([2.0, 3.0, 10.0, 11.0], 20, 20).unwrap();
        let b2 = FaceBox::from_pixels([12.0, 12.0, 18.0, 18.0], 20, 20).unwrap();
        let cover = crop_resample(&img, &[b1, b2], (8, 8)).unwrap();
        let mut stego_data = cover.data().clone();
        let mut r2 = ChaCha20Rng::seed_from_u64(18);
        stego_data.mapv_inplace(|x| (x + 0.08 * (r2.random::<f64>() - 0.5)).clamp(0.0, 1.0));
        // box 2 is 6x6 with an 8x8 patch: not grid-aligned, so only check box 1
        let stego = PatchBatch::new(stego_data, vec![b1, b2]).unwrap();
        let out = paste_residual(&img, &stego, &cover).unwrap();
        let re_crop = crop_resample(&out, &[b1], (8, 8)).unwrap();
        for ch in 0..3 {
            for r in 0..8 {
                for c in 0..8 {
                    let got = re_crop.data()[[0, ch, r, c]];
                    let want = stego.data()[[0, ch, r, c]];
                    assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn paste_overlapping_boxes_sum() {
        let img = Array3::from_elem((3, 12, 12), 0.25_f64);
        let b1 = FaceBox::from_pixels([2.0, 2.0, 8.0, 8.0], 12, 12).unwrap();
        let b2 = FaceBox::from_pixels([4.0, 4.0, 10.0, 10.0], 12, 12).unwrap();
        let cover = crop_resample(&img, &[b1, b2], (6, 6)).unwrap();
        let stego = PatchBatch::new(cover.data().mapv(|x| x + 0.1), vec![b1, b2]).unwrap();
        let out = paste_residual(&img, &stego, &cover).unwrap();
        // pixel (5,5) sits inside both boxes: residuals add
        assert!((out[[0, 5, 5]] - 0.45).abs() < 1e-12);
        // pixel (3,3) only inside box 1
        assert!((out[[0, 3, 3]] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn paste_rejects_mismatched_batches() {
        let img = Array3::from_elem((3, 12, 12), 0.5_f64);
        let b = FaceBox::from_pixels([2.0, 2.0, 8.0, 8.0], 12, 12).unwrap();
        let cover = crop_resample(&img, &[b], (6, 6)).unwrap();
        let stego = crop_resample(&img, &[b], (4, 4)).unwrap();
        assert!(paste_residual(&img, &stego, &cover).is_err());
    }
}
