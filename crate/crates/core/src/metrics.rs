//! Image quality and forensic evaluation metrics.
//!
//! Everything here is pure arithmetic on arrays; reading decoders or mapping
//! identities happens upstream. PSNR assumes the `[0,1]` dynamic range and is
//! capped at 100 dB so identical images stay finite.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry;
use crate::graph::Real;

/// Peak signal-to-noise ratio in dB over all channels, capped at 100.
pub fn psnr<F: Real>(a: &Array3<F>, b: &Array3<F>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() {
        return Err(Error::validation("psnr of empty images"));
    }
    let mut acc = 0.0_f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

fn ssim_window() -> [f64; 11] {
    let sigma = 1.5_f64;
    let mut w = [0.0; 11];
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *wi = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// Mean structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5, K1 0.01, K2 0.03), valid-window sliding, averaged over
/// channels. Identical inputs score exactly 1.
pub fn ssim<F: Real>(a: &Array3<F>, b: &Array3<F>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (c, h, w) = a.dim();
    if h < 11 || w < 11 {
        return Err(Error::validation(format!("ssim needs at least 11x11 images, got {h}x{w}")));
    }
    let win = ssim_window();
    let c1 = 0.01_f64 * 0.01;
    let c2 = 0.03_f64 * 0.03;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=(h - 11) {
            for x0 in 0..=(w - 11) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = win[dy] * win[dx];
                        mu_a += wt * a[[ch, y0 + dy, x0 + dx]].to_f64();
                        mu_b += wt * b[[ch, y0 + dy, x0 + dx]].to_f64();
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = win[dy] * win[dx];
                        let da = a[[ch, y0 + dy, x0 + dx]].to_f64() - mu_a;
                        let db = b[[ch, y0 + dy, x0 + dx]].to_f64() - mu_b;
                        var_a += wt * da * da;
                        var_b += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Fraction of mismatched bits between two equally shaped bit matrices.
pub fn bit_error_rate(decoded: &Array2<u8>, reference: &Array2<u8>) -> Result<f64> {
    if decoded.dim() != reference.dim() {
        return Err(Error::validation(format!(
            "ber shape mismatch: {:?} vs {:?}",
            decoded.dim(),
            reference.dim()
        )));
    }
    if decoded.is_empty() {
        return Err(Error::validation("ber of zero bits"));
    }
    let wrong = decoded
        .iter()
        .zip(reference.iter())
        .filter(|(a, b)| a != b)
        .count();
    Ok(wrong as f64 / decoded.len() as f64)
}

/// Per-face BER between two bit rows.
pub fn row_ber(decoded: &[u8], reference: &[u8]) -> Result<f64> {
    if decoded.len() != reference.len() || decoded.is_empty() {
        return Err(Error::validation("row ber needs equal non-empty rows"));
    }
    let wrong = decoded.iter().zip(reference).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / decoded.len() as f64)
}

/// Default per-face forgery threshold on localizer BER.
pub const FLAG_BER_THRESHOLD: f64 = 0.10;

/// A face is flagged as forged when its fragile-decoder BER against the
/// reference bits strictly exceeds the threshold. Returns `(flag, score)`
/// where the score is that BER, usable directly for threshold-free AUC.
pub fn flag_forged(
    localizer_bits: &[u8],
    reference_bits: &[u8],
    threshold: f64,
) -> Result<(bool, f64)> {
    let score = row_ber(localizer_bits, reference_bits)?;
    Ok((score > threshold, score))
}

/// One-to-one detection counts at a fixed IoU threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn zero() -> Self {
        MatchCounts { tp: 0, fp: 0, fn_: 0 }
    }

    pub fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Greedy one-to-one matching by descending IoU: a prediction counts as a
/// true positive when it pairs with an unmatched truth box at IoU strictly
/// above `tau`.
pub fn match_boxes(pred: &[[f64; 4]], truth: &[[f64; 4]], tau: f64) -> Result<MatchCounts> {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let iou = geometry::iou(p, t)?;
            if iou > tau {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_t = vec![false; truth.len()];
    let mut tp = 0usize;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            tp += 1;
        }
    }
    Ok(MatchCounts {
        tp,
        fp: pred.len() - tp,
        fn_: truth.len() - tp,
    })
}

/// Localization quality of per-face forgery flags: faces whose flag is set
/// are matched one-to-one against ground-truth forged boxes at `iou_tau`.
/// Returns `(f1, precision, recall)` together with the raw counts.
pub fn localization_f1(
    faces: &[([f64; 4], bool)],
    truth_forged: &[[f64; 4]],
    iou_tau: f64,
) -> Result<(f64, f64, f64, MatchCounts)> {
    let flagged: Vec<[f64; 4]> = faces
        .iter()
        .filter(|(_, flag)| *flag)
        .map(|(b, _)| *b)
        .collect();
    let counts = match_boxes(&flagged, truth_forged, iou_tau)?;
    Ok((counts.f1(), counts.precision(), counts.recall(), counts))
}

/// AUC over labelled tamper scores, `true` marking genuinely forged faces.
pub fn localization_auc(scored: &[(f64, bool)]) -> Option<f64> {
    let tampered: Vec<f64> = scored.iter().filter(|(_, l)| *l).map(|(s, _)| *s).collect();
    let benign: Vec<f64> = scored.iter().filter(|(_, l)| !*l).map(|(s, _)| *s).collect();
    ranked_auc(&tampered, &benign)
}

/// Area under the ROC curve via the Mann-Whitney statistic with average
/// ranks for ties: the probability a tampered face scores above a benign
/// one. `None` when either class is empty.
pub fn ranked_auc(tampered: &[f64], benign: &[f64]) -> Option<f64> {
    if tampered.is_empty() || benign.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = tampered
        .iter()
        .map(|&s| (s, true))
        .chain(benign.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return None;
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0_f64;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; tied entries share the average rank
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = tampered.len() as f64;
    let n_neg = benign.len() as f64;
    Some((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn psnr_of_identical_images_caps_at_100() {
        let a = Array3::from_elem((3, 8, 8), 0.5_f64);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn psnr_uniform_offset_oracle() {
        // |a - b| = 10/255 everywhere: psnr = 20*log10(255/10) = 28.1308 dB
        let a = Array3::from_elem((3, 16, 16), 0.4_f64);
        let b = a.mapv(|v| v + 10.0 / 255.0);
        let got = psnr(&a, &b).unwrap();
        assert!((got - 28.1308).abs() < 1e-3, "got {got}");
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = Array3::from_elem((3, 8, 8), 0.5_f64);
        let b = Array3::from_elem((3, 8, 9), 0.5_f64);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = Array3::from_shape_fn((3, 16, 20), |_| rng.random::<f64>());
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_decreases_with_noise_and_stays_in_range() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = Array3::from_shape_fn((3, 24, 24), |(_, y, x)| {
            0.5 + 0.3 * ((x as f64) / 6.0).sin() * ((y as f64) / 5.0).cos()
        });
        let slight = a.mapv(|v| (v + 0.01 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
        let heavy = a.mapv(|v| (v + 0.4 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
        let s_slight = ssim(&a, &slight).unwrap();
        let s_heavy = ssim(&a, &heavy).unwrap();
        assert!(s_slight > s_heavy, "{s_slight} vs {s_heavy}");
        assert!(s_slight > 0.9 && s_slight < 1.0);
        assert!(s_heavy > -1.0 && s_heavy < 0.9);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = Array3::from_elem((3, 8, 8), 0.5_f64);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ber_counts_mismatches() {
        let a = Array2::from_shape_vec((2, 4), vec![0, 1, 1, 0, 1, 1, 0, 0]).unwrap();
        let b = Array2::from_shape_vec((2, 4), vec![0, 1, 0, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(bit_error_rate(&a, &b).unwrap(), 3.0 / 8.0);
        assert_eq!(bit_error_rate(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn flag_forged_is_strict_threshold() {
        let reference = vec![0u8; 10];
        let mut one_wrong = reference.clone();
        one_wrong[0] = 1;
        // 0.1 BER is not strictly above the 0.1 threshold
        let (flag, score) = flag_forged(&one_wrong, &reference, FLAG_BER_THRESHOLD).unwrap();
        assert!(!flag);
        assert_eq!(score, 0.1);
        let mut two_wrong = one_wrong.clone();
        two_wrong[5] = 1;
        let (flag, score) = flag_forged(&two_wrong, &reference, FLAG_BER_THRESHOLD).unwrap();
        assert!(flag);
        assert_eq!(score, 0.2);
    }

    #[test]
    fn flag_score_against_random_references_centres_on_half() {
        // A localizer that collapsed to the all-ones hardened state scores
        // about 0.5 against any independent random reference, so the flag
        // fires essentially always at the default threshold.
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let collapsed = vec![1u8; 15];
        let mut total = 0.0;
        let mut flagged = 0usize;
        let reps = 2000;
        for _ in 0..reps {
            let reference: Vec<u8> = (0..15).map(|_| rng.random_range(0..2u8)).collect();
            let (flag, score) = flag_forged(&collapsed, &reference, FLAG_BER_THRESHOLD).unwrap();
            total += score;
            if flag {
                flagged += 1;
            }
        }
        let mean = total / reps as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean score {mean}");
        assert!(flagged as f64 / reps as f64 > 0.99);
    }

    #[test]
    fn match_boxes_hand_case() {
        // pred A overlaps truth X at 1/7, pred B is exact on Y, pred C is spurious
        let pred = [
            [0.0, 0.0, 2.0, 2.0],
            [10.0, 10.0, 14.0, 14.0],
            [30.0, 30.0, 31.0, 31.0],
        ];
        let truth = [[1.0, 1.0, 3.0, 3.0], [10.0, 10.0, 14.0, 14.0]];
        let at_01 = match_boxes(&pred, &truth, 0.1).unwrap();
        assert_eq!(at_01, MatchCounts { tp: 2, fp: 1, fn_: 0 });
        let at_05 = match_boxes(&pred, &truth, 0.5).unwrap();
        assert_eq!(at_05, MatchCounts { tp: 1, fp: 2, fn_: 1 });
        let f1 = at_05.f1();
        assert!((f1 - 2.0 * (1.0 / 3.0) * 0.5 / (1.0 / 3.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn match_boxes_is_one_to_one() {
        // two predictions over one truth: only one can match
        let pred = [[0.0, 0.0, 10.0, 10.0], [0.5, 0.5, 10.0, 10.0]];
        let truth = [[0.0, 0.0, 10.0, 10.0]];
        let m = match_boxes(&pred, &truth, 0.5).unwrap();
        assert_eq!(m, MatchCounts { tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn f1_zero_when_nothing_matches() {
        let m = MatchCounts { tp: 0, fp: 3, fn_: 2 };
        assert_eq!(m.f1(), 0.0);
        assert_eq!(MatchCounts::zero().f1(), 0.0);
    }

    #[test]
    fn auc_agrees_with_quadratic_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..50 {
            let np = rng.random_range(1..40);
            let nn = rng.random_range(1..40);
            // quantized scores force plenty of ties
            let pos: Vec<f64> = (0..np).map(|_| (rng.random::<f64>() * 8.0).round() / 8.0 + 0.1).collect();
            let neg: Vec<f64> = (0..nn).map(|_| (rng.random::<f64>() * 8.0).round() / 8.0).collect();
            let fast = ranked_auc(&pos, &neg).unwrap();
            let mut acc = 0.0;
            for p in &pos {
                for n in &neg {
                    acc += match p.total_cmp(n) {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
            let oracle = acc / (pos.len() * neg.len()) as f64;
            assert!((fast - oracle).abs() <= 1e-9, "{fast} vs {oracle}");
        }
    }

    #[test]
    fn auc_on_random_scores_is_half() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let pos: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let neg: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let auc = ranked_auc(&pos, &neg).unwrap();
        assert!((auc - 0.5).abs() < 0.02, "auc {auc}");
    }

    #[test]
    fn auc_perfect_and_empty() {
        assert_eq!(ranked_auc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(ranked_auc(&[0.0], &[1.0]).unwrap(), 0.0);
        assert!(ranked_auc(&[], &[1.0]).is_none());
        assert!(ranked_auc(&[1.0], &[]).is_none());
    }

    #[test]
    fn auc_all_tied_is_half() {
        let auc = ranked_auc(&[0.5, 0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_uncentered_moment_oracle() {
        // Independent reformulation: raw moments E[x^2]-mu^2 instead of the
        // centered accumulation used by the implementation.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a = Array3::from_shape_fn((3, 14, 17), |_| rng.random::<f64>());
        let b = Array3::from_shape_fn((3, 14, 17), |_| rng.random::<f64>());
        let win = {
            let mut w = [0.0_f64; 11];
            let mut sum = 0.0;
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = (-((i as f64 - 5.0).powi(2)) / 4.5).exp();
                sum += *wi;
            }
            w.map(|v| v / sum)
        };
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..3 {
            for y0 in 0..=(14 - 11) {
                for x0 in 0..=(17 - 11) {
                    let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..11 {
                        for dx in 0..11 {
                            let wt = win[dy] * win[dx];
                            let (x, y) = (a[[ch, y0 + dy, x0 + dx]], b[[ch, y0 + dy, x0 + dx]]);
                            ma += wt * x;
                            mb += wt * y;
                            maa += wt * x * x;
                            mbb += wt * y * y;
                            mab += wt * x * y;
                        }
                    }
                    let (va, vb, cov) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        let oracle = total / count as f64;
        let got = ssim(&a, &b).unwrap();
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn psnr_matches_channelwise_oracle() {
        // Independent accumulation order: mean of per-channel MSEs.
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let a = Array3::from_shape_fn((3, 9, 13), |_| rng.random::<f64>());
        let b = Array3::from_shape_fn((3, 9, 13), |_| rng.random::<f64>());
        let mut mse = 0.0;
        for ch in 0..3 {
            let d = (&a.index_axis(ndarray::Axis(0), ch).to_owned()
                - &b.index_axis(ndarray::Axis(0), ch))
                .mapv(|v| v * v);
            mse += d.mean().unwrap();
        }
        let oracle = 10.0 * (3.0 / mse).log10();
        let got = psnr(&a, &b).unwrap();
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn ber_satisfies_triangle_inequality() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..200 {
            let bits = |rng: &mut ChaCha20Rng| -> Vec<u8> {
                (0..15).map(|_| rng.random_range(0..2u8)).collect()
            };
            let (a, b, c) = (bits(&mut rng), bits(&mut rng), bits(&mut rng));
            let ab = row_ber(&a, &b).unwrap();
            let bc = row_ber(&b, &c).unwrap();
            let ac = row_ber(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-12, "{ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn psnr_strictly_decreases_along_noise_amplitude_sweep() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let a = Array3::from_shape_fn((3, 16, 16), |_| 0.2 + 0.6 * rng.random::<f64>());
        let noise = Array3::from_shape_fn((3, 16, 16), |_| rng.random::<f64>() - 0.5);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = &a + &noise.mapv(|v| v * amp);
            let p = psnr(&a, &noisy).unwrap();
            assert!(p < last, "psnr {p} did not drop below {last} at amp {amp}");
            last = p;
        }
    }

    #[test]
    fn auc_is_exactly_invariant_under_monotone_transforms() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let pos: Vec<f64> = (0..60).map(|_| (rng.random::<f64>() * 6.0).round() / 6.0).collect();
        let neg: Vec<f64> = (0..40).map(|_| (rng.random::<f64>() * 6.0).round() / 6.0).collect();
        let base = ranked_auc(&pos, &neg).unwrap();
        let transforms: [fn(f64) -> f64; 3] =
            [|x| (3.0 * x).exp(), |x| x.atan(), |x| 5.0 * x - 2.0];
        for t in transforms {
            let tp: Vec<f64> = pos.iter().map(|&x| t(x)).collect();
            let tn: Vec<f64> = neg.iter().map(|&x| t(x)).collect();
            // rank statistics only see the ordering, so equality is exact
            assert_eq!(ranked_auc(&tp, &tn).unwrap(), base);
        }
    }

    /// Maximum one-to-one assignment cardinality by exhaustive recursion.
    fn brute_force_tp(pred: &[[f64; 4]], truth: &[[f64; 4]], tau: f64) -> usize {
        fn go(i: usize, pred: &[[f64; 4]], truth: &[[f64; 4]], used: &mut Vec<bool>, tau: f64) -> usize {
            if i == pred.len() {
                return 0;
            }
            let mut best = go(i + 1, pred, truth, used, tau);
            for j in 0..truth.len() {
                if !used[j] && geometry::iou(&pred[i], &truth[j]).unwrap() > tau {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, pred, truth, used, tau));
                    used[j] = false;
                }
            }
            best
        }
        go(0, pred, truth, &mut vec![false; truth.len()], tau)
    }

    #[test]
    fn greedy_matching_agrees_with_assignment_oracle() {
        // Disjoint truth boxes on a grid; at tau 0.5 each prediction can
        // clear the threshold against at most one of them, so the greedy
        // matching must reach the brute-force optimum exactly.
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        for _ in 0..100 {
            let nt = rng.random_range(1..=5);
            let mut truth = Vec::new();
            let mut cells: Vec<(f64, f64)> = (0..3)
                .flat_map(|i| (0..3).map(move |j| (12.0 * i as f64, 12.0 * j as f64)))
                .collect();
            for _ in 0..nt {
                let k = rng.random_range(0..cells.len());
                let (x, y) = cells.swap_remove(k);
                truth.push([x, y, x + 10.0, y + 10.0]);
            }
            let mut pred = Vec::new();
            for t in &truth {
                if rng.random::<f64>() < 0.8 {
                    let dx = rng.random_range(-3.0..3.0);
                    let dy = rng.random_range(-3.0..3.0);
                    pred.push([t[0] + dx, t[1] + dy, t[2] + dx, t[3] + dy]);
                }
            }
            for _ in 0..rng.random_range(0..3) {
                let x = rng.random_range(0.0..30.0);
                let y = rng.random_range(0.0..30.0);
                pred.push([x, y, x + 8.0, y + 8.0]);
            }
            let m = match_boxes(&pred, &truth, 0.5).unwrap();
            assert_eq!(m.tp, brute_force_tp(&pred, &truth, 0.5));
            assert_eq!(m.tp + m.fn_, truth.len(), "every truth box is tp or fn");
            assert_eq!(m.tp + m.fp, pred.len());
            assert!(m.tp <= truth.len().min(pred.len()), "one-to-one");
        }
    }

    #[test]
    fn greedy_matching_is_maximal_on_overlapping_instances() {
        // With overlapping truth boxes and a looser threshold the greedy
        // result may not be globally optimal, but it must never exceed the
        // optimum and must leave no matchable pair behind.
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..100 {
            let boxes = |rng: &mut ChaCha20Rng, n: usize| -> Vec<[f64; 4]> {
                (0..n)
                    .map(|_| {
                        let x = rng.random_range(0.0..20.0);
                        let y = rng.random_range(0.0..20.0);
                        let w = rng.random_range(4.0..12.0);
                        let h = rng.random_range(4.0..12.0);
                        [x, y, x + w, y + h]
                    })
                    .collect()
            };
            let np = rng.random_range(1..=5);
            let nt = rng.random_range(1..=5);
            let pred = boxes(&mut rng, np);
            let truth = boxes(&mut rng, nt);
            let tau = 0.3;
            let m = match_boxes(&pred, &truth, tau).unwrap();
            let best = brute_force_tp(&pred, &truth, tau);
            assert!(m.tp <= best);
            // maximal matching is at worst half the maximum one
            assert!(2 * m.tp >= best, "greedy {} vs optimum {best}", m.tp);
            assert_eq!(m.tp + m.fn_, truth.len());
        }
    }

    #[test]
    fn localization_f1_hand_case() {
        // two forged faces, one flagged correctly, one clean face flagged
        let faces = [
            ([0.0, 0.0, 10.0, 10.0], true),
            ([20.0, 0.0, 30.0, 10.0], false),
            ([40.0, 0.0, 50.0, 10.0], true),
        ];
        let truth = [[0.0, 0.0, 10.0, 10.0], [20.0, 0.0, 30.0, 10.0]];
        let (f1, p, r, counts) = localization_f1(&faces, &truth, 0.5).unwrap();
        assert_eq!(counts, MatchCounts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(p, 0.5);
        assert_eq!(r, 0.5);
        assert_eq!(f1, 0.5);
    }

    #[test]
    fn localization_auc_splits_by_label() {
        let scored = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        assert_eq!(localization_auc(&scored).unwrap(), 1.0);
        assert!(localization_auc(&[(0.5, true)]).is_none());
    }
}
