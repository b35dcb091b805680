//! Forensic analysis of marked images and the distortion-sweep harness.
//!
//! A per-face verdict combines both decoders: the robust tracer payload is
//! looked up in the identity registry, and the localizer output is compared
//! against the matched codeword. Benign processing leaves the two decoders
//! agreeing; a replaced face drives the localizer toward its failure state,
//! so its BER against the reference jumps and the face is flagged.
//!
//! The suite driver marks every image once, pushes it through a fixed list
//! of distortion templates (per-image seeds are re-drawn so swap subsets and
//! noise differ across images), analyzes each result against ground truth,
//! and aggregates one table row per template.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assign_messages, IdentityRegistry};
use crate::error::{Error, Result};
use crate::geometry::FaceBox;
use crate::graph::Real;
use crate::losses::{tampered_face_set, OMEGA_IOU_TAU};
use crate::metrics::{self, MatchCounts};
use crate::noise::{self, Distortion};
use crate::stego::{harden, MessageMatrix, ModelBundle};
use crate::training::TrainImage;

/// Decoder verdict for one face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceReport {
    /// Face box in pixel coordinates `[x0, y0, x1, y1]`.
    pub box_px: [f64; 4],
    /// Hardened robust-decoder payload.
    pub traced_bits: Vec<u8>,
    /// Registry identity within matching radius of the traced payload.
    pub matched_identity: Option<String>,
    /// Hamming distance to the matched codeword.
    pub match_distance: Option<usize>,
    /// Robust-decoder BER against the embedded payload; absent in blind
    /// analysis where the embedded bits are unknown.
    pub tracer_ber: Option<f64>,
    /// Fragile-decoder BER against the reference codeword. When no identity
    /// matched, the traced bits themselves serve as the reference, which
    /// still separates benign faces (decoders agree) from replaced ones.
    pub localizer_ber: f64,
    /// Whether `localizer_ber` strictly exceeded the decision threshold.
    pub forged_flag: bool,
    /// Ground-truth label when tamper data accompanied the analysis.
    pub truly_forged: Option<bool>,
}

/// Whole-image forensic outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForensicReport {
    /// Audit label of the distortion this image went through, if known.
    pub distortion: Option<String>,
    pub faces: Vec<FaceReport>,
    /// Quality of the analyzed image against the unmarked original.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    /// Flagged faces matched one-to-one against ground-truth forged boxes.
    /// `tp + fn_` always equals the number of genuinely forged faces.
    pub counts: Option<MatchCounts>,
}

/// Optional ground truth accompanying an analysis call. Blind analysis
/// passes `GroundTruth::none()`.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a, F: Real> {
    /// Unmarked original for PSNR/SSIM.
    pub cover: Option<&'a Array3<F>>,
    /// Payload matrix actually embedded, one row per face.
    pub embedded: Option<&'a MessageMatrix>,
    /// Boxes of genuinely replaced faces (empty slice means benign).
    pub fake_boxes: Option<&'a [FaceBox]>,
}

impl<F: Real> GroundTruth<'_, F> {
    pub fn none() -> Self {
        GroundTruth { cover: None, embedded: None, fake_boxes: None }
    }
}

/// Runs both decoders on every face and assembles the per-image report.
///
/// The registry payload length must match the model message length. Faces
/// are labelled forged (when `fake_boxes` is given) by strict IoU above the
/// tampered-set threshold, and flagged faces are scored against those labels
/// with one-to-one box matching.
pub fn analyze_image<F: Real>(
    bundle: &ModelBundle<F>,
    registry: &IdentityRegistry,
    image: &Array3<F>,
    boxes: &[FaceBox],
    theta_ber: f64,
    truth: &GroundTruth<'_, F>,
) -> Result<ForensicReport> {
    if registry.payload_len() != bundle.config.msg_len {
        return Err(Error::validation(format!(
            "registry payload length {} does not match model message length {}",
            registry.payload_len(),
            bundle.config.msg_len
        )));
    }
    if let Some(msg) = truth.embedded {
        if msg.bits().nrows() != boxes.len() {
            return Err(Error::validation(format!(
                "embedded payload has {} rows for {} faces",
                msg.bits().nrows(),
                boxes.len()
            )));
        }
    }

    let mut faces = Vec::with_capacity(boxes.len());
    if !boxes.is_empty() {
        let patches = bundle.read_patches(image, boxes)?;
        let traced = harden(&bundle.trace(&patches)?);
        let localized = harden(&bundle.localize(&patches)?);
        let forged_set: Option<Vec<usize>> = match truth.fake_boxes {
            Some(fake) => {
                let face_px: Vec<[f64; 4]> = boxes.iter().map(|b| b.pixels()).collect();
                let fake_px: Vec<[f64; 4]> = fake.iter().map(|b| b.pixels()).collect();
                Some(tampered_face_set(&face_px, &fake_px, OMEGA_IOU_TAU)?)
            }
            None => None,
        };
        for (i, b) in boxes.iter().enumerate() {
            let tr_row: Vec<u8> = traced.row(i).to_vec();
            let lo_row: Vec<u8> = localized.row(i).to_vec();
            let matched = registry.match_codeword(&tr_row);
            let reference: &[u8] = match matched {
                Some((id, _)) => registry.codeword(id).expect("matched id exists"),
                None => &tr_row,
            };
            let (forged_flag, localizer_ber) =
                metrics::flag_forged(&lo_row, reference, theta_ber)?;
            let tracer_ber = match truth.embedded {
                Some(msg) => {
                    let embedded_row: Vec<u8> = msg.bits().row(i).to_vec();
                    Some(metrics::row_ber(&tr_row, &embedded_row)?)
                }
                None => None,
            };
            faces.push(FaceReport {
                box_px: b.pixels(),
                matched_identity: matched.map(|(id, _)| id.to_string()),
                match_distance: matched.map(|(_, d)| d),
                traced_bits: tr_row,
                tracer_ber,
                localizer_ber,
                forged_flag,
                truly_forged: forged_set.as_ref().map(|set| set.contains(&i)),
            });
        }
    }

    let (psnr, ssim) = match truth.cover {
        Some(cover) => (
            Some(metrics::psnr(image, cover)?),
            Some(metrics::ssim(image, cover)?),
        ),
        None => (None, None),
    };
    let counts = match truth.fake_boxes {
        Some(fake) => {
            let flagged: Vec<([f64; 4], bool)> =
                faces.iter().map(|f| (f.box_px, f.forged_flag)).collect();
            let fake_px: Vec<[f64; 4]> = fake.iter().map(|b| b.pixels()).collect();
            let (_, _, _, counts) = metrics::localization_f1(&flagged, &fake_px, OMEGA_IOU_TAU)?;
            Some(counts)
        }
        None => None,
    };
    Ok(ForensicReport { distortion: None, faces, psnr, ssim, counts })
}

/// Fixed distortion templates covering every benign family at its hardest
/// calibrated setting, plus plain and recompressed face swaps. Seeds inside
/// the templates are placeholders; the suite driver re-draws them per image.
pub fn standard_suite() -> Vec<Distortion> {
    vec![
        Distortion::Identity,
        Distortion::Jpeg { quality: 50 },
        Distortion::Blur { ksize: 5, sigma: 1.5 },
        Distortion::Saturation { factor: 0.3, increase: true },
        Distortion::Hue { factor: 0.3, increase: false },
        Distortion::Noise { sigma: 0.05, seed: 0 },
        Distortion::FaceSwap { seed: 0, feather: noise::SWAP_FEATHER, then: None },
        Distortion::FaceSwap {
            seed: 0,
            feather: noise::SWAP_FEATHER,
            then: Some(Box::new(Distortion::Jpeg { quality: 75 })),
        },
    ]
}

/// Clones a template with fresh seeds so stochastic distortions differ
/// across images while deterministic parameters stay pinned.
fn specialize(dist: &Distortion, rng: &mut ChaCha20Rng) -> Distortion {
    match dist {
        Distortion::Noise { sigma, .. } => Distortion::Noise { sigma: *sigma, seed: rng.random() },
        Distortion::FaceSwap { feather, then, .. } => Distortion::FaceSwap {
            seed: rng.random(),
            feather: *feather,
            then: then.as_ref().map(|d| Box::new(specialize(d, rng))),
        },
        other => other.clone(),
    }
}

/// Stable aggregation label for a template: parameters without seeds.
pub fn suite_label(dist: &Distortion) -> String {
    match dist {
        Distortion::Identity => "identity".to_string(),
        Distortion::Jpeg { quality } => format!("jpeg q{quality}"),
        Distortion::Blur { ksize, sigma } => format!("blur k{ksize} s{sigma:.2}"),
        Distortion::Saturation { factor, increase } => {
            format!("saturation {} {factor:.2}", if *increase { "up" } else { "down" })
        }
        Distortion::Hue { factor, increase } => {
            format!("hue {} {factor:.2}", if *increase { "up" } else { "down" })
        }
        Distortion::Noise { sigma, .. } => format!("noise s{sigma:.3}"),
        Distortion::FaceSwap { then, .. } => match then.as_deref() {
            Some(d) => format!("faceswap + {}", suite_label(d)),
            None => "faceswap".to_string(),
        },
    }
}

/// One aggregate row of the per-distortion table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionRow {
    pub distortion: String,
    pub images: usize,
    pub faces: usize,
    /// Mean quality of the distorted marked image against the identically
    /// distorted original, so the columns isolate watermark cost.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean per-face robust-decoder BER against the embedded payload.
    pub tracer_ber: f64,
    /// Mean per-face fragile-decoder BER against the reference codeword.
    pub localizer_ber: f64,
    /// Flag quality versus ground truth; absent when the row has no
    /// genuinely forged face.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Threshold-free separation of forged from benign faces by localizer
    /// BER; absent unless the row saw both classes.
    pub auc: Option<f64>,
    pub counts: MatchCounts,
}

/// Everything the suite driver produces: table rows in template order plus
/// the raw per-image reports behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub rows: Vec<DistortionRow>,
    pub reports: Vec<ForensicReport>,
}

#[derive(Default)]
struct RowAcc {
    images: usize,
    faces: usize,
    psnr_sum: f64,
    ssim_sum: f64,
    tracer_sum: f64,
    localizer_sum: f64,
    counts: MatchCounts,
    scored: Vec<(f64, bool)>,
}

impl RowAcc {
    fn absorb(&mut self, report: &ForensicReport) {
        self.images += 1;
        self.psnr_sum += report.psnr.expect("suite reports carry psnr");
        self.ssim_sum += report.ssim.expect("suite reports carry ssim");
        self.counts.add(report.counts.expect("suite reports carry counts"));
        for f in &report.faces {
            self.faces += 1;
            self.tracer_sum += f.tracer_ber.expect("suite reports carry tracer ber");
            self.localizer_sum += f.localizer_ber;
            self.scored
                .push((f.localizer_ber, f.truly_forged.expect("suite reports carry labels")));
        }
    }

    fn finish(self, label: String) -> DistortionRow {
        let nf = self.faces.max(1) as f64;
        let ni = self.images.max(1) as f64;
        let has_forged = self.counts.tp + self.counts.fn_ > 0;
        DistortionRow {
            distortion: label,
            images: self.images,
            faces: self.faces,
            psnr: self.psnr_sum / ni,
            ssim: self.ssim_sum / ni,
            tracer_ber: self.tracer_sum / nf,
            localizer_ber: self.localizer_sum / nf,
            precision: has_forged.then(|| self.counts.precision()),
            recall: has_forged.then(|| self.counts.recall()),
            f1: has_forged.then(|| self.counts.f1()),
            auc: metrics::localization_auc(&self.scored),
            counts: self.counts,
        }
    }
}

/// Marks every image with registry-assigned payloads, routes it through all
/// suite templates, and aggregates per-template rows. All randomness (payload
/// assignment, per-image seeds of stochastic templates) derives from `seed`,
/// so reruns reproduce the outcome exactly.
pub fn evaluate_suite<F: Real>(
    bundle: &ModelBundle<F>,
    registry: &IdentityRegistry,
    images: &[TrainImage<F>],
    suite: &[Distortion],
    theta_ber: f64,
    seed: u64,
) -> Result<SuiteOutcome> {
    if images.is_empty() {
        return Err(Error::validation("evaluation needs at least one image"));
    }
    if suite.is_empty() {
        return Err(Error::validation("evaluation needs at least one distortion"));
    }
    for dist in suite {
        dist.validate()?;
    }
    let mut accs: Vec<RowAcc> = suite.iter().map(|_| RowAcc::default()).collect();
    let mut reports = Vec::with_capacity(images.len() * suite.len());
    for (i, item) in images.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let msg = assign_messages(registry, item.boxes.len(), &mut rng)?;
        let marked = bundle.mark_image(&item.image, &item.boxes, &msg)?;
        for (j, template) in suite.iter().enumerate() {
            let dist = specialize(template, &mut rng);
            let attacked = noise::apply(&marked, &item.boxes, &dist)?;
            let cover_ref = noise::apply(&item.image, &item.boxes, &dist)?;
            let truth = GroundTruth {
                cover: Some(&cover_ref.image),
                embedded: Some(&msg),
                fake_boxes: Some(&attacked.fake_boxes),
            };
            let mut report =
                analyze_image(bundle, registry, &attacked.image, &item.boxes, theta_ber, &truth)?;
            report.distortion = Some(suite_label(template));
            accs[j].absorb(&report);
            reports.push(report);
        }
    }
    let rows = accs
        .into_iter()
        .zip(suite)
        .map(|(acc, template)| acc.finish(suite_label(template)))
        .collect();
    Ok(SuiteOutcome { rows, reports })
}

/// Mean localizer BER on genuinely forged faces minus mean on benign faces,
/// across all labelled reports. `None` until both classes were seen.
pub fn localizer_separation(reports: &[ForensicReport]) -> Option<f64> {
    let (mut forged_sum, mut forged_n) = (0.0, 0usize);
    let (mut benign_sum, mut benign_n) = (0.0, 0usize);
    for f in reports.iter().flat_map(|r| &r.faces) {
        match f.truly_forged {
            Some(true) => {
                forged_sum += f.localizer_ber;
                forged_n += 1;
            }
            Some(false) => {
                benign_sum += f.localizer_ber;
                benign_n += 1;
            }
            None => {}
        }
    }
    if forged_n == 0 || benign_n == 0 {
        return None;
    }
    Some(forged_sum / forged_n as f64 - benign_sum / benign_n as f64)
}

/// Writes one JSON object per line, one line per report.
pub fn write_reports_jsonl(path: &Path, reports: &[ForensicReport]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads back a reports file written by [`write_reports_jsonl`].
pub fn read_reports_jsonl(path: &Path) -> Result<Vec<ForensicReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reports = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        reports.push(serde_json::from_str(line)?);
    }
    Ok(reports)
}

pub const SUMMARY_CSV_HEADER: &str =
    "distortion,images,faces,psnr,ssim,tracer_ber,localizer_ber,precision,recall,f1,auc,tp,fp,fn";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes the aggregate table, one row per distortion template.
pub fn write_summary_csv(path: &Path, rows: &[DistortionRow]) -> Result<()> {
    let mut text = String::from(SUMMARY_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{:.4},{:.6},{:.6},{:.6},{},{},{},{},{},{},{}\n",
            r.distortion,
            r.images,
            r.faces,
            r.psnr,
            r.ssim,
            r.tracer_ber,
            r.localizer_ber,
            opt_cell(r.precision),
            opt_cell(r.recall),
            opt_cell(r.f1),
            opt_cell(r.auc),
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_,
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, DEFAULT_MIN_DISTANCE};
    use crate::stego::ModelConfig;
    use crate::training;

    fn tiny_bundle() -> ModelBundle<f32> {
        let config = ModelConfig {
            patch_h: 32,
            patch_w: 32,
            msg_len: 15,
            base_width: 6,
            levels: 2,
            critic_base: 6,
            critic_depth: 2,
            epsilon: 0.02,
        };
        ModelBundle::init(config, 7).expect("tiny model")
    }

    fn tiny_world() -> (ModelBundle<f32>, IdentityRegistry, Vec<TrainImage<f32>>) {
        let bundle = tiny_bundle();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let mut registry = IdentityRegistry::new(15, DEFAULT_MIN_DISTANCE).unwrap();
        registry.generate(6, &mut rng).unwrap();
        let scenes = generate_synthetic_dataset(3, (128, 128), 1..=3, &mut rng).unwrap();
        let images = training::from_scenes::<f32>(&scenes).unwrap();
        (bundle, registry, images)
    }

    #[test]
    fn blind_analysis_reports_structure_without_truth() {
        let (bundle, registry, images) = tiny_world();
        let item = &images[0];
        let report = analyze_image(
            &bundle,
            &registry,
            &item.image,
            &item.boxes,
            metrics::FLAG_BER_THRESHOLD,
            &GroundTruth::none(),
        )
        .unwrap();
        assert_eq!(report.faces.len(), item.boxes.len());
        assert!(report.psnr.is_none());
        assert!(report.ssim.is_none());
        assert!(report.counts.is_none());
        for f in &report.faces {
            assert_eq!(f.traced_bits.len(), 15);
            assert!(f.tracer_ber.is_none());
            assert!(f.truly_forged.is_none());
            assert!((0.0..=1.0).contains(&f.localizer_ber));
            assert_eq!(f.forged_flag, f.localizer_ber > metrics::FLAG_BER_THRESHOLD);
        }
    }

    #[test]
    fn truth_labels_and_counts_cover_every_forged_face() {
        let (bundle, registry, images) = tiny_world();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for item in &images {
            let msg = assign_messages(&registry, item.boxes.len(), &mut rng).unwrap();
            let marked = bundle.mark_image(&item.image, &item.boxes, &msg).unwrap();
            let dist = Distortion::FaceSwap { seed: rng.random(), feather: 0.25, then: None };
            let attacked = noise::apply(&marked, &item.boxes, &dist).unwrap();
            let truth = GroundTruth {
                cover: Some(&item.image),
                embedded: Some(&msg),
                fake_boxes: Some(&attacked.fake_boxes),
            };
            let report = analyze_image(
                &bundle,
                &registry,
                &attacked.image,
                &item.boxes,
                metrics::FLAG_BER_THRESHOLD,
                &truth,
            )
            .unwrap();
            let n_forged = report
                .faces
                .iter()
                .filter(|f| f.truly_forged == Some(true))
                .count();
            assert_eq!(n_forged, attacked.fake_boxes.len());
            assert!(n_forged >= 1, "swap always replaces at least one face");
            let counts = report.counts.unwrap();
            assert_eq!(counts.tp + counts.fn_, n_forged);
            assert!(report.psnr.unwrap() > 0.0);
            for f in &report.faces {
                assert!(f.tracer_ber.is_some());
            }
        }
    }

    #[test]
    fn analysis_rejects_registry_length_mismatch() {
        let (bundle, _, images) = tiny_world();
        let registry = IdentityRegistry::new(8, 2).unwrap();
        let err = analyze_image(
            &bundle,
            &registry,
            &images[0].image,
            &images[0].boxes,
            0.1,
            &GroundTruth::none(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn suite_rows_follow_templates_and_are_deterministic() {
        let (bundle, registry, images) = tiny_world();
        let suite = vec![
            Distortion::Identity,
            Distortion::Noise { sigma: 0.02, seed: 0 },
            Distortion::FaceSwap { seed: 0, feather: 0.25, then: None },
        ];
        let a = evaluate_suite(&bundle, &registry, &images, &suite, 0.10, 5).unwrap();
        let rerun = evaluate_suite(&bundle, &registry, &images, &suite, 0.10, 5).unwrap();
        assert_eq!(a, rerun, "identical seed must reproduce the outcome");
        assert_eq!(a.rows.len(), 3);
        assert_eq!(a.reports.len(), 3 * images.len());
        for (row, template) in a.rows.iter().zip(&suite) {
            assert_eq!(row.distortion, suite_label(template));
            assert_eq!(row.images, images.len());
            let forged = row.counts.tp + row.counts.fn_;
            if template.is_malicious() {
                assert!(forged >= row.images, "swap forges at least one face per image");
                assert!(row.f1.is_some());
            } else {
                assert_eq!(forged, 0);
                assert!(row.f1.is_none());
            }
        }
        let total_faces: usize = images.iter().map(|i| i.boxes.len()).sum();
        assert!(a.rows.iter().all(|r| r.faces == total_faces));
    }

    #[test]
    fn suite_randomizes_swap_seeds_across_images() {
        let (bundle, registry, mut images) = tiny_world();
        // clone one image so identical content meets different swap seeds
        images[1] = images[0].clone();
        images[2] = images[0].clone();
        let suite = vec![Distortion::FaceSwap { seed: 0, feather: 0.25, then: None }];
        let out = evaluate_suite(&bundle, &registry, &images, &suite, 0.10, 9).unwrap();
        let keys: Vec<String> = out
            .reports
            .iter()
            .map(|r| {
                r.faces
                    .iter()
                    .map(|f| if f.truly_forged.unwrap() { '1' } else { '0' })
                    .collect()
            })
            .collect();
        // not a hard guarantee for arbitrary seeds, but pinned here: the
        // three per-image swap subsets must not all coincide
        assert!(
            keys[0] != keys[1] || keys[1] != keys[2],
            "per-image specialization left identical swap subsets: {keys:?}"
        );
    }

    #[test]
    fn jsonl_round_trip_preserves_reports() {
        let (bundle, registry, images) = tiny_world();
        let suite = vec![Distortion::Identity, Distortion::FaceSwap { seed: 0, feather: 0.25, then: None }];
        let out = evaluate_suite(&bundle, &registry, &images, &suite, 0.10, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reports.jsonl");
        write_reports_jsonl(&path, &out.reports).unwrap();
        let loaded = read_reports_jsonl(&path).unwrap();
        assert_eq!(loaded, out.reports);
    }

    #[test]
    fn summary_csv_has_header_and_one_row_per_template() {
        let (bundle, registry, images) = tiny_world();
        let suite = standard_suite();
        let out = evaluate_suite(&bundle, &registry, &images[..1], &suite, 0.10, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        write_summary_csv(&path, &out.rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SUMMARY_CSV_HEADER);
        assert_eq!(lines.len(), 1 + suite.len());
        let labels: std::collections::BTreeSet<&str> =
            lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(labels.len(), suite.len(), "labels must be unique: {labels:?}");
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), SUMMARY_CSV_HEADER.split(',').count());
        }
    }

    #[test]
    fn separation_needs_both_classes() {
        let face = |ber: f64, forged: Option<bool>| FaceReport {
            box_px: [0.0, 0.0, 10.0, 10.0],
            traced_bits: vec![0; 15],
            matched_identity: None,
            match_distance: None,
            tracer_ber: None,
            localizer_ber: ber,
            forged_flag: false,
            truly_forged: forged,
        };
        let report = |faces: Vec<FaceReport>| ForensicReport {
            distortion: None,
            faces,
            psnr: None,
            ssim: None,
            counts: None,
        };
        let only_benign = vec![report(vec![face(0.1, Some(false))])];
        assert!(localizer_separation(&only_benign).is_none());
        let both = vec![
            report(vec![face(0.5, Some(true)), face(0.1, Some(false))]),
            report(vec![face(0.3, Some(true)), face(0.0, None)]),
        ];
        let sep = localizer_separation(&both).unwrap();
        assert!((sep - (0.4 - 0.1)).abs() < 1e-12, "sep {sep}");
    }
}
