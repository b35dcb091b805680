//! Joint optimization loop.
//!
//! Each step updates the critic on detached watermarked patches, then the
//! embedder and both decoders on the weighted objective, routing the marked
//! images through three distortion branches: arbitrary (drives the robust
//! tracer), benign-only (drives the localizer toward consistency), and
//! malicious (drives the localizer toward zero output on swapped faces).
//!
//! All randomness for step `s` comes from the run seed on stream `s + 1`,
//! so interrupted runs resume bit-for-bit from a checkpoint.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointData};
use crate::data::{self, AnnotatedImage, SyntheticScene};
use crate::error::{Error, Result};
use crate::geometry::{plan_crop, plan_paste, FaceBox};
use crate::graph::{Graph, Real, Var};
use crate::losses::{self, LossParts, LossWeights, NormMode, OMEGA_IOU_TAU};
use crate::metrics;
use crate::nn::Adam;
use crate::noise::{self, BranchKind, Distortion};
use crate::stego::{harden, MessageMatrix, ModelBundle, ModelConfig};

/// Run hyperparameters. Serializable so a JSON file fully describes a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    pub norm_mode: NormMode,
    pub seed: u64,
    /// Synthetic dataset geometry (ignored when training from a manifest).
    pub canvas: (u32, u32),
    pub faces_per_image: (usize, usize),
    pub dataset_size: usize,
    /// Hard cap on total optimization steps across all epochs.
    pub max_steps: Option<usize>,
    pub checkpoint_every: usize,
    /// Probe PSNR is logged every this many steps.
    pub probe_every: usize,
    pub probe_images: usize,
}

impl TrainConfig {
    /// Settings mirroring the reference training recipe (heavy; intended
    /// for capable hardware).
    pub fn paper_scale() -> Self {
        TrainConfig {
            model: ModelConfig {
                patch_h: 64,
                patch_w: 64,
                base_width: 32,
                levels: 3,
                critic_base: 32,
                critic_depth: 4,
                ..ModelConfig::default()
            },
            epochs: 100,
            batch_size: 64,
            learning_rate: 4e-4,
            loss_weights: LossWeights::default(),
            norm_mode: NormMode::Mean,
            seed: 1,
            canvas: (512, 512),
            faces_per_image: (1, 4),
            dataset_size: 8192,
            max_steps: None,
            checkpoint_every: 1000,
            probe_every: 100,
            probe_images: 16,
        }
    }

    /// Small preset that trains end to end on a single CPU in minutes.
    pub fn desk_scale() -> Self {
        TrainConfig {
            model: ModelConfig {
                patch_h: 32,
                patch_w: 32,
                base_width: 12,
                levels: 2,
                critic_base: 12,
                critic_depth: 3,
                ..ModelConfig::default()
            },
            epochs: 13,
            batch_size: 8,
            learning_rate: 4e-4,
            loss_weights: LossWeights::default(),
            norm_mode: NormMode::Mean,
            seed: 1,
            canvas: (128, 128),
            faces_per_image: (1, 3),
            dataset_size: 512,
            max_steps: None,
            checkpoint_every: 200,
            probe_every: 25,
            probe_images: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning rate must be positive and finite"));
        }
        if self.faces_per_image.0 < 1 || self.faces_per_image.0 > self.faces_per_image.1 {
            return Err(Error::validation("faces_per_image range is empty"));
        }
        if self.checkpoint_every == 0 || self.probe_every == 0 {
            return Err(Error::validation("checkpoint and probe intervals must be positive"));
        }
        Ok(())
    }

    /// Total optimizer steps for a dataset of `n_images`.
    pub fn total_steps(&self, n_images: usize) -> usize {
        let per_epoch = n_images.div_ceil(self.batch_size).max(1);
        let full = self.epochs * per_epoch;
        match self.max_steps {
            Some(cap) => full.min(cap),
            None => full,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One ready-to-train sample: pixels plus validated face boxes.
#[derive(Debug, Clone)]
pub struct TrainImage<F: Real> {
    pub image: Array3<F>,
    pub boxes: Vec<FaceBox>,
}

/// Convert generated scenes into training samples.
pub fn from_scenes<F: Real>(scenes: &[SyntheticScene]) -> Result<Vec<TrainImage<F>>> {
    scenes
        .iter()
        .map(|s| {
            Ok(TrainImage {
                image: s.image.mapv(F::from_f64),
                boxes: s.record.face_boxes()?,
            })
        })
        .collect()
}

/// Load every manifest record's image (paths relative to `base_dir`).
pub fn from_records<F: Real>(
    records: &[AnnotatedImage],
    base_dir: &Path,
) -> Result<Vec<TrainImage<F>>> {
    records
        .iter()
        .map(|rec| {
            Ok(TrainImage {
                image: data::load_image::<F>(rec, base_dir)?,
                boxes: rec.face_boxes()?,
            })
        })
        .collect()
}

/// Everything measured during one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub critic: f64,
    pub adversarial: f64,
    pub fidelity: f64,
    pub tracing: f64,
    pub local_common: f64,
    /// Absent when no face was swapped anywhere in the batch.
    pub local_malicious: Option<f64>,
    pub total: f64,
    pub tracer_ber: f64,
    pub localizer_common_ber: f64,
    /// BER over swapped faces only; high is desired.
    pub localizer_malicious_ber: Option<f64>,
    pub probe_psnr: Option<f64>,
}

impl StepStats {
    pub const CSV_HEADER: &'static str = "step,critic,adversarial,fidelity,tracing,local_common,local_malicious,total,tracer_ber,localizer_common_ber,localizer_malicious_ber,probe_psnr";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6},{},{}",
            self.step,
            self.critic,
            self.adversarial,
            self.fidelity,
            self.tracing,
            self.local_common,
            opt(self.local_malicious),
            self.total,
            self.tracer_ber,
            self.localizer_common_ber,
            opt(self.localizer_malicious_ber),
            opt(self.probe_psnr),
        )
    }
}

/// One sampled batch with per-image distortion draws for the three branches.
struct StepBatch<'a, F: Real> {
    images: Vec<&'a TrainImage<F>>,
    /// Half-open row range of each image's faces in the flattened batch.
    rows: Vec<(usize, usize)>,
    msg: MessageMatrix,
    arbitrary: Vec<Distortion>,
    common: Vec<Distortion>,
    malicious: Vec<Distortion>,
}

/// Owns the model, the optimizers, and the step counter.
pub struct Trainer<F: Real> {
    pub bundle: ModelBundle<F>,
    pub config: TrainConfig,
    opt_gen: Adam<F>,
    opt_critic: Adam<F>,
    step: u64,
}

impl<F: Real> Trainer<F> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::init(config.model.clone(), config.seed)?;
        let (opt_gen, opt_critic) = bundle.optimizers(config.learning_rate);
        Ok(Trainer {
            bundle,
            config,
            opt_gen,
            opt_critic,
            step: 0,
        })
    }

    /// Restore a run from its checkpoint. The model settings inside the
    /// archive must match the config.
    pub fn resume(config: TrainConfig, checkpoint_path: &Path) -> Result<Self> {
        config.validate()?;
        let ck: CheckpointData<F> = checkpoint::load(checkpoint_path)?;
        if ck.config != config.model {
            return Err(Error::Checkpoint(format!(
                "checkpoint model settings differ from the config: {:?} vs {:?}",
                ck.config, config.model
            )));
        }
        if ck.master_seed != config.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} differs from config seed {}",
                ck.master_seed, config.seed
            )));
        }
        let bundle = ModelBundle::from_banks(ck.config, ck.gen, ck.critic)?;
        let (mut opt_gen, mut opt_critic) = bundle.optimizers(config.learning_rate);
        opt_gen.restore(ck.opt_gen_t, ck.opt_gen_m, ck.opt_gen_v)?;
        opt_critic.restore(ck.opt_critic_t, ck.opt_critic_m, ck.opt_critic_v)?;
        Ok(Trainer {
            bundle,
            config,
            opt_gen,
            opt_critic,
            step: ck.step,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let (gt, gm, gv) = self.opt_gen.state();
        let (ct, cm, cv) = self.opt_critic.state();
        let ck = CheckpointData {
            config: self.config.model.clone(),
            master_seed: self.config.seed,
            step: self.step,
            gen: self.bundle.gen.clone(),
            critic: self.bundle.critic.clone(),
            opt_gen_t: gt,
            opt_gen_m: gm.to_vec(),
            opt_gen_v: gv.to_vec(),
            opt_critic_t: ct,
            opt_critic_m: cm.to_vec(),
            opt_critic_v: cv.to_vec(),
        };
        checkpoint::save(path, &ck)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn rng_for(&self, step: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.config.seed);
        // stream 0 belongs to model init; steps start at stream 1
        rng.set_stream(step + 1);
        rng
    }

    fn sample_batch<'a>(
        &self,
        data: &'a [TrainImage<F>],
        rng: &mut ChaCha20Rng,
    ) -> Result<StepBatch<'a, F>> {
        let eligible: Vec<usize> = (0..data.len()).filter(|&i| !data[i].boxes.is_empty()).collect();
        if eligible.is_empty() {
            return Err(Error::validation("no training image has annotated faces"));
        }
        let mut images = Vec::with_capacity(self.config.batch_size);
        let mut rows = Vec::with_capacity(self.config.batch_size);
        let mut base = 0usize;
        for _ in 0..self.config.batch_size {
            let img = &data[eligible[rng.random_range(0..eligible.len())]];
            rows.push((base, base + img.boxes.len()));
            base += img.boxes.len();
            images.push(img);
        }
        let msg = MessageMatrix::random(base, self.config.model.msg_len, rng);
        let sample_all = |kind: BranchKind, rng: &mut ChaCha20Rng| -> Vec<Distortion> {
            images.iter().map(|_| noise::sample_branch(kind, rng)).collect()
        };
        let arbitrary = sample_all(BranchKind::Arbitrary, rng);
        let common = sample_all(BranchKind::Common, rng);
        let malicious = sample_all(BranchKind::Malicious, rng);
        Ok(StepBatch {
            images,
            rows,
            msg,
            arbitrary,
            common,
            malicious,
        })
    }

    fn check_finite(&self, name: &str, value: f64) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite {
                component: name.to_string(),
                step: self.step,
            })
        }
    }

    /// Critic update on detached watermarked patches.
    fn critic_phase(&mut self, batch: &StepBatch<'_, F>) -> Result<f64> {
        let patch = (self.config.model.patch_h, self.config.model.patch_w);
        let mut covers = Vec::new();
        for img in &batch.images {
            let pb = crate::geometry::crop_resample(&img.image, &img.boxes, patch)?;
            covers.push(pb);
        }
        let views: Vec<_> = covers.iter().map(|pb| pb.data().view()).collect();
        let cover_all = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::validation(format!("patch concat: {e}")))?;
        let all_boxes: Vec<FaceBox> = batch.images.iter().flat_map(|i| i.boxes.clone()).collect();
        let cover_batch = crate::geometry::PatchBatch::new(cover_all.clone(), all_boxes)?;
        let stego_batch = self.bundle.embed(&cover_batch, &batch.msg)?;

        let g = Graph::<F>::new();
        let pc = self.bundle.critic.bind(&g);
        let d_cover = self
            .bundle
            .critic_graph(&g, &pc, g.constant(cover_all.into_dyn()));
        let d_marked = self
            .bundle
            .critic_graph(&g, &pc, g.constant(stego_batch.data().clone().into_dyn()));
        let loss = losses::critic_loss(&g, d_cover, d_marked);
        let value = self.check_finite("critic loss", g.scalar_value(loss).to_f64())?;
        g.backward(loss);
        let grads = pc.grads(&g);
        self.opt_critic.step(&mut self.bundle.critic, &grads);
        Ok(value)
    }

    /// Joint embedder + decoder update through the three branches.
    fn generator_phase(&mut self, batch: &StepBatch<'_, F>) -> Result<GenPhaseOut> {
        let patch = (self.config.model.patch_h, self.config.model.patch_w);
        let mode = self.config.norm_mode;
        let g = Graph::<F>::new();
        let p = self.bundle.gen.bind(&g);
        let pc = self.bundle.critic.bind_frozen(&g);

        let mut img_vars = Vec::new();
        let mut covers = Vec::new();
        for img in &batch.images {
            let (_, h, w) = img.image.dim();
            let iv = g.constant(img.image.clone().into_dyn());
            let plan = plan_crop(&img.boxes, patch, h, w)?;
            covers.push(g.crop_faces(iv, plan));
            img_vars.push(iv);
        }
        let cover = g.concat_batch(&covers);
        let msg_var = g.constant(batch.msg.signal::<F>().into_dyn());
        let stego = self.bundle.embed_graph(&g, &p, cover, msg_var);
        let residual = g.sub(stego, cover);

        let mut fidelity_terms = Vec::new();
        let mut arb_patches = Vec::new();
        let mut com_patches = Vec::new();
        let mut mal_patches = Vec::new();
        let mut omega = Vec::new();
        for (i, img) in batch.images.iter().enumerate() {
            let (_, h, w) = img.image.dim();
            let (r0, r1) = batch.rows[i];
            let rows: Vec<usize> = (r0..r1).collect();
            let res_i = g.gather_rows(residual, &rows);
            let paste = plan_paste(&img.boxes, patch, h, w)?;
            let marked = g.clamp01(g.paste_faces(img_vars[i], res_i, paste));
            fidelity_terms.push(losses::fidelity_loss(&g, img_vars[i], marked, mode));

            for (dist, sink) in [
                (&batch.arbitrary[i], &mut arb_patches),
                (&batch.common[i], &mut com_patches),
            ] {
                let distorted = noise::apply_graph(&g, marked, &img.boxes, dist)?;
                let plan = plan_crop(&img.boxes, patch, h, w)?;
                sink.push(g.crop_faces(distorted, plan));
            }
            let mal_dist = &batch.malicious[i];
            let distorted = noise::apply_graph(&g, marked, &img.boxes, mal_dist)?;
            let plan = plan_crop(&img.boxes, patch, h, w)?;
            mal_patches.push(g.crop_faces(distorted, plan));
            let (_, fake_boxes) = noise::ground_truth(mal_dist, &img.boxes, h, w);
            let face_px: Vec<[f64; 4]> = img.boxes.iter().map(|b| b.pixels()).collect();
            let fake_px: Vec<[f64; 4]> = fake_boxes.iter().map(|b| b.pixels()).collect();
            for local in losses::tampered_face_set(&face_px, &fake_px, OMEGA_IOU_TAU)? {
                omega.push(r0 + local);
            }
        }

        let fidelity = average_terms(&g, &fidelity_terms, mode);
        let tr_out = self.bundle.tracer_graph(&g, &p, g.concat_batch(&arb_patches));
        let lo_com_out = self.bundle.localizer_graph(&g, &p, g.concat_batch(&com_patches));
        let lo_mal_out = self.bundle.localizer_graph(&g, &p, g.concat_batch(&mal_patches));
        let tracing = losses::message_loss(&g, tr_out, msg_var, mode);
        let local_common = losses::message_loss(&g, lo_com_out, msg_var, mode);
        let local_malicious = losses::malicious_loss(&g, lo_mal_out, &omega, mode);

        let d_cover = self.bundle.critic_graph(&g, &pc, cover);
        let d_marked = self.bundle.critic_graph(&g, &pc, stego);
        let adversarial = losses::adversarial_loss(&g, d_cover, d_marked);

        let parts = LossParts {
            adversarial: Some(adversarial),
            fidelity: Some(fidelity),
            tracing: Some(tracing),
            local_common: Some(local_common),
            local_malicious,
        };
        let total = losses::total_loss(&g, &parts, &self.config.loss_weights);

        let adv_v = self.check_finite("adversarial loss", g.scalar_value(adversarial).to_f64())?;
        let fid_v = self.check_finite("fidelity loss", g.scalar_value(fidelity).to_f64())?;
        let tr_v = self.check_finite("tracing loss", g.scalar_value(tracing).to_f64())?;
        let lc_v = self.check_finite("common localization loss", g.scalar_value(local_common).to_f64())?;
        let lm_v = match local_malicious {
            Some(v) => Some(self.check_finite("malicious localization loss", g.scalar_value(v).to_f64())?),
            None => None,
        };
        let total_v = self.check_finite("total loss", g.scalar_value(total).to_f64())?;

        g.backward(total);
        let grads = p.grads(&g);
        self.opt_gen.step(&mut self.bundle.gen, &grads);

        let decoded_tr = matrix_value(&g, tr_out);
        let decoded_lo_com = matrix_value(&g, lo_com_out);
        let decoded_lo_mal = matrix_value(&g, lo_mal_out);
        let tracer_ber = metrics::bit_error_rate(&harden(&decoded_tr), batch.msg.bits())?;
        let localizer_common_ber =
            metrics::bit_error_rate(&harden(&decoded_lo_com), batch.msg.bits())?;
        let localizer_malicious_ber = if omega.is_empty() {
            None
        } else {
            let bits = harden(&decoded_lo_mal);
            let select = |m: &Array2<u8>| {
                let rows: Vec<_> = omega.iter().map(|&r| m.row(r).to_owned()).collect();
                let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
                ndarray::concatenate(Axis(0), &views).expect("row concat")
            };
            Some(metrics::bit_error_rate(&select(&bits), &select(batch.msg.bits()))?)
        };

        Ok(GenPhaseOut {
            adversarial: adv_v,
            fidelity: fid_v,
            tracing: tr_v,
            local_common: lc_v,
            local_malicious: lm_v,
            total: total_v,
            tracer_ber,
            localizer_common_ber,
            localizer_malicious_ber,
        })
    }

    /// One critic-then-generator optimization step on a sampled batch.
    pub fn train_step(&mut self, data: &[TrainImage<F>]) -> Result<StepStats> {
        let mut rng = self.rng_for(self.step);
        let batch = self.sample_batch(data, &mut rng)?;
        let critic = self.critic_phase(&batch)?;
        let gen = self.generator_phase(&batch)?;
        let stats = StepStats {
            step: self.step,
            critic,
            adversarial: gen.adversarial,
            fidelity: gen.fidelity,
            tracing: gen.tracing,
            local_common: gen.local_common,
            local_malicious: gen.local_malicious,
            total: gen.total,
            tracer_ber: gen.tracer_ber,
            localizer_common_ber: gen.localizer_common_ber,
            localizer_malicious_ber: gen.localizer_malicious_ber,
            probe_psnr: None,
        };
        self.step += 1;
        Ok(stats)
    }

    /// Mean PSNR of marking a fixed probe set with fixed messages.
    pub fn probe_psnr(&self, probe: &[TrainImage<F>]) -> Result<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.config.seed);
        // probe messages live on a reserved stream far from any step
        rng.set_stream(u64::MAX);
        let mut total = 0.0;
        let mut count = 0usize;
        for img in probe {
            if img.boxes.is_empty() {
                continue;
            }
            let msg = MessageMatrix::random(img.boxes.len(), self.config.model.msg_len, &mut rng);
            let marked = self.bundle.mark_image(&img.image, &img.boxes, &msg)?;
            total += metrics::psnr(&img.image, &marked)?;
            count += 1;
        }
        if count == 0 {
            return Err(Error::validation("probe set has no usable images"));
        }
        Ok(total / count as f64)
    }

    /// Run until the configured step budget, logging CSV rows and saving
    /// checkpoints under `out_dir` when given. `on_step` observes every row.
    pub fn run(
        &mut self,
        data: &[TrainImage<F>],
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepStats),
    ) -> Result<Vec<StepStats>> {
        let total = self.config.total_steps(data.len()) as u64;
        let mut log = Vec::new();
        let mut csv = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.csv");
                let fresh = !path.exists() || self.step == 0;
                let mut file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(file, "{}", StepStats::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
                }
                Some((file, path))
            }
            None => None,
        };
        let probe: Vec<TrainImage<F>> = data
            .iter()
            .filter(|i| !i.boxes.is_empty())
            .take(self.config.probe_images)
            .cloned()
            .collect();
        while self.step < total {
            let mut stats = self.train_step(data)?;
            let finished = self.step; // train_step advanced the counter
            if finished % self.config.probe_every as u64 == 0 || finished == total {
                stats.probe_psnr = Some(self.probe_psnr(&probe)?);
            }
            if let Some((file, path)) = csv.as_mut() {
                writeln!(file, "{}", stats.csv_row()).map_err(|e| Error::io(&*path, e))?;
            }
            if let Some(dir) = out_dir {
                if finished % self.config.checkpoint_every as u64 == 0 || finished == total {
                    self.save_checkpoint(&dir.join("latest.fmck"))?;
                }
            }
            on_step(&stats);
            log.push(stats);
        }
        Ok(log)
    }
}

struct GenPhaseOut {
    adversarial: f64,
    fidelity: f64,
    tracing: f64,
    local_common: f64,
    local_malicious: Option<f64>,
    total: f64,
    tracer_ber: f64,
    localizer_common_ber: f64,
    localizer_malicious_ber: Option<f64>,
}

fn matrix_value<F: Real>(g: &Graph<F>, v: Var) -> Array2<F> {
    g.value_cloned(v)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("decoder output rank")
}

/// Combine per-image reductions: mean of means, or sum of sums.
fn average_terms<F: Real>(g: &Graph<F>, terms: &[Var], mode: NormMode) -> Var {
    assert!(!terms.is_empty(), "no fidelity terms");
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    match mode {
        NormMode::Mean => g.mul_scalar(acc, F::from_f64(1.0 / terms.len() as f64)),
        NormMode::Sum => acc,
    }
}

/// Generate the in-memory synthetic dataset a config describes.
pub fn synthetic_data<F: Real>(config: &TrainConfig) -> Result<Vec<TrainImage<F>>> {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX - 1);
    let scenes = data::generate_synthetic_dataset(
        config.dataset_size,
        config.canvas,
        config.faces_per_image.0..=config.faces_per_image.1,
        &mut rng,
    )?;
    from_scenes(&scenes)
}

/// Recompute the weighted total from component losses; mirrors
/// [`losses::total_loss`] for bookkeeping checks.
pub fn recombine(stats: &StepStats, w: &LossWeights) -> f64 {
    w.adversarial * stats.adversarial
        + w.fidelity * stats.fidelity
        + w.tracing * stats.tracing
        + w.local_common * stats.local_common
        + w.local_malicious * stats.local_malicious.unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::desk_scale();
        cfg.batch_size = 2;
        cfg.dataset_size = 6;
        cfg.model.base_width = 6;
        cfg.model.critic_base = 6;
        cfg.model.critic_depth = 2;
        cfg.probe_images = 2;
        cfg
    }

    fn tiny_data(cfg: &TrainConfig) -> Vec<TrainImage<f32>> {
        synthetic_data::<f32>(cfg).unwrap()
    }

    #[test]
    fn step_zero_is_deterministic() {
        let cfg = tiny_config();
        let data = tiny_data(&cfg);
        let mut a = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut b = Trainer::<f32>::new(cfg).unwrap();
        let sa = a.train_step(&data).unwrap();
        let sb = b.train_step(&data).unwrap();
        assert_eq!(sa, sb, "identical seeds must give identical step stats");
    }

    #[test]
    fn total_matches_recombination() {
        let cfg = tiny_config();
        // f64 model: bookkeeping identity holds to 1e-9
        let data = synthetic_data::<f64>(&cfg).unwrap();
        let mut t = Trainer::<f64>::new(cfg.clone()).unwrap();
        for _ in 0..3 {
            let stats = t.train_step(&data).unwrap();
            let recombined = recombine(&stats, &cfg.loss_weights);
            assert!(
                (stats.total - recombined).abs() <= 1e-9 * recombined.abs().max(1.0),
                "total {} vs recombined {}",
                stats.total,
                recombined
            );
        }
        // f32 model: same identity up to single-precision rounding
        let data = tiny_data(&cfg);
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let stats = t.train_step(&data).unwrap();
        let recombined = recombine(&stats, &cfg.loss_weights);
        assert!(
            (stats.total - recombined).abs() <= 1e-5 * recombined.abs().max(1.0),
            "total {} vs recombined {}",
            stats.total,
            recombined
        );
    }

    #[test]
    fn fidelity_only_weights_leave_decoders_without_gradient() {
        let mut cfg = tiny_config();
        cfg.loss_weights = LossWeights {
            adversarial: 0.0,
            fidelity: 1.0,
            tracing: 0.0,
            local_common: 0.0,
            local_malicious: 0.0,
        };
        let data = tiny_data(&cfg);
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let rng = &mut t.rng_for(0);
        let batch = t.sample_batch(&data, rng).unwrap();
        // decoder parameters must stay bit-identical through the update
        let before: Vec<(String, ndarray::ArrayD<f32>)> = t
            .bundle
            .gen
            .iter()
            .filter(|(n, _)| n.starts_with("tr.") || n.starts_with("lo."))
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        assert!(!before.is_empty());
        t.generator_phase(&batch).unwrap();
        for (name, old) in before {
            let now = t
                .bundle
                .gen
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| v.clone())
                .unwrap();
            assert_eq!(now, old, "decoder parameter {name} moved under zero weight");
        }
    }

    #[test]
    fn phases_touch_only_their_banks() {
        let cfg = tiny_config();
        let data = tiny_data(&cfg);
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let rng = &mut t.rng_for(0);
        let batch = t.sample_batch(&data, rng).unwrap();

        let gen_before: Vec<ndarray::ArrayD<f32>> =
            t.bundle.gen.iter().map(|(_, v)| v.clone()).collect();
        t.critic_phase(&batch).unwrap();
        let gen_after: Vec<ndarray::ArrayD<f32>> =
            t.bundle.gen.iter().map(|(_, v)| v.clone()).collect();
        assert_eq!(gen_before, gen_after, "critic update must not move generator");

        let critic_before: Vec<ndarray::ArrayD<f32>> =
            t.bundle.critic.iter().map(|(_, v)| v.clone()).collect();
        t.generator_phase(&batch).unwrap();
        let critic_after: Vec<ndarray::ArrayD<f32>> =
            t.bundle.critic.iter().map(|(_, v)| v.clone()).collect();
        assert_eq!(critic_before, critic_after, "generator update must not move critic");
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resume.fmck");
        let cfg = tiny_config();
        let data = tiny_data(&cfg);

        let mut full = Trainer::<f32>::new(cfg.clone()).unwrap();
        full.train_step(&data).unwrap();
        full.train_step(&data).unwrap();
        full.save_checkpoint(&path).unwrap();
        let s2 = full.train_step(&data).unwrap();

        let mut resumed = Trainer::<f32>::resume(cfg, &path).unwrap();
        assert_eq!(resumed.step_count(), 2);
        let s2r = resumed.train_step(&data).unwrap();
        assert_eq!(s2, s2r, "resumed step must match the uninterrupted run");
        for ((_, a), (_, b)) in full.bundle.gen.iter().zip(resumed.bundle.gen.iter()) {
            assert_eq!(a, b, "parameters must match bit for bit");
        }
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fmck");
        let cfg = tiny_config();
        let t = Trainer::<f32>::new(cfg.clone()).unwrap();
        t.save_checkpoint(&path).unwrap();
        let mut other = cfg.clone();
        other.model.base_width += 1;
        assert!(Trainer::<f32>::resume(other, &path).is_err());
        let mut reseeded = cfg;
        reseeded.seed += 1;
        assert!(Trainer::<f32>::resume(reseeded, &path).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = TrainConfig::desk_scale();
        cfg.save(&path).unwrap();
        assert_eq!(TrainConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn malicious_rows_follow_swap_selection() {
        // the malicious branch must always contribute: swap selections are
        // never empty, so omega covers at least one face per image
        let cfg = tiny_config();
        let data = tiny_data(&cfg);
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let stats = t.train_step(&data).unwrap();
        assert!(stats.local_malicious.is_some());
        assert!(stats.localizer_malicious_ber.is_some());
    }
}
