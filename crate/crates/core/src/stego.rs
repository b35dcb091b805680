//! Watermark embedding and the two decoding heads.
//!
//! The embedder is a U-Net conditioned on a per-face message: the message
//! vector is broadcast to message planes, concatenated with the cover patch,
//! and mapped to a bounded residual `eps * tanh(head)` added onto the cover.
//! With the residual head zero-initialized the embedder starts as an exact
//! identity, so early training cannot damage image quality.
//!
//! Two structurally identical decoders read patches back:
//! - the tracer recovers the embedded message under benign distortion;
//! - the localizer is trained to collapse its output to zero whenever the
//!   patch content was maliciously replaced, making its failure a signal.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::geometry::{FaceBox, PatchBatch};
use crate::graph::{Graph, Real, Var};
use crate::nn::{Adam, Bound, Conv2d, Critic, Dense, ParamBank, UNet};

/// Signal level of one message bit; bits map to `-0.1` / `+0.1`.
pub const MSG_AMPLITUDE: f64 = 0.1;

/// Default message payload per face.
pub const DEFAULT_MSG_LEN: usize = 15;

/// Per-face binary messages plus optional identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageMatrix {
    bits: Array2<u8>,
    identities: Vec<Option<String>>,
}

impl MessageMatrix {
    pub fn from_bits(bits: Array2<u8>, identities: Vec<Option<String>>) -> Result<Self> {
        if bits.nrows() != identities.len() {
            return Err(Error::validation(format!(
                "{} messages but {} identity labels",
                bits.nrows(),
                identities.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::validation("message bits must be 0 or 1"));
        }
        Ok(MessageMatrix { bits, identities })
    }

    pub fn random(n: usize, msg_len: usize, rng: &mut ChaCha20Rng) -> Self {
        let bits = Array2::from_shape_fn((n, msg_len), |_| u8::from(rng.random::<bool>()));
        MessageMatrix {
            bits,
            identities: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn msg_len(&self) -> usize {
        self.bits.ncols()
    }

    pub fn bits(&self) -> &Array2<u8> {
        &self.bits
    }

    pub fn identities(&self) -> &[Option<String>] {
        &self.identities
    }

    /// Bipolar signal view: bit 1 -> `+0.1`, bit 0 -> `-0.1`.
    pub fn signal<F: Real>(&self) -> Array2<F> {
        let amp = F::from_f64(MSG_AMPLITUDE);
        self.bits.mapv(|b| if b == 1 { amp } else { -amp })
    }

    /// Rows `rows[i]` stacked into a new matrix (labels follow).
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        for &r in rows {
            if r >= self.len() {
                return Err(Error::validation(format!("message row {r} out of range")));
            }
        }
        let bits = Array2::from_shape_fn((rows.len(), self.msg_len()), |(i, j)| self.bits[[rows[i], j]]);
        let identities = rows.iter().map(|&r| self.identities[r].clone()).collect();
        Ok(MessageMatrix { bits, identities })
    }
}

/// Thresholds decoder estimates back to hard bits (`>= 0` reads as 1).
pub fn harden<F: Real>(estimates: &Array2<F>) -> Array2<u8> {
    estimates.mapv(|e| u8::from(e >= F::zero()))
}

/// Architecture hyperparameters; frozen into checkpoints.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub msg_len: usize,
    pub base_width: usize,
    pub levels: usize,
    pub critic_base: usize,
    pub critic_depth: usize,
    /// Residual amplitude bound; embedding never moves a pixel further.
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_h: 64,
            patch_w: 64,
            msg_len: DEFAULT_MSG_LEN,
            base_width: 16,
            levels: 2,
            critic_base: 16,
            critic_depth: 3,
            epsilon: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 || self.msg_len == 0 || self.base_width == 0 {
            return Err(Error::validation("model dimensions must be positive"));
        }
        if self.levels == 0 || self.critic_depth == 0 || self.critic_base == 0 {
            return Err(Error::validation("model depths must be positive"));
        }
        let div = 1usize << self.levels;
        if self.patch_h % div != 0 || self.patch_w % div != 0 {
            return Err(Error::validation(format!(
                "patch {}x{} not divisible by 2^levels = {div}",
                self.patch_h, self.patch_w
            )));
        }
        let cdiv = 1usize << self.critic_depth;
        if self.patch_h < cdiv || self.patch_w < cdiv {
            return Err(Error::validation("patch too small for critic depth"));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(Error::validation("epsilon must lie in (0, 0.5]"));
        }
        Ok(())
    }
}

/// The four networks plus their parameters: embedder and decoders in `gen`,
/// the critic in its own bank so the two optimizers stay disjoint.
pub struct ModelBundle<F: Real> {
    pub config: ModelConfig,
    pub gen: ParamBank<F>,
    pub critic: ParamBank<F>,
    embedder: UNet,
    embed_head: Conv2d,
    tracer: UNet,
    tracer_head: Dense,
    localizer: UNet,
    localizer_head: Dense,
    critic_net: Critic,
}

struct Nets {
    embedder: UNet,
    embed_head: Conv2d,
    tracer: UNet,
    tracer_head: Dense,
    localizer: UNet,
    localizer_head: Dense,
    critic_net: Critic,
}

fn build_nets(config: &ModelConfig) -> Nets {
    let embedder = UNet::new("emb", 3 + config.msg_len, config.base_width, config.levels);
    let embed_head = Conv2d {
        name: "emb.head".into(),
        in_ch: config.base_width,
        out_ch: 3,
        k: 3,
        stride: 1,
        pad: 1,
        zero_init: true,
    };
    let tracer = UNet::new("tr", 3, config.base_width, config.levels);
    let tracer_head = Dense {
        name: "tr.head".into(),
        in_f: config.base_width,
        out_f: config.msg_len,
    };
    let localizer = UNet::new("lo", 3, config.base_width, config.levels);
    let localizer_head = Dense {
        name: "lo.head".into(),
        in_f: config.base_width,
        out_f: config.msg_len,
    };
    let critic_net = Critic::new("cr", 3, config.critic_base, config.critic_depth);
    Nets {
        embedder,
        embed_head,
        tracer,
        tracer_head,
        localizer,
        localizer_head,
        critic_net,
    }
}

impl<F: Real> ModelBundle<F> {
    /// Fresh random initialization; fully determined by `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let nets = build_nets(&config);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut gen = ParamBank::new();
        nets.embedder.register(&mut gen, &mut rng)?;
        nets.embed_head.register(&mut gen, &mut rng)?;
        nets.tracer.register(&mut gen, &mut rng)?;
        nets.tracer_head.register(&mut gen, &mut rng)?;
        nets.localizer.register(&mut gen, &mut rng)?;
        nets.localizer_head.register(&mut gen, &mut rng)?;
        let mut critic = ParamBank::new();
        nets.critic_net.register(&mut critic, &mut rng)?;
        Ok(ModelBundle {
            config,
            gen,
            critic,
            embedder: nets.embedder,
            embed_head: nets.embed_head,
            tracer: nets.tracer,
            tracer_head: nets.tracer_head,
            localizer: nets.localizer,
            localizer_head: nets.localizer_head,
            critic_net: nets.critic_net,
        })
    }

    /// Rebuilds a bundle around previously saved banks, verifying that every
    /// expected parameter is present with the right shape.
    pub fn from_banks(config: ModelConfig, gen: ParamBank<F>, critic: ParamBank<F>) -> Result<Self> {
        let reference = ModelBundle::<F>::init(config.clone(), 0)?;
        for (bank, refbank, which) in [(&gen, &reference.gen, "gen"), (&critic, &reference.critic, "critic")] {
            if bank.len() != refbank.len() {
                return Err(Error::Checkpoint(format!(
                    "{which} bank has {} tensors, expected {}",
                    bank.len(),
                    refbank.len()
                )));
            }
            for (name, val) in refbank.iter() {
                match bank.get(name) {
                    None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                    Some(got) if got.shape() != val.shape() => {
                        return Err(Error::Checkpoint(format!(
                            "parameter {name} has shape {:?}, expected {:?}",
                            got.shape(),
                            val.shape()
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(ModelBundle {
            config,
            gen,
            critic,
            embedder: reference.embedder,
            embed_head: reference.embed_head,
            tracer: reference.tracer,
            tracer_head: reference.tracer_head,
            localizer: reference.localizer,
            localizer_head: reference.localizer_head,
            critic_net: reference.critic_net,
        })
    }

    pub fn cast<G: Real>(&self) -> ModelBundle<G> {
        let nets = build_nets(&self.config);
        ModelBundle {
            config: self.config.clone(),
            gen: self.gen.cast(),
            critic: self.critic.cast(),
            embedder: nets.embedder,
            embed_head: nets.embed_head,
            tracer: nets.tracer,
            tracer_head: nets.tracer_head,
            localizer: nets.localizer,
            localizer_head: nets.localizer_head,
            critic_net: nets.critic_net,
        }
    }

    /// Optimizers for the generator side and the critic side.
    pub fn optimizers(&self, lr: f64) -> (Adam<F>, Adam<F>) {
        (Adam::new(&self.gen, lr), Adam::new(&self.critic, lr))
    }

    fn check_patches(&self, dim: (usize, usize, usize, usize)) -> Result<()> {
        let (_, c, h, w) = dim;
        if c != 3 || h != self.config.patch_h || w != self.config.patch_w {
            return Err(Error::validation(format!(
                "patches {dim:?} do not match model patch 3x{}x{}",
                self.config.patch_h, self.config.patch_w
            )));
        }
        Ok(())
    }

    // ----- graph builders (training and value paths share these) -----

    /// `(N,3,h,w), (N,L) -> (N,3,h,w)` watermarked patches.
    pub fn embed_graph(&self, g: &Graph<F>, p: &Bound, cover: Var, msg: Var) -> Var {
        let planes = g.broadcast_spatial(msg, self.config.patch_h, self.config.patch_w);
        let x = g.concat_channels(cover, planes);
        let feat = self.embedder.apply(g, p, x);
        let head = self.embed_head.apply(g, p, feat);
        let residual = g.mul_scalar(g.tanh(head), F::from_f64(self.config.epsilon));
        g.clamp01(g.add(cover, residual))
    }

    /// `(N,3,h,w) -> (N,L)` robust message estimates.
    pub fn tracer_graph(&self, g: &Graph<F>, p: &Bound, patches: Var) -> Var {
        let feat = self.tracer.apply(g, p, patches);
        self.tracer_head.apply(g, p, g.global_avg_pool(feat))
    }

    /// `(N,3,h,w) -> (N,L)` fragile message estimates.
    pub fn localizer_graph(&self, g: &Graph<F>, p: &Bound, patches: Var) -> Var {
        let feat = self.localizer.apply(g, p, patches);
        self.localizer_head.apply(g, p, g.global_avg_pool(feat))
    }

    /// `(N,3,h,w) -> (N,1)` realism scores.
    pub fn critic_graph(&self, g: &Graph<F>, p: &Bound, patches: Var) -> Var {
        self.critic_net.apply(g, p, patches)
    }

    // ----- value paths -----

    /// Embeds one message per patch; same boxes, same resolution.
    pub fn embed(&self, cover: &PatchBatch<F>, msg: &MessageMatrix) -> Result<PatchBatch<F>> {
        self.check_patches(cover.data().dim())?;
        if msg.len() != cover.len() {
            return Err(Error::validation(format!(
                "{} messages for {} patches",
                msg.len(),
                cover.len()
            )));
        }
        if msg.msg_len() != self.config.msg_len {
            return Err(Error::validation(format!(
                "message length {} does not match model length {}",
                msg.msg_len(),
                self.config.msg_len
            )));
        }
        if cover.is_empty() {
            return Ok(cover.clone());
        }
        let g = Graph::<F>::new();
        let p = self.gen.bind_frozen(&g);
        let cover_var = g.constant(cover.data().clone().into_dyn());
        let msg_var = g.constant(msg.signal::<F>().into_dyn());
        let stego = self.embed_graph(&g, &p, cover_var, msg_var);
        let data = g
            .value_cloned(stego)
            .into_dimensionality::<ndarray::Ix4>()
            .expect("stego rank");
        PatchBatch::new(data, cover.boxes().to_vec())
    }

    /// Embed one message per annotated face and paste the residuals back,
    /// returning the full watermarked image.
    pub fn mark_image(
        &self,
        image: &Array3<F>,
        boxes: &[FaceBox],
        msg: &MessageMatrix,
    ) -> Result<Array3<F>> {
        let patch = (self.config.patch_h, self.config.patch_w);
        let cover = crate::geometry::crop_resample(image, boxes, patch)?;
        let stego = self.embed(&cover, msg)?;
        crate::geometry::paste_residual(image, &stego, &cover)
    }

    /// Crop the annotated faces at model resolution, ready for decoding.
    pub fn read_patches(&self, image: &Array3<F>, boxes: &[FaceBox]) -> Result<Array4<F>> {
        let patch = (self.config.patch_h, self.config.patch_w);
        Ok(crate::geometry::crop_resample(image, boxes, patch)?.into_data())
    }

    /// Robust decode of raw patches.
    pub fn trace(&self, patches: &Array4<F>) -> Result<Array2<F>> {
        self.decode_with(patches, |g, p, x| self.tracer_graph(g, p, x))
    }

    /// Fragile decode of raw patches.
    pub fn localize(&self, patches: &Array4<F>) -> Result<Array2<F>> {
        self.decode_with(patches, |g, p, x| self.localizer_graph(g, p, x))
    }

    fn decode_with(
        &self,
        patches: &Array4<F>,
        build: impl Fn(&Graph<F>, &Bound, Var) -> Var,
    ) -> Result<Array2<F>> {
        self.check_patches(patches.dim())?;
        if patches.dim().0 == 0 {
            return Ok(Array2::zeros((0, self.config.msg_len)));
        }
        let g = Graph::<F>::new();
        let p = self.gen.bind_frozen(&g);
        let x = g.constant(patches.clone().into_dyn());
        let out = build(&g, &p, x);
        Ok(g.value_cloned(out)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("decode rank"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FaceBox;
    use ndarray::{Array4, ArrayD, IxDyn};

    fn desk_config() -> ModelConfig {
        ModelConfig {
            patch_h: 16,
            patch_w: 16,
            msg_len: 15,
            base_width: 6,
            levels: 2,
            critic_base: 6,
            critic_depth: 2,
            epsilon: 0.05,
        }
    }

    fn toy_batch(n: usize, hw: usize, seed: u64) -> PatchBatch<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = Array4::from_shape_fn((n, 3, hw, hw), |_| 0.1 + 0.8 * rng.random::<f32>());
        let boxes = (0..n)
            .map(|_| FaceBox::from_pixels([0.0, 0.0, hw as f64, hw as f64], hw as u32, hw as u32).unwrap())
            .collect();
        PatchBatch::new(data, boxes).unwrap()
    }

    #[test]
    fn message_bits_round_trip_signal() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let m = MessageMatrix::random(4, 15, &mut rng);
        let sig = m.signal::<f64>();
        assert_eq!(harden(&sig), *m.bits());
        assert!(sig.iter().all(|&v| v == 0.1 || v == -0.1));
    }

    #[test]
    fn message_matrix_validates() {
        let bits = Array2::from_elem((2, 3), 2u8);
        assert!(MessageMatrix::from_bits(bits, vec![None, None]).is_err());
        let bits = Array2::from_elem((2, 3), 1u8);
        assert!(MessageMatrix::from_bits(bits.clone(), vec![None]).is_err());
        assert!(MessageMatrix::from_bits(bits, vec![None, None]).is_ok());
    }

    #[test]
    fn config_rejects_indivisible_patch() {
        let mut c = desk_config();
        c.patch_h = 18;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embedding_at_init_is_exact_identity() {
        let bundle = ModelBundle::<f32>::init(desk_config(), 7).unwrap();
        let cover = toy_batch(3, 16, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let msg = MessageMatrix::random(3, 15, &mut rng);
        let stego = bundle.embed(&cover, &msg).unwrap();
        for (a, b) in cover.data().iter().zip(stego.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn embedding_residual_is_bounded_and_message_sensitive() {
        let mut bundle = ModelBundle::<f32>::init(desk_config(), 7).unwrap();
        // wake the zero head so the residual actually depends on the message
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let head = bundle.gen.get_mut("emb.head.w").unwrap();
        head.mapv_inplace(|_| 0.3 * (rng.random::<f32>() - 0.5));
        let cover = toy_batch(2, 16, 4);
        let m1 = MessageMatrix::random(2, 15, &mut ChaCha20Rng::seed_from_u64(5));
        let m2 = MessageMatrix::random(2, 15, &mut ChaCha20Rng::seed_from_u64(6));
        assert_ne!(m1.bits(), m2.bits());
        let s1 = bundle.embed(&cover, &m1).unwrap();
        let s2 = bundle.embed(&cover, &m2).unwrap();
        let eps = bundle.config.epsilon as f32;
        let mut max_diff = 0.0f32;
        for (c, s) in cover.data().iter().zip(s1.data().iter()) {
            max_diff = max_diff.max((c - s).abs());
        }
        assert!(max_diff <= eps, "residual {max_diff} exceeds bound {eps}");
        assert!(max_diff > 0.0, "head was woken, residual should be nonzero");
        assert_ne!(s1.data(), s2.data(), "stego must depend on the message");
    }

    #[test]
    fn decoders_have_identical_parameter_budgets() {
        let bundle = ModelBundle::<f32>::init(desk_config(), 9).unwrap();
        let count = |prefix: &str| {
            bundle
                .gen
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(_, v)| v.len())
                .sum::<usize>()
        };
        assert_eq!(count("tr."), count("lo."));
        assert!(count("tr.") > 0);
    }

    #[test]
    fn decode_shapes_and_empty_batch() {
        let bundle = ModelBundle::<f32>::init(desk_config(), 9).unwrap();
        let patches = Array4::from_elem((4, 3, 16, 16), 0.5f32);
        assert_eq!(bundle.trace(&patches).unwrap().dim(), (4, 15));
        assert_eq!(bundle.localize(&patches).unwrap().dim(), (4, 15));
        let empty = Array4::from_elem((0, 3, 16, 16), 0.0f32);
        assert_eq!(bundle.trace(&empty).unwrap().dim(), (0, 15));
    }

    #[test]
    fn from_banks_round_trip_and_validation() {
        let bundle = ModelBundle::<f32>::init(desk_config(), 13).unwrap();
        let rebuilt = ModelBundle::from_banks(desk_config(), bundle.gen.clone(), bundle.critic.clone()).unwrap();
        let cover = toy_batch(1, 16, 8);
        let msg = MessageMatrix::random(1, 15, &mut ChaCha20Rng::seed_from_u64(2));
        assert_eq!(
            bundle.embed(&cover, &msg).unwrap().data(),
            rebuilt.embed(&cover, &msg).unwrap().data()
        );
        let mut broken = bundle.gen.clone();
        *broken.get_mut("tr.head.b").unwrap() = ArrayD::zeros(IxDyn(&[99]));
        assert!(ModelBundle::from_banks(desk_config(), broken, bundle.critic.clone()).is_err());
    }

    #[test]
    fn cast_preserves_embedding_closely() {
        let mut bundle = ModelBundle::<f32>::init(desk_config(), 21).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        bundle
            .gen
            .get_mut("emb.head.w")
            .unwrap()
            .mapv_inplace(|_| 0.2 * (rng.random::<f32>() - 0.5));
        let cover = toy_batch(2, 16, 23);
        let msg = MessageMatrix::random(2, 15, &mut ChaCha20Rng::seed_from_u64(24));
        let s32 = bundle.embed(&cover, &msg).unwrap();
        let b64 = bundle.cast::<f64>();
        let cover64 = PatchBatch::new(cover.data().mapv(|x| x as f64), cover.boxes().to_vec()).unwrap();
        let s64 = b64.embed(&cover64, &msg).unwrap();
        for (a, b) in s32.data().iter().zip(s64.data().iter()) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn message_select_reorders_rows() {
        let bits = Array2::from_shape_fn((3, 4), |(i, j)| u8::from((i + j) % 2 == 0));
        let m = MessageMatrix::from_bits(bits, vec![Some("a".into()), None, Some("c".into())]).unwrap();
        let sel = m.select(&[2, 0]).unwrap();
        assert_eq!(sel.identities()[0].as_deref(), Some("c"));
        assert_eq!(sel.identities()[1].as_deref(), Some("a"));
        assert_eq!(sel.bits().row(0), m.bits().row(2));
        assert!(m.select(&[5]).is_err());
    }
}
