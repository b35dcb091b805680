//! Parameter storage, network building blocks, and the Adam optimizer.
//!
//! A [`ParamBank`] owns named tensors; every training step binds them into a
//! fresh [`Graph`] as leaves (or as constants when the network is frozen),
//! builds the step's computation, and reads gradients back in bank order.
//! Layer structs are thin descriptors: they register their parameters once
//! and replay the same wiring on any graph.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Real, Var};

/// Negative slope shared by every LeakyReLU in the stack.
pub const LRELU_SLOPE: f64 = 0.2;

/// Named parameter tensors in stable insertion order.
#[derive(Debug, Clone)]
pub struct ParamBank<F: Real> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Real> Default for ParamBank<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamBank<F> {
    pub fn new() -> Self {
        ParamBank {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Binds every tensor as a differentiable leaf.
    pub fn bind(&self, g: &Graph<F>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.leaf(v.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Binds every tensor as a constant (frozen network: gradients still flow
    /// through its activations, none are accumulated for its parameters).
    pub fn bind_frozen(&self, g: &Graph<F>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.constant(v.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Element-wise in-place update in bank order.
    pub fn apply_updates(&mut self, deltas: &[Option<ArrayD<F>>]) {
        assert_eq!(deltas.len(), self.values.len(), "update count mismatch");
        for (v, d) in self.values.iter_mut().zip(deltas) {
            if let Some(d) = d {
                *v += d;
            }
        }
    }

    /// Converts every tensor element-wise, e.g. to run an `f32`-trained model
    /// under the `f64` gradient checker.
    pub fn cast<G: Real>(&self) -> ParamBank<G> {
        ParamBank {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::from_f64(x.to_f64())))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles for one bank binding.
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    /// Panics on unknown names: wiring and registration must agree.
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))]
    }

    /// Gradients in bank order after a backward pass.
    pub fn grads<F: Real>(&self, g: &Graph<F>) -> Vec<Option<ArrayD<F>>> {
        self.vars.iter().map(|&v| g.grad(v)).collect()
    }
}

fn he_normal<F: Real>(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::from_f64(dist.sample(rng)))
}

/// 3x3-style convolution descriptor.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub zero_init: bool,
}

impl Conv2d {
    pub fn register<F: Real>(&self, bank: &mut ParamBank<F>, rng: &mut ChaCha20Rng) -> Result<()> {
        let shape = [self.out_ch, self.in_ch, self.k, self.k];
        let w = if self.zero_init {
            ArrayD::zeros(IxDyn(&shape))
        } else {
            he_normal(rng, &shape, self.in_ch * self.k * self.k)
        };
        bank.add(format!("{}.w", self.name), w)?;
        bank.add(format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.out_ch])))
    }

    pub fn apply<F: Real>(&self, g: &Graph<F>, p: &Bound, x: Var) -> Var {
        g.conv2d(
            x,
            p.var(&format!("{}.w", self.name)),
            p.var(&format!("{}.b", self.name)),
            self.stride,
            self.pad,
        )
    }
}

/// Fully connected layer descriptor.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub in_f: usize,
    pub out_f: usize,
}

impl Dense {
    pub fn register<F: Real>(&self, bank: &mut ParamBank<F>, rng: &mut ChaCha20Rng) -> Result<()> {
        let std = 1.0 / (self.in_f as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let w = ArrayD::from_shape_fn(IxDyn(&[self.out_f, self.in_f]), |_| F::from_f64(dist.sample(rng)));
        bank.add(format!("{}.w", self.name), w)?;
        bank.add(format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.out_f])))
    }

    pub fn apply<F: Real>(&self, g: &Graph<F>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(&format!("{}.w", self.name)), p.var(&format!("{}.b", self.name)))
    }
}

/// Small U-Net backbone: per-level conv + strided downsample, a middle conv,
/// then nearest-neighbor upsampling with skip concatenation. Outputs a
/// feature map with `base` channels at input resolution. Deliberately free of
/// normalization layers so each patch is processed independently.
#[derive(Debug, Clone)]
pub struct UNet {
    pub prefix: String,
    pub in_ch: usize,
    pub base: usize,
    pub levels: usize,
    enc: Vec<Conv2d>,
    down: Vec<Conv2d>,
    mid: Conv2d,
    up: Vec<Conv2d>,
}

impl UNet {
    pub fn new(prefix: &str, in_ch: usize, base: usize, levels: usize) -> Self {
        assert!(levels >= 1, "unet needs at least one level");
        let ch = |i: usize| base << i;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for i in 0..levels {
            let cin = if i == 0 { in_ch } else { ch(i - 1) };
            enc.push(Conv2d {
                name: format!("{prefix}.enc{i}"),
                in_ch: cin,
                out_ch: ch(i),
                k: 3,
                stride: 1,
                pad: 1,
                zero_init: false,
            });
            down.push(Conv2d {
                name: format!("{prefix}.down{i}"),
                in_ch: ch(i),
                out_ch: ch(i),
                k: 3,
                stride: 2,
                pad: 1,
                zero_init: false,
            });
        }
        let top = ch(levels - 1);
        let mid = Conv2d {
            name: format!("{prefix}.mid"),
            in_ch: top,
            out_ch: top,
            k: 3,
            stride: 1,
            pad: 1,
            zero_init: false,
        };
        let mut up = Vec::new();
        let mut cur = top;
        for i in (0..levels).rev() {
            up.push(Conv2d {
                name: format!("{prefix}.up{i}"),
                in_ch: cur + ch(i),
                out_ch: ch(i),
                k: 3,
                stride: 1,
                pad: 1,
                zero_init: false,
            });
            cur = ch(i);
        }
        UNet {
            prefix: prefix.to_string(),
            in_ch,
            base,
            levels,
            enc,
            down,
            mid,
            up,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.base
    }

    /// Input height/width must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn register<F: Real>(&self, bank: &mut ParamBank<F>, rng: &mut ChaCha20Rng) -> Result<()> {
        for c in &self.enc {
            c.register(bank, rng)?;
        }
        for c in &self.down {
            c.register(bank, rng)?;
        }
        self.mid.register(bank, rng)?;
        for c in &self.up {
            c.register(bank, rng)?;
        }
        Ok(())
    }

    pub fn apply<F: Real>(&self, g: &Graph<F>, p: &Bound, x: Var) -> Var {
        let slope = F::from_f64(LRELU_SLOPE);
        let mut skips = Vec::with_capacity(self.levels);
        let mut h = x;
        for i in 0..self.levels {
            h = g.leaky_relu(self.enc[i].apply(g, p, h), slope);
            skips.push(h);
            h = g.leaky_relu(self.down[i].apply(g, p, h), slope);
        }
        h = g.leaky_relu(self.mid.apply(g, p, h), slope);
        for (j, i) in (0..self.levels).rev().enumerate() {
            h = g.upsample_nearest2(h);
            h = g.concat_channels(h, skips[i]);
            h = g.leaky_relu(self.up[j].apply(g, p, h), slope);
        }
        h
    }
}

/// PatchGAN-style critic: strided convs, global average pool, one score per
/// patch, shape `(N, 1)`.
#[derive(Debug, Clone)]
pub struct Critic {
    convs: Vec<Conv2d>,
    head: Dense,
}

impl Critic {
    pub fn new(prefix: &str, in_ch: usize, base: usize, depth: usize) -> Self {
        assert!(depth >= 1);
        let mut convs = Vec::new();
        let mut cin = in_ch;
        let mut cout = base;
        for i in 0..depth {
            convs.push(Conv2d {
                name: format!("{prefix}.c{i}"),
                in_ch: cin,
                out_ch: cout,
                k: 3,
                stride: 2,
                pad: 1,
                zero_init: false,
            });
            cin = cout;
            cout *= 2;
        }
        Critic {
            convs,
            head: Dense {
                name: format!("{prefix}.head"),
                in_f: cin,
                out_f: 1,
            },
        }
    }

    pub fn register<F: Real>(&self, bank: &mut ParamBank<F>, rng: &mut ChaCha20Rng) -> Result<()> {
        for c in &self.convs {
            c.register(bank, rng)?;
        }
        self.head.register(bank, rng)
    }

    pub fn apply<F: Real>(&self, g: &Graph<F>, p: &Bound, x: Var) -> Var {
        let slope = F::from_f64(LRELU_SLOPE);
        let mut h = x;
        for c in &self.convs {
            h = g.leaky_relu(c.apply(g, p, h), slope);
        }
        self.head.apply(g, p, g.global_avg_pool(h))
    }
}

/// Adam with bias correction; moment buffers are aligned with bank order and
/// survive checkpointing.
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(bank: &ParamBank<F>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: bank.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect(),
            v: bank.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update from gradients in bank order; `None` entries count as zero.
    pub fn step(&mut self, bank: &mut ParamBank<F>, grads: &[Option<ArrayD<F>>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        let mut deltas: Vec<Option<ArrayD<F>>> = Vec::with_capacity(grads.len());
        for (i, gopt) in grads.iter().enumerate() {
            match gopt {
                None => deltas.push(None),
                Some(grad) => {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    ndarray::Zip::from(&mut *m).and(grad).for_each(|mi, &gi| {
                        *mi = b1 * *mi + (one - b1) * gi;
                    });
                    ndarray::Zip::from(&mut *v).and(grad).for_each(|vi, &gi| {
                        *vi = b2 * *vi + (one - b2) * gi * gi;
                    });
                    let mut delta = ArrayD::<F>::zeros(grad.raw_dim());
                    ndarray::Zip::from(&mut delta).and(&*m).and(&*v).for_each(|d, &mi, &vi| {
                        let mhat = mi / bc1;
                        let vhat = vi / bc2;
                        *d = -lr * mhat / (vhat.sqrt() + eps);
                    });
                    deltas.push(Some(delta));
                }
            }
        }
        bank.apply_updates(&deltas);
    }

    /// Moment access for checkpointing, in bank order.
    pub fn state(&self) -> (u64, &[ArrayD<F>], &[ArrayD<F>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer state size mismatch".into()));
        }
        for (a, b) in m.iter().zip(&self.m) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
            }
        }
        for (a, b) in v.iter().zip(&self.v) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
