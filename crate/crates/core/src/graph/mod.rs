//! Reverse-mode automatic differentiation on an eager tape.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! replays the tape in reverse, accumulating cotangents. Nodes hold
//! dynamic-rank `ndarray` tensors, and [`Var`] is a copyable index into the
//! tape, so graphs are built with plain method chains and rebuilt from
//! scratch every training step.
//!
//! The engine is generic over [`Real`] so training runs in `f32` while
//! gradient checks run the identical code in `f64`. Execution is strictly
//! sequential; given the same inputs it produces the same bits.

pub mod gradcheck;
pub(crate) mod kernels;

use std::cell::{Ref, RefCell};

use ndarray::{s, ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::geometry::{self, CropPlan, PastePlan};

/// Element type tag used by checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        }
    }
}

/// Scalar type the whole numeric stack is generic over.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, F),
    /// `x + s` with `s` a 0-dim node broadcast over `x`.
    AddBcast(Var, Var),
    Sqr(Var),
    Tanh(Var),
    LeakyRelu(Var, F),
    Clamp01(Var),
    SumAll(Var),
    MeanAll(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    UpsampleNearest2(Var),
    ConcatChannels(Var, Var),
    ConcatBatch(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    BroadcastSpatial(Var, usize, usize),
    CropFaces {
        image: Var,
        plan: CropPlan,
    },
    PasteFaces {
        image: Var,
        residual: Var,
        plan: PastePlan,
    },
    Blur1d {
        x: Var,
        kernel: Vec<f64>,
        horizontal: bool,
    },
    ColorMat {
        x: Var,
        m: [[f64; 3]; 3],
    },
    /// Straight-through replacement: value comes from elsewhere, gradient
    /// passes to `x` unchanged.
    ReplaceSt(Var),
}

struct Node<F: Real> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Views rank-3 input as a batch of one; rank-4 passes through.
fn view_as_batch<F: Real>(v: &ArrayD<F>) -> (ndarray::ArrayView4<'_, F>, bool) {
    match v.ndim() {
        4 => (v.view().into_dimensionality().expect("rank 4"), false),
        3 => (
            v.view().insert_axis(Axis(0)).into_dimensionality().expect("rank 3+1"),
            true,
        ),
        other => panic!("expected rank 3 or 4 tensor, got rank {other}"),
    }
}

fn restore_rank<F: Real>(out: ndarray::Array4<F>, squeeze: bool) -> ArrayD<F> {
    if squeeze {
        out.index_axis_move(Axis(0), 0).into_dyn()
    } else {
        out.into_dyn()
    }
}

/// Eager autodiff tape.
pub struct Graph<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    grads: RefCell<Vec<Option<ArrayD<F>>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Differentiable input (parameters, or tensors whose gradient is read).
    pub fn leaf(&self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; backward prunes every branch that only
    /// depends on constants.
    pub fn constant(&self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: F) -> Var {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    /// Borrow of a node's value; drop it before recording further ops.
    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value_cloned(&self, v: Var) -> ArrayD<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a 0-dim node.
    pub fn scalar_value(&self, v: Var) -> F {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.ndim(), 0, "scalar_value on non-scalar node");
        val[IxDyn(&[])]
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<ArrayD<F>> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    // ----- element-wise ops -----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
            va + vb
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
            va - vb
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
            va * vb
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| -x);
        let needs = self.needs(a);
        self.push(value, Op::Neg(a), needs)
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x + c);
        let needs = self.needs(a);
        self.push(value, Op::AddScalar(a), needs)
    }

    pub fn mul_scalar(&self, a: Var, c: F) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x * c);
        let needs = self.needs(a);
        self.push(value, Op::MulScalar(a, c), needs)
    }

    /// `a + s` where `s` is 0-dim, broadcast over `a`.
    pub fn add_bcast(&self, a: Var, s_var: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[s_var.0].value;
            assert_eq!(sv.ndim(), 0, "add_bcast needs a 0-dim second operand");
            let c = sv[IxDyn(&[])];
            nodes[a.0].value.mapv(|x| x + c)
        };
        let needs = self.needs(a) || self.needs(s_var);
        self.push(value, Op::AddBcast(a, s_var), needs)
    }

    /// `a - s` as `a + (-s)`.
    pub fn sub_bcast(&self, a: Var, s_var: Var) -> Var {
        let neg_s = self.neg(s_var);
        self.add_bcast(a, neg_s)
    }

    pub fn sqr(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x * x);
        let needs = self.needs(a);
        self.push(value, Op::Sqr(a), needs)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x.tanh());
        let needs = self.needs(a);
        self.push(value, Op::Tanh(a), needs)
    }

    pub fn leaky_relu(&self, a: Var, slope: F) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| if x >= F::zero() { x } else { x * slope });
        let needs = self.needs(a);
        self.push(value, Op::LeakyRelu(a, slope), needs)
    }

    /// Clamp to `[0,1]`; the gradient passes where the input lies in the
    /// closed interval and is zero outside it.
    pub fn clamp01(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| {
            if x < F::zero() {
                F::zero()
            } else if x > F::one() {
                F::one()
            } else {
                x
            }
        });
        let needs = self.needs(a);
        self.push(value, Op::Clamp01(a), needs)
    }

    // ----- reductions -----

    pub fn sum_all(&self, a: Var) -> Var {
        let value = ndarray::arr0(self.nodes.borrow()[a.0].value.iter().copied().sum::<F>()).into_dyn();
        let needs = self.needs(a);
        self.push(value, Op::SumAll(a), needs)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let (sum, len) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            assert!(v.len() > 0, "mean of empty tensor");
            (v.iter().copied().sum::<F>(), v.len())
        };
        let value = ndarray::arr0(sum / F::from_f64(len as f64)).into_dyn();
        let needs = self.needs(a);
        self.push(value, Op::MeanAll(a), needs)
    }

    // ----- layers -----

    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().expect("conv2d input rank");
            let wv = nodes[w.0].value.view().into_dimensionality::<ndarray::Ix4>().expect("conv2d weight rank");
            let bv = nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().expect("conv2d bias rank").to_owned();
            kernels::conv2d_forward(&xv, &wv, &bv, stride, pad).into_dyn()
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("linear input rank").to_owned();
            let wv = nodes[w.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("linear weight rank").to_owned();
            let bv = nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().expect("linear bias rank").to_owned();
            kernels::linear_forward(&xv, &wv, &bv).into_dyn()
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Linear { x, w, b }, needs)
    }

    /// `(N,C,H,W) -> (N,C)` spatial mean.
    pub fn global_avg_pool(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[a.0].value.view().into_dimensionality::<ndarray::Ix4>().expect("gap input rank");
            let (n, c, h, w) = v.dim();
            let scale = F::from_f64(1.0 / (h * w) as f64);
            let mut out = ndarray::Array2::<F>::zeros((n, c));
            for ni in 0..n {
                for ci in 0..c {
                    out[[ni, ci]] = v.slice(s![ni, ci, .., ..]).iter().copied().sum::<F>() * scale;
                }
            }
            out.into_dyn()
        };
        let needs = self.needs(a);
        self.push(value, Op::GlobalAvgPool(a), needs)
    }

    /// Nearest-neighbor 2x upsample on `(N,C,H,W)`.
    pub fn upsample_nearest2(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[a.0].value.view().into_dimensionality::<ndarray::Ix4>().expect("upsample input rank");
            let (n, c, h, w) = v.dim();
            let mut out = ndarray::Array4::<F>::zeros((n, c, 2 * h, 2 * w));
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let val = v[[ni, ci, y, x]];
                            out[[ni, ci, 2 * y, 2 * x]] = val;
                            out[[ni, ci, 2 * y, 2 * x + 1]] = val;
                            out[[ni, ci, 2 * y + 1, 2 * x]] = val;
                            out[[ni, ci, 2 * y + 1, 2 * x + 1]] = val;
                        }
                    }
                }
            }
            out.into_dyn()
        };
        let needs = self.needs(a);
        self.push(value, Op::UpsampleNearest2(a), needs)
    }

    /// Concatenate along axis 1 (channels).
    pub fn concat_channels(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            ndarray::concatenate(Axis(1), &[nodes[a.0].value.view(), nodes[b.0].value.view()])
                .expect("concat_channels shape mismatch")
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatChannels(a, b), needs)
    }

    /// Concatenate along axis 0 (batch). Panics on an empty list.
    pub fn concat_batch(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_batch of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_batch shape mismatch")
        };
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatBatch(parts.to_vec()), needs)
    }

    /// Gather rows along axis 0; rows may repeat.
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let n = v.shape()[0];
            for &r in rows {
                assert!(r < n, "gather_rows index {r} out of {n}");
            }
            let views: Vec<_> = rows.iter().map(|&r| v.index_axis(Axis(0), r).insert_axis(Axis(0))).collect();
            ndarray::concatenate(Axis(0), &views).expect("gather_rows concat")
        };
        let needs = self.needs(a);
        self.push(value, Op::GatherRows(a, rows.to_vec()), needs)
    }

    /// `(N,L) -> (N,L,h,w)` by repetition.
    pub fn broadcast_spatial(&self, a: Var, h: usize, w: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[a.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("broadcast_spatial input rank");
            let (n, l) = v.dim();
            let mut out = ndarray::Array4::<F>::zeros((n, l, h, w));
            for ni in 0..n {
                for li in 0..l {
                    out.slice_mut(s![ni, li, .., ..]).fill(v[[ni, li]]);
                }
            }
            out.into_dyn()
        };
        let needs = self.needs(a);
        self.push(value, Op::BroadcastSpatial(a, h, w), needs)
    }

    // ----- resampling -----

    /// Bilinear face crop `(3,H,W) -> (N,3,h,w)` following a prebuilt plan.
    pub fn crop_faces(&self, image: Var, plan: CropPlan) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[image.0].value.view().into_dimensionality::<ndarray::Ix3>().expect("crop input rank");
            let (ih, iw) = plan.image_size();
            assert_eq!((v.dim().1, v.dim().2), (ih, iw), "crop plan image size mismatch");
            geometry::crop_with_plan(&v.to_owned(), &plan).into_dyn()
        };
        let needs = self.needs(image);
        self.push(value, Op::CropFaces { image, plan }, needs)
    }

    /// Adds resampled residual patches `(N,3,h,w)` onto the image `(3,H,W)`.
    /// No clamp; compose with [`Graph::clamp01`].
    pub fn paste_faces(&self, image: Var, residual: Var, plan: PastePlan) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let iv = nodes[image.0].value.view().into_dimensionality::<ndarray::Ix3>().expect("paste image rank").to_owned();
            let rv = nodes[residual.0].value.view().into_dimensionality::<ndarray::Ix4>().expect("paste residual rank").to_owned();
            geometry::paste_with_plan(&iv, &rv, &plan).into_dyn()
        };
        let needs = self.needs(image) || self.needs(residual);
        self.push(value, Op::PasteFaces { image, residual, plan }, needs)
    }

    // ----- distortion primitives -----

    /// Separable blur step along one axis (residual form, replicate border).
    /// Accepts `(N,C,H,W)` or a single `(C,H,W)` image.
    pub fn blur1d(&self, x: Var, kernel: &[f64], horizontal: bool) -> Var {
        assert_eq!(kernel.len() % 2, 1, "blur kernel length must be odd");
        let value = {
            let nodes = self.nodes.borrow();
            let (v, squeeze) = view_as_batch(&nodes[x.0].value);
            let out = kernels::blur1d_forward(&v, kernel, horizontal);
            restore_rank(out, squeeze)
        };
        let needs = self.needs(x);
        self.push(
            value,
            Op::Blur1d {
                x,
                kernel: kernel.to_vec(),
                horizontal,
            },
            needs,
        )
    }

    /// Per-pixel 3x3 channel mix on `(N,3,h,w)` or `(3,h,w)`.
    pub fn color_mat(&self, x: Var, m: [[f64; 3]; 3]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (v, squeeze) = view_as_batch(&nodes[x.0].value);
            let (n, c, h, w) = v.dim();
            assert_eq!(c, 3, "color_mat needs 3 channels");
            let mf: Vec<Vec<F>> = m.iter().map(|row| row.iter().map(|&e| F::from_f64(e)).collect()).collect();
            let mut out = ndarray::Array4::<F>::zeros((n, 3, h, w));
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let px = [v[[ni, 0, y, xx]], v[[ni, 1, y, xx]], v[[ni, 2, y, xx]]];
                        for co in 0..3 {
                            out[[ni, co, y, xx]] = mf[co][0] * px[0] + mf[co][1] * px[1] + mf[co][2] * px[2];
                        }
                    }
                }
            }
            restore_rank(out, squeeze)
        };
        let needs = self.needs(x);
        self.push(value, Op::ColorMat { x, m }, needs)
    }

    /// Straight-through estimator: forward takes `value`, backward passes the
    /// cotangent to `x` unchanged. Used for codec round-trips.
    pub fn replace_st(&self, x: Var, value: ArrayD<F>) -> Var {
        {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[x.0].value.shape(), value.shape(), "replace_st shape mismatch");
        }
        let needs = self.needs(x);
        self.push(value, Op::ReplaceSt(x), needs)
    }

    // ----- backward -----

    /// Reverse pass from a 0-dim root; gradients are then available through
    /// [`Graph::grad`]. Running it again replaces previous gradients.
    pub fn backward(&self, root: Var) {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.ndim(), 0, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ndarray::arr0(F::one()).into_dyn());

        fn acc<F: Real>(grads: &mut [Option<ArrayD<F>>], nodes: &[Node<F>], idx: usize, delta: ArrayD<F>) {
            if !nodes[idx].needs_grad {
                return;
            }
            match &mut grads[idx] {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            }
        }

        for idx in (0..nodes.len()).rev() {
            if !nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].clone() else { continue };
            match &nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, a.0, g.clone());
                    acc(&mut grads, &nodes, b.0, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, a.0, g.clone());
                    acc(&mut grads, &nodes, b.0, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = &g * &nodes[b.0].value;
                    let gb = &g * &nodes[a.0].value;
                    acc(&mut grads, &nodes, a.0, ga);
                    acc(&mut grads, &nodes, b.0, gb);
                }
                Op::Neg(a) => acc(&mut grads, &nodes, a.0, g.mapv(|x| -x)),
                Op::AddScalar(a) => acc(&mut grads, &nodes, a.0, g),
                Op::MulScalar(a, c) => acc(&mut grads, &nodes, a.0, g.mapv(|x| x * *c)),
                Op::AddBcast(a, s_var) => {
                    let gs = ndarray::arr0(g.iter().copied().sum::<F>()).into_dyn();
                    acc(&mut grads, &nodes, a.0, g);
                    acc(&mut grads, &nodes, s_var.0, gs);
                }
                Op::Sqr(a) => {
                    let two = F::from_f64(2.0);
                    let ga = (&g * &nodes[a.0].value).mapv(|x| x * two);
                    acc(&mut grads, &nodes, a.0, ga);
                }
                Op::Tanh(a) => {
                    let y = &nodes[idx].value;
                    let ga = ndarray::Zip::from(&g).and(y).map_collect(|&gi, &yi| gi * (F::one() - yi * yi));
                    acc(&mut grads, &nodes, a.0, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let xv = &nodes[a.0].value;
                    let ga = ndarray::Zip::from(&g)
                        .and(xv)
                        .map_collect(|&gi, &xi| if xi >= F::zero() { gi } else { gi * *slope });
                    acc(&mut grads, &nodes, a.0, ga);
                }
                Op::Clamp01(a) => {
                    let xv = &nodes[a.0].value;
                    let ga = ndarray::Zip::from(&g)
                        .and(xv)
                        .map_collect(|&gi, &xi| if xi >= F::zero() && xi <= F::one() { gi } else { F::zero() });
                    acc(&mut grads, &nodes, a.0, ga);
                }
                Op::SumAll(a) => {
                    let gv = g[IxDyn(&[])];
                    let ga = ArrayD::from_elem(nodes[a.0].value.raw_dim(), gv);
                    acc(&mut grads, &nodes, a.0, ga);
                }
                Op::MeanAll(a) => {
                    let len = nodes[a.0].value.len();
                    let gv = g[IxDyn(&[])] / F::from_f64(len as f64);
                    let ga = ArrayD::from_elem(nodes[a.0].value.raw_dim(), gv);
                    acc(&mut grads, &nodes, a.0, ga);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xv = nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let wv = nodes[w.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let (gx, gw, gb) = kernels::conv2d_backward(&xv, &wv, &gv, *stride, *pad);
                    acc(&mut grads, &nodes, x.0, gx.into_dyn());
                    acc(&mut grads, &nodes, w.0, gw.into_dyn());
                    acc(&mut grads, &nodes, b.0, gb.into_dyn());
                }
                Op::Linear { x, w, b } => {
                    let xv = nodes[x.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                    let wv = nodes[w.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                    let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                    let (gx, gw, gb) = kernels::linear_backward(&xv, &wv, &gv);
                    acc(&mut grads, &nodes, x.0, gx.into_dyn());
                    acc(&mut grads, &nodes, w.0, gw.into_dyn());
                    acc(&mut grads, &nodes, b.0, gb.into_dyn());
                }
                Op::GlobalAvgPool(a) => {
                    let av = nodes[a.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let (n, c, h, w) = av.dim();
                    let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let scale = F::from_f64(1.0 / (h * w) as f64);
                    let mut ga = ndarray::Array4::<F>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            ga.slice_mut(s![ni, ci, .., ..]).fill(gv[[ni, ci]] * scale);
                        }
                    }
                    acc(&mut grads, &nodes, a.0, ga.into_dyn());
                }
                Op::UpsampleNearest2(a) => {
                    let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let (n, c, h2, w2) = gv.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut ga = ndarray::Array4::<F>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    ga[[ni, ci, y, x]] = gv[[ni, ci, 2 * y, 2 * x]]
                                        + gv[[ni, ci, 2 * y, 2 * x + 1]]
                                        + gv[[ni, ci, 2 * y + 1, 2 * x]]
                                        + gv[[ni, ci, 2 * y + 1, 2 * x + 1]];
                                }
                            }
                        }
                    }
                    acc(&mut grads, &nodes, a.0, ga.into_dyn());
                }
                Op::ConcatChannels(a, b) => {
                    let ca = nodes[a.0].value.shape()[1];
                    let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
                    let gb = g.slice_axis(Axis(1), ndarray::Slice::from(ca..)).to_owned();
                    acc(&mut grads, &nodes, a.0, ga);
                    acc(&mut grads, &nodes, b.0, gb);
                }
                Op::ConcatBatch(parts) => {
                    let mut start = 0usize;
                    for p in parts {
                        let rows = nodes[p.0].value.shape()[0];
                        let gp = g.slice_axis(Axis(0), ndarray::Slice::from(start..start + rows)).to_owned();
                        acc(&mut grads, &nodes, p.0, gp);
                        start += rows;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = ArrayD::<F>::zeros(nodes[a.0].value.raw_dim());
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        let gr = g.index_axis(Axis(0), out_r);
                        let mut dst = ga.index_axis_mut(Axis(0), src_r);
                        dst += &gr;
                    }
                    acc(&mut grads, &nodes, a.0, ga);
                }
                Op::BroadcastSpatial(a, h, w) => {
                    let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let (n, l) = (gv.dim().0, gv.dim().1);
                    let mut ga = ndarray::Array2::<F>::zeros((n, l));
                    for ni in 0..n {
                        for li in 0..l {
                            ga[[ni, li]] = gv.slice(s![ni, li, ..*h, ..*w]).iter().copied().sum::<F>();
                        }
                    }
                    acc(&mut grads, &nodes, a.0, ga.into_dyn());
                }
                Op::CropFaces { image, plan } => {
                    let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned();
                    let ga = geometry::crop_adjoint(&gv, plan);
                    acc(&mut grads, &nodes, image.0, ga.into_dyn());
                }
                Op::PasteFaces { image, residual, plan } => {
                    let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap().to_owned();
                    let gr = geometry::paste_adjoint_patches(&gv, plan);
                    acc(&mut grads, &nodes, image.0, g.clone());
                    acc(&mut grads, &nodes, residual.0, gr.into_dyn());
                }
                Op::Blur1d { x, kernel, horizontal } => {
                    let (gv, squeeze) = view_as_batch(&g);
                    let ga = kernels::blur1d_backward(&gv, kernel, *horizontal);
                    acc(&mut grads, &nodes, x.0, restore_rank(ga, squeeze));
                }
                Op::ColorMat { x, m } => {
                    let (gv, squeeze) = view_as_batch(&g);
                    let (n, _, h, w) = gv.dim();
                    let mf: Vec<Vec<F>> = m.iter().map(|row| row.iter().map(|&e| F::from_f64(e)).collect()).collect();
                    let mut ga = ndarray::Array4::<F>::zeros((n, 3, h, w));
                    for ni in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                let go = [gv[[ni, 0, y, xx]], gv[[ni, 1, y, xx]], gv[[ni, 2, y, xx]]];
                                for ci in 0..3 {
                                    ga[[ni, ci, y, xx]] = mf[0][ci] * go[0] + mf[1][ci] * go[1] + mf[2][ci] * go[2];
                                }
                            }
                        }
                    }
                    acc(&mut grads, &nodes, x.0, restore_rank(ga, squeeze));
                }
                Op::ReplaceSt(x) => acc(&mut grads, &nodes, x.0, g),
            }
            // root keeps its seed; intermediate grads stay queryable
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
    }
}
