//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its variables. Nodes are appended
//! in evaluation order, so a single reverse sweep over the node list visits every
//! node after all of its consumers. Leaves created with [`Graph::param`] receive
//! gradients; leaves created with [`Graph::constant`] and anything computed only
//! from constants are skipped during the sweep.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::kernels::{col2im, im2col, sigmoid, softmax_channels};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Silu {
        input: Var,
        sigmoid: Vec<T>,
    },
    AddChannelBias {
        input: Var,
        bias: Var,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Affine {
        input: Var,
        scale: T,
    },
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    PerSample {
        x: Var,
        y: Var,
        a: Vec<T>,
        b: Vec<T>,
    },
    SoftmaxChannels(Var),
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    // im2col buffers reused across convolutions
    scratch: RefCell<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn check_shape<T: Scalar>(t: &Tensor<T>, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scratch: RefCell::new((Vec::new(), Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `v`'s value as a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Same-padded stride-1 convolution. `weight` is `[cout, cin, k, k]` with odd `k`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let wshape = self.value(weight).shape().to_vec();
        let (cout, k) = match wshape[..] {
            [co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![0, cin, 3, 3],
                    found: wshape,
                })
            }
        };
        if let Some(bias) = bias {
            check_shape(self.value(bias), &[cout])?;
        }
        let hw = h * w;
        let kk = cin * k * k;
        let mut out = Tensor::zeros(&[b, cout, h, w]);
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let bias_v = bias.map(|b| self.value(b).data());
            let o = out.data_mut();
            let mut scratch = self.scratch.borrow_mut();
            let cols = &mut scratch.0;
            if k != 1 {
                cols.resize(kk * hw, T::zero());
            }
            for bi in 0..b {
                let xb = &x[bi * cin * hw..(bi + 1) * cin * hw];
                let ob = &mut o[bi * cout * hw..(bi + 1) * cout * hw];
                if let Some(bias_v) = bias_v {
                    for (co, chunk) in ob.chunks_mut(hw).enumerate() {
                        chunk.fill(bias_v[co]);
                    }
                }
                let rhs: &[T] = if k == 1 {
                    xb
                } else {
                    im2col(xb, cin, h, w, k, cols);
                    cols
                };
                T::gemm(
                    cout,
                    kk,
                    hw,
                    T::one(),
                    wt,
                    kk as isize,
                    1,
                    rhs,
                    hw as isize,
                    1,
                    T::one(),
                    ob,
                    hw as isize,
                    1,
                );
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// `input [b, in] -> [b, out]` with `weight [out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let (b, fin, fout) = match (&xs[..], &ws[..]) {
            (&[b, i], &[o, i2]) if i == i2 => (b, i, o),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: xs,
                    found: ws,
                })
            }
        };
        check_shape(self.value(bias), &[fout])?;
        let mut out = Tensor::zeros(&[b, fout]);
        {
            let bias_v = self.value(bias).data();
            for row in out.data_mut().chunks_mut(fout) {
                row.copy_from_slice(bias_v);
            }
            T::gemm(
                b,
                fin,
                fout,
                T::one(),
                self.value(input).data(),
                fin as isize,
                1,
                self.value(weight).data(),
                1,
                fin as isize,
                T::one(),
                out.data_mut(),
                fout as isize,
                1,
            );
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Group normalization over `[channels/groups, h, w]` blocks with per-channel affine.
    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "{c} channels cannot form {groups} groups"
            )));
        }
        check_shape(self.value(gamma), &[c])?;
        check_shape(self.value(beta), &[c])?;
        let eps = T::from_f64(1e-5);
        let per = (c / groups) * h * w;
        let n = T::from_f64(per as f64);
        let mut mean = vec![T::zero(); b * groups];
        let mut rstd = vec![T::zero(); b * groups];
        let mut out = Tensor::zeros(&[b, c, h, w]);
        {
            let x = self.value(input).data();
            let g = self.value(gamma).data();
            let be = self.value(beta).data();
            let o = out.data_mut();
            let cpg = c / groups;
            let hw = h * w;
            for bi in 0..b {
                for gi in 0..groups {
                    let start = (bi * c + gi * cpg) * hw;
                    let blk = &x[start..start + per];
                    let mu = blk.iter().fold(T::zero(), |a, &v| a + v) / n;
                    let var = blk.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / n;
                    let rs = T::one() / (var + eps).sqrt();
                    mean[bi * groups + gi] = mu;
                    rstd[bi * groups + gi] = rs;
                    for cl in 0..cpg {
                        let ch = gi * cpg + cl;
                        let off = start + cl * hw;
                        for p in 0..hw {
                            o[off + p] = (x[off + p] - mu) * rs * g[ch] + be[ch];
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let rg = self.rg(x);
        let sig: Vec<T> = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::new(
            xv.shape(),
            xv.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect(),
        )
        .expect("same numel");
        let sig = if rg { sig } else { Vec::new() };
        self.push(
            out,
            Op::Silu {
                input: x,
                sigmoid: sig,
            },
            rg,
        )
    }

    /// Broadcast-adds a `[b, c]` bias over the spatial axes of `[b, c, h, w]`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        check_shape(self.value(bias), &[b, c])?;
        let hw = h * w;
        let mut out = self.value(input).clone();
        {
            let bv = self.value(bias).data();
            for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
                let add = bv[i];
                plane.iter_mut().for_each(|v| *v = *v + add);
            }
        }
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(out, Op::AddChannelBias { input, bias }, rg))
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::SpatialSize {
                height: h,
                width: w,
                divisor: 2,
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for plane in 0..b * c {
                let src = &xv[plane * h * w..(plane + 1) * h * w];
                let dst = &mut o[plane * oh * ow..(plane + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        let i = 2 * y * w + 2 * xx;
                        dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for plane in 0..b * c {
                let src = &xv[plane * h * w..(plane + 1) * h * w];
                let dst = &mut o[plane * oh * ow..(plane + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2(x), rg))
    }

    /// Channel concatenation of two `[b, *, h, w]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, h, w) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if ba != bb || h != hb || w != wb {
            return Err(Error::ShapeMismatch {
                expected: vec![ba, cb, h, w],
                found: vec![bb, cb, hb, wb],
            });
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(ba * (ca + cb) * hw);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..ba {
                data.extend_from_slice(&av[bi * ca * hw..(bi + 1) * ca * hw]);
                data.extend_from_slice(&bv[bi * cb * hw..(bi + 1) * cb * hw]);
            }
        }
        let out = Tensor::new(&[ba, ca + cb, h, w], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| v * scale + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine { input: x, scale }, rg)
    }

    /// Elementwise clip to `[lo, hi]`; the gradient is zero where clipping is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { input: x, lo, hi }, rg)
    }

    /// `a[i] * x[i] + b[i] * y[i]` with one coefficient pair per batch element.
    pub fn per_sample_combine(&mut self, x: Var, y: Var, a: Vec<T>, b: Vec<T>) -> Result<Var> {
        self.value(x).ensure_same_shape(self.value(y))?;
        let batch = self.value(x).dim(0);
        if a.len() != batch || b.len() != batch {
            return Err(Error::ShapeMismatch {
                expected: vec![batch],
                found: vec![a.len(), b.len()],
            });
        }
        let per = self.value(x).len() / batch;
        let mut out = self.value(x).clone();
        {
            let yv = self.value(y).data();
            for (i, (chunk, ych)) in out.data_mut().chunks_mut(per).zip(yv.chunks(per)).enumerate() {
                for (o, &yy) in chunk.iter_mut().zip(ych) {
                    *o = a[i] * *o + b[i] * yy;
                }
            }
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(out, Op::PerSample { x, y, a, b }, rg))
    }

    /// Softmax across the channel axis of `[b, c, h, w]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let mut out = Tensor::zeros(&[b, c, h, w]);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for bi in 0..b {
                let r = bi * c * hw..(bi + 1) * c * hw;
                softmax_channels(&xv[r.clone()], c, hw, &mut o[r]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxChannels(x), rg))
    }

    /// Mean squared error against a constant target, averaged over every element.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        p.ensure_same_shape(target)?;
        let n = T::from_f64(p.len() as f64);
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Pixel-wise softmax cross-entropy of `[b, c, h, w]` logits against class indices
    /// laid out as `[b, h, w]`, averaged over pixels and batch.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if targets.len() != b * hw {
            return Err(Error::ShapeMismatch {
                expected: vec![b, h, w],
                found: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::LabelOutOfRange {
                value: bad,
                num_classes: c,
            });
        }
        let x = self.value(logits).data();
        let mut total = T::zero();
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                let mut max = T::neg_infinity();
                for ci in 0..c {
                    max = max.max(x[base + ci * hw + p]);
                }
                let mut z = T::zero();
                for ci in 0..c {
                    z = z + (x[base + ci * hw + p] - max).exp();
                }
                let target = targets[bi * hw + p];
                total = total + (z.ln() + max - x[base + target * hw + p]);
            }
        }
        let loss = total / T::from_f64((b * hw) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, wgt) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::ShapeMismatch {
                    expected: vec![],
                    found: t.shape().to_vec(),
                });
            }
            total = total + wgt * t.item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            } else {
                self.propagate(idx, g, &mut grads);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(T::one(), &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let g = &g;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
            } => self.conv2d_backward(*input, *weight, *bias, g, grads),
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (b, fin) = (x.dim(0), x.dim(1));
                let fout = wt.dim(0);
                if self.rg(*input) {
                    let mut dx = Tensor::zeros(&[b, fin]);
                    T::gemm(
                        b,
                        fout,
                        fin,
                        T::one(),
                        g.data(),
                        fout as isize,
                        1,
                        wt.data(),
                        fin as isize,
                        1,
                        T::zero(),
                        dx.data_mut(),
                        fin as isize,
                        1,
                    );
                    self.accumulate(grads, *input, dx);
                }
                if self.rg(*weight) {
                    let mut dw = Tensor::zeros(&[fout, fin]);
                    T::gemm(
                        fout,
                        b,
                        fin,
                        T::one(),
                        g.data(),
                        1,
                        fout as isize,
                        x.data(),
                        fin as isize,
                        1,
                        T::zero(),
                        dw.data_mut(),
                        fin as isize,
                        1,
                    );
                    self.accumulate(grads, *weight, dw);
                }
                if self.rg(*bias) {
                    let mut db = Tensor::zeros(&[fout]);
                    for row in g.data().chunks(fout) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let x = self.value(*input);
                let (b, c, h, w) = x.dims4().expect("rank checked at record time");
                let hw = h * w;
                let cpg = c / groups;
                let per = cpg * hw;
                let n = T::from_f64(per as f64);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let want_dx = self.rg(*input);
                let mut dx = if want_dx {
                    Tensor::zeros(x.shape())
                } else {
                    Tensor::zeros(&[0])
                };
                let xv = x.data();
                let gv = g.data();
                for bi in 0..b {
                    for gi in 0..*groups {
                        let mu = mean[bi * groups + gi];
                        let rs = rstd[bi * groups + gi];
                        let start = (bi * c + gi * cpg) * hw;
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for cl in 0..cpg {
                            let ch = gi * cpg + cl;
                            let off = start + cl * hw;
                            for p in 0..hw {
                                let xhat = (xv[off + p] - mu) * rs;
                                let dy = gv[off + p];
                                dgamma[ch] = dgamma[ch] + dy * xhat;
                                dbeta[ch] = dbeta[ch] + dy;
                                let dxhat = dy * gam[ch];
                                sum_dxhat = sum_dxhat + dxhat;
                                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                            }
                        }
                        if want_dx {
                            let d = dx.data_mut();
                            for cl in 0..cpg {
                                let ch = gi * cpg + cl;
                                let off = start + cl * hw;
                                for p in 0..hw {
                                    let xhat = (xv[off + p] - mu) * rs;
                                    let dxhat = gv[off + p] * gam[ch];
                                    d[off + p] = rs / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                                }
                            }
                        }
                    }
                }
                let _ = per;
                if want_dx {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma).expect("len c"));
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta).expect("len c"));
            }
            Op::Silu { input, sigmoid } => {
                let xv = self.value(*input).data();
                let mut dx = g.clone();
                for ((d, &v), &s) in dx.data_mut().iter_mut().zip(xv).zip(sigmoid) {
                    *d = *d * s * (T::one() + v * (T::one() - s));
                }
                self.accumulate(grads, *input, dx);
            }
            Op::AddChannelBias { input, bias } => {
                if self.rg(*bias) {
                    let (b, c, h, w) = g.dims4().expect("rank 4");
                    let hw = h * w;
                    let db = Tensor::from_fn(&[b, c], |i| {
                        g.data()[i * hw..(i + 1) * hw]
                            .iter()
                            .fold(T::zero(), |a, &v| a + v)
                    });
                    self.accumulate(grads, *bias, db);
                }
                self.accumulate(grads, *input, g.clone());
            }
            Op::AvgPool2(x) => {
                let (b, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                {
                    let d = dx.data_mut();
                    let gv = g.data();
                    for plane in 0..b * c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = gv[plane * oh * ow + y * ow + xx] * quarter;
                                let i = plane * h * w + 2 * y * w + 2 * xx;
                                d[i] = v;
                                d[i + 1] = v;
                                d[i + w] = v;
                                d[i + w + 1] = v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let (b, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                {
                    let d = dx.data_mut();
                    let gv = g.data();
                    for plane in 0..b * c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let di = plane * h * w + (y / 2) * w + xx / 2;
                                d[di] = d[di] + gv[plane * oh * ow + y * ow + xx];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let (batch, ca, h, w) = self.value(*a).dims4().expect("rank 4");
                let cb = self.value(*b).dim(1);
                let hw = h * w;
                let gv = g.data();
                if self.rg(*a) {
                    let mut da = Vec::with_capacity(batch * ca * hw);
                    for bi in 0..batch {
                        let base = bi * (ca + cb) * hw;
                        da.extend_from_slice(&gv[base..base + ca * hw]);
                    }
                    self.accumulate(grads, *a, Tensor::new(&[batch, ca, h, w], da).expect("numel"));
                }
                if self.rg(*b) {
                    let mut db = Vec::with_capacity(batch * cb * hw);
                    for bi in 0..batch {
                        let base = bi * (ca + cb) * hw + ca * hw;
                        db.extend_from_slice(&gv[base..base + cb * hw]);
                    }
                    self.accumulate(grads, *b, Tensor::new(&[batch, cb, h, w], db).expect("numel"));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Affine { input, scale } => {
                self.accumulate(grads, *input, g.scale(*scale));
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v < *lo || v > *hi {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::PerSample { x, y, a, b } => {
                let per = g.len() / a.len();
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(per).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = *v * a[i]);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*y) {
                    let mut dy = g.clone();
                    for (i, chunk) in dy.data_mut().chunks_mut(per).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = *v * b[i]);
                    }
                    self.accumulate(grads, *y, dy);
                }
            }
            Op::SoftmaxChannels(x) => {
                let s = &node.value;
                let (b, c, h, w) = s.dims4().expect("rank 4");
                let hw = h * w;
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                {
                    let d = dx.data_mut();
                    let sv = s.data();
                    let gv = g.data();
                    for bi in 0..b {
                        let base = bi * c * hw;
                        for p in 0..hw {
                            let mut dot = T::zero();
                            for ci in 0..c {
                                let i = base + ci * hw + p;
                                dot = dot + sv[i] * gv[i];
                            }
                            for ci in 0..c {
                                let i = base + ci * hw + p;
                                d[i] = sv[i] * (gv[i] - dot);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let scale = T::from_f64(2.0) * g.item() / T::from_f64(p.len() as f64);
                let dp = p.zip_map(target, |a, b| scale * (a - b)).expect("same shape");
                self.accumulate(grads, *pred, dp);
            }
            Op::CrossEntropy { logits, targets } => {
                let x = self.value(*logits);
                let (b, c, h, w) = x.dims4().expect("rank 4");
                let hw = h * w;
                let scale = g.item() / T::from_f64((b * hw) as f64);
                let mut dx = Tensor::zeros(x.shape());
                {
                    let d = dx.data_mut();
                    for bi in 0..b {
                        let r = bi * c * hw..(bi + 1) * c * hw;
                        softmax_channels(&x.data()[r.clone()], c, hw, &mut d[r.clone()]);
                        let db = &mut d[r];
                        for p in 0..hw {
                            let t = targets[bi * hw + p];
                            db[t * hw + p] = db[t * hw + p] - T::one();
                        }
                    }
                    d.iter_mut().for_each(|v| *v = *v * scale);
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::WeightedSum(terms) => {
                for &(v, wgt) in terms {
                    self.accumulate(grads, v, Tensor::scalar(wgt * g.item()));
                }
            }
        }
    }

    fn conv2d_backward(&self, input: Var, weight: Var, bias: Option<Var>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let x = self.value(input);
        let wt = self.value(weight);
        let (b, cin, h, w) = x.dims4().expect("rank 4");
        let cout = wt.dim(0);
        let k = wt.dim(2);
        let hw = h * w;
        let kk = cin * k * k;
        let gv = g.data();

        if let Some(bias) = bias.filter(|&b| self.rg(b)) {
            let mut db = vec![T::zero(); cout];
            for bi in 0..b {
                for (co, d) in db.iter_mut().enumerate() {
                    let off = (bi * cout + co) * hw;
                    *d = gv[off..off + hw].iter().fold(*d, |a, &v| a + v);
                }
            }
            self.accumulate(grads, bias, Tensor::new(&[cout], db).expect("len cout"));
        }

        let want_w = self.rg(weight);
        let want_x = self.rg(input);
        if !want_w && !want_x {
            return;
        }
        let mut dw = if want_w { Tensor::zeros(wt.shape()) } else { Tensor::zeros(&[0]) };
        let mut dx = if want_x { Tensor::zeros(x.shape()) } else { Tensor::zeros(&[0]) };
        let mut scratch = self.scratch.borrow_mut();
        let (cols, dcols) = &mut *scratch;
        if k != 1 {
            cols.resize(kk * hw, T::zero());
            if want_x {
                dcols.resize(kk * hw, T::zero());
            }
        }
        for bi in 0..b {
            let xb = &x.data()[bi * cin * hw..(bi + 1) * cin * hw];
            let gb = &gv[bi * cout * hw..(bi + 1) * cout * hw];
            if want_w {
                let rhs: &[T] = if k == 1 {
                    xb
                } else {
                    im2col(xb, cin, h, w, k, cols);
                    cols
                };
                // dW[cout, kk] += dY[cout, hw] * cols[kk, hw]^T
                T::gemm(
                    cout,
                    hw,
                    kk,
                    T::one(),
                    gb,
                    hw as isize,
                    1,
                    rhs,
                    1,
                    hw as isize,
                    T::one(),
                    dw.data_mut(),
                    kk as isize,
                    1,
                );
            }
            if want_x {
                let dxb = &mut dx.data_mut()[bi * cin * hw..(bi + 1) * cin * hw];
                if k == 1 {
                    // dX[cin, hw] = W[cout, cin]^T * dY
                    T::gemm(
                        cin,
                        cout,
                        hw,
                        T::one(),
                        wt.data(),
                        1,
                        kk as isize,
                        gb,
                        hw as isize,
                        1,
                        T::one(),
                        dxb,
                        hw as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        kk,
                        cout,
                        hw,
                        T::one(),
                        wt.data(),
                        1,
                        kk as isize,
                        gb,
                        hw as isize,
                        1,
                        T::zero(),
                        dcols,
                        hw as isize,
                        1,
                    );
                    col2im(dcols, cin, h, w, k, dxb);
                }
            }
        }
        if want_w {
            self.accumulate(grads, weight, dw);
        }
        if want_x {
            self.accumulate(grads, input, dx);
        }
    }
}
