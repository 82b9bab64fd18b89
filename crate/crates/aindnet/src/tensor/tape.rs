//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Every forward call appends one node (its output value) and one op entry;
//! `backward` walks the record in reverse, accumulating vector-Jacobian
//! products into per-node gradient buffers. A tape is single-use: it is
//! consumed by its backward pass.

use thiserror::Error;

use super::kernels;
use super::{Scalar, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ValueId(usize);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TapeError {
    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(String),
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("backward already ran on this tape")]
    AlreadyConsumed,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d { input: ValueId, weight: ValueId, bias: ValueId, stride: usize, pad: usize },
    ConvTranspose2d { input: ValueId, weight: ValueId, bias: ValueId, stride: usize },
    AvgPool { input: ValueId, k: usize },
    Upsample { input: ValueId, factor: usize },
    LeakyRelu { input: ValueId, slope: T },
    Softplus { input: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { input: ValueId, factor: T },
    InstanceNorm { input: ValueId, means: Vec<T>, stds: Vec<T> },
    ConcatChannels { a: ValueId, b: ValueId },
    CropSpatial { input: ValueId },
    Sum { input: ValueId },
    L1Loss { pred: ValueId, target: Vec<T> },
    AsymmLoss { pred: ValueId, target: Vec<T>, alpha: T },
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), grads: Vec::new(), consumed: false }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> ValueId {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        let id = ValueId(self.values.len());
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        id
    }

    /// Record a leaf value (input data or a parameter snapshot).
    pub fn input(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: ValueId) -> Shape {
        self.values[id.0].shape
    }

    /// Gradient accumulated for `id`, if any path reached it.
    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> ValueId {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        );
        self.push(out, Op::Conv2d { input, weight, bias, stride, pad })
    }

    pub fn conv_transpose2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
    ) -> ValueId {
        let out = kernels::conv_transpose2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
        );
        self.push(out, Op::ConvTranspose2d { input, weight, bias, stride })
    }

    pub fn avg_pool(&mut self, input: ValueId, k: usize) -> ValueId {
        let out = kernels::avg_pool(self.value(input), k);
        self.push(out, Op::AvgPool { input, k })
    }

    pub fn upsample_bilinear(&mut self, input: ValueId, factor: usize) -> ValueId {
        let out = kernels::upsample_bilinear(self.value(input), factor);
        self.push(out, Op::Upsample { input, factor })
    }

    pub fn leaky_relu(&mut self, input: ValueId, slope: T) -> ValueId {
        let out = kernels::leaky_relu(self.value(input), slope);
        self.push(out, Op::LeakyRelu { input, slope })
    }

    pub fn softplus(&mut self, input: ValueId) -> ValueId {
        let out = self.value(input).map(softplus);
        self.push(out, Op::Softplus { input })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: ValueId, factor: T) -> ValueId {
        let out = self.value(input).map(|v| v * factor);
        self.push(out, Op::Scale { input, factor })
    }

    /// Channel-wise normalization over the spatial extent of each sample.
    /// `eps` is added to the variance before the square root.
    pub fn instance_norm(&mut self, input: ValueId, eps: T) -> ValueId {
        let x = self.value(input);
        let (means, stds) = x.instance_stats(eps);
        let Shape { n, h, w, c } = x.shape;
        let mut out = Tensor::zeros(x.shape);
        for b in 0..n {
            for ch in 0..c {
                let mu = means[b * c + ch];
                let inv = T::one() / stds[b * c + ch];
                for y in 0..h {
                    for xx in 0..w {
                        out.set(b, y, xx, ch, (x.at(b, y, xx, ch) - mu) * inv);
                    }
                }
            }
        }
        self.push(out, Op::InstanceNorm { input, means, stds })
    }

    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(
            (sa.n, sa.h, sa.w),
            (sb.n, sb.h, sb.w),
            "concat operands disagree on spatial dims: {sa} vs {sb}"
        );
        let out_shape = Shape::new(sa.n, sa.h, sa.w, sa.c + sb.c);
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(out_shape);
        for n in 0..sa.n {
            for y in 0..sa.h {
                for x in 0..sa.w {
                    for c in 0..sa.c {
                        out.set(n, y, x, c, ta.at(n, y, x, c));
                    }
                    for c in 0..sb.c {
                        out.set(n, y, x, sa.c + c, tb.at(n, y, x, c));
                    }
                }
            }
        }
        self.push(out, Op::ConcatChannels { a, b })
    }

    /// Keep the top-left (oh, ow) spatial window.
    pub fn crop_spatial(&mut self, input: ValueId, oh: usize, ow: usize) -> ValueId {
        let s = self.shape(input);
        assert!(oh <= s.h && ow <= s.w, "crop {oh}x{ow} exceeds input {s}");
        let t = self.value(input);
        let mut out = Tensor::zeros(Shape::new(s.n, oh, ow, s.c));
        for n in 0..s.n {
            for y in 0..oh {
                for x in 0..ow {
                    for c in 0..s.c {
                        out.set(n, y, x, c, t.at(n, y, x, c));
                    }
                }
            }
        }
        self.push(out, Op::CropSpatial { input })
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: ValueId) -> ValueId {
        let total = self.value(input).data.iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total), Op::Sum { input })
    }

    /// Mean absolute difference against fixed target data.
    pub fn l1_loss(&mut self, pred: ValueId, target: &Tensor<T>) -> ValueId {
        let p = self.value(pred);
        assert_eq!(p.shape, target.shape, "l1 loss shape mismatch");
        let m = T::from_usize(p.len()).unwrap();
        let total = p
            .data
            .iter()
            .zip(&target.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs());
        self.push(
            Tensor::scalar(total / m),
            Op::L1Loss { pred, target: target.data.clone() },
        )
    }

    /// Mean squared difference weighted by |alpha - 1(diff < 0)|, so
    /// under-estimates cost (1-alpha)/alpha times more than over-estimates.
    pub fn asymmetric_sq_loss(
        &mut self,
        pred: ValueId,
        target: &Tensor<T>,
        alpha: T,
    ) -> ValueId {
        let p = self.value(pred);
        assert_eq!(p.shape, target.shape, "asymmetric loss shape mismatch");
        let m = T::from_usize(p.len()).unwrap();
        let mut total = T::zero();
        for (&a, &b) in p.data.iter().zip(&target.data) {
            let d = a - b;
            total = total + asymm_weight(d, alpha) * d * d;
        }
        self.push(
            Tensor::scalar(total / m),
            Op::AsymmLoss { pred, target: target.data.clone(), alpha },
        )
    }

    fn zip(&self, a: ValueId, b: ValueId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise op shape mismatch: {} vs {}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape, data)
    }

    fn accumulate(&mut self, id: ValueId, grad: &[T]) {
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, &g) in existing.iter_mut().zip(grad) {
                    *e = *e + g;
                }
            }
            None => self.grads[id.0] = Some(grad.to_vec()),
        }
    }

    /// Populate gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), TapeError> {
        if self.values.is_empty() {
            return Err(TapeError::EmptyTape);
        }
        if self.consumed {
            return Err(TapeError::AlreadyConsumed);
        }
        let loss_shape = self.shape(loss);
        if !loss_shape.is_scalar() {
            return Err(TapeError::NonScalarLoss(loss_shape.to_string()));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..self.ops.len()).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let g = Tensor::new(self.values[i].shape, g);
            self.backward_op(i, &g);
            self.grads[i] = Some(g.data);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, g: &Tensor<T>) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let (input, weight, bias, stride, pad) = (*input, *weight, *bias, *stride, *pad);
                let (di, dw, db) = kernels::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    stride,
                    pad,
                    g,
                );
                self.accumulate(input, &di.data);
                self.accumulate(weight, &dw.data);
                self.accumulate(bias, &db);
            }
            Op::ConvTranspose2d { input, weight, bias, stride } => {
                let (input, weight, bias, stride) = (*input, *weight, *bias, *stride);
                let (di, dw, db) = kernels::conv_transpose2d_backward(
                    self.value(input),
                    self.value(weight),
                    stride,
                    g,
                );
                self.accumulate(input, &di.data);
                self.accumulate(weight, &dw.data);
                self.accumulate(bias, &db);
            }
            Op::AvgPool { input, k } => {
                let (input, k) = (*input, *k);
                let di = kernels::avg_pool_backward(self.shape(input), k, g);
                self.accumulate(input, &di.data);
            }
            Op::Upsample { input, factor } => {
                let (input, factor) = (*input, *factor);
                let di = kernels::upsample_bilinear_backward(self.shape(input), factor, g);
                self.accumulate(input, &di.data);
            }
            Op::LeakyRelu { input, slope } => {
                let (input, slope) = (*input, *slope);
                let di = kernels::leaky_relu_backward(self.value(input), slope, g);
                self.accumulate(input, &di.data);
            }
            Op::Softplus { input } => {
                let input = *input;
                let di: Vec<T> = self.value(input)
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, &gv)| gv * sigmoid(x))
                    .collect();
                self.accumulate(input, &di);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &g.data);
                self.accumulate(b, &g.data);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &g.data);
                let neg: Vec<T> = g.data.iter().map(|&v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<T> =
                    g.data.iter().zip(&self.values[b.0].data).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<T> =
                    g.data.iter().zip(&self.values[a.0].data).map(|(&gv, &av)| gv * av).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                let di: Vec<T> = g.data.iter().map(|&v| v * factor).collect();
                self.accumulate(input, &di);
            }
            Op::InstanceNorm { input, means, stds } => {
                let input = *input;
                let (means, stds) = (means.clone(), stds.clone());
                let x = self.value(input);
                let Shape { n, h, w, c } = x.shape;
                let m = T::from_usize(h * w).unwrap();
                let mut di = vec![T::zero(); x.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let mu = means[b * c + ch];
                        let inv = T::one() / stds[b * c + ch];
                        // per-channel reductions of g and g * normalized
                        let mut g_mean = T::zero();
                        let mut gx_mean = T::zero();
                        for y in 0..h {
                            for xx in 0..w {
                                let idx = x.shape.idx(b, y, xx, ch);
                                let xn = (x.data[idx] - mu) * inv;
                                g_mean = g_mean + g.data[idx];
                                gx_mean = gx_mean + g.data[idx] * xn;
                            }
                        }
                        g_mean = g_mean / m;
                        gx_mean = gx_mean / m;
                        for y in 0..h {
                            for xx in 0..w {
                                let idx = x.shape.idx(b, y, xx, ch);
                                let xn = (x.data[idx] - mu) * inv;
                                di[idx] = (g.data[idx] - g_mean - xn * gx_mean) * inv;
                            }
                        }
                    }
                }
                self.accumulate(input, &di);
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let mut da = vec![T::zero(); sa.len()];
                let mut db = vec![T::zero(); sb.len()];
                for n in 0..sa.n {
                    for y in 0..sa.h {
                        for x in 0..sa.w {
                            for ch in 0..sa.c {
                                da[sa.idx(n, y, x, ch)] = g.at(n, y, x, ch);
                            }
                            for ch in 0..sb.c {
                                db[sb.idx(n, y, x, ch)] = g.at(n, y, x, sa.c + ch);
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::CropSpatial { input } => {
                let input = *input;
                let s = self.shape(input);
                let mut di = vec![T::zero(); s.len()];
                for n in 0..g.shape.n {
                    for y in 0..g.shape.h {
                        for x in 0..g.shape.w {
                            for ch in 0..g.shape.c {
                                di[s.idx(n, y, x, ch)] = g.at(n, y, x, ch);
                            }
                        }
                    }
                }
                self.accumulate(input, &di);
            }
            Op::Sum { input } => {
                let input = *input;
                let gv = g.data[0];
                let di = vec![gv; self.values[input.0].len()];
                self.accumulate(input, &di);
            }
            Op::L1Loss { pred, target } => {
                let pred = *pred;
                let target = target.clone();
                let p = self.value(pred);
                let m = T::from_usize(p.len()).unwrap();
                let gv = g.data[0] / m;
                let di: Vec<T> = p
                    .data
                    .iter()
                    .zip(&target)
                    .map(|(&a, &b)| gv * (a - b).signum_or_zero())
                    .collect();
                self.accumulate(pred, &di);
            }
            Op::AsymmLoss { pred, target, alpha } => {
                let (pred, alpha) = (*pred, *alpha);
                let target = target.clone();
                let p = self.value(pred);
                let m = T::from_usize(p.len()).unwrap();
                let two = T::from_f64(2.0).unwrap();
                let gv = g.data[0] / m;
                let di: Vec<T> = p
                    .data
                    .iter()
                    .zip(&target)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        gv * asymm_weight(d, alpha) * two * d
                    })
                    .collect();
                self.accumulate(pred, &di);
            }
        }
    }
}

fn asymm_weight<T: Scalar>(diff: T, alpha: T) -> T {
    if diff < T::zero() {
        (alpha - T::one()).abs()
    } else {
        alpha.abs()
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow on both tails
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: Scalar> SignumOrZero for T {
    fn signum_or_zero(self) -> Self {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_gradient() {
        // loss = sum(w * x) => d/dw = x
        let mut tape = Tape::new();
        let w = tape.input(Tensor::new(Shape::new(1, 1, 3, 1), vec![1.0f64, 2.0, 3.0]));
        let x = tape.input(Tensor::new(Shape::new(1, 1, 3, 1), vec![4.0, 5.0, 6.0]));
        let prod = tape.mul(w, x);
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn disconnected_leaf_has_no_grad() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::<f64>::scalar(1.0));
        let b = tape.input(Tensor::<f64>::scalar(2.0));
        let loss = tape.scale(a, 3.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(b).is_none());
        assert_eq!(tape.grad(a).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::<f64>::scalar(1.0));
        let loss = tape.scale(a, 2.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss), Err(TapeError::AlreadyConsumed));
    }

    #[test]
    fn backward_non_scalar_is_error() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::<f64>::zeros(Shape::new(1, 2, 2, 1)));
        assert!(matches!(tape.backward(a), Err(TapeError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_empty_tape_is_error() {
        let mut tape = Tape::<f64>::new();
        assert_eq!(tape.backward(ValueId(0)), Err(TapeError::EmptyTape));
    }

    #[test]
    fn leaky_relu_grad_at_negative_input() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::scalar(-1.0));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).item(), -0.2);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.2]);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let shape = Shape::new(2, 6, 5, 3);
        let data = (0..shape.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::new(shape, data));
        let y = tape.instance_norm(x, 1e-5);
        let out = tape.value(y);
        let (mu, sd) = out.instance_stats(0.0);
        for &m in &mu {
            assert!(m.abs() <= 1e-6, "normalized mean {m} too large");
        }
        for &s in &sd {
            assert!((s * s - 1.0).abs() <= 1e-4, "normalized variance {} off", s * s);
        }
    }

    #[test]
    fn l1_loss_value_and_grad() {
        let mut tape = Tape::new();
        let target = Tensor::new(Shape::new(1, 1, 2, 1), vec![0.0f64, 0.0]);
        let pred = tape.input(Tensor::new(Shape::new(1, 1, 2, 1), vec![0.1, -0.3]));
        let loss = tape.l1_loss(pred, &target);
        assert!((tape.value(loss).item() - 0.2).abs() < 1e-15);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(pred).unwrap(), &[0.5, -0.5]);
    }

    #[test]
    fn asymmetric_loss_single_pixel_cases() {
        // over-estimate by 0.2 at alpha 0.25 costs 0.01; under-estimate
        // by the same margin costs 0.03, exactly three times more.
        let target = Tensor::new(Shape::scalar(), vec![0.3f64]);
        let mut tape = Tape::new();
        let over = tape.input(Tensor::scalar(0.5));
        let l_over = tape.asymmetric_sq_loss(over, &target, 0.25);
        assert!((tape.value(l_over).item() - 0.01).abs() < 1e-15);

        let mut tape = Tape::new();
        let under = tape.input(Tensor::scalar(0.1));
        let l_under = tape.asymmetric_sq_loss(under, &target, 0.25);
        assert!((tape.value(l_under).item() - 0.03).abs() < 1e-15);
    }

    #[test]
    fn concat_and_crop_roundtrip_grads() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::new(Shape::new(1, 2, 2, 1), vec![1.0f64, 2.0, 3.0, 4.0]));
        let b = tape.input(Tensor::new(Shape::new(1, 2, 2, 1), vec![5.0, 6.0, 7.0, 8.0]));
        let cat = tape.concat_channels(a, b);
        assert_eq!(tape.shape(cat), Shape::new(1, 2, 2, 2));
        let crop = tape.crop_spatial(cat, 1, 2);
        let loss = tape.sum(crop);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }
}
