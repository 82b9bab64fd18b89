//! Dense 4-D tensors in batch/height/width/channel layout, plus the raw
//! convolution, pooling and resampling kernels and the reverse-mode tape
//! that differentiates through them.
//!
//! One canonical memory layout is used everywhere: the channel index varies
//! fastest, then width, then height, then batch. All kernels are written
//! against flat slices in that layout.

mod kernels;
mod tape;

pub use kernels::{
    avg_pool, avg_pool_backward, conv2d, conv2d_backward, conv_transpose2d,
    conv_transpose2d_backward, leaky_relu, leaky_relu_backward, upsample_bilinear,
    upsample_bilinear_backward,
};
pub use tape::{Tape, ValueId};

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating-point element type for tensors. Training runs in `f32`; the
/// finite-difference oracles instantiate everything at `f64`.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Tensor dimensions as (batch, height, width, channels).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape { n, h, w, c }
    }

    /// Shape of a scalar value (all dimensions 1).
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// Flat offset of element (n, y, x, c).
    #[inline(always)]
    pub fn idx(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + c
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

/// A dense NHWC tensor. The gradient buffer is populated by the tape after
/// a backward pass over parameters; activations never carry one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    pub shape: Shape,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.len(),
            "tensor data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor { shape, data, grad: None }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.len()], grad: None }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.len()], grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(Shape::scalar(), vec![value])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.shape.idx(n, y, x, c)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: T) {
        let i = self.shape.idx(n, y, x, c);
        self.data[i] = v;
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert!(self.shape.is_scalar(), "item() on non-scalar tensor {}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean and standard deviation per (sample, channel), taken over the
    /// spatial extent. The variance gets `eps` added before the square root
    /// so constant channels yield a usable (nonzero) deviation. Returned
    /// vectors are indexed `n * channels + c`.
    pub fn instance_stats(&self, eps: T) -> (Vec<T>, Vec<T>) {
        let Shape { n, h, w, c } = self.shape;
        let m = T::from_usize(h * w).unwrap();
        let mut means = vec![T::zero(); n * c];
        let mut stds = vec![T::zero(); n * c];
        for b in 0..n {
            for ch in 0..c {
                let mut sum = T::zero();
                for y in 0..h {
                    for x in 0..w {
                        sum = sum + self.at(b, y, x, ch);
                    }
                }
                let mean = sum / m;
                let mut sq = T::zero();
                for y in 0..h {
                    for x in 0..w {
                        let d = self.at(b, y, x, ch) - mean;
                        sq = sq + d * d;
                    }
                }
                means[b * c + ch] = mean;
                stds[b * c + ch] = (sq / m + eps).sqrt();
            }
        }
        (means, stds)
    }

    /// Elementwise conversion to another scalar type via f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .data
            .iter()
            .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
            .collect();
        Tensor::new(self.shape, data)
    }

    /// Clamp every element into [lo, hi].
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.map(|v| v.max(lo).min(hi))
    }
}

/// Dihedral-group transforms of the spatial plane: four rotations, each
/// optionally preceded by a horizontal flip. Index 0 is the identity.
pub fn dihedral_transform<T: Scalar>(t: &Tensor<T>, index: usize) -> Tensor<T> {
    assert!(index < 8, "dihedral index out of range: {index}");
    let flipped = if index >= 4 { flip_horizontal(t) } else { t.clone() };
    rotate90_times(&flipped, index % 4)
}

/// Inverse of [`dihedral_transform`] with the same index.
pub fn dihedral_inverse<T: Scalar>(t: &Tensor<T>, index: usize) -> Tensor<T> {
    assert!(index < 8, "dihedral index out of range: {index}");
    let unrotated = rotate90_times(t, (4 - index % 4) % 4);
    if index >= 4 {
        flip_horizontal(&unrotated)
    } else {
        unrotated
    }
}

fn flip_horizontal<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let Shape { n, h, w, c } = t.shape;
    let mut out = Tensor::zeros(t.shape);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.set(b, y, x, ch, t.at(b, y, w - 1 - x, ch));
                }
            }
        }
    }
    out
}

/// Counter-clockwise quarter turns; height and width swap on odd counts.
fn rotate90_times<T: Scalar>(t: &Tensor<T>, times: usize) -> Tensor<T> {
    let mut cur = t.clone();
    for _ in 0..times {
        let Shape { n, h, w, c } = cur.shape;
        let mut out = Tensor::zeros(Shape::new(n, w, h, c));
        for b in 0..n {
            for y in 0..w {
                for x in 0..h {
                    for ch in 0..c {
                        // output (y, x) comes from input (x, w - 1 - y)
                        out.set(b, y, x, ch, cur.at(b, x, w - 1 - y, ch));
                    }
                }
            }
        }
        cur = out;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_indexing_is_channel_fastest() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.len(), 120);
    }

    #[test]
    fn instance_stats_constant_channel() {
        let t = Tensor::<f64>::filled(Shape::new(1, 4, 4, 2), 3.0);
        let (mu, sd) = t.instance_stats(1e-5);
        assert_eq!(mu, vec![3.0, 3.0]);
        for s in sd {
            assert!((s - 1e-5f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_stats_two_pixel_channel() {
        // values {1, 3}: mean 2, variance 1 (+eps)
        let t = Tensor::<f64>::new(Shape::new(1, 1, 2, 1), vec![1.0, 3.0]);
        let (mu, sd) = t.instance_stats(1e-5);
        assert_eq!(mu[0], 2.0);
        assert!((sd[0] - (1.0 + 1e-5f64).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn dihedral_transforms_invert() {
        let data: Vec<f64> = (0..2 * 3 * 5 * 2).map(|i| i as f64).collect();
        let t = Tensor::new(Shape::new(2, 3, 5, 2), data);
        for k in 0..8 {
            let fwd = dihedral_transform(&t, k);
            let back = dihedral_inverse(&fwd, k);
            assert_eq!(back, t, "transform {k} did not invert");
        }
    }

    #[test]
    fn rotation_swaps_dims() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 3, 5, 2));
        let r = dihedral_transform(&t, 1);
        assert_eq!(r.shape, Shape::new(1, 5, 3, 2));
    }
}
