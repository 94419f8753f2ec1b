use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::real::Real;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    pub requires_grad: bool,
}

impl<R: Real> Tensor<R> {
    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::EmptyDimension("tensor shape"));
        }
        if numel != data.len() {
            return Err(dim_err("from_vec", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, R::one())
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: R) -> Self {
        Self::full(&[1], value)
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<G: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut G) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                R::lit(x * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = R::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Size of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols().max(1)
    }

    pub fn row(&self, r: usize) -> &[R] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [R] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(dim_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(R, R) -> R) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: R) -> Self {
        self.map(|x| x * s)
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| S::lit(x.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn sum(&self) -> R {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> R {
        self.data.iter().map(|&x| x * x).sum::<R>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<R> {
        if self.shape != other.shape {
            return Err(dim_err("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(R::zero(), R::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Exact bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Self) -> bool
    where
        R: BitRepr,
    {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.bits() == b.bits())
    }
}

/// Access to the raw bit pattern of a float, used for bit-exact comparisons and hashing.
pub trait BitRepr: Copy {
    fn bits(self) -> u64;
}

impl BitRepr for f32 {
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl BitRepr for f64 {
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Identity of a trainable tensor; gradients are keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

impl ParamId {
    fn fresh() -> Self {
        Self(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named model parameter. Cloning yields an independent parameter with a new identity.
#[derive(Debug)]
pub struct Param<R> {
    id: ParamId,
    pub value: Tensor<R>,
}

impl<R: Real> Param<R> {
    pub fn new(mut value: Tensor<R>) -> Self {
        value.requires_grad = true;
        Self {
            id: ParamId::fresh(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.value.requires_grad = trainable;
    }

    pub fn cast<S: Real>(&self) -> Param<S> {
        let mut p = Param::new(self.value.cast());
        p.value.requires_grad = self.value.requires_grad;
        p
    }
}

impl<R: Clone> Clone for Param<R> {
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            value: self.value.clone(),
        }
    }
}

/// Visitor over a model's named parameters, in a stable order.
pub trait Parameters<R: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.numel());
        n
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut("", &mut |_, p| p.set_trainable(trainable));
    }
}

/// Joins a parameter path prefix and a leaf name with a dot.
pub fn join(prefix: &str, name: &str) -> alloc::string::String {
    if prefix.is_empty() {
        name.into()
    } else {
        alloc::format!("{prefix}.{name}")
    }
}
