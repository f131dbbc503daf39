//! Forward-mode automatic differentiation scalars.
//!
//! Models write their discrete-time map once, generically over [`Scalar`], and
//! get exact first and second derivatives by evaluating it on [`Jet1`] or
//! [`Jet2`] inputs. An empty gradient / Hessian buffer stands for a constant.

use std::ops::{Add, Mul, Neg, Sub};

/// Arithmetic needed to evaluate a smooth map.
pub trait Scalar: Clone + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    fn constant(v: f64) -> Self;
    fn scale(&self, k: f64) -> Self;
    fn value(&self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn scale(&self, k: f64) -> Self {
        self * k
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
}

/// Value plus gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet1 {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl Jet1 {
    /// Independent variable `index` of `dim`.
    pub fn variable(value: f64, index: usize, dim: usize) -> Self {
        let mut grad = vec![0.0; dim];
        grad[index] = 1.0;
        Self { value, grad }
    }

    /// Seeds `x` then `u` as consecutive independent variables.
    pub fn seed(x: &[f64], u: &[f64]) -> (Vec<Self>, Vec<Self>) {
        let n = x.len() + u.len();
        let xs = x.iter().enumerate().map(|(i, &v)| Self::variable(v, i, n)).collect();
        let us = u.iter().enumerate().map(|(i, &v)| Self::variable(v, x.len() + i, n)).collect();
        (xs, us)
    }
}

fn combine(a: &[f64], ka: f64, b: &[f64], kb: f64) -> Vec<f64> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Vec::new(),
        (false, true) => a.iter().map(|x| ka * x).collect(),
        (true, false) => b.iter().map(|x| kb * x).collect(),
        (false, false) => a.iter().zip(b).map(|(x, y)| ka * x + kb * y).collect(),
    }
}

impl Add for Jet1 {
    type Output = Jet1;
    fn add(self, rhs: Jet1) -> Jet1 {
        Jet1 { value: self.value + rhs.value, grad: combine(&self.grad, 1.0, &rhs.grad, 1.0) }
    }
}

impl Sub for Jet1 {
    type Output = Jet1;
    fn sub(self, rhs: Jet1) -> Jet1 {
        Jet1 { value: self.value - rhs.value, grad: combine(&self.grad, 1.0, &rhs.grad, -1.0) }
    }
}

impl Mul for Jet1 {
    type Output = Jet1;
    fn mul(self, rhs: Jet1) -> Jet1 {
        Jet1 {
            value: self.value * rhs.value,
            grad: combine(&self.grad, rhs.value, &rhs.grad, self.value),
        }
    }
}

impl Neg for Jet1 {
    type Output = Jet1;
    fn neg(self) -> Jet1 {
        self.scale(-1.0)
    }
}

impl Scalar for Jet1 {
    fn constant(v: f64) -> Self {
        Self { value: v, grad: Vec::new() }
    }
    fn scale(&self, k: f64) -> Self {
        Self { value: self.value * k, grad: self.grad.iter().map(|g| g * k).collect() }
    }
    fn value(&self) -> f64 {
        self.value
    }
}

/// Value, gradient and dense (row-major) Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl Jet2 {
    pub fn variable(value: f64, index: usize, dim: usize) -> Self {
        let mut grad = vec![0.0; dim];
        grad[index] = 1.0;
        Self { value, grad, hess: vec![0.0; dim * dim] }
    }

    pub fn seed(x: &[f64], u: &[f64]) -> (Vec<Self>, Vec<Self>) {
        let n = x.len() + u.len();
        let xs = x.iter().enumerate().map(|(i, &v)| Self::variable(v, i, n)).collect();
        let us = u.iter().enumerate().map(|(i, &v)| Self::variable(v, x.len() + i, n)).collect();
        (xs, us)
    }

    /// Number of independent variables, zero for a constant.
    pub fn dim(&self) -> usize {
        self.grad.len()
    }
}

impl Add for Jet2 {
    type Output = Jet2;
    fn add(self, rhs: Jet2) -> Jet2 {
        Jet2 {
            value: self.value + rhs.value,
            grad: combine(&self.grad, 1.0, &rhs.grad, 1.0),
            hess: combine(&self.hess, 1.0, &rhs.hess, 1.0),
        }
    }
}

impl Sub for Jet2 {
    type Output = Jet2;
    fn sub(self, rhs: Jet2) -> Jet2 {
        Jet2 {
            value: self.value - rhs.value,
            grad: combine(&self.grad, 1.0, &rhs.grad, -1.0),
            hess: combine(&self.hess, 1.0, &rhs.hess, -1.0),
        }
    }
}

impl Mul for Jet2 {
    type Output = Jet2;
    fn mul(self, rhs: Jet2) -> Jet2 {
        let mut hess = combine(&self.hess, rhs.value, &rhs.hess, self.value);
        if !self.grad.is_empty() && !rhs.grad.is_empty() {
            let n = self.grad.len();
            if hess.is_empty() {
                hess = vec![0.0; n * n];
            }
            for i in 0..n {
                let (ai, bi) = (self.grad[i], rhs.grad[i]);
                if ai == 0.0 && bi == 0.0 {
                    continue;
                }
                let row = &mut hess[i * n..(i + 1) * n];
                for j in 0..n {
                    row[j] += ai * rhs.grad[j] + bi * self.grad[j];
                }
            }
        }
        Jet2 {
            value: self.value * rhs.value,
            grad: combine(&self.grad, rhs.value, &rhs.grad, self.value),
            hess,
        }
    }
}

impl Neg for Jet2 {
    type Output = Jet2;
    fn neg(self) -> Jet2 {
        self.scale(-1.0)
    }
}

impl Scalar for Jet2 {
    fn constant(v: f64) -> Self {
        Self { value: v, grad: Vec::new(), hess: Vec::new() }
    }
    fn scale(&self, k: f64) -> Self {
        Self {
            value: self.value * k,
            grad: self.grad.iter().map(|g| g * k).collect(),
            hess: self.hess.iter().map(|h| h * k).collect(),
        }
    }
    fn value(&self) -> f64 {
        self.value
    }
}
