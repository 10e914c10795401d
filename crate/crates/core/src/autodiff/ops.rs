//! Value kernels for the primitive op set, plus their vector-Jacobian
//! products.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Primitive operations recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Exp,
    Ln,
    Relu,
    Sigmoid,
    Scale(f64),
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Scale(_) => "scale",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => 2,
            _ => 1,
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn forward<T: Scalar>(kind: OpKind, inputs: &[&Tensor<T>], strict: bool) -> Result<Tensor<T>> {
    if inputs.len() != kind.arity() {
        return Err(Error::shape(
            kind.name(),
            format!("expected {} inputs, got {}", kind.arity(), inputs.len()),
        ));
    }
    let a = inputs[0];
    let unary = |f: &dyn Fn(T) -> T| Tensor::raw(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect());
    let binary = |f: &dyn Fn(T, T) -> T| -> Result<Tensor<T>> {
        let b = inputs[1];
        if a.shape() != b.shape() {
            return Err(Error::shape(kind.name(), format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(Tensor::raw(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ))
    };
    Ok(match kind {
        OpKind::Add => binary(&|x, y| x + y)?,
        OpKind::Sub => binary(&|x, y| x - y)?,
        OpKind::Mul => binary(&|x, y| x * y)?,
        OpKind::MatMul => matmul(a, inputs[1])?,
        OpKind::Exp => unary(&|x| x.exp()),
        OpKind::Ln => {
            if strict {
                if let Some(i) = a.data().iter().position(|&x| !(x > T::zero())) {
                    return Err(Error::Domain {
                        op: "ln",
                        detail: format!("non-positive value {} at index {i}", a.data()[i]),
                    });
                }
            }
            unary(&|x| x.ln())
        }
        OpKind::Relu => unary(&|x| if x > T::zero() { x } else { T::zero() }),
        OpKind::Sigmoid => unary(&sigmoid),
        OpKind::Scale(c) => {
            let c = T::of(c);
            unary(&|x| x * c)
        }
    })
}

fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Ok(Tensor::raw(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)))
}

/// Row-major `[m,k] x [k,n]`.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

/// `c += a * b` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`. The
/// summation order over `k` is fixed.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `a^T` for a row-major `[r,c]` buffer.
pub(crate) fn transpose<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Gradients of the inputs given the output gradient `g`.
pub(crate) fn backward<T: Scalar>(
    kind: OpKind,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &[T],
) -> Vec<Vec<T>> {
    let a = inputs[0].data();
    let zip_map = |x: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> { x.iter().zip(g).map(|(&x, &g)| f(x, g)).collect() };
    match kind {
        OpKind::Add => vec![g.to_vec(), g.to_vec()],
        OpKind::Sub => vec![g.to_vec(), g.iter().map(|&x| -x).collect()],
        OpKind::Mul => {
            let b = inputs[1].data();
            vec![zip_map(b, &|b, g| g * b), zip_map(a, &|a, g| g * a)]
        }
        OpKind::MatMul => {
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let n = inputs[1].shape()[1];
            let b = inputs[1].data();
            let bt = transpose(b, k, n);
            let at = transpose(a, m, k);
            vec![matmul_raw(g, &bt, m, n, k), matmul_raw(&at, g, k, m, n)]
        }
        OpKind::Exp => vec![zip_map(out.data(), &|y, g| g * y)],
        OpKind::Ln => vec![zip_map(a, &|x, g| g / x)],
        OpKind::Relu => vec![zip_map(a, &|x, g| if x > T::zero() { g } else { T::zero() })],
        OpKind::Sigmoid => vec![zip_map(out.data(), &|y, g| g * y * (T::one() - y))],
        OpKind::Scale(c) => {
            let c = T::of(c);
            vec![g.iter().map(|&g| g * c).collect()]
        }
    }
}
