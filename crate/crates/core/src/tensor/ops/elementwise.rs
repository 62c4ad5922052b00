use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{numel_of, Scalar, Tensor};

/// Offsets into each operand for every output element under right-aligned broadcasting.
struct Broadcast {
    shape: Vec<usize>,
    lhs: Vec<usize>,
    rhs: Vec<usize>,
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn offsets(out: &[usize], strides: &[usize]) -> Vec<usize> {
    let n = numel_of(out);
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    offs
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let shape = broadcast_shape(op, a, b)?;
        let lhs = offsets(&shape, &broadcast_strides(a, &shape));
        let rhs = offsets(&shape, &broadcast_strides(b, &shape));
        Ok(Broadcast { shape, lhs, rhs })
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Max => "maximum",
            Binary::Min => "minimum",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
            Binary::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
            Binary::Min => {
                if a <= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// Partial derivatives with respect to (a, b).
    #[inline]
    fn partials<T: Scalar>(self, a: T, b: T) -> (T, T) {
        let (one, zero) = (T::one(), T::zero());
        match self {
            Binary::Add => (one, one),
            Binary::Sub => (one, -one),
            Binary::Mul => (b, a),
            Binary::Div => (one / b, -a / (b * b)),
            Binary::Max => {
                if a >= b {
                    (one, zero)
                } else {
                    (zero, one)
                }
            }
            Binary::Min => {
                if a <= b {
                    (one, zero)
                } else {
                    (zero, one)
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
        let op = kind.name();
        if self.shape() == other.shape() {
            let data: Vec<T> = self
                .data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| kind.apply(a, b))
                .collect();
            let (a, b) = (self.clone(), other.clone());
            return Ok(Tensor::from_op(
                op,
                self.shape().to_vec(),
                data,
                vec![self.clone(), other.clone()],
                move |_, g| {
                    let (ad, bd) = (a.data(), b.data());
                    let mut ga = vec![T::zero(); ad.len()];
                    let mut gb = vec![T::zero(); bd.len()];
                    for i in 0..g.len() {
                        let (pa, pb) = kind.partials(ad[i], bd[i]);
                        ga[i] = g[i] * pa;
                        gb[i] = g[i] * pb;
                    }
                    vec![
                        a.requires_grad().then_some(ga),
                        b.requires_grad().then_some(gb),
                    ]
                },
            ));
        }
        let bc = Arc::new(Broadcast::new(op, self.shape(), other.shape())?);
        let (ad, bd) = (self.data(), other.data());
        let data: Vec<T> = bc
            .lhs
            .iter()
            .zip(&bc.rhs)
            .map(|(&i, &j)| kind.apply(ad[i], bd[j]))
            .collect();
        let shape = bc.shape.clone();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            op,
            shape,
            data,
            vec![self.clone(), other.clone()],
            move |_, g| {
                let (ad, bd) = (a.data(), b.data());
                let mut ga = vec![T::zero(); ad.len()];
                let mut gb = vec![T::zero(); bd.len()];
                for (k, (&i, &j)) in bc.lhs.iter().zip(&bc.rhs).enumerate() {
                    let (pa, pb) = kind.partials(ad[i], bd[j]);
                    ga[i] += g[k] * pa;
                    gb[j] += g[k] * pb;
                }
                vec![
                    a.requires_grad().then_some(ga),
                    b.requires_grad().then_some(gb),
                ]
            },
        ))
    }

    /// Elementwise sum with right-aligned broadcasting over size-1 extents.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise max; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Max)
    }

    /// Elementwise min; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Min)
    }

    pub(crate) fn unary<F, D>(&self, op: &'static str, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + Send + Sync + 'static,
    {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |y, g| {
                let gx = x
                    .data()
                    .iter()
                    .zip(y)
                    .zip(g)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            },
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, k: f64) -> Tensor<T> {
        let k = T::lit(k);
        self.unary("scale", move |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor<T> {
        let k = T::lit(k);
        self.unary("add_scalar", move |x| x + k, |_, _| T::one())
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn atan(&self) -> Tensor<T> {
        self.unary("atan", |x| x.atan(), |x, _| T::one() / (T::one() + x * x))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Clamps from below; gradient is zero where the bound is active.
    pub fn clamp_min(&self, lo: f64) -> Tensor<T> {
        let lo = T::lit(lo);
        self.unary(
            "clamp_min",
            move |x| if x > lo { x } else { lo },
            move |x, _| if x > lo { T::one() } else { T::zero() },
        )
    }
}
