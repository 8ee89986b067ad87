use std::f64::consts::PI;

use super::{shape_str, Real, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, shape_str(a.shape()), shape_str(b.shape())));
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, vec![a.clone(), b.clone()], |g, needs| needs.iter().map(|n| n.then(|| g.to_vec())).collect()))
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, vec![a.clone(), b.clone()], |g, needs| {
        vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.iter().map(|v| -*v).collect())]
    }))
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    let (ad, bd) = (a.data_arc(), b.data_arc());
    Ok(Tensor::from_op(a.shape().to_vec(), data, vec![a.clone(), b.clone()], move |g, needs| {
        vec![
            needs[0].then(|| g.iter().zip(bd.iter()).map(|(g, y)| *g * *y).collect()),
            needs[1].then(|| g.iter().zip(ad.iter()).map(|(g, x)| *g * *x).collect()),
        ]
    }))
}

pub fn scale<T: Real>(a: &Tensor<T>, s: T) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x * s).collect();
    Tensor::from_op(a.shape().to_vec(), data, vec![a.clone()], move |g, _| vec![Some(g.iter().map(|v| *v * s).collect())])
}

/// Adds `b[C]` to every position of `x[..., C]`.
pub fn add_bias<T: Real>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap_or(&0);
    if b.shape() != [c] {
        return Err(Error::shape("add_bias", format!("[{c}]"), shape_str(b.shape())));
    }
    let bd = b.data();
    let mut data = x.to_vec();
    for row in data.chunks_exact_mut(c) {
        row.iter_mut().zip(bd).for_each(|(v, b)| *v += *b);
    }
    Ok(Tensor::from_op(x.shape().to_vec(), data, vec![x.clone(), b.clone()], move |g, needs| {
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); c];
            for row in g.chunks_exact(c) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
            }
            db
        });
        vec![needs[0].then(|| g.to_vec()), db]
    }))
}

/// GeLU with the exact Gaussian CDF: `x * Φ(x)`, `Φ(x) = (1 + erf(x/√2)) / 2`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::of(0.5);
    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
    let data = x.data().iter().map(|v| *v * half * (T::one() + (*v * inv_sqrt2).erf())).collect();
    let xd = x.data_arc();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move |g, _| {
        let inv_sqrt_2pi = T::of(1.0 / (2.0 * PI).sqrt());
        let dx = g
            .iter()
            .zip(xd.iter())
            .map(|(g, v)| {
                let cdf = half * (T::one() + (*v * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * *v * *v).exp();
                *g * (cdf + *v * pdf)
            })
            .collect();
        vec![Some(dx)]
    })
}

/// `elu(u) + 1`: the positive feature map used by linear attention.
pub fn elu_plus_one<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|v| if *v > T::zero() { *v + T::one() } else { v.exp() }).collect();
    let xd = x.data_arc();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move |g, _| {
        let dx = g.iter().zip(xd.iter()).map(|(g, v)| if *v > T::zero() { *g } else { *g * v.exp() }).collect();
        vec![Some(dx)]
    })
}

pub fn sum<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().fold(T::zero(), |a, b| a + *b);
    let n = x.numel();
    Tensor::from_op(vec![1], vec![total], vec![x.clone()], move |g, _| vec![Some(vec![g[0]; n])])
}

pub fn mean<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::of(x.numel() as f64);
    scale(&sum(x), T::one() / n)
}
