use super::{numel, shape_str, Real, Tensor};
use crate::error::{Error, Result};

pub fn reshape<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if numel(shape) != x.numel() {
        return Err(Error::shape("reshape", shape_str(shape), shape_str(x.shape())));
    }
    Ok(Tensor::from_op(shape.to_vec(), x.to_vec(), vec![x.clone()], |g, _| vec![Some(g.to_vec())]))
}

/// Concatenates along the last axis. All leading extents must agree.
pub fn concat_last<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat_last: no inputs".into()))?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::shape("concat_last", shape_str(first.shape()), shape_str(p.shape())));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows = numel(lead);
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &wd) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * wd..(r + 1) * wd]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let parents = parts.iter().map(|p| (*p).clone()).collect();
    Ok(Tensor::from_op(shape, out, parents, move |g, needs| {
        let mut offset = 0;
        let mut grads = Vec::with_capacity(widths.len());
        for (&wd, &need) in widths.iter().zip(needs) {
            grads.push(need.then(|| {
                let mut d = Vec::with_capacity(rows * wd);
                for r in 0..rows {
                    d.extend_from_slice(&g[r * total + offset..r * total + offset + wd]);
                }
                d
            }));
            offset += wd;
        }
        grads
    }))
}

/// `[H, W, C]` → `[H, W, n, C]`, the same vector copied to every category.
pub fn repeat_categories<T: Real>(x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let [h, w, c] = *x.shape() else {
        return Err(Error::shape("repeat_categories", "[H, W, C]", shape_str(x.shape())));
    };
    let mut out = Vec::with_capacity(h * w * n * c);
    for row in x.data().chunks_exact(c.max(1)).take(h * w) {
        for _ in 0..n {
            out.extend_from_slice(row);
        }
    }
    Ok(Tensor::from_op(vec![h, w, n, c], out, vec![x.clone()], move |g, _| {
        let mut d = vec![T::zero(); h * w * c];
        for (p, dr) in d.chunks_exact_mut(c.max(1)).enumerate().take(h * w) {
            for k in 0..n {
                let gr = &g[(p * n + k) * c..(p * n + k + 1) * c];
                dr.iter_mut().zip(gr).for_each(|(d, g)| *d += *g);
            }
        }
        vec![Some(d)]
    }))
}

/// Gathers `indices` along `axis`, preserving their order.
pub fn index_select<T: Real>(x: &Tensor<T>, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("index_select", format!("rank > {axis}"), shape_str(x.shape())));
    }
    let extent = x.shape()[axis];
    if let Some(bad) = indices.iter().find(|&&i| i >= extent) {
        return Err(Error::InvalidArgument(format!("index_select: index {bad} out of range for axis {axis} of extent {extent}")));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let k = indices.len();
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * k * inner);
    for o in 0..outer {
        for &i in indices {
            out.extend_from_slice(&xd[(o * extent + i) * inner..][..inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = k;
    let indices = indices.to_vec();
    Ok(Tensor::from_op(shape, out, vec![x.clone()], move |g, _| {
        let mut d = vec![T::zero(); outer * extent * inner];
        for o in 0..outer {
            for (j, &i) in indices.iter().enumerate() {
                let gr = &g[(o * k + j) * inner..][..inner];
                let dr = &mut d[(o * extent + i) * inner..][..inner];
                dr.iter_mut().zip(gr).for_each(|(d, g)| *d += *g);
            }
        }
        vec![Some(d)]
    }))
}
