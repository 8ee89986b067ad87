use super::{shape_str, Real, Tensor};
use crate::error::{Error, Result};

/// Normalised linear attention over the second-to-last (token) axis.
///
/// `q` and `k` must already be mapped through a positive feature map
/// (see [`super::elu_plus_one`]). For every leading position, with `N`
/// tokens, computes `out = q·(kᵀv) / (q·Σₙ kₙ)` right to left, which is
/// `O(N·D·Dv)` instead of the `O(N²)` explicit kernel sum.
///
/// Shapes: `q, k: [..., N, D]`, `v: [..., N, Dv]` → `[..., N, Dv]`.
pub fn linear_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if q.shape() != k.shape() || q.rank() < 2 || v.rank() != q.rank() || v.shape()[..q.rank() - 1] != q.shape()[..q.rank() - 1] {
        return Err(Error::shape(
            "linear_attention",
            format!("q, k [..., N, D] and v [..., N, Dv], q = {}", shape_str(q.shape())),
            format!("k = {}, v = {}", shape_str(k.shape()), shape_str(v.shape())),
        ));
    }
    let r = q.rank();
    let (n, d, dv) = (q.shape()[r - 2], q.shape()[r - 1], v.shape()[r - 1]);
    let positions: usize = q.shape()[..r - 2].iter().product();
    let (qd, kd, vd) = (q.data_arc(), k.data_arc(), v.data_arc());

    if n == 1 {
        // q·(kᵀv) / (q·k) = v for a single token, independent of q and k.
        return Ok(Tensor::from_op(v.shape().to_vec(), v.to_vec(), vec![q.clone(), k.clone(), v.clone()], move |g, needs| {
            vec![needs[0].then(|| vec![T::zero(); qd.len()]), needs[1].then(|| vec![T::zero(); kd.len()]), needs[2].then(|| g.to_vec())]
        }));
    }

    let mut out = vec![T::zero(); positions * n * dv];
    let mut den = vec![T::zero(); positions * n];
    let mut kv = vec![T::zero(); d * dv];
    let mut z = vec![T::zero(); d];
    for s in 0..positions {
        let (a, b, vv) = (&qd[s * n * d..][..n * d], &kd[s * n * d..][..n * d], &vd[s * n * dv..][..n * dv]);
        key_summary(b, vv, n, d, dv, &mut kv, &mut z);
        for t in 0..n {
            let ar = &a[t * d..][..d];
            let dn = ar.iter().zip(&z).fold(T::zero(), |acc, (x, y)| acc + *x * *y);
            den[s * n + t] = dn;
            let or = &mut out[(s * n + t) * dv..][..dv];
            for (av, kr) in ar.iter().zip(kv.chunks_exact(dv)) {
                or.iter_mut().zip(kr).for_each(|(o, w)| *o += *av * *w);
            }
            or.iter_mut().for_each(|o| *o /= dn);
        }
    }

    let out_data = out.clone();
    let mut shape = v.shape().to_vec();
    shape[r - 1] = dv;
    Ok(Tensor::from_op(shape, out, vec![q.clone(), k.clone(), v.clone()], move |g, needs| {
        let mut dq = needs[0].then(|| vec![T::zero(); qd.len()]);
        let mut dk = needs[1].then(|| vec![T::zero(); kd.len()]);
        let mut dvv = needs[2].then(|| vec![T::zero(); vd.len()]);
        let mut kv = vec![T::zero(); d * dv];
        let mut z = vec![T::zero(); d];
        let mut dnum = vec![T::zero(); n * dv];
        let mut dden = vec![T::zero(); n];
        let mut dkv = vec![T::zero(); d * dv];
        let mut dz = vec![T::zero(); d];
        for s in 0..positions {
            let (a, b, vv) = (&qd[s * n * d..][..n * d], &kd[s * n * d..][..n * d], &vd[s * n * dv..][..n * dv]);
            let (gs, os) = (&g[s * n * dv..][..n * dv], &out_data[s * n * dv..][..n * dv]);
            key_summary(b, vv, n, d, dv, &mut kv, &mut z);
            // out = num / den  =>  dnum = g / den, dden = −Σ g·out / den
            for t in 0..n {
                let dn = den[s * n + t];
                let mut acc = T::zero();
                for j in 0..dv {
                    dnum[t * dv + j] = gs[t * dv + j] / dn;
                    acc += gs[t * dv + j] * os[t * dv + j];
                }
                dden[t] = -acc / dn;
            }
            if let Some(dq) = dq.as_mut() {
                // num = a·kv, den = a·z
                for t in 0..n {
                    let dr = &mut dq[(s * n + t) * d..][..d];
                    let gr = &dnum[t * dv..][..dv];
                    for (i, dval) in dr.iter_mut().enumerate() {
                        let kr = &kv[i * dv..][..dv];
                        *dval = gr.iter().zip(kr).fold(T::zero(), |acc, (x, y)| acc + *x * *y) + dden[t] * z[i];
                    }
                }
            }
            if dk.is_none() && dvv.is_none() {
                continue;
            }
            // dkv = aᵀ·dnum, dz = aᵀ·dden
            dkv.iter_mut().for_each(|x| *x = T::zero());
            dz.iter_mut().for_each(|x| *x = T::zero());
            for t in 0..n {
                let ar = &a[t * d..][..d];
                let gr = &dnum[t * dv..][..dv];
                for (i, av) in ar.iter().enumerate() {
                    dz[i] += *av * dden[t];
                    dkv[i * dv..][..dv].iter_mut().zip(gr).for_each(|(x, y)| *x += *av * *y);
                }
            }
            if let Some(dk) = dk.as_mut() {
                // kv = bᵀ·v, z = bᵀ·1
                for t in 0..n {
                    let vr = &vv[t * dv..][..dv];
                    let dr = &mut dk[(s * n + t) * d..][..d];
                    for (i, dval) in dr.iter_mut().enumerate() {
                        *dval = vr.iter().zip(&dkv[i * dv..][..dv]).fold(T::zero(), |acc, (x, y)| acc + *x * *y) + dz[i];
                    }
                }
            }
            if let Some(dvv) = dvv.as_mut() {
                for t in 0..n {
                    let br = &b[t * d..][..d];
                    let dr = &mut dvv[(s * n + t) * dv..][..dv];
                    for (bv, kr) in br.iter().zip(dkv.chunks_exact(dv)) {
                        dr.iter_mut().zip(kr).for_each(|(x, y)| *x += *bv * *y);
                    }
                }
            }
        }
        vec![dq, dk, dvv]
    }))
}

/// `kv = bᵀ·v` (`[D, Dv]`) and `z = Σₙ bₙ` (`[D]`) for one position.
fn key_summary<T: Real>(b: &[T], v: &[T], n: usize, d: usize, dv: usize, kv: &mut [T], z: &mut [T]) {
    kv.iter_mut().for_each(|x| *x = T::zero());
    z.iter_mut().for_each(|x| *x = T::zero());
    for t in 0..n {
        let br = &b[t * d..][..d];
        let vr = &v[t * dv..][..dv];
        for (i, bv) in br.iter().enumerate() {
            z[i] += *bv;
            kv[i * dv..][..dv].iter_mut().zip(vr).for_each(|(x, y)| *x += *bv * *y);
        }
    }
}
