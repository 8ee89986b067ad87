use super::{shape_str, Real, Tensor};
use crate::error::{Error, Result};

/// Affine map over the last axis: `x[..., Din] · w[Din, Dout] + b[Dout]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let din = *x.shape().last().unwrap_or(&0);
    if w.rank() != 2 || w.shape()[0] != din {
        return Err(Error::shape("linear", format!("weight [{din}, Dout] for input {}", shape_str(x.shape())), shape_str(w.shape())));
    }
    let dout = w.shape()[1];
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(Error::shape("linear", format!("bias [{dout}]"), shape_str(b.shape())));
        }
    }
    let rows = x.numel() / din.max(1);
    let (xd, wd) = (x.data_arc(), w.data_arc());
    let mut out = vec![T::zero(); rows * dout];
    for (xr, or) in xd.chunks_exact(din).zip(out.chunks_exact_mut(dout)) {
        if let Some(b) = b {
            or.copy_from_slice(b.data());
        }
        for (xv, wr) in xr.iter().zip(wd.chunks_exact(dout)) {
            or.iter_mut().zip(wr).for_each(|(o, w)| *o += *xv * *w);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(b.cloned());
    Ok(Tensor::from_op(shape, out, parents, move |g, needs| {
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); rows * din];
            for (gr, dr) in g.chunks_exact(dout).zip(dx.chunks_exact_mut(din)) {
                for (d, wr) in dr.iter_mut().zip(wd.chunks_exact(dout)) {
                    *d = gr.iter().zip(wr).fold(T::zero(), |a, (g, w)| a + *g * *w);
                }
            }
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); din * dout];
            for (xr, gr) in xd.chunks_exact(din).zip(g.chunks_exact(dout)) {
                for (xv, dr) in xr.iter().zip(dw.chunks_exact_mut(dout)) {
                    dr.iter_mut().zip(gr).for_each(|(d, g)| *d += *xv * *g);
                }
            }
            dw
        });
        let mut grads = vec![dx, dw];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut db = vec![T::zero(); dout];
                for gr in g.chunks_exact(dout) {
                    db.iter_mut().zip(gr).for_each(|(d, g)| *d += *g);
                }
                db
            }));
        }
        grads
    }))
}

/// Normalises every position of `x[..., C]` over `C`, then applies
/// `gamma[C]` and `beta[C]`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap_or(&0);
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if p.shape() != [c] {
            return Err(Error::shape("layer_norm", format!("{name} [{c}]"), shape_str(p.shape())));
        }
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("layer_norm: eps must be positive, got {eps}")));
    }
    let eps = T::of(eps);
    let inv_c = T::one() / T::of(c as f64);
    let rows = x.numel() / c.max(1);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); x.numel()];
    for (r, ((xr, hr), or)) in x.data().chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)).enumerate() {
        let mu = xr.iter().fold(T::zero(), |a, v| a + *v) * inv_c;
        let var = xr.iter().fold(T::zero(), |a, v| a + (*v - mu) * (*v - mu)) * inv_c;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for i in 0..c {
            hr[i] = (xr[i] - mu) * is;
            or[i] = hr[i] * gd[i] + bd[i];
        }
    }
    let gdata = gamma.data_arc();
    Ok(Tensor::from_op(x.shape().to_vec(), out, vec![x.clone(), gamma.clone(), beta.clone()], move |g, needs| {
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); rows * c];
            let mut dh = vec![T::zero(); c];
            for r in 0..rows {
                let (gr, hr) = (&g[r * c..(r + 1) * c], &xhat[r * c..(r + 1) * c]);
                let mut mean_dh = T::zero();
                let mut mean_dh_h = T::zero();
                for i in 0..c {
                    dh[i] = gr[i] * gdata[i];
                    mean_dh += dh[i];
                    mean_dh_h += dh[i] * hr[i];
                }
                mean_dh *= inv_c;
                mean_dh_h *= inv_c;
                for i in 0..c {
                    dx[r * c + i] = inv_std[r] * (dh[i] - mean_dh - hr[i] * mean_dh_h);
                }
            }
            dx
        });
        let dgamma = needs[1].then(|| {
            let mut d = vec![T::zero(); c];
            for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for i in 0..c {
                    d[i] += gr[i] * hr[i];
                }
            }
            d
        });
        let dbeta = needs[2].then(|| {
            let mut d = vec![T::zero(); c];
            for gr in g.chunks_exact(c) {
                d.iter_mut().zip(gr).for_each(|(d, g)| *d += *g);
            }
            d
        });
        vec![dx, dgamma, dbeta]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_weight_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[2, 3, 4]);
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 5] = 1.0);
        let w = Tensor::new(&[4, 4], eye).unwrap();
        let b = Tensor::zeros(&[4]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, &[3, 2]);
        let b = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let y = linear(&Tensor::zeros(&[5, 3]), &w, Some(&b)).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn linear_matches_dot_product_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[4, 5]);
        let w = random(&mut rng, &[5, 3]);
        let b = random(&mut rng, &[3]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for r in 0..4 {
            for o in 0..3 {
                let mut acc = b.data()[o];
                for i in 0..5 {
                    acc += x.data()[r * 5 + i] * w.data()[i * 3 + o];
                }
                assert!((y.data()[r * 3 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let x = Tensor::<f64>::full(&[3, 6], 2.5);
        let y = layer_norm(&x, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6]), 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[5, 8]);
        let gamma = random(&mut rng, &[8]);
        let beta = random(&mut rng, &[8]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for r in 0..5 {
            let row = &x.data()[r * 8..(r + 1) * 8];
            let mu: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0;
            for i in 0..8 {
                let want = (row[i] - mu) / (var + 1e-5).sqrt() * gamma.data()[i] + beta.data()[i];
                assert!((y.data()[r * 8 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_mean_equals_beta_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[4, 7]);
        let beta = random(&mut rng, &[7]);
        let y = layer_norm(&x, &Tensor::full(&[7], 1.0), &beta, 1e-5).unwrap();
        let beta_mean: f64 = beta.data().iter().sum::<f64>() / 7.0;
        for row in y.data().chunks(7) {
            let m: f64 = row.iter().sum::<f64>() / 7.0;
            assert!((m - beta_mean).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[3, 16]);
        let y = layer_norm(&x, &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), 1e-8).unwrap();
        for row in y.data().chunks(16) {
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_rejects_gamma_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 4]);
        assert!(layer_norm(&x, &Tensor::zeros(&[3]), &Tensor::zeros(&[4]), 1e-5).is_err());
    }
}
