use super::{shape_str, Real, Tensor};
use crate::error::{Error, Result};

/// Source taps for one output coordinate: `(lo, hi, frac)` so that
/// `out = (1 − frac)·in[lo] + frac·in[hi]`. Half-pixel centres
/// (`align_corners = false`), clamped at the borders.
pub fn bilinear_weights(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of the two leading (spatial) axes of `x[H, W, ...]`.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if x.rank() < 3 || out_h == 0 || out_w == 0 || x.shape()[0] == 0 || x.shape()[1] == 0 {
        return Err(Error::shape("bilinear_resize", format!("[H, W, ...] resized to {out_h}x{out_w}"), shape_str(x.shape())));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = out_h;
    shape[1] = out_w;
    if (h, w) == (out_h, out_w) {
        return Ok(Tensor::from_op(shape, x.to_vec(), vec![x.clone()], |g, _| vec![Some(g.to_vec())]));
    }
    let ty: Vec<(usize, usize, T, T)> = taps(h, out_h);
    let tx: Vec<(usize, usize, T, T)> = taps(w, out_w);
    let xd = x.data();
    let mut out = vec![T::zero(); out_h * out_w * inner];
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let or = &mut out[(oy * out_w + ox) * inner..][..inner];
            for (yi, wy) in [(y0, wy0), (y1, wy1)] {
                for (xi, wx) in [(x0, wx0), (x1, wx1)] {
                    let wt = wy * wx;
                    let src = &xd[(yi * w + xi) * inner..][..inner];
                    or.iter_mut().zip(src).for_each(|(o, s)| *o += wt * *s);
                }
            }
        }
    }
    Ok(Tensor::from_op(shape, out, vec![x.clone()], move |g, _| {
        let mut dx = vec![T::zero(); h * w * inner];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gr = &g[(oy * out_w + ox) * inner..][..inner];
                for (yi, wy) in [(y0, wy0), (y1, wy1)] {
                    for (xi, wx) in [(x0, wx0), (x1, wx1)] {
                        let wt = wy * wx;
                        let dr = &mut dx[(yi * w + xi) * inner..][..inner];
                        dr.iter_mut().zip(gr).for_each(|(d, g)| *d += wt * *g);
                    }
                }
            }
        }
        vec![Some(dx)]
    }))
}

fn taps<T: Real>(input: usize, output: usize) -> Vec<(usize, usize, T, T)> {
    bilinear_weights(input, output).into_iter().map(|(lo, hi, f)| (lo, hi, T::of(1.0 - f), T::of(f))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_stays_constant() {
        let x = Tensor::<f64>::full(&[3, 5, 2], 1.7);
        let y = bilinear_resize(&x, 12, 20).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.7).abs() < 1e-12));
    }

    #[test]
    fn matches_direct_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w, c) = (3, 4, 2);
        let x: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::new(&[h, w, c], x.clone()).unwrap();
        let (oh, ow) = (12, 16);
        let y = bilinear_resize(&t, oh, ow).unwrap();
        let at = |yy: usize, xx: usize, ch: usize| x[(yy * w + xx) * c + ch];
        for oy in 0..oh {
            for ox in 0..ow {
                // Source coordinate under the half-pixel convention.
                let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                for ch in 0..c {
                    let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                    let bot = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                    let want = top * (1.0 - fy) + bot * fy;
                    assert!((y.data()[(oy * ow + ox) * c + ch] - want).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f32>::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_resize(&x, 2, 2).unwrap().data(), x.data());
    }
}
