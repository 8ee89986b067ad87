//! Spatial convolutions over `[H, W, C]` or `[H, W, B, C]` tensors.
//!
//! The optional `B` axis is a batch of independent planes sharing weights;
//! the decoder uses it for the category axis. Weights are `[kh, kw, Cin, Cout]`
//! (depthwise: `[k, k, C]`).

use super::{shape_str, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Layout {
    h: usize,
    w: usize,
    b: usize,
    c: usize,
}

fn layout<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<Layout> {
    match *x.shape() {
        [h, w, c] => Ok(Layout { h, w, b: 1, c }),
        [h, w, b, c] => Ok(Layout { h, w, b, c }),
        _ => Err(Error::shape(op, "[H, W, C] or [H, W, B, C]", shape_str(x.shape()))),
    }
}

fn out_shape(x: &[usize], h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut s = x.to_vec();
    s[0] = h;
    s[1] = w;
    *s.last_mut().unwrap() = c;
    s
}

/// Cross-correlation with zero padding:
/// `out[oh, ow, b, co] = bias[co] + Σ x[oh·s + ki − p, ow·s + kj − p, b, ci] · w[ki, kj, ci, co]`.
/// Output extents are `⌊(H + 2p − k)/s⌋ + 1`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let l = layout("conv2d", x)?;
    let [kh, kw, ci, co] = *w.shape() else {
        return Err(Error::shape("conv2d", "weight [kh, kw, Cin, Cout]", shape_str(w.shape())));
    };
    if ci != l.c {
        return Err(Error::shape("conv2d", format!("weight with Cin = {} for input {}", l.c, shape_str(x.shape())), shape_str(w.shape())));
    }
    if let Some(b) = b {
        if b.shape() != [co] {
            return Err(Error::shape("conv2d", format!("bias [{co}]"), shape_str(b.shape())));
        }
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
    }
    if l.h + 2 * pad < kh || l.w + 2 * pad < kw {
        return Err(Error::shape("conv2d", format!("input at least {kh}x{kw} after padding {pad}"), shape_str(x.shape())));
    }
    let oh = (l.h + 2 * pad - kh) / stride + 1;
    let ow = (l.w + 2 * pad - kw) / stride + 1;
    let geo = Geometry { l, kh, kw, oh, ow, stride, pad };

    let (xd, wd) = (x.data_arc(), w.data_arc());
    let mut out = vec![T::zero(); oh * ow * l.b * co];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(co) {
            row.copy_from_slice(b.data());
        }
    }
    geo.for_each_tap(|opix, ipix, tap| {
        let wk = &wd[tap * ci * co..(tap + 1) * ci * co];
        for bi in 0..l.b {
            let xr = &xd[(ipix * l.b + bi) * ci..][..ci];
            let or = &mut out[(opix * l.b + bi) * co..][..co];
            for (xv, wr) in xr.iter().zip(wk.chunks_exact(co)) {
                or.iter_mut().zip(wr).for_each(|(o, w)| *o += *xv * *w);
            }
        }
    });

    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(b.cloned());
    Ok(Tensor::from_op(out_shape(x.shape(), oh, ow, co), out, parents, move |g, needs| {
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); xd.len()];
            geo.for_each_tap(|opix, ipix, tap| {
                let wk = &wd[tap * ci * co..(tap + 1) * ci * co];
                for bi in 0..l.b {
                    let gr = &g[(opix * l.b + bi) * co..][..co];
                    let dr = &mut dx[(ipix * l.b + bi) * ci..][..ci];
                    for (d, wr) in dr.iter_mut().zip(wk.chunks_exact(co)) {
                        *d += gr.iter().zip(wr).fold(T::zero(), |a, (g, w)| a + *g * *w);
                    }
                }
            });
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); wd.len()];
            geo.for_each_tap(|opix, ipix, tap| {
                let dk = &mut dw[tap * ci * co..(tap + 1) * ci * co];
                for bi in 0..l.b {
                    let gr = &g[(opix * l.b + bi) * co..][..co];
                    let xr = &xd[(ipix * l.b + bi) * ci..][..ci];
                    for (xv, dr) in xr.iter().zip(dk.chunks_exact_mut(co)) {
                        dr.iter_mut().zip(gr).for_each(|(d, g)| *d += *xv * *g);
                    }
                }
            });
            dw
        });
        let mut grads = vec![dx, dw];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut db = vec![T::zero(); co];
                for gr in g.chunks_exact(co) {
                    db.iter_mut().zip(gr).for_each(|(d, g)| *d += *g);
                }
                db
            }));
        }
        grads
    }))
}

#[derive(Clone, Copy)]
struct Geometry {
    l: Layout,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Visits every (output pixel, input pixel, kernel tap) triple that lies
    /// inside the unpadded input, in a fixed order.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let opix = oy * self.ow + ox;
                for ki in 0..self.kh {
                    let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.l.h as isize {
                        continue;
                    }
                    for kj in 0..self.kw {
                        let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.l.w as isize {
                            continue;
                        }
                        f(opix, iy as usize * self.l.w + ix as usize, ki * self.kw + kj);
                    }
                }
            }
        }
    }
}

/// Per-channel convolution, stride 1: `out[y, x, b, c] = Σ x[y + ki − p, x + kj − p, b, c] · w[ki, kj, c]`.
/// With `pad = (k − 1)/2` the spatial extents are preserved.
pub fn depthwise_conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let l = layout("depthwise_conv2d", x)?;
    let [kh, kw, c] = *w.shape() else {
        return Err(Error::shape("depthwise_conv2d", "weight [k, k, C]", shape_str(w.shape())));
    };
    if c != l.c {
        return Err(Error::shape("depthwise_conv2d", format!("weight with C = {} for input {}", l.c, shape_str(x.shape())), shape_str(w.shape())));
    }
    if l.h + 2 * pad < kh || l.w + 2 * pad < kw {
        return Err(Error::shape("depthwise_conv2d", format!("input at least {kh}x{kw} after padding {pad}"), shape_str(x.shape())));
    }
    let oh = l.h + 2 * pad - kh + 1;
    let ow = l.w + 2 * pad - kw + 1;
    let geo = Geometry { l, kh, kw, oh, ow, stride: 1, pad };
    let (xd, wd) = (x.data_arc(), w.data_arc());
    let mut out = vec![T::zero(); oh * ow * l.b * c];
    geo.for_each_tap(|opix, ipix, tap| {
        let wk = &wd[tap * c..(tap + 1) * c];
        for bi in 0..l.b {
            let xr = &xd[(ipix * l.b + bi) * c..][..c];
            let or = &mut out[(opix * l.b + bi) * c..][..c];
            for ((o, x), w) in or.iter_mut().zip(xr).zip(wk) {
                *o += *x * *w;
            }
        }
    });
    Ok(Tensor::from_op(out_shape(x.shape(), oh, ow, c), out, vec![x.clone(), w.clone()], move |g, needs| {
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); xd.len()];
            geo.for_each_tap(|opix, ipix, tap| {
                let wk = &wd[tap * c..(tap + 1) * c];
                for bi in 0..l.b {
                    let gr = &g[(opix * l.b + bi) * c..][..c];
                    let dr = &mut dx[(ipix * l.b + bi) * c..][..c];
                    for ((d, g), w) in dr.iter_mut().zip(gr).zip(wk) {
                        *d += *g * *w;
                    }
                }
            });
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); wd.len()];
            geo.for_each_tap(|opix, ipix, tap| {
                let dk = &mut dw[tap * c..(tap + 1) * c];
                for bi in 0..l.b {
                    let gr = &g[(opix * l.b + bi) * c..][..c];
                    let xr = &xd[(ipix * l.b + bi) * c..][..c];
                    for ((d, g), x) in dk.iter_mut().zip(gr).zip(xr) {
                        *d += *g * *x;
                    }
                }
            });
            dw
        });
        vec![dx, dw]
    }))
}

/// Exact ×2 upsampling deconvolution (kernel 2×2, stride 2, no padding):
/// `out[2i + di, 2j + dj, b, co] = Σ_ci x[i, j, b, ci] · w[di, dj, ci, co]`.
pub fn transposed_conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let l = layout("transposed_conv2d", x)?;
    let [2, 2, ci, co] = *w.shape() else {
        return Err(Error::shape("transposed_conv2d", "weight [2, 2, Cin, Cout] (stride-2 doubling)", shape_str(w.shape())));
    };
    if ci != l.c {
        return Err(Error::shape("transposed_conv2d", format!("weight with Cin = {} for input {}", l.c, shape_str(x.shape())), shape_str(w.shape())));
    }
    let (oh, ow) = (2 * l.h, 2 * l.w);
    let (xd, wd) = (x.data_arc(), w.data_arc());
    let mut out = vec![T::zero(); oh * ow * l.b * co];
    let visit = move |f: &mut dyn FnMut(usize, usize, usize)| {
        for i in 0..l.h {
            for j in 0..l.w {
                for tap in 0..4 {
                    let (di, dj) = (tap / 2, tap % 2);
                    f(i * l.w + j, (2 * i + di) * ow + 2 * j + dj, tap);
                }
            }
        }
    };
    visit(&mut |ipix, opix, tap| {
        let wk = &wd[tap * ci * co..(tap + 1) * ci * co];
        for bi in 0..l.b {
            let xr = &xd[(ipix * l.b + bi) * ci..][..ci];
            let or = &mut out[(opix * l.b + bi) * co..][..co];
            for (xv, wr) in xr.iter().zip(wk.chunks_exact(co)) {
                or.iter_mut().zip(wr).for_each(|(o, w)| *o += *xv * *w);
            }
        }
    });
    Ok(Tensor::from_op(out_shape(x.shape(), oh, ow, co), out, vec![x.clone(), w.clone()], move |g, needs| {
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); xd.len()];
            visit(&mut |ipix, opix, tap| {
                let wk = &wd[tap * ci * co..(tap + 1) * ci * co];
                for bi in 0..l.b {
                    let gr = &g[(opix * l.b + bi) * co..][..co];
                    let dr = &mut dx[(ipix * l.b + bi) * ci..][..ci];
                    for (d, wr) in dr.iter_mut().zip(wk.chunks_exact(co)) {
                        *d += gr.iter().zip(wr).fold(T::zero(), |a, (g, w)| a + *g * *w);
                    }
                }
            });
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); wd.len()];
            visit(&mut |ipix, opix, tap| {
                let dk = &mut dw[tap * ci * co..(tap + 1) * ci * co];
                for bi in 0..l.b {
                    let gr = &g[(opix * l.b + bi) * co..][..co];
                    let xr = &xd[(ipix * l.b + bi) * ci..][..ci];
                    for (xv, dr) in xr.iter().zip(dk.chunks_exact_mut(co)) {
                        dr.iter_mut().zip(gr).for_each(|(d, g)| *d += *xv * *g);
                    }
                }
            });
            dw
        });
        vec![dx, dw]
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

    /// Direct six-loop cross-correlation, independent of `Geometry`.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let [h, wi, ci] = *x.shape() else { unreachable!() };
        let [kh, kw, _, co] = *w.shape() else { unreachable!() };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wi + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; oh * ow * co];
        for y in 0..oh {
            for xx in 0..ow {
                for o in 0..co {
                    let mut acc = b[o];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            for c in 0..ci {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                let xv = x.data()[(iy as usize * wi + ix as usize) * ci + c];
                                acc += xv * w.data()[((ki * kw + kj) * ci + c) * co + o];
                            }
                        }
                    }
                    out[(y * ow + xx) * co + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, &[4, 5, 3]);
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 4] = 1.0);
        let w = Tensor::new(&[1, 1, 3, 3], eye).unwrap();
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[3])), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weights_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[6, 6, 2]);
        let y = conv2d(&x, &Tensor::zeros(&[3, 3, 2, 4]), None, 1, 1).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, &[5, 5, 2]);
        let w = random(&mut rng, &[3, 3, 2, 3]);
        let b = random(&mut rng, &[3]);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let y = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let want = conv_oracle(&x, &w, b.data(), stride, pad);
            assert_eq!(y.numel(), want.len());
            for (a, e) in y.data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f32>::zeros(&[7, 9, 1]);
        let y = conv2d(&x, &Tensor::zeros(&[3, 3, 1, 1]), None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 5, 1]);
        let y = conv2d(&Tensor::<f32>::zeros(&[16, 16, 3]), &Tensor::zeros(&[4, 4, 3, 8]), None, 4, 0).unwrap();
        assert_eq!(y.shape(), &[4, 4, 8]);
    }

    #[test]
    fn batched_planes_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, &[4, 4, 3, 2]);
        let w = random(&mut rng, &[3, 3, 2, 5]);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        for b in 0..3 {
            let plane: Vec<f64> = (0..16).flat_map(|p| x.data()[(p * 3 + b) * 2..][..2].to_vec()).collect();
            let want = conv_oracle(&Tensor::new(&[4, 4, 2], plane).unwrap(), &w, &[0.0; 5], 1, 1);
            for p in 0..16 {
                for o in 0..5 {
                    assert!((y.data()[(p * 3 + b) * 5 + o] - want[p * 5 + o]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_names_shapes() {
        let err = conv2d(&Tensor::<f32>::zeros(&[4, 4, 3]), &Tensor::zeros(&[3, 3, 2, 1]), None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[4, 4, 3]") && err.contains("[3, 3, 2, 1]"), "{err}");
    }

    #[test]
    fn depthwise_delta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&mut rng, &[6, 5, 3]);
        let mut w = vec![0.0; 9 * 3];
        for c in 0..3 {
            w[(4) * 3 + c] = 1.0;
        }
        let y = depthwise_conv2d(&x, &Tensor::new(&[3, 3, 3], w).unwrap(), 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_constant_interior() {
        let x = Tensor::<f64>::full(&[11, 11, 2], 0.5);
        let w = Tensor::full(&[5, 5, 2], 0.2); // sums to 5
        let y = depthwise_conv2d(&x, &w, 2).unwrap();
        for yy in 2..9 {
            for xx in 2..9 {
                for c in 0..2 {
                    assert!((y.data()[(yy * 11 + xx) * 2 + c] - 2.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random(&mut rng, &[7, 7, 3]);
        let w = random(&mut rng, &[9, 9, 3]);
        let y = depthwise_conv2d(&x, &w, 4).unwrap();
        for yy in 0..7isize {
            for xx in 0..7isize {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for ki in 0..9isize {
                        for kj in 0..9isize {
                            let (iy, ix) = (yy + ki - 4, xx + kj - 4);
                            if (0..7).contains(&iy) && (0..7).contains(&ix) {
                                acc += x.data()[((iy * 7 + ix) * 3) as usize + c] * w.data()[((ki * 9 + kj) * 3) as usize + c];
                            }
                        }
                    }
                    assert!((y.data()[((yy * 7 + xx) * 3) as usize + c] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_rejects_channel_mismatch() {
        assert!(depthwise_conv2d(&Tensor::<f32>::zeros(&[4, 4, 3]), &Tensor::zeros(&[3, 3, 2]), 1).is_err());
    }

    #[test]
    fn transposed_single_pixel_ones() {
        let x = Tensor::<f64>::new(&[1, 1, 1], vec![0.75]).unwrap();
        let y = transposed_conv2d(&x, &Tensor::full(&[2, 2, 1, 1], 1.0)).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), &[0.75; 4]);
    }

    #[test]
    fn transposed_matches_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random(&mut rng, &[3, 3, 2]);
        let w = random(&mut rng, &[2, 2, 2, 3]);
        let y = transposed_conv2d(&x, &w).unwrap();
        let mut want = vec![0.0; 6 * 6 * 3];
        for i in 0..3 {
            for j in 0..3 {
                for di in 0..2 {
                    for dj in 0..2 {
                        for ci in 0..2 {
                            for co in 0..3 {
                                want[((2 * i + di) * 6 + 2 * j + dj) * 3 + co] += x.data()[(i * 3 + j) * 2 + ci] * w.data()[((di * 2 + dj) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                }
            }
        }
        for (a, e) in y.data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_is_adjoint_of_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // conv2d: [6,6,a] -> [3,3,b] with w[2,2,a,b];
        // transposed: [3,3,b] -> [6,6,a] with wt[di,dj,b,a] = w[di,dj,a,b].
        let (a, b) = (3, 4);
        let y = random(&mut rng, &[6, 6, a]);
        let x = random(&mut rng, &[3, 3, b]);
        let w = random(&mut rng, &[2, 2, a, b]);
        let mut wt = vec![0.0; 4 * a * b];
        for tap in 0..4 {
            for i in 0..a {
                for o in 0..b {
                    wt[(tap * b + o) * a + i] = w.data()[(tap * a + i) * b + o];
                }
            }
        }
        let wt = Tensor::new(&[2, 2, b, a], wt).unwrap();
        let lhs: f64 = conv2d(&y, &w, None, 2, 0).unwrap().data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
        let rhs: f64 = y.data().iter().zip(transposed_conv2d(&x, &wt).unwrap().data()).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
    }

    #[test]
    fn transposed_rejects_non_doubling_kernel() {
        let x = Tensor::<f32>::zeros(&[2, 2, 1]);
        assert!(transposed_conv2d(&x, &Tensor::zeros(&[3, 3, 1, 1])).is_err());
    }
}
