//! Pixel-text cosine cost map and its embedding into decoder features.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::pnm::with_path;
use crate::io::{create, expect_eof, expect_magic, open, read_f32s, read_u32, to_u32, write_f32s, write_u32};
use crate::layers::Conv;
use crate::params::{ParamSet, Scope};
use crate::tensor::{self, shape_str, Real, Tensor};
use crate::text::TextEmbeddings;

/// Norms below this are clamped up to it.
pub const NORM_EPS: f64 = 1e-8;
pub const SEDV_MAGIC: &[u8; 4] = b"SEDV";
/// Kernel of the cost embedding convolution.
pub const EMBED_KERNEL: usize = 3;

/// `F_cv[Hv, Wv, N, P]` of cosine similarities.
#[derive(Clone, Debug)]
pub struct CostMap<T: Real = f32> {
    pub f_cv: Tensor<T>,
    /// Image and text vectors whose norm had to be clamped.
    pub degenerate: usize,
}

impl<T: Real> CostMap<T> {
    pub fn num_categories(&self) -> usize {
        self.f_cv.shape()[2]
    }

    pub fn num_templates(&self) -> usize {
        self.f_cv.shape()[3]
    }
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, x| a + *x * *x).sqrt()
}

/// `F_cv(i, j, n, p) = Fv(i, j)·E(n, p) / (‖Fv(i, j)‖ ‖E(n, p)‖)`.
///
/// Differentiable with respect to `fv` only. Norms under [`NORM_EPS`] are
/// clamped rather than rejected, and counted in [`CostMap::degenerate`].
pub fn compute_cost_map<T: Real>(fv: &Tensor<T>, e: &TextEmbeddings<T>) -> Result<CostMap<T>> {
    let [hv, wv, dt] = *fv.shape() else {
        return Err(Error::shape("compute_cost_map", "Fv [Hv, Wv, D_t]", shape_str(fv.shape())));
    };
    if dt != e.dim() {
        return Err(Error::shape("compute_cost_map", format!("text embeddings with D_t = {dt}"), shape_str(e.tensor().shape())));
    }
    let (n, p) = (e.num_categories(), e.num_templates());
    let eps = T::of(NORM_EPS);
    let mut degenerate = 0;

    let mut unit = e.tensor().to_vec();
    for row in unit.chunks_exact_mut(dt) {
        let mut nr = norm(row);
        if nr < eps {
            nr = eps;
            degenerate += 1;
        }
        row.iter_mut().for_each(|v| *v /= nr);
    }

    let fd = fv.data_arc();
    let np = n * p;
    let mut out = vec![T::zero(); hv * wv * np];
    // Clamped norm per pixel and whether it was clamped.
    let mut norms = Vec::with_capacity(hv * wv);
    for (f, o) in fd.chunks_exact(dt).zip(out.chunks_exact_mut(np)) {
        let mut nf = norm(f);
        let clamped = nf < eps;
        if clamped {
            nf = eps;
            degenerate += 1;
        }
        norms.push((nf, clamped));
        for (c, u) in o.iter_mut().zip(unit.chunks_exact(dt)) {
            *c = f.iter().zip(u).fold(T::zero(), |a, (x, y)| a + *x * *y) / nf;
        }
    }

    let values = out.clone();
    let f_cv = Tensor::from_op(vec![hv, wv, n, p], out, vec![fv.clone()], move |g, _| {
        let mut df = vec![T::zero(); fd.len()];
        for (pix, (&(nf, clamped), d)) in norms.iter().zip(df.chunks_exact_mut(dt)).enumerate() {
            let gp = &g[pix * np..(pix + 1) * np];
            let mut radial = T::zero();
            for ((gv, u), c) in gp.iter().zip(unit.chunks_exact(dt)).zip(&values[pix * np..]) {
                for (dv, uv) in d.iter_mut().zip(u) {
                    *dv += *gv * *uv;
                }
                radial += *gv * *c;
            }
            let inv = T::one() / nf;
            let f = &fd[pix * dt..(pix + 1) * dt];
            for (dv, fv) in d.iter_mut().zip(f) {
                *dv *= inv;
                if !clamped {
                    *dv -= radial * *fv * inv * inv;
                }
            }
        }
        vec![Some(df)]
    });
    Ok(CostMap { f_cv, degenerate })
}

/// Shared `3×3` convolution `P → D` applied to every category's cost slice,
/// followed by GeLU. Produces the first decoder input `[Hv, Wv, N, D]`.
#[derive(Clone, Debug)]
pub struct CostEmbed {
    pub conv: Conv,
}

impl CostEmbed {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, templates: usize, dim: usize) -> Result<Self> {
        Ok(Self { conv: Conv::same(s, EMBED_KERNEL, templates, dim)? })
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, cv: &CostMap<T>) -> Result<Tensor<T>> {
        Ok(tensor::gelu(&self.conv.forward(p, &cv.f_cv)?))
    }
}

pub fn encode_sedv(w: &mut impl Write, cv: &CostMap<f32>) -> Result<()> {
    w.write_all(SEDV_MAGIC)?;
    for d in cv.f_cv.shape() {
        write_u32(w, to_u32("cost map extent", *d)?)?;
    }
    write_f32s(w, cv.f_cv.data().iter().copied())
}

/// Values only; the degenerate count is not stored.
pub fn decode_sedv(r: &mut impl Read) -> Result<Tensor<f32>> {
    expect_magic(r, SEDV_MAGIC)?;
    let dims = (0..4).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let values = read_f32s(r, dims.iter().product())?;
    expect_eof(r)?;
    Tensor::new(&dims, values)
}

pub fn write_sedv(path: &Path, cv: &CostMap<f32>) -> Result<()> {
    let mut w = create(path)?;
    encode_sedv(&mut w, cv)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sedv(path: &Path) -> Result<Tensor<f32>> {
    decode_sedv(&mut open(path)?).map_err(|e| with_path(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(n: usize, p: usize, d: usize, v: Vec<f64>) -> TextEmbeddings<f64> {
        TextEmbeddings::new(Tensor::new(&[n, p, d], v).unwrap()).unwrap()
    }

    #[test]
    fn identical_vectors_give_one() {
        let fv = Tensor::new(&[1, 1, 3], vec![0.3, -2.0, 1.0]).unwrap();
        let cv = compute_cost_map(&fv, &emb(1, 1, 3, vec![0.3, -2.0, 1.0])).unwrap();
        assert!((cv.f_cv.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_vectors_give_zero() {
        let fv = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let cv = compute_cost_map(&fv, &emb(1, 1, 2, vec![0.0, 5.0])).unwrap();
        assert_eq!(cv.f_cv.item(), 0.0);
    }

    #[test]
    fn zero_vectors_are_counted_not_fatal() {
        let fv = Tensor::<f64>::zeros(&[2, 1, 3]);
        let cv = compute_cost_map(&fv, &emb(2, 1, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(cv.degenerate, 3);
        assert!(cv.f_cv.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let fv = Tensor::<f64>::zeros(&[1, 1, 3]);
        assert!(compute_cost_map(&fv, &emb(1, 1, 2, vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn sedv_round_trip() {
        let fv = Tensor::new(&[1, 2, 2], vec![1.0f32, 2.0, -1.0, 0.5]).unwrap();
        let e = TextEmbeddings::new(Tensor::new(&[3, 1, 2], vec![1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let cv = compute_cost_map(&fv, &e).unwrap();
        let mut buf = Vec::new();
        encode_sedv(&mut buf, &cv).unwrap();
        let back = decode_sedv(&mut &buf[..]).unwrap();
        assert_eq!(back.shape(), &[1, 2, 3, 1]);
        assert_eq!(back.data(), cv.f_cv.data());
    }
}
