//! Fixtures and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sed_core::encoder::EncoderConfig;
use sed_core::gfd::DecoderConfig;
use sed_core::model::ModelConfig;
use sed_core::tensor::{Real, Tensor};
use sed_core::text::{embed_texts, expand_prompts, CategoryVocabulary, EmbeddingProvider, TextEmbeddings, DEFAULT_TEMPLATES};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn random<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let n = shape.iter().product();
    let v = uniform(&mut rng(seed), n, -1.0, 1.0).into_iter().map(T::of).collect();
    Tensor::new(shape, v).unwrap()
}

/// Smallest model that still runs every stage: 32×32 images, one block per
/// stage.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { stage_widths: [16, 16, 16, 32], stage_depths: [1, 1, 1, 1], align_dim: 8, block_kernel: 3 },
        decoder: DecoderConfig { dim: 4, ..Default::default() },
        templates: 2,
    }
}

pub fn names(n: usize) -> Vec<String> {
    sed_core::data::synthetic_names(n)
}

/// Synthetic embeddings for `class000..` with the first `templates` default
/// templates.
pub fn embeddings(n: usize, templates: usize, dim: usize) -> TextEmbeddings<f32> {
    let vocab = CategoryVocabulary::new(names(n)).unwrap();
    let prompts = expand_prompts(&vocab, &DEFAULT_TEMPLATES[..templates]).unwrap();
    embed_texts(&prompts, &EmbeddingProvider::Synthetic { seed: 0, dim }).unwrap()
}

pub fn random_embeddings<T: Real>(n: usize, p: usize, d: usize, seed: u64) -> TextEmbeddings<T> {
    TextEmbeddings::new(random(&[n, p, d], seed)).unwrap()
}

/// Direct per-entry cosine similarity in f64.
pub fn cosine_oracle(fv: &[f64], hv: usize, wv: usize, e: &[f64], n: usize, p: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(hv * wv * n * p);
    for pix in 0..hv * wv {
        let f = &fv[pix * d..(pix + 1) * d];
        for q in 0..n * p {
            let t = &e[q * d..(q + 1) * d];
            let dot: f64 = f.iter().zip(t).map(|(a, b)| a * b).sum();
            let nf = f.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
            out.push(dot / (nf * nt));
        }
    }
    out
}

/// Explicit kernel attention: for every query `i`,
/// `Σ_m (q_i·k_m) v_m / Σ_m (q_i·k_m)`, in f64. Shapes `[B, N, D]`,
/// `[B, N, Dv]`.
pub fn kernel_attention_oracle(q: &[f64], k: &[f64], v: &[f64], b: usize, n: usize, d: usize, dv: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * n * dv];
    for bi in 0..b {
        for i in 0..n {
            let qi = &q[(bi * n + i) * d..][..d];
            let mut den = 0.0;
            let o = &mut out[(bi * n + i) * dv..][..dv];
            for m in 0..n {
                let km = &k[(bi * n + m) * d..][..d];
                let s: f64 = qi.iter().zip(km).map(|(a, c)| a * c).sum();
                den += s;
                for (ov, vv) in o.iter_mut().zip(&v[(bi * n + m) * dv..][..dv]) {
                    *ov += s * vv;
                }
            }
            o.iter_mut().for_each(|x| *x /= den);
        }
    }
    out
}

/// Per-pixel sort, then union of each pixel's first `k` entries.
pub fn topk_union_oracle(logits: &[f64], n: usize, k: usize) -> Vec<usize> {
    let mut set = std::collections::BTreeSet::new();
    for row in logits.chunks(n) {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        set.extend(idx[..k].iter().copied());
    }
    set.into_iter().collect()
}

/// Per-class IoU straight from pixel index sets.
pub fn brute_force_miou(gt: &[u16], pred: &[u16], n: usize, ignore: u16) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 0..n as u16 {
        let (mut inter, mut union) = (0u64, 0u64);
        for (&g, &p) in gt.iter().zip(pred) {
            if g == ignore {
                continue;
            }
            let (a, b) = (g == c, p == c);
            inter += (a && b) as u64;
            union += (a || b) as u64;
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}
