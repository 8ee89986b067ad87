//! Gradual fusion decoder.
//!
//! Each layer runs a feature aggregation module (spatial depthwise mixing
//! plus linear attention across categories) and then a skip-layer fusion
//! module that doubles the resolution and mixes in a detached encoder skip
//! feature and a detached, resized copy of the cost map. All per-category
//! work shares weights across the category axis.
//!
//! Layout: decoder features are `[H, W, N, D]`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cer::{self, CerState, TopK};
use crate::cost_map::{CostEmbed, CostMap};
use crate::encoder::{PyramidFeatures, SKIP_REDUCTION};
use crate::error::{Error, Result};
use crate::layers::{Conv, DepthwiseConv, LayerNorm, Linear, Mlp};
use crate::params::{ParamGroup, ParamSet, Scope};
use crate::tensor::{self, shape_str, Real, Tensor};

pub const MAX_LAYERS: usize = 3;
pub const FAM_KERNELS: [usize; 3] = [7, 9, 11];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamConfig {
    pub dw_kernel: usize,
    pub enable_spatial: bool,
    pub enable_class: bool,
}

impl Default for FamConfig {
    fn default() -> Self {
        Self { dw_kernel: 9, enable_spatial: true, enable_class: true }
    }
}

impl FamConfig {
    pub fn validate(&self) -> Result<()> {
        if !FAM_KERNELS.contains(&self.dw_kernel) {
            return Err(Error::InvalidArgument(format!("FAM kernel must be one of {FAM_KERNELS:?}, got {}", self.dw_kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Channel width `D` of every decoder feature.
    pub dim: usize,
    /// Number of FAM + SFM layers, 1 to 3.
    pub layers: usize,
    pub fam: FamConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { dim: 32, layers: 3, fam: FamConfig::default() }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("decoder width must be positive".into()));
        }
        if !(1..=MAX_LAYERS).contains(&self.layers) {
            return Err(Error::InvalidArgument(format!("decoder layers must be in 1..={MAX_LAYERS}, got {}", self.layers)));
        }
        self.fam.validate()
    }

    /// Stride of `F_h` relative to the image.
    pub fn output_stride(&self) -> usize {
        32 >> self.layers
    }
}

#[derive(Clone, Debug)]
struct Spatial {
    dw: DepthwiseConv,
    norm: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct ClassAttention {
    q: Linear,
    k: Linear,
    v: Linear,
}

/// Feature aggregation module. Stages that are switched off register no
/// parameters.
#[derive(Clone, Debug)]
pub struct Fam {
    spatial: Option<Spatial>,
    class: Option<ClassAttention>,
}

impl Fam {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, cfg: &FamConfig, d: usize) -> Result<Self> {
        cfg.validate()?;
        let spatial = if cfg.enable_spatial {
            Some(Spatial {
                dw: DepthwiseConv::new(&mut s.sub("dw"), cfg.dw_kernel, d)?,
                norm: LayerNorm::new(&mut s.sub("norm"), d)?,
                mlp: Mlp::new(&mut s.sub("mlp"), d, 4 * d, d)?,
            })
        } else {
            None
        };
        let class = if cfg.enable_class {
            Some(ClassAttention {
                q: Linear::new(&mut s.sub("attn.q"), d, d)?,
                k: Linear::new(&mut s.sub("attn.k"), d, d)?,
                v: Linear::new(&mut s.sub("attn.v"), d, d)?,
            })
        } else {
            None
        };
        Ok(Self { spatial, class })
    }

    /// `x: [H, W, N, D]`, shape preserved.
    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = x.clone();
        if let Some(s) = &self.spatial {
            let mixed = s.norm.forward(p, &s.dw.forward(p, &x)?)?;
            x = tensor::add(&x, &mixed)?;
            x = tensor::add(&x, &s.mlp.forward(p, &x)?)?;
        }
        if let Some(a) = &self.class {
            let q = tensor::elu_plus_one(&a.q.forward(p, &x)?);
            let k = tensor::elu_plus_one(&a.k.forward(p, &x)?);
            let v = a.v.forward(p, &x)?;
            x = tensor::add(&x, &tensor::linear_attention(&q, &k, &v)?)?;
        }
        Ok(x)
    }
}

/// Skip-layer fusion module for one level.
#[derive(Clone, Debug)]
pub struct Sfm {
    level: usize,
    up_weight: String,
    up_bias: String,
    reduce: Conv,
    conv1: Conv,
    conv2: Conv,
}

impl Sfm {
    /// `level` is 1-based; `skip_channels` is the width of the matching
    /// encoder level.
    pub fn new<T: Real>(s: &mut Scope<'_, T>, level: usize, d: usize, skip_channels: usize, templates: usize) -> Result<Self> {
        let reduced = reduced_width(skip_channels)?;
        Ok(Self {
            level,
            up_weight: s.weight("up.weight", &[2, 2, d, d], d)?,
            up_bias: s.weight("up.bias", &[d], d)?,
            reduce: Conv::same(&mut s.sub("reduce"), 1, skip_channels, reduced)?,
            conv1: Conv::same(&mut s.sub("conv1"), 3, d + reduced + templates, d)?,
            conv2: Conv::same(&mut s.sub("conv2"), 3, d, d)?,
        })
    }

    /// `x: [H, W, N, D]`, `skip: [2H, 2W, C]`, `cost: [Hv, Wv, N, P]` →
    /// `[2H, 2W, N, D]`. The skip and cost inputs are detached here.
    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>, skip: &Tensor<T>, cost: &Tensor<T>) -> Result<Tensor<T>> {
        let [h, w, n, _] = *x.shape() else {
            return Err(Error::shape("sfm", "features [H, W, N, D]", shape_str(x.shape())));
        };
        if skip.rank() != 3 || skip.shape()[..2] != [2 * h, 2 * w] {
            return Err(Error::shape("sfm", format!("skip feature for layer {} at {}x{}", self.level, 2 * h, 2 * w), shape_str(skip.shape())));
        }
        if cost.rank() != 4 || cost.shape()[2] != n {
            return Err(Error::shape("sfm", format!("cost map with {n} categories"), shape_str(cost.shape())));
        }
        let up = tensor::transposed_conv2d(x, p.get(&self.up_weight))?;
        let up = tensor::add_bias(&up, p.get(&self.up_bias))?;
        let reduced = self.reduce.forward(p, &skip.detach())?;
        let skip_rep = tensor::repeat_categories(&reduced, n)?;
        let cost_up = tensor::bilinear_resize(&cost.detach(), 2 * h, 2 * w)?;
        let cat = tensor::concat_last(&[&up, &skip_rep, &cost_up])?;
        let hidden = tensor::gelu(&self.conv1.forward(p, &cat)?);
        self.conv2.forward(p, &hidden)
    }
}

/// Width of a skip feature after channel reduction.
pub fn reduced_width(skip_channels: usize) -> Result<usize> {
    if skip_channels == 0 || !skip_channels.is_multiple_of(SKIP_REDUCTION) {
        return Err(Error::InvalidArgument(format!("skip width {skip_channels} is not a positive multiple of {SKIP_REDUCTION}")));
    }
    Ok(skip_channels / SKIP_REDUCTION)
}

/// Per-category `1×1` projection `D → 1`: `[H, W, N, D]` → `[H, W, N]`.
#[derive(Clone, Debug)]
pub struct ScoreHead {
    pub proj: Linear,
}

impl ScoreHead {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, d: usize) -> Result<Self> {
        Ok(Self { proj: Linear::new(s, d, 1)? })
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.proj.forward(p, x)?;
        let shape = &y.shape()[..y.rank() - 1];
        tensor::reshape(&y, shape)
    }
}

/// Final segmentation head: score map at the decoder's resolution, then
/// bilinear upsampling to `out_h × out_w`.
pub fn output_head<T: Real>(head: &ScoreHead, p: &ParamSet<T>, f_h: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    tensor::bilinear_resize(&head.forward(p, f_h)?, out_h, out_w)
}

/// Auxiliary head on a detached decoder feature; its gradient stops at the
/// head's own weights.
pub fn aux_head<T: Real>(head: &ScoreHead, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    head.forward(p, &x.detach())
}

#[derive(Clone, Debug)]
pub struct GfdOutput<T: Real> {
    /// `[H/s, W/s, N_l, D]` with `s` the decoder output stride.
    pub f_h: Tensor<T>,
    /// Aux logits on each layer's input, before any pruning at that layer.
    pub aux_logits: Vec<Tensor<T>>,
    /// Present when pruning ran.
    pub cer: Option<CerState>,
    /// Wall time of each decoder layer, including its pruning step.
    pub layer_ms: Vec<f64>,
}

/// Cost embedding, decoder layers, aux heads and the output head.
#[derive(Clone, Debug)]
pub struct Gfd {
    config: DecoderConfig,
    pub embed: CostEmbed,
    fam: Vec<Fam>,
    sfm: Vec<Sfm>,
    pub aux: Vec<ScoreHead>,
    pub head: ScoreHead,
}

impl Gfd {
    /// Decoder parameters go under `decoder.`, aux heads under `aux.`.
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        init: &mut crate::params::Init,
        config: &DecoderConfig,
        skip_widths: [usize; 3],
        templates: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut s = Scope::new(params, init, "decoder", ParamGroup::Decoder);
        let embed = CostEmbed::new(&mut s.sub("embed"), templates, d)?;
        let mut fam = Vec::new();
        let mut sfm = Vec::new();
        for l in 1..=config.layers {
            let mut ls = s.sub(&format!("layer{l}"));
            fam.push(Fam::new(&mut ls.sub("fam"), &config.fam, d)?);
            // Skip levels go F4, F3, F2 as resolution grows.
            sfm.push(Sfm::new(&mut ls.sub("sfm"), l, d, skip_widths[3 - l], templates)?);
        }
        let head = ScoreHead::new(&mut s.sub("head"), d)?;
        let mut a = Scope::new(params, init, "aux", ParamGroup::Aux);
        let aux = (1..=config.layers).map(|l| ScoreHead::new(&mut a.sub(&format!("layer{l}")), d)).collect::<Result<_>>()?;
        Ok(Self { config: config.clone(), embed, fam, sfm, aux, head })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Runs every decoder layer. With `top_k` set, categories are pruned
    /// after each layer's aux head and before its FAM.
    pub fn forward<T: Real>(
        &self,
        p: &ParamSet<T>,
        dec_in: &Tensor<T>,
        pyr: &PyramidFeatures<T>,
        cv: &CostMap<T>,
        top_k: Option<TopK>,
    ) -> Result<GfdOutput<T>> {
        let n = cv.num_categories();
        if let Some(k) = top_k {
            k.resolve(n)?;
        }
        if dec_in.rank() != 4 || dec_in.shape()[2] != n {
            return Err(Error::shape("gfd", format!("decoder input with {n} categories"), shape_str(dec_in.shape())));
        }
        let mut state = top_k.map(|_| CerState::new(n));
        let mut x = dec_in.clone();
        let mut cost = cv.f_cv.clone();
        let mut aux_logits = Vec::with_capacity(self.config.layers);
        let mut layer_ms = Vec::with_capacity(self.config.layers);
        for (l, (fam, sfm)) in self.fam.iter().zip(&self.sfm).enumerate() {
            let start = Instant::now();
            let logits = aux_head(&self.aux[l], p, &x)?;
            if let (Some(k), Some(st)) = (top_k, state.as_mut()) {
                let active = st.active().len();
                st.per_layer_active.push(active);
                // k is checked against N up front; later layers may hold fewer.
                let k = match k {
                    TopK::All => active,
                    TopK::K(k) => k.min(active),
                };
                let selected = cer::select_topk_union(&logits, k)?;
                (x, cost) = cer::prune(&x, &cost, &selected, &logits, st)?;
            }
            aux_logits.push(logits);
            let skip = pyr.skip(l + 1).expect("layer index within 1..=3");
            x = sfm.forward(p, &fam.forward(p, &x)?, skip, &cost)?;
            layer_ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(GfdOutput { f_h: x, aux_logits, cer: state, layer_ms })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn fam(cfg: FamConfig, d: usize) -> (Fam, ParamSet<f64>) {
        let mut p = ParamSet::new();
        let mut init = Init::new(5);
        let f = Fam::new(&mut Scope::new(&mut p, &mut init, "fam", ParamGroup::Decoder), &cfg, d).unwrap();
        (f, p)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, Init::new(seed).uniform(n, 1)).unwrap()
    }

    #[test]
    fn gated_off_fam_is_identity() {
        let (f, p) = fam(FamConfig { enable_spatial: false, enable_class: false, ..Default::default() }, 4);
        assert!(p.is_empty());
        let x = random(&[3, 3, 2, 4], 1);
        assert_eq!(f.forward(&p, &x).unwrap().data(), x.data());
    }

    #[test]
    fn single_category_attention_adds_value_projection() {
        let (f, p) = fam(FamConfig { enable_spatial: false, ..Default::default() }, 4);
        let x = random(&[2, 2, 1, 4], 2);
        let a = f.class.as_ref().unwrap();
        let v = a.v.forward(&p, &x).unwrap();
        let want = tensor::add(&x, &v).unwrap();
        assert_eq!(f.forward(&p, &x).unwrap().data(), want.data());
    }

    #[test]
    fn kernel_must_be_supported() {
        assert!(FamConfig { dw_kernel: 5, ..Default::default() }.validate().is_err());
        assert!(DecoderConfig { layers: 4, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn reduced_skip_width() {
        assert_eq!(reduced_width(64).unwrap(), 4);
        assert!(reduced_width(24).is_err());
    }

    #[test]
    fn sfm_doubles_and_names_level_on_mismatch() {
        let mut p = ParamSet::<f64>::new();
        let mut init = Init::new(1);
        let sfm = Sfm::new(&mut Scope::new(&mut p, &mut init, "s", ParamGroup::Decoder), 2, 4, 32, 3).unwrap();
        let x = random(&[4, 4, 2, 4], 3);
        let cost = random(&[2, 2, 2, 3], 4);
        let y = sfm.forward(&p, &x, &random(&[8, 8, 32], 5), &cost).unwrap();
        assert_eq!(y.shape(), &[8, 8, 2, 4]);
        let err = sfm.forward(&p, &x, &random(&[4, 4, 32], 5), &cost).unwrap_err();
        assert!(err.to_string().contains("layer 2"), "{err}");
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut p = ParamSet::<f64>::new();
        let mut init = Init::new(1);
        let head = ScoreHead::new(&mut Scope::new(&mut p, &mut init, "h", ParamGroup::Decoder), 4).unwrap();
        p.set_values(&head.proj.weight, vec![0.0; 4]).unwrap();
        p.set_values(&head.proj.bias, vec![0.0]).unwrap();
        let out = output_head(&head, &p, &Tensor::zeros(&[2, 2, 3, 4]), 8, 8).unwrap();
        assert_eq!(out.shape(), &[8, 8, 3]);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }
}
