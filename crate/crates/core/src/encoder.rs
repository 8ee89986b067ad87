//! Hierarchical convolutional image encoder.
//!
//! A ConvNeXt-style backbone at desk scale: a 4×4 stride-4 stem followed by
//! four stages of depthwise/pointwise residual blocks, with a stride-2
//! downsampling convolution between stages. Stage outputs are the pyramid
//! levels `F2..F5` at strides 4, 8, 16 and 32. A two-layer MLP on `F5`
//! projects into the text embedding space, giving `Fv`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv, DepthwiseConv, LayerNorm, Linear, Mlp};
use crate::params::{ParamSet, Scope};
use crate::tensor::{self, Real, Tensor};

/// Total stride of the deepest pyramid level.
pub const ENCODER_STRIDE: usize = 32;
/// Skip features are reduced by this factor before entering the decoder.
pub const SKIP_REDUCTION: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channel widths of `F2..F5`.
    pub stage_widths: [usize; 4],
    /// Residual blocks per stage.
    pub stage_depths: [usize; 4],
    /// Width `D_t` of `Fv`; must equal the text embedding width.
    pub align_dim: usize,
    /// Depthwise kernel inside encoder blocks.
    pub block_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { stage_widths: [16, 32, 64, 128], stage_depths: [1, 1, 1, 1], align_dim: 64, block_kernel: 7 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.contains(&0) || self.align_dim == 0 {
            return Err(Error::InvalidArgument("encoder widths and align_dim must be positive".into()));
        }
        if let Some(w) = self.stage_widths[..3].iter().find(|&&w| w % SKIP_REDUCTION != 0) {
            return Err(Error::InvalidArgument(format!("skip level width {w} is not divisible by {SKIP_REDUCTION}")));
        }
        if self.block_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("encoder block kernel must be odd, got {}", self.block_kernel)));
        }
        Ok(())
    }
}

/// Normalised RGB image `[H, W, 3]` with values in `[0, 1]` and extents
/// divisible by 32.
#[derive(Clone, Debug)]
pub struct ImageTensor<T: Real>(Tensor<T>);

impl<T: Real> ImageTensor<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let [h, w, 3] = *t.shape() else {
            return Err(Error::shape("image", "[H, W, 3]", format!("{:?}", t.shape())));
        };
        if h == 0 || w == 0 || h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(Error::InvalidArgument(format!("image extents {h}x{w} must be positive multiples of {ENCODER_STRIDE}")));
        }
        Ok(Self(t))
    }

    /// From interleaved 8-bit RGB, scaled to `[0, 1]`.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        let data = rgb.iter().map(|v| T::of(*v as f64 / 255.0)).collect();
        Self::new(Tensor::new(&[height, width, 3], data)?)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Encoder outputs. `f2..f5` are `[H/s, W/s, C]` for `s = 4, 8, 16, 32`;
/// `fv` is `[H/32, W/32, D_t]`.
#[derive(Clone, Debug)]
pub struct PyramidFeatures<T: Real> {
    pub f2: Tensor<T>,
    pub f3: Tensor<T>,
    pub f4: Tensor<T>,
    pub f5: Tensor<T>,
    pub fv: Tensor<T>,
}

impl<T: Real> PyramidFeatures<T> {
    /// Skip feature consumed by decoder layer `layer` (1-based): F4, F3, F2.
    pub fn skip(&self, layer: usize) -> Option<&Tensor<T>> {
        match layer {
            1 => Some(&self.f4),
            2 => Some(&self.f3),
            3 => Some(&self.f2),
            _ => None,
        }
    }

    /// Same values with all history removed.
    pub fn detached(&self) -> Self {
        Self { f2: self.f2.detach(), f3: self.f3.detach(), f4: self.f4.detach(), f5: self.f5.detach(), fv: self.fv.detach() }
    }
}

#[derive(Clone, Debug)]
struct Block {
    dw: DepthwiseConv,
    norm: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm.forward(p, &self.dw.forward(p, x)?)?;
        tensor::add(x, &self.mlp.forward(p, &h)?)
    }
}

#[derive(Clone, Debug)]
struct Downsample {
    norm: LayerNorm,
    conv: Conv,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stem: Conv,
    stem_norm: LayerNorm,
    downsample: Vec<Downsample>,
    stages: Vec<Vec<Block>>,
    align: Mlp,
}

impl Encoder {
    /// Registers all encoder parameters under `s`.
    pub fn new<T: Real>(s: &mut Scope<'_, T>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.stage_widths;
        let stem = Conv::new(&mut s.sub("stem"), 4, 3, widths[0], 4, 0)?;
        let stem_norm = LayerNorm::new(&mut s.sub("stem.norm"), widths[0])?;
        let mut downsample = Vec::new();
        let mut stages = Vec::new();
        for (i, (&c, &depth)) in widths.iter().zip(&config.stage_depths).enumerate() {
            if i > 0 {
                let mut d = s.sub(&format!("down{i}"));
                downsample.push(Downsample {
                    norm: LayerNorm::new(&mut d.sub("norm"), widths[i - 1])?,
                    conv: Conv::new(&mut d.sub("conv"), 2, widths[i - 1], c, 2, 0)?,
                });
            }
            let mut blocks = Vec::new();
            for b in 0..depth {
                let mut bs = s.sub(&format!("stage{}.block{b}", i + 2));
                blocks.push(Block {
                    dw: DepthwiseConv::new(&mut bs.sub("dw"), config.block_kernel, c)?,
                    norm: LayerNorm::new(&mut bs.sub("norm"), c)?,
                    mlp: Mlp::new(&mut bs.sub("mlp"), c, 4 * c, c)?,
                });
            }
            stages.push(blocks);
        }
        let align = Mlp::new(&mut s.sub("align"), widths[3], config.align_dim, config.align_dim)?;
        Ok(Self { config: config.clone(), stem, stem_norm, downsample, stages, align })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Last linear of the alignment MLP. Zeroing it makes `Fv` vanish.
    pub fn align_output(&self) -> &Linear {
        &self.align.fc2
    }

    pub fn encode<T: Real>(&self, p: &ParamSet<T>, image: &ImageTensor<T>) -> Result<PyramidFeatures<T>> {
        let mut x = self.stem.forward(p, image.tensor())?;
        x = self.stem_norm.forward(p, &x)?;
        let mut levels = Vec::with_capacity(4);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                let d = &self.downsample[i - 1];
                x = d.conv.forward(p, &d.norm.forward(p, &x)?)?;
            }
            for b in blocks {
                x = b.forward(p, &x)?;
            }
            levels.push(x.clone());
        }
        let fv = self.align.forward(p, &x)?;
        let mut it = levels.into_iter();
        Ok(PyramidFeatures { f2: it.next().unwrap(), f3: it.next().unwrap(), f4: it.next().unwrap(), f5: it.next().unwrap(), fv })
    }
}
