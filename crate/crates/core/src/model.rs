//! The full segmentation model: encoder, cost map, decoder and heads.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cer::{self, CerState, TopK};
use crate::cost_map::{compute_cost_map, CostMap};
use crate::encoder::{Encoder, EncoderConfig, ImageTensor, PyramidFeatures};
use crate::error::{Error, Result};
use crate::gfd::{output_head, DecoderConfig, Gfd, GfdOutput};
use crate::params::{Init, ParamGroup, ParamSet, Scope};
use crate::tensor::{Real, Tensor};
use crate::text::TextEmbeddings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Prompt templates per category, `P`.
    pub templates: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), decoder: DecoderConfig::default(), templates: 4 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.templates == 0 {
            return Err(Error::InvalidArgument("template count must be positive".into()));
        }
        Ok(())
    }
}

/// Wall-clock breakdown of one forward pass, in milliseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub encoder_ms: f64,
    pub cost_map_ms: f64,
    pub decoder_layer_ms: Vec<f64>,
    pub head_ms: f64,
}

impl StageTimes {
    pub fn decoder_ms(&self) -> f64 {
        self.decoder_layer_ms.iter().sum()
    }

    pub fn total_ms(&self) -> f64 {
        self.encoder_ms + self.cost_map_ms + self.decoder_ms() + self.head_ms
    }
}

#[derive(Clone, Debug)]
pub struct Forward<T: Real> {
    pub pyramid: PyramidFeatures<T>,
    pub cost_map: CostMap<T>,
    /// First decoder input `F_dec^l1`, `[Hv, Wv, N, D]`.
    pub dec_in: Tensor<T>,
    pub gfd: GfdOutput<T>,
    /// `[H, W, N_l]` over the categories that survived pruning.
    pub logits: Tensor<T>,
    pub times: StageTimes,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[H, W, N]`; rejected categories hold the sentinel.
    pub logits: Tensor<f32>,
    /// Row-major argmax labels.
    pub labels: Vec<u16>,
    pub cer: Option<CerState>,
    pub times: StageTimes,
}

#[derive(Clone, Debug)]
pub struct Sed {
    config: ModelConfig,
    pub encoder: Encoder,
    pub gfd: Gfd,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Sed {
    /// Builds the model and a freshly initialised parameter set.
    pub fn new<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(seed);
        let encoder = Encoder::new(&mut Scope::new(&mut params, &mut init, "encoder", ParamGroup::Encoder), &config.encoder)?;
        let w = config.encoder.stage_widths;
        let gfd = Gfd::new(&mut params, &mut init, &config.decoder, [w[0], w[1], w[2]], config.templates)?;
        Ok((Self { config: config.clone(), encoder, gfd }, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn check_embeddings<T: Real>(&self, e: &TextEmbeddings<T>) -> Result<()> {
        if e.dim() != self.config.encoder.align_dim {
            return Err(Error::mismatch("text embedding width", self.config.encoder.align_dim, e.dim()));
        }
        if e.num_templates() != self.config.templates {
            return Err(Error::mismatch("templates per category", self.config.templates, e.num_templates()));
        }
        Ok(())
    }

    /// Full forward pass. With `top_k` set, categories are pruned between
    /// decoder layers and `logits` covers only the survivors.
    pub fn forward<T: Real>(&self, p: &ParamSet<T>, image: &ImageTensor<T>, e: &TextEmbeddings<T>, top_k: Option<TopK>) -> Result<Forward<T>> {
        self.check_embeddings(e)?;
        let mut times = StageTimes::default();
        let t = Instant::now();
        let pyramid = self.encoder.encode(p, image)?;
        times.encoder_ms = elapsed_ms(t);
        let t = Instant::now();
        let cost_map = compute_cost_map(&pyramid.fv, e)?;
        let dec_in = self.gfd.embed.forward(p, &cost_map)?;
        times.cost_map_ms = elapsed_ms(t);
        let gfd = self.gfd.forward(p, &dec_in, &pyramid, &cost_map, top_k)?;
        times.decoder_layer_ms = gfd.layer_ms.clone();
        let t = Instant::now();
        let logits = output_head(&self.gfd.head, p, &gfd.f_h, image.height(), image.width())?;
        times.head_ms = elapsed_ms(t);
        Ok(Forward { pyramid, cost_map, dec_in, gfd, logits, times })
    }

    /// Inference without graph recording: full-width logits and labels.
    pub fn predict(&self, p: &ParamSet<f32>, image: &ImageTensor<f32>, e: &TextEmbeddings<f32>, top_k: Option<TopK>) -> Result<Prediction> {
        let f = crate::tensor::no_grad(|| self.forward(p, image, e, top_k))?;
        let t = Instant::now();
        let logits = match &f.gfd.cer {
            Some(state) => cer::scatter_back(&f.logits, state)?,
            None => f.logits,
        };
        let labels = argmax_labels(&logits);
        let mut times = f.times;
        times.head_ms += elapsed_ms(t);
        Ok(Prediction { logits, labels, cer: f.gfd.cer, times })
    }
}

/// Argmax over the last axis; ties go to the lower index.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<u16> {
    let n = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let l = Tensor::new(&[1, 2, 3], vec![1.0f32, 1.0, 0.0, -1.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_labels(&l), vec![0, 1]);
    }

    #[test]
    fn embedding_width_is_checked() {
        let (sed, p) = Sed::new::<f32>(&ModelConfig::default(), 0).unwrap();
        let img = ImageTensor::new(Tensor::zeros(&[32, 32, 3])).unwrap();
        let e = TextEmbeddings::new(Tensor::full(&[2, 4, 8], 1.0)).unwrap();
        assert!(matches!(sed.forward(&p, &img, &e, None), Err(Error::Mismatch { .. })));
    }
}
