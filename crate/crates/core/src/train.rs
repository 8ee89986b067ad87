//! Loss, AdamW and the training loop.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoder::ENCODER_STRIDE;
use crate::error::{Error, Result};
use crate::model::Sed;
use crate::params::{ParamGroup, ParamSet, Record};
use crate::tensor::{self, Real, Tensor};
use crate::text::TextEmbeddings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning-rate factor `λ` for encoder parameters.
    pub encoder_lr_scale: f64,
    pub iters: usize,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    pub aux_loss_weight: f64,
    /// Write a checkpoint every this many iterations; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 2e-4, weight_decay: 1e-4, encoder_lr_scale: 0.01, iters: 1000, batch: 1, crop: 128, seed: 0, aux_loss_weight: 1.0, checkpoint_every: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("train config: {what}")));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.encoder_lr_scale > 0.0 && self.encoder_lr_scale <= 1.0) {
            return bad("encoder_lr_scale must lie in (0, 1]");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.crop == 0 || !self.crop.is_multiple_of(ENCODER_STRIDE) {
            return bad("crop must be a positive multiple of 32");
        }
        if !(self.aux_loss_weight >= 0.0) {
            return bad("aux_loss_weight must be non-negative");
        }
        Ok(())
    }
}

/// `CE(main) + w · Σ CE(aux_i)`, every aux map upsampled to the label size
/// first. `main` is `[H, W, N]`.
pub fn seg_loss<T: Real>(main: &Tensor<T>, aux: &[Tensor<T>], labels: &[u16], aux_weight: f64) -> Result<Tensor<T>> {
    let (h, w) = (main.shape()[0], main.shape()[1]);
    let mut loss = tensor::softmax_cross_entropy(main, labels)?;
    if aux_weight != 0.0 {
        for a in aux {
            let up = tensor::bilinear_resize(a, h, w)?;
            let ce = tensor::softmax_cross_entropy(&up, labels)?;
            loss = tensor::add(&loss, &tensor::scale(&ce, T::of(aux_weight)))?;
        }
    }
    Ok(loss)
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay and a per-group learning-rate scale.
#[derive(Clone, Debug, Default)]
pub struct AdamW<T: Real> {
    m: HashMap<String, Vec<T>>,
    v: HashMap<String, Vec<T>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new() -> Self {
        Self { m: HashMap::new(), v: HashMap::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter:
    /// `p ← p·(1 − lr_eff·wd) − lr_eff · m̂ / (√v̂ + ε)` with
    /// `lr_eff = lr·λ` for the encoder group and `lr` otherwise.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64, weight_decay: f64, encoder_lr_scale: f64) -> Result<()> {
        let mut updates = Vec::with_capacity(params.len());
        for (name, p) in params.iter() {
            let g = p.tensor.grad().ok_or_else(|| Error::MissingGrad(name.to_string()))?;
            updates.push((name.to_string(), p.group, g));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let eps = T::of(ADAM_EPS);
        for (name, group, g) in updates {
            let lr_eff = T::of(if group == ParamGroup::Encoder { lr * encoder_lr_scale } else { lr });
            let decay = T::one() - lr_eff * T::of(weight_decay);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let old = params.get(&name).data();
            let mut new = Vec::with_capacity(g.len());
            for (((gi, mi), vi), pi) in g.iter().zip(m.iter_mut()).zip(v.iter_mut()).zip(old) {
                *mi = b1 * *mi + (T::one() - b1) * *gi;
                *vi = b2 * *vi + (T::one() - b2) * *gi * *gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                new.push(*pi * decay - lr_eff * mhat / (vhat.sqrt() + eps));
            }
            params.set_values(&name, new)?;
        }
        Ok(())
    }

    /// Moments as `optim.m.<name>`, `optim.v.<name>` plus `optim.step`.
    pub fn to_records(&self, params: &ParamSet<T>) -> Vec<Record> {
        let mut out = Vec::new();
        for (name, p) in params.iter() {
            for (prefix, map) in [("optim.m.", &self.m), ("optim.v.", &self.v)] {
                if let Some(buf) = map.get(name) {
                    out.push(Record {
                        name: format!("{prefix}{name}"),
                        shape: p.tensor.shape().to_vec(),
                        values: buf.iter().map(|v| v.as_f64() as f32).collect(),
                    });
                }
            }
        }
        // Two u16 halves keep the count exact in f32.
        out.push(Record { name: "optim.step".into(), shape: vec![2], values: vec![(self.step & 0xffff) as f32, ((self.step >> 16) & 0xffff) as f32] });
        out
    }

    /// Restores from records written by [`AdamW::to_records`]; other
    /// records are returned.
    pub fn load_records(records: Vec<Record>) -> Result<(Self, Vec<Record>)> {
        let mut opt = Self::new();
        let mut rest = Vec::new();
        let mut saw_step = false;
        for r in records {
            let values = || r.values.iter().map(|v| T::of(*v as f64)).collect();
            if let Some(name) = r.name.strip_prefix("optim.m.") {
                opt.m.insert(name.to_string(), values());
            } else if let Some(name) = r.name.strip_prefix("optim.v.") {
                opt.v.insert(name.to_string(), values());
            } else if r.name == "optim.step" {
                if r.values.len() != 2 {
                    return Err(Error::Format("optim.step must hold two values".into()));
                }
                opt.step = r.values[0] as u64 | ((r.values[1] as u64) << 16);
                saw_step = true;
            } else {
                rest.push(r);
            }
        }
        if !saw_step && !opt.m.is_empty() {
            return Err(Error::Format("optimizer moments without optim.step".into()));
        }
        Ok((opt, rest))
    }
}

/// Generator for iteration `iter`, independent of how many iterations ran
/// before, so a resumed run draws the same crops.
pub fn iteration_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter);
    rng
}

pub struct Trainer {
    pub model: Sed,
    pub params: ParamSet<f32>,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
    embeddings: TextEmbeddings<f32>,
}

impl Trainer {
    pub fn new(model: Sed, params: ParamSet<f32>, embeddings: TextEmbeddings<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.check_embeddings(&embeddings)?;
        Ok(Self { model, params, optimizer: AdamW::new(), config, embeddings })
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn embeddings(&self) -> &TextEmbeddings<f32> {
        &self.embeddings
    }

    /// One optimizer step on a batch drawn from `samples`. Returns the mean
    /// batch loss.
    pub fn step(&mut self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut rng = iteration_rng(self.config.seed, self.iteration());
        let batch: Vec<&Sample> = (0..self.config.batch).map(|_| samples.choose(&mut rng).expect("non-empty")).collect();
        self.params.zero_grad();
        let inv = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for s in batch {
            let crop = s.random_crop(self.config.crop, &mut rng)?;
            crop.validate(self.embeddings.num_categories())?;
            let image = crop.image_tensor()?;
            let out = self.model.forward(&self.params, &image, &self.embeddings, None)?;
            let loss = seg_loss(&out.logits, &out.gfd.aux_logits, &crop.label.values, self.config.aux_loss_weight)?;
            total += loss.item() as f64 * inv;
            tensor::scale(&loss, inv as f32).backward()?;
        }
        self.optimizer.step(&mut self.params, self.config.lr, self.config.weight_decay, self.config.encoder_lr_scale)?;
        Ok(total)
    }

    /// Parameters and optimizer state.
    pub fn to_records(&self) -> Vec<Record> {
        let mut r = self.params.to_records();
        r.extend(self.optimizer.to_records(&self.params));
        r
    }

    /// Restores parameters and optimizer state written by
    /// [`Trainer::to_records`]. Unknown records are returned.
    pub fn load_records(&mut self, records: Vec<Record>) -> Result<Vec<Record>> {
        let (opt, rest) = AdamW::load_records(records)?;
        let rest = self.params.load_records(rest)?;
        self.optimizer = opt;
        Ok(rest)
    }
}
