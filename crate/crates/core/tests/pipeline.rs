mod common;

use common::*;
use sed_core::cer::{CerState, TopK};
use sed_core::cost_map::{compute_cost_map, CostMap};
use sed_core::data::SyntheticScenes;
use sed_core::encoder::ImageTensor;
use sed_core::gfd::aux_head;
use sed_core::metrics::{compute_miou, MIoUAccumulator};
use sed_core::model::{ModelConfig, Sed};
use sed_core::tensor::{self as t, Tensor};
use sed_core::train::{seg_loss, TrainConfig, Trainer};

fn zero(p: &mut sed_core::params::ParamSet<f32>, name: &str) {
    let len = p.get(name).data().len();
    p.set_values(name, vec![0.0; len]).unwrap();
}

#[test]
fn encoder_at_768_gives_24x24_features() {
    let (sed, p) = Sed::new::<f32>(&ModelConfig::default(), 0).unwrap();
    let img = ImageTensor::new(random(&[768, 768, 3], 1)).unwrap();
    let pyr = t::no_grad(|| sed.encoder.encode(&p, &img)).unwrap();
    assert_eq!(pyr.f2.shape()[..2], [192, 192]);
    assert_eq!(pyr.fv.shape(), [24, 24, 64]);
}

#[test]
fn indivisible_extents_are_rejected() {
    let (sed, p) = Sed::new::<f32>(&tiny_config(), 0).unwrap();
    let bad = ImageTensor::new(Tensor::zeros(&[48, 32, 3]));
    let err = bad.and_then(|img| sed.encoder.encode(&p, &img));
    assert!(err.is_err());
}

#[test]
fn zeroed_alignment_output_gives_zero_features() {
    let (sed, mut p) = Sed::new::<f32>(&tiny_config(), 0).unwrap();
    let fc2 = sed.encoder.align_output().clone();
    zero(&mut p, &fc2.weight);
    zero(&mut p, &fc2.bias);
    for seed in 0..3 {
        let img = ImageTensor::new(random(&[32, 64, 3], seed)).unwrap();
        let pyr = sed.encoder.encode(&p, &img).unwrap();
        assert!(pyr.fv.data().iter().all(|v| *v == 0.0));
        // Zero vectors are clamped, not fatal.
        let e = random_embeddings::<f32>(2, 2, 8, seed);
        assert_eq!(compute_cost_map(&pyr.fv, &e).unwrap().degenerate, 2);
    }
}

#[test]
fn cost_embedding_shares_weights_across_categories() {
    let (sed, mut p) = Sed::new::<f32>(&tiny_config(), 0).unwrap();
    let slice = random::<f32>(&[3, 3, 1, 2], 4);
    // Two categories carrying the same cost slice.
    let mut data = Vec::new();
    for px in slice.data().chunks(2) {
        data.extend_from_slice(px);
        data.extend_from_slice(px);
    }
    let cv = CostMap { f_cv: Tensor::new(&[3, 3, 2, 2], data).unwrap(), degenerate: 0 };
    let out = sed.gfd.embed.forward(&p, &cv).unwrap();
    let d = out.shape()[3];
    for px in out.data().chunks(2 * d) {
        assert_eq!(px[..d], px[d..]);
    }

    let bias = sed.gfd.embed.conv.bias.clone();
    zero(&mut p, &bias);
    let zeros = CostMap { f_cv: Tensor::zeros(&[3, 3, 2, 2]), degenerate: 0 };
    assert!(sed.gfd.embed.forward(&p, &zeros).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn decoder_schedule_at_128() {
    let n = 5;
    let cfg = ModelConfig::default();
    let (sed, p) = Sed::new::<f32>(&cfg, 0).unwrap();
    let e = embeddings(n, 4, 64);
    let img = SyntheticScenes::new(128, n, 0).unwrap().generate(0).image_tensor::<f32>().unwrap();
    let (off, all) = t::no_grad(|| (sed.forward(&p, &img, &e, None).unwrap(), sed.forward(&p, &img, &e, Some(TopK::K(n))).unwrap()));
    assert_eq!(off.gfd.f_h.shape(), [32, 32, n, cfg.decoder.dim]);
    let aux: Vec<&[usize]> = off.gfd.aux_logits.iter().map(|a| &a.shape()[..2]).collect();
    assert_eq!(aux, [&[4, 4][..], &[8, 8], &[16, 16]]);
    let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&off.gfd.f_h), bits(&all.gfd.f_h));
}

#[test]
fn zero_aux_weights_give_zero_logits() {
    let (sed, mut p) = Sed::new::<f32>(&tiny_config(), 0).unwrap();
    let head = sed.gfd.aux[0].clone();
    zero(&mut p, &head.proj.weight);
    zero(&mut p, &head.proj.bias);
    let out = aux_head(&head, &p, &random(&[2, 2, 3, 4], 0)).unwrap();
    assert_eq!(out.shape(), [2, 2, 3]);
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn aux_loss_reaches_only_aux_heads() {
    let (sed, p) = Sed::new::<f64>(&tiny_config(), 3).unwrap();
    let e = random_embeddings::<f64>(3, 2, 8, 1);
    let img = ImageTensor::new(random(&[32, 32, 3], 2)).unwrap();
    let f = sed.forward(&p, &img, &e, None).unwrap();
    let labels: Vec<u16> = (0..32 * 32).map(|i| (i % 3) as u16).collect();
    let main_only = seg_loss(&f.logits, &f.gfd.aux_logits, &labels, 0.0).unwrap();
    let with_aux = seg_loss(&f.logits, &f.gfd.aux_logits, &labels, 1.0).unwrap();
    let aux_only = t::sub(&with_aux, &main_only).unwrap();
    aux_only.backward().unwrap();
    for (name, q) in p.iter() {
        let g = q.tensor.grad();
        if name.starts_with("aux.") {
            assert!(g.is_some_and(|g| g.iter().any(|v| *v != 0.0)), "{name} has no gradient");
        } else {
            assert!(g.is_none_or(|g| g.iter().all(|v| *v == 0.0)), "{name} received aux gradient");
        }
    }
}

#[test]
fn pruning_composes_across_layers() {
    let mut cer = CerState::new(5);
    cer.compose(&[1, 3, 4]).unwrap();
    cer.compose(&[0, 2]).unwrap();
    assert_eq!(cer.active(), [1, 4]);
}

#[test]
fn miou_of_symmetric_confusion() {
    let acc = MIoUAccumulator::from_confusion(2, vec![3, 1, 1, 3]).unwrap();
    let r = compute_miou(&acc).unwrap();
    assert!((r.miou - 0.6).abs() < 1e-12);
    assert_eq!(r.per_class, [Some(0.6), Some(0.6)]);
}

fn overfit_trainer(seed: u64) -> (Trainer, Vec<sed_core::data::Sample>) {
    let n = 4;
    let samples = SyntheticScenes::new(64, n, 1).unwrap().samples(8);
    let (sed, params) = Sed::new::<f32>(&ModelConfig::default(), seed).unwrap();
    let cfg = TrainConfig { crop: 64, seed, ..Default::default() };
    (Trainer::new(sed, params, embeddings(n, 4, 64), cfg).unwrap(), samples)
}

#[test]
fn first_step_loss_is_finite_and_text_stays_frozen() {
    let (mut tr, samples) = overfit_trainer(0);
    let loss = tr.step(&samples).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert!(tr.embeddings().tensor().grad().is_none());
    assert!(!tr.embeddings().tensor().requires_grad());
}

#[test]
fn loss_decreases_on_the_overfit_set() {
    let (mut tr, samples) = overfit_trainer(0);
    let first = tr.step(&samples).unwrap();
    let mut recent = Vec::new();
    for _ in 1..200 {
        recent.push(tr.step(&samples).unwrap());
    }
    let tail = recent[recent.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < first, "mean of last 20 losses {tail} vs first {first}");
}

#[test]
fn resume_reproduces_losses_bitwise() {
    let (mut a, samples) = overfit_trainer(7);
    for _ in 0..3 {
        a.step(&samples).unwrap();
    }
    let saved = a.to_records();
    let rest: Vec<f64> = (0..3).map(|_| a.step(&samples).unwrap()).collect();

    let (mut b, _) = overfit_trainer(7);
    assert!(b.load_records(saved).unwrap().is_empty());
    assert_eq!(b.iteration(), 3);
    let resumed: Vec<f64> = (0..3).map(|_| b.step(&samples).unwrap()).collect();
    assert_eq!(rest.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), resumed.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
