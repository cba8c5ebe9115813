//! Pretraining for the frozen stand-ins, plus the Adam optimizer shared with
//! the separation loop.
//!
//! Training is single-threaded and fully seeded: identical config and seed
//! produce bit-identical checkpoints.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NDArray, Tape};
use crate::data::Dataset;
use crate::dsp::Waveform;
use crate::error::{Error, Result};

use super::{
    bce_mean_nodes, decode_nodes, encode_nodes, quantize_latent, reference_mags,
    spectral_loss_nodes, tagger_features, tagger_head_from_features, AutoencoderParams,
    LatentCode, TaggerArch, TaggerParams, CODEBOOK_SIZE, COMPRESSION,
};

/// Adam with bias correction over an ordered group of parameter arrays.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[NDArray], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update; returns the new parameter arrays.
    pub fn step(&mut self, params: &[NDArray], grads: &[&[f64]]) -> Vec<NDArray> {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let g = grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut new = p.data().to_vec();
            for j in 0..new.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                new[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            out.push(NDArray::new(p.shape().to_vec(), new));
        }
        out
    }
}

fn pad_to_multiple(w: &Waveform, m: usize) -> Vec<f64> {
    let mut s = w.samples.clone();
    let rem = s.len() % m;
    if rem != 0 {
        s.resize(s.len() + m - rem, 0.0);
    }
    s
}

// ── autoencoder pretraining ──────────────────────────────────────────

/// Internal latent scale every training run uses; the commitment and
/// codebook weights are balanced against the spectral loss at this scale.
/// The public scale is applied afterwards by an exact checkpoint rescale.
pub const TRAIN_LATENT_SCALE: f64 = 24.0;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AutoencoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate factor applied over the last third of training.
    pub lr_decay: f64,
    /// Commitment weight beta.
    pub commitment_beta: f64,
    pub fft_sizes: Vec<usize>,
    /// Public latent scale: the magnitude of the embedding space the
    /// separation loop moves through. Applied as a function-preserving
    /// rescale after training.
    pub latent_scale: f64,
    pub seed: u64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        AutoencoderTrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            lr_decay: 0.3,
            commitment_beta: 0.25,
            fft_sizes: vec![256, 512, 1024],
            latent_scale: 24.0,
            seed: 0,
        }
    }
}

/// Change the public latent scale of trained params without changing the
/// encode/decode function: the codebook rescales with the latents.
pub fn rescale_latent_space(params: &mut AutoencoderParams, new_scale: f64) {
    let factor = new_scale / params.latent_scale;
    if factor == 1.0 {
        return;
    }
    params.codebook = NDArray::new(
        params.codebook.shape().to_vec(),
        params.codebook.data().iter().map(|&v| v * factor).collect(),
    );
    params.latent_scale = new_scale;
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation loss on the continuous decode path (the one separation
    /// optimizes over).
    pub val_loss: f64,
    /// Validation loss through the quantized codebook path.
    pub val_loss_quantized: f64,
    /// Fraction of codebook entries used on validation.
    pub codebook_usage: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AutoencoderTrainStats {
    /// Untrained-model validation loss through the quantized round trip.
    pub initial_val_loss: f64,
    /// Trained validation loss through the quantized round trip.
    pub final_val_loss: f64,
    /// final / initial validation spectral loss (quantized round trip, the
    /// canonical VQ-VAE reconstruction).
    pub loss_ratio: f64,
    /// Same metric through the continuous decode path the separation loop
    /// uses.
    pub final_val_loss_continuous: f64,
    pub codebook_usage: f64,
    pub curve: Vec<CurveRow>,
}

/// Validation spectral losses (continuous and quantized decode paths) plus
/// the codebook usage fraction.
fn ae_validation(
    p: &AutoencoderParams,
    val: &[(Vec<f64>, Vec<(crate::dsp::StftConfig, NDArray)>)],
) -> Result<(f64, f64, f64)> {
    let mut cont_total = 0.0;
    let mut quant_total = 0.0;
    let mut used: BTreeSet<usize> = BTreeSet::new();
    for (samples, refs) in val {
        let mut tape = Tape::new();
        let ae = p.bind(&mut tape, false);
        let x = tape.constant(NDArray::new(vec![samples.len()], samples.clone()));
        let e = encode_nodes(&mut tape, &ae, x)?;
        let (indices, _) = quantize_latent(tape.value(e), &p.codebook)?;
        used.extend(indices.iter().copied());
        let xhat_c = decode_nodes(&mut tape, &ae, e, false)?;
        let loss_c = spectral_loss_nodes(&mut tape, xhat_c, samples.len(), refs)?;
        cont_total += tape.forward(loss_c)?.scalar_value();
        let xhat_q = decode_nodes(&mut tape, &ae, e, true)?;
        let loss_q = spectral_loss_nodes(&mut tape, xhat_q, samples.len(), refs)?;
        quant_total += tape.forward(loss_q)?.scalar_value();
    }
    let usage = used.len() as f64 / p.codebook.shape()[0] as f64;
    Ok((cont_total / val.len() as f64, quant_total / val.len() as f64, usage))
}

/// Data-driven codebook init: sample encoder outputs of the untrained model.
fn init_codebook(p: &AutoencoderParams, clips: &[Vec<f64>], seed: u64) -> Result<NDArray> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for samples in clips.iter().take(24) {
        let mut tape = Tape::new();
        let ae = p.bind(&mut tape, false);
        let x = tape.constant(NDArray::new(vec![samples.len()], samples.clone()));
        let e = encode_nodes(&mut tape, &ae, x)?;
        let v = tape.value(e);
        let d = v.shape()[1];
        // subsample timesteps to keep the pool small
        for t in (0..v.shape()[0]).step_by(7) {
            rows.push(v.data()[t * d..(t + 1) * d].to_vec());
        }
    }
    if rows.is_empty() {
        return Err(Error::config("cannot initialize codebook from an empty dataset".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE_B00C);
    let mut data = Vec::with_capacity(CODEBOOK_SIZE * rows[0].len());
    for _ in 0..CODEBOOK_SIZE {
        let pick = rand::Rng::gen_range(&mut rng, 0..rows.len());
        // tiny jitter keeps entries distinct even when rows repeat
        for &v in &rows[pick] {
            data.push(v + 1e-3 * p.latent_scale * crate::autodiff::gauss(&mut rng));
        }
    }
    Ok(NDArray::new(vec![CODEBOOK_SIZE, rows[0].len()], data))
}

/// One training-item loss graph: spectral reconstruction through the
/// straight-through quantized path, plus codebook and commitment terms.
fn ae_training_loss(
    tape: &mut Tape,
    ae: &super::BoundAutoencoder,
    x: crate::autodiff::NodeId,
    len: usize,
    refs: &[(crate::dsp::StftConfig, NDArray)],
    commitment_beta: f64,
) -> Result<crate::autodiff::NodeId> {
    let e = encode_nodes(tape, ae, x)?;
    let (indices, _) = {
        let evals = tape.value(e).clone();
        let cvals = tape.value(ae.codebook).clone();
        quantize_latent(&evals, &cvals)?
    };
    let e_q = tape.gather(ae.codebook, &indices)?;
    let st = super::straight_through(tape, e, e_q)?;
    let xhat = decode_nodes(tape, ae, st, false)?;
    let spec = spectral_loss_nodes(tape, xhat, len, refs)?;
    // the VQ distances stay in scaled latent units: at the default latent
    // scale the strong commitment pull keeps the continuous embedding close
    // to the codebook, which the separation loop (continuous decode) relies on
    let e_const = tape.stop_gradient(e)?;
    let cb_diff = tape.sub(e_const, e_q)?;
    let cb_sq = tape.mul(cb_diff, cb_diff)?;
    let cb = tape.mean(cb_sq)?;
    let eq_const = tape.stop_gradient(e_q)?;
    let cm_diff = tape.sub(e, eq_const)?;
    let cm_sq = tape.mul(cm_diff, cm_diff)?;
    let cm = tape.mean(cm_sq)?;
    let cm_w = tape.mul_scalar(cm, commitment_beta)?;
    let vq = tape.add(cb, cm_w)?;
    tape.add(spec, vq)
}

/// Train the VQ-VAE stand-in: multi-scale spectral loss plus codebook and
/// commitment terms, straight-through quantized reconstruction path.
pub fn pretrain_autoencoder(
    ds: &Dataset,
    cfg: &AutoencoderTrainConfig,
) -> Result<(AutoencoderParams, AutoencoderTrainStats)> {
    if ds.train.is_empty() {
        return Err(Error::config("autoencoder pretraining needs a non-empty train split".to_string()));
    }
    if ds.val.is_empty() {
        return Err(Error::config("autoencoder pretraining needs a non-empty val split".to_string()));
    }
    if cfg.fft_sizes.is_empty() {
        return Err(Error::config("fft_sizes must not be empty".to_string()));
    }

    let mut params = AutoencoderParams::init(ds.sample_rate, TRAIN_LATENT_SCALE, cfg.seed);

    // cache padded samples and reference magnitudes once
    let prep = |clips: &[crate::data::Clip]| -> Result<Vec<(Vec<f64>, Vec<(crate::dsp::StftConfig, NDArray)>)>> {
        clips
            .iter()
            .map(|c| {
                let samples = pad_to_multiple(&c.audio, COMPRESSION);
                let w = Waveform::new(samples.clone(), c.audio.sample_rate)?;
                Ok((samples, reference_mags(&w, &cfg.fft_sizes)?))
            })
            .collect()
    };
    let train = prep(&ds.train)?;
    let val = prep(&ds.val)?;

    params.codebook = init_codebook(&params, &train.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(), cfg.seed)?;

    let (_, initial_val_loss, _) = ae_validation(&params, &val)?;

    let mut opt = Adam::new(&params.params(), cfg.lr);
    let mut curve = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64));
        order.shuffle(&mut rng);
        // step the learning rate down for the last third to settle the tail
        opt.lr = if 3 * epoch >= 2 * cfg.epochs { cfg.lr * cfg.lr_decay } else { cfg.lr };

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let snapshot = params.params();
            let mut grad_acc: Vec<Vec<f64>> = snapshot.iter().map(|p| vec![0.0; p.len()]).collect();
            for &ci in batch {
                let (samples, refs) = &train[ci];
                let mut tape = Tape::new();
                let ae = params.bind(&mut tape, true);
                let x = tape.constant(NDArray::new(vec![samples.len()], samples.clone()));
                let total = ae_training_loss(&mut tape, &ae, x, samples.len(), refs, cfg.commitment_beta)
                    .map_err(|err| match err {
                        Error::Numerical { node, msg } => Error::numerical(
                            node,
                            format!("autoencoder training diverged at epoch {epoch}: {msg}"),
                        ),
                        other => other,
                    })?;
                epoch_loss += tape.forward(total)?.scalar_value();
                let grads = tape.backward_all(total)?;
                for (slot, &node) in grad_acc.iter_mut().zip(ae.param_nodes().iter()) {
                    let g = grads.wrt(&tape, node);
                    for (a, b) in slot.iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for slot in &mut grad_acc {
                for v in slot.iter_mut() {
                    *v *= scale;
                }
            }
            let grad_slices: Vec<&[f64]> = grad_acc.iter().map(|g| g.as_slice()).collect();
            let new_params = opt.step(&snapshot, &grad_slices);
            params.set_params(new_params)?;
        }

        let (val_loss, val_loss_quantized, usage) = ae_validation(&params, &val)?;
        curve.push(CurveRow {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
            val_loss_quantized,
            codebook_usage: usage,
        });
    }

    rescale_latent_space(&mut params, cfg.latent_scale);
    params.quantize_weights_to_f32();
    params.frozen = true;
    let (final_val_loss_continuous, final_val_loss, codebook_usage) = ae_validation(&params, &val)?;
    let stats = AutoencoderTrainStats {
        initial_val_loss,
        final_val_loss,
        loss_ratio: final_val_loss / initial_val_loss.max(1e-30),
        final_val_loss_continuous,
        codebook_usage,
        curve,
    };
    Ok((params, stats))
}

// ── tagger pretraining ───────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TaggerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TaggerTrainConfig {
    fn default() -> Self {
        TaggerTrainConfig { epochs: 15, batch_size: 8, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TaggerCurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub macro_auc: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TaggerTrainStats {
    pub macro_auc: f64,
    pub per_tag_auc: Vec<f64>,
    pub curve: Vec<TaggerCurveRow>,
}

/// Rank-based AUC with average ranks for ties. Constant scores give 0.5.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return f64::NAN;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = labels
        .iter()
        .zip(ranks.iter())
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    (pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64)
}

fn tagger_scores(p: &TaggerParams, features: &[Vec<NDArray>]) -> Result<Vec<Vec<f64>>> {
    features
        .iter()
        .map(|feats| {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, false);
            let nodes: Vec<_> = feats.iter().map(|f| tape.constant(f.clone())).collect();
            let probs = tagger_head_from_features(&mut tape, p, &bound, &nodes)?;
            Ok(tape.forward(probs)?.data().to_vec())
        })
        .collect()
}

fn macro_auc(p: &TaggerParams, features: &[Vec<NDArray>], labels: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    let scores = tagger_scores(p, features)?;
    let k = p.n_tags();
    let mut per_tag = Vec::with_capacity(k);
    for tag in 0..k {
        let s: Vec<f64> = scores.iter().map(|r| r[tag]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[tag] >= 0.5).collect();
        per_tag.push(auc(&s, &l));
    }
    let valid: Vec<f64> = per_tag.iter().copied().filter(|a| a.is_finite()).collect();
    let mean = valid.iter().sum::<f64>() / valid.len().max(1) as f64;
    Ok((mean, per_tag))
}

/// Train a tagger stand-in on cached mel features; reports per-tag AUC on
/// the held-out validation split.
pub fn pretrain_tagger(
    ds: &Dataset,
    arch: TaggerArch,
    cfg: &TaggerTrainConfig,
) -> Result<(TaggerParams, TaggerTrainStats)> {
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::config("tagger pretraining needs non-empty train and val splits".to_string()));
    }
    for (tag, name) in ds.vocab.names().iter().enumerate() {
        let train_pos = ds.train.iter().any(|c| c.tags.values[tag] == 1.0);
        let val_pos = ds.val.iter().any(|c| c.tags.values[tag] == 1.0);
        if !train_pos || !val_pos {
            return Err(Error::config(format!(
                "tag '{name}' has no positive examples in {}",
                if train_pos { "val" } else { "train" }
            )));
        }
    }

    let mut params = TaggerParams::init(arch, &ds.vocab, ds.sample_rate, cfg.seed);

    // the front end is frozen geometry, so features are cached up front
    let feats = |clips: &[crate::data::Clip]| -> Result<Vec<Vec<NDArray>>> {
        clips.iter().map(|c| tagger_features(&params, &c.audio)).collect()
    };
    let train_feats = feats(&ds.train)?;
    let val_feats = feats(&ds.val)?;
    let train_labels: Vec<Vec<f64>> = ds.train.iter().map(|c| c.tags.values.clone()).collect();
    let val_labels: Vec<Vec<f64>> = ds.val.iter().map(|c| c.tags.values.clone()).collect();

    let mut opt = Adam::new(&params.params(), cfg.lr);
    let mut curve = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_feats.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let snapshot = params.params();
            let mut grad_acc: Vec<Vec<f64>> = snapshot.iter().map(|p| vec![0.0; p.len()]).collect();
            for &ci in batch {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, true);
                let nodes: Vec<_> = train_feats[ci].iter().map(|f| tape.constant(f.clone())).collect();
                let probs = tagger_head_from_features(&mut tape, &params, &bound, &nodes)?;
                let loss = bce_mean_nodes(&mut tape, probs, &train_labels[ci]).map_err(|err| {
                    match err {
                        Error::Numerical { node, msg } => Error::numerical(
                            node,
                            format!("tagger training diverged at epoch {epoch}: {msg}"),
                        ),
                        other => other,
                    }
                })?;
                epoch_loss += tape.forward(loss)?.scalar_value();
                let grads = tape.backward_all(loss)?;
                for (slot, &node) in grad_acc.iter_mut().zip(bound.param_nodes().iter()) {
                    let g = grads.wrt(&tape, node);
                    for (a, b) in slot.iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for slot in &mut grad_acc {
                for v in slot.iter_mut() {
                    *v *= scale;
                }
            }
            let grad_slices: Vec<&[f64]> = grad_acc.iter().map(|g| g.as_slice()).collect();
            let new_params = opt.step(&snapshot, &grad_slices);
            params.set_params(new_params)?;
        }

        let (mauc, _) = macro_auc(&params, &val_feats, &val_labels)?;
        curve.push(TaggerCurveRow {
            epoch,
            train_loss: epoch_loss / train_feats.len() as f64,
            macro_auc: mauc,
        });
    }

    params.quantize_weights_to_f32();
    params.frozen = true;
    let (mauc, per_tag) = macro_auc(&params, &val_feats, &val_labels)?;
    Ok((params, TaggerTrainStats { macro_auc: mauc, per_tag_auc: per_tag, curve }))
}

/// Probabilities a frozen tagger assigns to each validation clip; exposed
/// for report generation.
pub fn tagger_val_scores(p: &TaggerParams, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let val_feats: Vec<Vec<NDArray>> =
        ds.val.iter().map(|c| tagger_features(p, &c.audio)).collect::<Result<_>>()?;
    tagger_scores(p, &val_feats)
}

/// Reconstruction metric used by reports: spectral loss of the quantized
/// round trip for one clip.
pub fn reconstruction_loss(p: &AutoencoderParams, x: &Waveform, fft_sizes: &[usize]) -> Result<f64> {
    let samples = pad_to_multiple(x, COMPRESSION);
    let padded = Waveform::new(samples, x.sample_rate)?;
    let e = super::encode(p, &padded)?;
    let xhat = super::decode(p, &LatentCode::new(e.values.clone())?, true)?;
    super::multiscale_spectral_loss(&padded, &xhat, fft_sizes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetConfig, SplitCounts};

    fn tiny_dataset() -> Dataset {
        let cfg = DatasetConfig {
            train: SplitCounts { singles_per_kind: 2, pairs: 2 },
            val: SplitCounts { singles_per_kind: 1, pairs: 1 },
            test: SplitCounts { singles_per_kind: 1, pairs: 0 },
            duration_s: 0.5,
            ..DatasetConfig::default()
        };
        build_dataset(&cfg).unwrap()
    }

    #[test]
    fn adam_moves_against_gradient() {
        let p = vec![NDArray::new(vec![2], vec![1.0, -1.0])];
        let mut opt = Adam::new(&p, 0.1);
        let g = vec![vec![1.0, -1.0]];
        let gs: Vec<&[f64]> = g.iter().map(|v| v.as_slice()).collect();
        let out = opt.step(&p, &gs);
        assert!(out[0].data()[0] < 1.0);
        assert!(out[0].data()[1] > -1.0);
    }

    #[test]
    fn auc_of_constant_scores_is_half() {
        let scores = vec![0.3; 10];
        let labels: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        assert_eq!(auc(&scores, &labels), 0.5);
    }

    #[test]
    fn auc_of_perfect_separation_is_one() {
        let scores = vec![0.1, 0.2, 0.8, 0.9];
        let labels = vec![false, false, true, true];
        assert_eq!(auc(&scores, &labels), 1.0);
    }

    #[test]
    fn zero_epochs_returns_ratio_near_one() {
        let ds = tiny_dataset();
        let cfg = AutoencoderTrainConfig { epochs: 0, ..AutoencoderTrainConfig::default() };
        let (p, stats) = pretrain_autoencoder(&ds, &cfg).unwrap();
        assert!(p.frozen);
        // only f32 weight quantization separates final from initial
        assert!((stats.loss_ratio - 1.0).abs() < 1e-3, "ratio {}", stats.loss_ratio);
    }

    #[test]
    fn autoencoder_training_is_deterministic() {
        let ds = tiny_dataset();
        let cfg = AutoencoderTrainConfig { epochs: 1, ..AutoencoderTrainConfig::default() };
        let (p1, _) = pretrain_autoencoder(&ds, &cfg).unwrap();
        let (p2, _) = pretrain_autoencoder(&ds, &cfg).unwrap();
        let b1 = crate::models::checkpoint::to_bytes(&crate::models::autoencoder_entries(&p1)).unwrap();
        let b2 = crate::models::checkpoint::to_bytes(&crate::models::autoencoder_entries(&p2)).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn tagger_training_is_deterministic_and_freezes() {
        let ds = tiny_dataset();
        let cfg = TaggerTrainConfig { epochs: 1, ..TaggerTrainConfig::default() };
        let (p1, _) = pretrain_tagger(&ds, TaggerArch::FcnMini, &cfg).unwrap();
        let (p2, _) = pretrain_tagger(&ds, TaggerArch::FcnMini, &cfg).unwrap();
        assert!(p1.frozen && p2.frozen);
        let b1 = crate::models::checkpoint::to_bytes(&crate::models::tagger_entries(&p1)).unwrap();
        let b2 = crate::models::checkpoint::to_bytes(&crate::models::tagger_entries(&p2)).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let mut ds = tiny_dataset();
        ds.train.clear();
        let cfg = AutoencoderTrainConfig::default();
        assert!(matches!(pretrain_autoencoder(&ds, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn tag_without_positives_is_named_in_error() {
        let mut ds = tiny_dataset();
        // zero out percussive everywhere in train
        for c in &mut ds.train {
            c.tags.values[1] = 0.0;
        }
        let cfg = TaggerTrainConfig::default();
        match pretrain_tagger(&ds, TaggerArch::FcnMini, &cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains("percussive"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    /// A short burst of training should already reduce the validation loss.
    #[test]
    fn short_training_reduces_val_loss() {
        let ds = tiny_dataset();
        let cfg = AutoencoderTrainConfig { epochs: 3, ..AutoencoderTrainConfig::default() };
        let (_, stats) = pretrain_autoencoder(&ds, &cfg).unwrap();
        assert!(
            stats.final_val_loss < stats.initial_val_loss,
            "val loss did not move: {} -> {}",
            stats.initial_val_loss,
            stats.final_val_loss
        );
    }
}
