//! The separation loop: iterative latent ascent with spectral masking,
//! plus the mask-free style-transfer variant.
//!
//! One run: encode the mixture once, cache its spectrogram(s), then
//! repeatedly decode the latent, build the mask, mask the mixture, invert,
//! tag, and take one optimizer step on the latent against the BCE between
//! predicted and target tags. Model weights never change; only the latent
//! moves. The residual `x - s_bar` is the default source estimate, with the
//! masked signal itself available behind a flag.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NDArray, NodeId, Tape};
use crate::data::TagVector;
use crate::dsp::{self, Mask, SpecNodes, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::models::{
    bce_mean_nodes, decode_nodes, encode, tagger_forward_nodes, AutoencoderParams, TaggerParams,
    COMPRESSION, LATENT_DIM,
};
use crate::models::train::Adam;

/// Which signal counts as "the estimate".
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateConvention {
    /// mixture minus the optimized masked signal (the printed algorithm).
    Residual,
    /// the optimized masked signal itself.
    Masked,
}

/// Latent initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentInit {
    EncodeMixture,
    Zeros,
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Loop hyperparameters. Defaults: Adam at learning rate 5.0 for 10 steps,
/// one 1024-bin FFT for the mask, residual estimate, continuous latent.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeparationConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub fft_sizes: Vec<usize>,
    pub epsilon: f64,
    pub estimate_convention: EstimateConvention,
    pub quantize: bool,
    pub latent_init: LatentInit,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            learning_rate: 5.0,
            steps: 10,
            optimizer: OptimizerKind::Adam,
            fft_sizes: vec![1024],
            epsilon: dsp::MASK_EPS,
            estimate_convention: EstimateConvention::Residual,
            quantize: false,
            latent_init: LatentInit::EncodeMixture,
        }
    }
}

impl SeparationConfig {
    /// Mask FFT sizes for the multi-resolution variant.
    pub fn multi_fft() -> Vec<usize> {
        vec![256, 512, 1024]
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.fft_sizes.is_empty() {
            return Err(Error::config("fft_sizes must not be empty".to_string()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        for &f in &self.fft_sizes {
            StftConfig::with_default_hop(f)?;
        }
        Ok(())
    }
}

/// The two frozen models a run consumes, shareable read-only across runs.
#[derive(Clone, Copy)]
pub struct FrozenModels<'a> {
    pub autoencoder: &'a AutoencoderParams,
    pub tagger: &'a TaggerParams,
}

impl FrozenModels<'_> {
    fn check(&self, mixture: &Waveform) -> Result<()> {
        if !self.autoencoder.frozen || !self.tagger.frozen {
            return Err(Error::contract(
                "separation requires frozen model checkpoints".to_string(),
            ));
        }
        if self.autoencoder.sample_rate != mixture.sample_rate
            || self.tagger.sample_rate != mixture.sample_rate
        {
            return Err(Error::contract(format!(
                "sample rate mismatch: mixture {} Hz, autoencoder {} Hz, tagger {} Hz",
                mixture.sample_rate, self.autoencoder.sample_rate, self.tagger.sample_rate
            )));
        }
        Ok(())
    }
}

/// Cached mixture spectrogram for one FFT size; computed once per run.
struct CachedSpec {
    cfg: StftConfig,
    re: NDArray,
    im: NDArray,
    mag: NDArray,
    frames: usize,
    bins: usize,
}

/// Loop state: the latent, optimizer moments, loss history, and the cached
/// mixture spectrograms (never recomputed; constant w.r.t. the latent).
pub struct AscentState {
    pub latent: NDArray,
    optimizer: Adam,
    optimizer_kind: OptimizerKind,
    pub step_index: usize,
    pub loss_history: Vec<f64>,
    cached: Vec<CachedSpec>,
    mixture_len: usize,
    /// Masked time-domain estimate from the most recent forward pass.
    last_sbar: Option<Vec<f64>>,
    last_masks: Vec<NDArray>,
}

impl AscentState {
    /// Bitwise digests of the cached mixture spectrograms; the mixture must
    /// stay constant across steps.
    pub fn cached_mixture_digest(&self) -> Vec<u64> {
        self.cached
            .iter()
            .map(|c| {
                let mut h = 0xcbf2_9ce4_8422_2325u64;
                for v in c.re.data().iter().chain(c.im.data().iter()) {
                    h ^= v.to_bits();
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
                h
            })
            .collect()
    }
}

fn initial_latent(
    models: &FrozenModels<'_>,
    mixture: &Waveform,
    init: LatentInit,
) -> Result<NDArray> {
    let t_lat = mixture.len().div_ceil(COMPRESSION);
    match init {
        LatentInit::EncodeMixture => Ok(encode(models.autoencoder, mixture)?.values),
        LatentInit::Zeros => Ok(NDArray::zeros(vec![t_lat, LATENT_DIM])),
        LatentInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(NDArray::randn(
                vec![t_lat, LATENT_DIM],
                models.autoencoder.latent_scale * 0.5,
                &mut rng,
            ))
        }
    }
}

/// Start a run: initialize the latent and cache the mixture spectrograms.
pub fn init_state(
    mixture: &Waveform,
    models: &FrozenModels<'_>,
    cfg: &SeparationConfig,
) -> Result<AscentState> {
    cfg.validate()?;
    models.check(mixture)?;
    let max_fft = cfg.fft_sizes.iter().copied().max().unwrap();
    if mixture.len() < max_fft {
        return Err(Error::contract(format!(
            "mixture of {} samples is shorter than the {} sample mask FFT",
            mixture.len(),
            max_fft
        )));
    }
    let latent = initial_latent(models, mixture, cfg.latent_init)?;
    let cached = cfg
        .fft_sizes
        .iter()
        .map(|&f| {
            let scfg = StftConfig::with_default_hop(f)?;
            let spec = dsp::stft(mixture, scfg)?;
            Ok(CachedSpec {
                cfg: scfg,
                mag: spec.magnitude(),
                frames: spec.frames(),
                bins: spec.bins(),
                re: spec.re,
                im: spec.im,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lr = match cfg.optimizer {
        OptimizerKind::Adam => cfg.learning_rate,
        OptimizerKind::Sgd => cfg.learning_rate,
    };
    Ok(AscentState {
        optimizer: Adam::new(std::slice::from_ref(&latent), lr),
        optimizer_kind: cfg.optimizer,
        latent,
        step_index: 0,
        loss_history: Vec::new(),
        cached,
        mixture_len: mixture.len(),
        last_sbar: None,
        last_masks: Vec::new(),
    })
}

/// Decode the latent and produce the masked estimate nodes: per FFT size,
/// J = stft(j), mask = |J| / (max(|J|,|X|) + eps), S = mask ⊙ X,
/// s_f = istft(S); the estimate is the mean over FFT sizes.
fn masked_estimate_nodes(
    tape: &mut Tape,
    state: &AscentState,
    models: &FrozenModels<'_>,
    latent_node: NodeId,
    quantize: bool,
    epsilon: f64,
) -> Result<(NodeId, Vec<NodeId>)> {
    let ae = models.autoencoder.bind(tape, false);
    let j_full = decode_nodes(tape, &ae, latent_node, quantize)?;
    let j = if tape.shape(j_full)[0] > state.mixture_len {
        tape.slice(j_full, 0, state.mixture_len)?
    } else {
        j_full
    };
    let mut sbars = Vec::new();
    let mut mask_nodes = Vec::new();
    for c in &state.cached {
        let jspec = dsp::stft_nodes(tape, j, c.cfg, state.mixture_len)?;
        let jmag = dsp::magnitude_nodes(tape, jspec)?;
        let xmag = tape.constant(c.mag.clone());
        let mask = dsp::build_mask_nodes(tape, jmag, xmag, epsilon)?;
        let xre = tape.constant(c.re.clone());
        let xim = tape.constant(c.im.clone());
        let xnodes = SpecNodes { re: xre, im: xim, frames: c.frames, bins: c.bins };
        let masked = dsp::apply_mask_nodes(tape, mask, xnodes)?;
        let sbar_f = dsp::istft_nodes(tape, masked, c.cfg, state.mixture_len)?;
        sbars.push(sbar_f);
        mask_nodes.push(mask);
    }
    let mut acc = sbars[0];
    for &s in &sbars[1..] {
        acc = tape.add(acc, s)?;
    }
    let sbar = if sbars.len() > 1 {
        tape.mul_scalar(acc, 1.0 / sbars.len() as f64)?
    } else {
        acc
    };
    Ok((sbar, mask_nodes))
}

fn optimizer_update(state: &mut AscentState, grad: &NDArray, lr: f64) {
    match state.optimizer_kind {
        OptimizerKind::Adam => {
            let out = state
                .optimizer
                .step(std::slice::from_ref(&state.latent), &[grad.data()]);
            state.latent = out.into_iter().next().unwrap();
        }
        OptimizerKind::Sgd => {
            let new: Vec<f64> = state
                .latent
                .data()
                .iter()
                .zip(grad.data())
                .map(|(p, g)| p - lr * g)
                .collect();
            state.latent = NDArray::new(state.latent.shape().to_vec(), new);
        }
    }
}

/// One loop iteration: forward through decode, mask, invert, tag; append the
/// BCE to the history; take one optimizer step on the latent.
pub fn ascend_step(
    state: &mut AscentState,
    models: &FrozenModels<'_>,
    mixture: &Waveform,
    target: &TagVector,
    cfg: &SeparationConfig,
) -> Result<()> {
    check_target(models.tagger, target)?;
    let mut tape = Tape::new();
    let latent_node = tape.leaf(state.latent.clone());
    let (sbar, mask_nodes) =
        masked_estimate_nodes(&mut tape, state, models, latent_node, cfg.quantize, cfg.epsilon)?;
    let bound_tagger = models.tagger.bind(&mut tape, false);
    let probs = tagger_forward_nodes(
        &mut tape,
        models.tagger,
        &bound_tagger,
        sbar,
        state.mixture_len,
        mixture.sample_rate,
    )?;
    let loss = bce_mean_nodes(&mut tape, probs, &target.values)?;
    let loss_value = tape.forward(loss)?.scalar_value();
    if !loss_value.is_finite() {
        return Err(Error::numerical(
            None,
            format!("non-finite loss at step {}", state.step_index),
        ));
    }
    let grad = tape.backward(loss, latent_node)?;

    state.last_sbar = Some(tape.forward(sbar)?.data().to_vec());
    state.last_masks = mask_nodes
        .iter()
        .map(|&m| tape.forward(m))
        .collect::<Result<Vec<_>>>()?;
    state.loss_history.push(loss_value);
    optimizer_update(state, &grad, cfg.learning_rate);
    state.step_index += 1;
    Ok(())
}

/// Forward-only evaluation of the masked estimate at the current latent
/// (used by the steps = 0 baseline; appends nothing to the history).
fn forward_masked_estimate(
    state: &mut AscentState,
    models: &FrozenModels<'_>,
    cfg: &SeparationConfig,
) -> Result<()> {
    let mut tape = Tape::new();
    let latent_node = tape.constant(state.latent.clone());
    let (sbar, mask_nodes) =
        masked_estimate_nodes(&mut tape, state, models, latent_node, cfg.quantize, cfg.epsilon)?;
    state.last_sbar = Some(tape.forward(sbar)?.data().to_vec());
    state.last_masks = mask_nodes
        .iter()
        .map(|&m| tape.forward(m))
        .collect::<Result<Vec<_>>>()?;
    Ok(())
}

fn check_target(tagger: &TaggerParams, target: &TagVector) -> Result<()> {
    if target.vocab.is_empty() {
        return Err(Error::config("target tag vocabulary is empty".to_string()));
    }
    if target.vocab != tagger.vocab {
        return Err(Error::contract(format!(
            "target vocabulary {:?} does not match tagger vocabulary {:?}",
            target.vocab.names(),
            tagger.vocab.names()
        )));
    }
    if !target.is_binary() {
        return Err(Error::contract("target tags must be multi-hot {0,1}".to_string()));
    }
    Ok(())
}

/// Everything one run produces. Both the residual and the masked signal are
/// always present; `estimate()` picks the configured convention.
#[derive(Debug, Clone)]
pub struct SeparationResult {
    /// mixture minus the final masked signal.
    pub s_out: Waveform,
    /// Final masked signal (the component the loop shaped toward the tags).
    pub s_bar: Waveform,
    pub masks: Vec<Mask>,
    pub loss_history: Vec<f64>,
    pub config: SeparationConfig,
    pub target: Vec<f64>,
    pub wall_time_s: f64,
}

impl SeparationResult {
    pub fn estimate(&self) -> &Waveform {
        match self.config.estimate_convention {
            EstimateConvention::Residual => &self.s_out,
            EstimateConvention::Masked => &self.s_bar,
        }
    }
}

/// Run the full loop and return both signals, the final masks, and the loss
/// history. `s_out + s_bar` reconstructs the mixture exactly by
/// construction.
pub fn separate(
    mixture: &Waveform,
    target: &TagVector,
    models: &FrozenModels<'_>,
    cfg: &SeparationConfig,
) -> Result<SeparationResult> {
    let start = Instant::now();
    check_target(models.tagger, target)?;
    let mut state = init_state(mixture, models, cfg)?;
    if cfg.steps == 0 {
        forward_masked_estimate(&mut state, models, cfg)?;
    } else {
        for _ in 0..cfg.steps {
            ascend_step(&mut state, models, mixture, target, cfg)?;
        }
    }
    let sbar_samples = state.last_sbar.take().expect("forward pass ran");
    let s_out_samples: Vec<f64> = mixture
        .samples
        .iter()
        .zip(sbar_samples.iter())
        .map(|(x, s)| x - s)
        .collect();
    let masks = state
        .last_masks
        .iter()
        .map(|m| Mask { values: m.clone(), epsilon: cfg.epsilon })
        .collect();
    Ok(SeparationResult {
        s_out: Waveform::new(s_out_samples, mixture.sample_rate)?,
        s_bar: Waveform::new(sbar_samples, mixture.sample_rate)?,
        masks,
        loss_history: state.loss_history,
        config: cfg.clone(),
        target: target.values.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Mean BCE between estimated and target tags (the loop objective).
pub fn tag_loss(estimate: &TagVector, target: &TagVector) -> Result<f64> {
    if estimate.vocab != target.vocab {
        return Err(Error::contract(format!(
            "tag vocabularies differ: {:?} vs {:?}",
            estimate.vocab.names(),
            target.vocab.names()
        )));
    }
    if estimate.values.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::contract("estimated tags must lie in (0,1)".to_string()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(NDArray::new(vec![estimate.values.len()], estimate.values.clone()));
    let loss = bce_mean_nodes(&mut tape, p, &target.values)?;
    Ok(tape.forward(loss)?.scalar_value())
}

/// Style-transfer output: the decoded audio itself plus the loop telemetry.
#[derive(Debug, Clone)]
pub struct StyleTransferResult {
    pub audio: Waveform,
    pub loss_history: Vec<f64>,
    pub config: SeparationConfig,
    pub target: Vec<f64>,
    pub wall_time_s: f64,
}

/// The mask-free variant: the tagger consumes the decoded audio directly and
/// the decoded audio itself is the output. With steps = 0 this returns
/// decode(encode(x)) exactly.
pub fn style_transfer(
    mixture: &Waveform,
    target: &TagVector,
    models: &FrozenModels<'_>,
    cfg: &SeparationConfig,
) -> Result<StyleTransferResult> {
    let start = Instant::now();
    check_target(models.tagger, target)?;
    cfg.validate()?;
    models.check(mixture)?;
    let mut latent = initial_latent(models, mixture, cfg.latent_init)?;
    let mut optimizer = Adam::new(std::slice::from_ref(&latent), cfg.learning_rate);
    let mut loss_history = Vec::new();
    let mut last_audio: Option<Vec<f64>> = None;

    let steps = cfg.steps.max(0);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let latent_node = tape.leaf(latent.clone());
        let ae = models.autoencoder.bind(&mut tape, false);
        let j = decode_nodes(&mut tape, &ae, latent_node, cfg.quantize)?;
        let j_len = tape.shape(j)[0];
        let bound_tagger = models.tagger.bind(&mut tape, false);
        let probs = tagger_forward_nodes(
            &mut tape,
            models.tagger,
            &bound_tagger,
            j,
            j_len,
            mixture.sample_rate,
        )?;
        let loss = bce_mean_nodes(&mut tape, probs, &target.values)?;
        let loss_value = tape.forward(loss)?.scalar_value();
        let grad = tape.backward(loss, latent_node)?;
        last_audio = Some(tape.forward(j)?.data().to_vec());
        loss_history.push(loss_value);
        match cfg.optimizer {
            OptimizerKind::Adam => {
                let out = optimizer.step(std::slice::from_ref(&latent), &[grad.data()]);
                latent = out.into_iter().next().unwrap();
            }
            OptimizerKind::Sgd => {
                let new: Vec<f64> = latent
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(p, g)| p - cfg.learning_rate * g)
                    .collect();
                latent = NDArray::new(latent.shape().to_vec(), new);
            }
        }
    }

    let audio = match last_audio {
        Some(a) => a,
        None => {
            // steps = 0: plain decode of the initial latent
            let mut tape = Tape::new();
            let ae = models.autoencoder.bind(&mut tape, false);
            let latent_node = tape.constant(latent.clone());
            let j = decode_nodes(&mut tape, &ae, latent_node, cfg.quantize)?;
            tape.forward(j)?.data().to_vec()
        }
    };
    Ok(StyleTransferResult {
        audio: Waveform::new(audio, mixture.sample_rate)?,
        loss_history,
        config: cfg.clone(),
        target: target.values.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
