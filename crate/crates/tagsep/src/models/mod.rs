//! The two frozen stand-ins: a scaled-down single-level VQ-VAE
//! (encoder/decoder/codebook) and small multi-label taggers, plus their
//! checkpoint schema. Training lives in [`train`].
//!
//! Both models are deliberately tiny: the point is a frozen-weights
//! separation pipeline that is verifiable end to end on one core, not model
//! quality. Architecture knobs live in the param structs and are recorded in
//! every checkpoint.

pub mod checkpoint;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NDArray, NodeId, Tape};
use crate::data::{TagVector, TagVocabulary};
use crate::dsp::{self, StftConfig, Waveform};
use crate::error::{Error, Result};

use checkpoint::Entry;

/// Latent code dimension (per timestep).
pub const LATENT_DIM: usize = 64;
/// Temporal compression factor of the autoencoder.
pub const COMPRESSION: usize = 8;
/// Desk-scale codebook size.
pub const CODEBOOK_SIZE: usize = 128;

/// The optimized embedding: a `[T_lat, 64]` array, 8x compressed in time.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub values: NDArray,
}

impl LatentCode {
    pub fn new(values: NDArray) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[1] != LATENT_DIM {
            return Err(Error::contract(format!(
                "latent code must be [T_lat, {LATENT_DIM}], got {:?}",
                values.shape()
            )));
        }
        Ok(LatentCode { values })
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }
}

/// One convolution layer (regular or transposed depending on position).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: NDArray,
    pub b: NDArray,
    pub stride: usize,
    pub pad: usize,
}

/// Scaled-down single-level VQ-VAE.
///
/// Encoder: three stride-2 convolutions and a 1x1 projection to 64 channels,
/// then a fixed latent scale. Decoder mirrors it with transposed
/// convolutions and a tanh output. The latent scale sets the magnitude of
/// the embedding space so the cited separation step size moves it by a
/// sensible relative amount.
#[derive(Debug, Clone)]
pub struct AutoencoderParams {
    pub enc: Vec<ConvLayer>,
    pub dec_proj: ConvLayer,
    pub dec: Vec<ConvLayer>,
    /// `[CODEBOOK_SIZE, LATENT_DIM]` codebook entries (in scaled latent space).
    pub codebook: NDArray,
    pub latent_scale: f64,
    pub sample_rate: u32,
    pub frozen: bool,
}

impl AutoencoderParams {
    /// Deterministic random initialization.
    pub fn init(sample_rate: u32, latent_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAE0A_E0AE);
        let conv = |cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng| {
            let std = (2.0 / (cin * k) as f64).sqrt();
            ConvLayer {
                w: NDArray::randn(vec![cout, cin, k], std, rng),
                b: NDArray::zeros(vec![cout]),
                stride,
                pad,
            }
        };
        let tconv = |cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng| {
            let std = (2.0 / (cin * k) as f64).sqrt();
            ConvLayer {
                w: NDArray::randn(vec![cin, cout, k], std, rng),
                b: NDArray::zeros(vec![cout]),
                stride,
                pad,
            }
        };
        let enc = vec![
            conv(1, 12, 9, 2, 4, &mut rng),
            conv(12, 24, 9, 2, 4, &mut rng),
            conv(24, 48, 9, 2, 4, &mut rng),
            conv(48, LATENT_DIM, 1, 1, 0, &mut rng),
        ];
        let dec_proj = conv(LATENT_DIM, 48, 1, 1, 0, &mut rng);
        let dec = vec![
            tconv(48, 24, 8, 2, 3, &mut rng),
            tconv(24, 12, 8, 2, 3, &mut rng),
            tconv(12, 1, 8, 2, 3, &mut rng),
        ];
        let codebook = NDArray::randn(vec![CODEBOOK_SIZE, LATENT_DIM], latent_scale * 0.5, &mut rng);
        AutoencoderParams {
            enc,
            dec_proj,
            dec,
            codebook,
            latent_scale,
            sample_rate,
            frozen: false,
        }
    }

    /// Cast every weight through f32 so in-memory params match their
    /// checkpoint representation exactly.
    pub fn quantize_weights_to_f32(&mut self) {
        let q = |a: &NDArray| NDArray::new(a.shape().to_vec(), a.data().iter().map(|&v| f64::from(v as f32)).collect());
        for l in self.enc.iter_mut().chain(self.dec.iter_mut()).chain(std::iter::once(&mut self.dec_proj)) {
            l.w = q(&l.w);
            l.b = q(&l.b);
        }
        self.codebook = q(&self.codebook);
    }

    /// Ordered snapshot of every trainable array. The order matches
    /// [`BoundAutoencoder::param_nodes`] and [`Self::set_params`].
    pub fn params(&self) -> Vec<NDArray> {
        let mut out = Vec::new();
        for l in &self.enc {
            out.push(l.w.clone());
            out.push(l.b.clone());
        }
        out.push(self.dec_proj.w.clone());
        out.push(self.dec_proj.b.clone());
        for l in &self.dec {
            out.push(l.w.clone());
            out.push(l.b.clone());
        }
        out.push(self.codebook.clone());
        out
    }

    pub fn set_params(&mut self, arrays: Vec<NDArray>) -> Result<()> {
        let expected = self.params().len();
        if arrays.len() != expected {
            return Err(Error::contract(format!(
                "expected {expected} param arrays, got {}",
                arrays.len()
            )));
        }
        let mut it = arrays.into_iter();
        for l in &mut self.enc {
            l.w = it.next().unwrap();
            l.b = it.next().unwrap();
        }
        self.dec_proj.w = it.next().unwrap();
        self.dec_proj.b = it.next().unwrap();
        for l in &mut self.dec {
            l.w = it.next().unwrap();
            l.b = it.next().unwrap();
        }
        self.codebook = it.next().unwrap();
        Ok(())
    }
}

/// Weight nodes for one bound conv layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub w: NodeId,
    pub b: NodeId,
    pub stride: usize,
    pub pad: usize,
}

/// Autoencoder weights materialized on a tape, as leaves (trainable) or
/// constants (frozen inference).
pub struct BoundAutoencoder {
    pub enc: Vec<BoundConv>,
    pub dec_proj: BoundConv,
    pub dec: Vec<BoundConv>,
    pub codebook: NodeId,
    pub latent_scale: f64,
}

impl BoundAutoencoder {
    /// Node ids in the order of [`AutoencoderParams::params`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for l in &self.enc {
            out.push(l.w);
            out.push(l.b);
        }
        out.push(self.dec_proj.w);
        out.push(self.dec_proj.b);
        for l in &self.dec {
            out.push(l.w);
            out.push(l.b);
        }
        out.push(self.codebook);
        out
    }
}

impl AutoencoderParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAutoencoder {
        let mut put = |a: &NDArray| {
            if trainable {
                tape.leaf(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let bind_layer = |l: &ConvLayer, put: &mut dyn FnMut(&NDArray) -> NodeId| BoundConv {
            w: put(&l.w),
            b: put(&l.b),
            stride: l.stride,
            pad: l.pad,
        };
        let enc = self.enc.iter().map(|l| bind_layer(l, &mut put)).collect();
        let dec_proj = bind_layer(&self.dec_proj, &mut put);
        let dec = self.dec.iter().map(|l| bind_layer(l, &mut put)).collect();
        let codebook = put(&self.codebook);
        BoundAutoencoder { enc, dec_proj, dec, codebook, latent_scale: self.latent_scale }
    }
}

/// Encoder graph: `[len]` signal node -> `[T_lat, 64]` latent node.
/// The signal length must be a multiple of the compression factor.
pub fn encode_nodes(tape: &mut Tape, ae: &BoundAutoencoder, x: NodeId) -> Result<NodeId> {
    let len = tape.shape(x)[0];
    if len % COMPRESSION != 0 {
        return Err(Error::contract(format!(
            "encode: length {len} not a multiple of {COMPRESSION} (pad first)"
        )));
    }
    let mut h = tape.reshape(x, vec![1, len])?;
    let n_layers = ae.enc.len();
    for (i, l) in ae.enc.iter().enumerate() {
        h = tape.conv1d(h, l.w, l.b, l.stride, l.pad)?;
        if i + 1 < n_layers {
            h = tape.relu(h)?;
        }
    }
    let scaled = tape.mul_scalar(h, ae.latent_scale)?;
    tape.transpose(scaled)
}

/// Straight-through combination: the forward value is exactly `quantized`
/// (e - sg(e) contributes a true zero), the adjoint passes to `e` unchanged.
pub fn straight_through(tape: &mut Tape, e: NodeId, quantized: NodeId) -> Result<NodeId> {
    let sg_q = tape.stop_gradient(quantized)?;
    let sg_e = tape.stop_gradient(e)?;
    let zero = tape.sub(e, sg_e)?;
    tape.add(sg_q, zero)
}

/// Nearest codebook rows for each latent timestep; ties pick the lowest
/// index. Returns (indices, gathered entries).
pub fn quantize_latent(e: &NDArray, codebook: &NDArray) -> Result<(Vec<usize>, NDArray)> {
    if codebook.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::contract("codebook is empty".to_string()));
    }
    if e.shape().len() != 2 || codebook.shape().len() != 2 || e.shape()[1] != codebook.shape()[1] {
        return Err(Error::contract(format!(
            "quantize: latent {:?} vs codebook {:?}",
            e.shape(),
            codebook.shape()
        )));
    }
    let (t, d) = (e.shape()[0], e.shape()[1]);
    let k = codebook.shape()[0];
    // ||e - c||^2 = ||e||^2 - 2 e.c + ||c||^2; the ||e||^2 term is constant
    // per row and can be dropped for the argmin
    let mut dots = vec![0.0; t * k];
    crate::autodiff::gemm_nt(t, d, k, e.data(), codebook.data(), &mut dots);
    let cnorm: Vec<f64> = (0..k)
        .map(|i| codebook.data()[i * d..(i + 1) * d].iter().map(|v| v * v).sum())
        .collect();
    let mut indices = Vec::with_capacity(t);
    let mut gathered = Vec::with_capacity(t * d);
    for row in 0..t {
        let mut best = 0usize;
        let mut best_score = f64::INFINITY;
        for i in 0..k {
            let score = cnorm[i] - 2.0 * dots[row * k + i];
            if score < best_score {
                best_score = score;
                best = i;
            }
        }
        indices.push(best);
        gathered.extend_from_slice(&codebook.data()[best * d..(best + 1) * d]);
    }
    Ok((indices, NDArray::new(vec![t, d], gathered)))
}

/// Decoder graph: `[T_lat, 64]` latent node -> `[len]` waveform node.
///
/// With `quantize`, the latent snaps to its nearest codebook entries with a
/// straight-through adjoint (identity into `e`); the codebook itself only
/// receives gradients through losses that reference it explicitly.
pub fn decode_nodes(tape: &mut Tape, ae: &BoundAutoencoder, e: NodeId, quantize: bool) -> Result<NodeId> {
    let shape = tape.shape(e).to_vec();
    if shape.len() != 2 || shape[1] != LATENT_DIM {
        return Err(Error::contract(format!(
            "decode: latent must be [T_lat, {LATENT_DIM}], got {shape:?}"
        )));
    }
    let h0 = if quantize {
        let (indices, _) = {
            let evals = tape.value(e).clone();
            let cvals = tape.value(ae.codebook).clone();
            quantize_latent(&evals, &cvals)?
        };
        let e_q = tape.gather(ae.codebook, &indices)?;
        straight_through(tape, e, e_q)?
    } else {
        e
    };
    let ht = tape.transpose(h0)?;
    let mut h = tape.mul_scalar(ht, 1.0 / ae.latent_scale)?;
    h = tape.conv1d(h, ae.dec_proj.w, ae.dec_proj.b, ae.dec_proj.stride, ae.dec_proj.pad)?;
    h = tape.relu(h)?;
    let n_layers = ae.dec.len();
    for (i, l) in ae.dec.iter().enumerate() {
        h = tape.conv_transpose1d(h, l.w, l.b, l.stride, l.pad)?;
        if i + 1 < n_layers {
            h = tape.relu(h)?;
        }
    }
    let out = tape.tanh(h)?;
    let len = tape.shape(out)[1];
    tape.reshape(out, vec![len])
}

/// Encode a waveform (zero-padded to a multiple of the compression factor).
pub fn encode(p: &AutoencoderParams, x: &Waveform) -> Result<LatentCode> {
    let mut samples = x.samples.clone();
    let rem = samples.len() % COMPRESSION;
    if rem != 0 {
        samples.resize(samples.len() + COMPRESSION - rem, 0.0);
    }
    let mut tape = Tape::new();
    let ae = p.bind(&mut tape, false);
    let xn = tape.constant(NDArray::new(vec![samples.len()], samples));
    let e = encode_nodes(&mut tape, &ae, xn)?;
    LatentCode::new(tape.forward(e)?)
}

/// Decode a latent code back to audio.
pub fn decode(p: &AutoencoderParams, e: &LatentCode, quantize: bool) -> Result<Waveform> {
    let mut tape = Tape::new();
    let ae = p.bind(&mut tape, false);
    let en = tape.constant(e.values.clone());
    let out = decode_nodes(&mut tape, &ae, en, quantize)?;
    Waveform::new(tape.forward(out)?.data().to_vec(), p.sample_rate)
}

// ── taggers ──────────────────────────────────────────────────────────

/// Tagger front-end variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaggerArch {
    /// Single mel-spectrogram branch.
    FcnMini,
    /// Two mel branches at different FFT sizes (multi-resolution front end).
    MrsMini,
}

impl TaggerArch {
    pub fn name(self) -> &'static str {
        match self {
            TaggerArch::FcnMini => "fcn_mini",
            TaggerArch::MrsMini => "mrs_mini",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "fcn_mini" => Ok(TaggerArch::FcnMini),
            "mrs_mini" => Ok(TaggerArch::MrsMini),
            other => Err(Error::config(format!(
                "unknown tagger architecture '{other}' (want fcn_mini or mrs_mini)"
            ))),
        }
    }
}

/// One mel front-end branch plus its conv stack.
#[derive(Debug, Clone)]
pub struct TaggerBranch {
    pub fft_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub convs: Vec<ConvLayer>,
    /// Dense head slice for this branch: `[C_feat, K]`.
    pub dense_w: NDArray,
}

/// Frozen multi-label tagger.
#[derive(Debug, Clone)]
pub struct TaggerParams {
    pub arch: TaggerArch,
    pub branches: Vec<TaggerBranch>,
    /// Shared dense bias `[1, K]`.
    pub dense_b: NDArray,
    pub vocab: TagVocabulary,
    pub sample_rate: u32,
    pub frozen: bool,
}

impl TaggerParams {
    pub fn init(arch: TaggerArch, vocab: &TagVocabulary, sample_rate: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A66_E12F);
        let k_tags = vocab.len();
        let conv = |cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng| {
            let std = (2.0 / (cin * k) as f64).sqrt();
            ConvLayer {
                w: NDArray::randn(vec![cout, cin, k], std, rng),
                b: NDArray::zeros(vec![cout]),
                stride,
                pad: k / 2,
            }
        };
        let branches = match arch {
            TaggerArch::FcnMini => vec![TaggerBranch {
                fft_size: 1024,
                hop: 256,
                n_mels: 40,
                convs: vec![
                    conv(40, 32, 5, 1, &mut rng),
                    conv(32, 32, 5, 2, &mut rng),
                    conv(32, 32, 5, 2, &mut rng),
                ],
                dense_w: NDArray::randn(vec![32, k_tags], (1.0 / 32.0f64).sqrt(), &mut rng),
            }],
            TaggerArch::MrsMini => {
                let mut mk = |fft: usize, hop: usize| TaggerBranch {
                    fft_size: fft,
                    hop,
                    n_mels: 40,
                    convs: vec![conv(40, 24, 5, 2, &mut rng), conv(24, 24, 5, 2, &mut rng)],
                    dense_w: NDArray::randn(vec![24, k_tags], (1.0 / 24.0f64).sqrt(), &mut rng),
                };
                vec![mk(256, 64), mk(1024, 256)]
            }
        };
        TaggerParams {
            arch,
            branches,
            dense_b: NDArray::zeros(vec![1, k_tags]),
            vocab: vocab.clone(),
            sample_rate,
            frozen: false,
        }
    }

    pub fn n_tags(&self) -> usize {
        self.vocab.len()
    }

    /// Longest analysis frame over all branches.
    pub fn min_input_len(&self) -> usize {
        self.branches.iter().map(|b| b.fft_size).max().unwrap_or(0)
    }

    pub fn quantize_weights_to_f32(&mut self) {
        let q = |a: &NDArray| NDArray::new(a.shape().to_vec(), a.data().iter().map(|&v| f64::from(v as f32)).collect());
        for br in &mut self.branches {
            for l in &mut br.convs {
                l.w = q(&l.w);
                l.b = q(&l.b);
            }
            br.dense_w = q(&br.dense_w);
        }
        self.dense_b = q(&self.dense_b);
    }

    /// Ordered snapshot of every trainable array; matches
    /// [`BoundTagger::param_nodes`] and [`Self::set_params`].
    pub fn params(&self) -> Vec<NDArray> {
        let mut out = Vec::new();
        for br in &self.branches {
            for l in &br.convs {
                out.push(l.w.clone());
                out.push(l.b.clone());
            }
            out.push(br.dense_w.clone());
        }
        out.push(self.dense_b.clone());
        out
    }

    pub fn set_params(&mut self, arrays: Vec<NDArray>) -> Result<()> {
        let expected = self.params().len();
        if arrays.len() != expected {
            return Err(Error::contract(format!(
                "expected {expected} param arrays, got {}",
                arrays.len()
            )));
        }
        let mut it = arrays.into_iter();
        for br in &mut self.branches {
            for l in &mut br.convs {
                l.w = it.next().unwrap();
                l.b = it.next().unwrap();
            }
            br.dense_w = it.next().unwrap();
        }
        self.dense_b = it.next().unwrap();
        Ok(())
    }
}

/// Tagger weights on a tape.
pub struct BoundTagger {
    pub branches: Vec<(Vec<BoundConv>, NodeId)>,
    pub dense_b: NodeId,
}

impl BoundTagger {
    /// Node ids in the order of [`TaggerParams::params`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for (convs, dense_w) in &self.branches {
            for l in convs {
                out.push(l.w);
                out.push(l.b);
            }
            out.push(*dense_w);
        }
        out.push(self.dense_b);
        out
    }
}

impl TaggerParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundTagger {
        let mut put = |a: &NDArray| {
            if trainable {
                tape.leaf(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let branches = self
            .branches
            .iter()
            .map(|br| {
                let convs = br
                    .convs
                    .iter()
                    .map(|l| BoundConv { w: put(&l.w), b: put(&l.b), stride: l.stride, pad: l.pad })
                    .collect();
                let dw = put(&br.dense_w);
                (convs, dw)
            })
            .collect();
        let dense_b = put(&self.dense_b);
        BoundTagger { branches, dense_b }
    }
}

/// Conv stack + pooled projection for one branch, from `[n_mels, T]`
/// features to an unbiased `[1, K]` logit contribution.
fn branch_head_nodes(tape: &mut Tape, convs: &[BoundConv], dense_w: NodeId, feat: NodeId) -> Result<NodeId> {
    let mut h = feat;
    for l in convs {
        h = tape.conv1d(h, l.w, l.b, l.stride, l.pad)?;
        h = tape.relu(h)?;
    }
    let pooled = tape.mean_axis(h, 1)?;
    let c = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, vec![1, c])?;
    tape.matmul(row, dense_w)
}

/// Full tagger graph from a waveform node: per-branch mel front end, conv
/// stacks, pooled dense head, sigmoid. Returns a `[K]` probability node.
pub fn tagger_forward_nodes(
    tape: &mut Tape,
    p: &TaggerParams,
    bound: &BoundTagger,
    x: NodeId,
    len: usize,
    sample_rate: u32,
) -> Result<NodeId> {
    if len < p.min_input_len() {
        return Err(Error::contract(format!(
            "clip of {len} samples is shorter than one analysis frame ({})",
            p.min_input_len()
        )));
    }
    let mut logits: Option<NodeId> = None;
    for (br, (convs, dense_w)) in p.branches.iter().zip(&bound.branches) {
        let cfg = StftConfig::new(br.fft_size, br.hop)?;
        let mel = dsp::mel_nodes(tape, x, len, sample_rate, br.n_mels, cfg)?;
        let feat = tape.transpose(mel)?;
        let contrib = branch_head_nodes(tape, convs, *dense_w, feat)?;
        logits = Some(match logits {
            Some(acc) => tape.add(acc, contrib)?,
            None => contrib,
        });
    }
    let with_bias = tape.add(logits.unwrap(), bound.dense_b)?;
    let probs = tape.sigmoid(with_bias)?;
    let k = tape.shape(probs)[1];
    tape.reshape(probs, vec![k])
}

/// Tagger head over precomputed (transposed) mel features, one per branch.
/// Used by training, where the front end is constant per clip.
pub fn tagger_head_from_features(
    tape: &mut Tape,
    p: &TaggerParams,
    bound: &BoundTagger,
    features: &[NodeId],
) -> Result<NodeId> {
    if features.len() != p.branches.len() {
        return Err(Error::contract(format!(
            "expected {} feature blocks, got {}",
            p.branches.len(),
            features.len()
        )));
    }
    let mut logits: Option<NodeId> = None;
    for ((convs, dense_w), &feat) in bound.branches.iter().zip(features) {
        let contrib = branch_head_nodes(tape, convs, *dense_w, feat)?;
        logits = Some(match logits {
            Some(acc) => tape.add(acc, contrib)?,
            None => contrib,
        });
    }
    let with_bias = tape.add(logits.unwrap(), bound.dense_b)?;
    let probs = tape.sigmoid(with_bias)?;
    let k = tape.shape(probs)[1];
    tape.reshape(probs, vec![k])
}

/// Precompute the transposed mel features a tagger consumes for one clip.
pub fn tagger_features(p: &TaggerParams, x: &Waveform) -> Result<Vec<NDArray>> {
    p.branches
        .iter()
        .map(|br| {
            let cfg = StftConfig::new(br.fft_size, br.hop)?;
            let mel = dsp::mel_spectrogram(x, br.n_mels, cfg)?;
            // transpose to [n_mels, T]
            let mut tape = Tape::new();
            let m = tape.constant(mel);
            let t = tape.transpose(m)?;
            tape.forward(t)
        })
        .collect()
}

/// K sigmoid probabilities for one clip.
pub fn tagger_forward(p: &TaggerParams, x: &Waveform) -> Result<TagVector> {
    if x.sample_rate != p.sample_rate {
        return Err(Error::contract(format!(
            "tagger expects {} Hz input, got {} Hz",
            p.sample_rate, x.sample_rate
        )));
    }
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let xn = tape.constant(NDArray::new(vec![x.len()], x.samples.clone()));
    let probs = tagger_forward_nodes(&mut tape, p, &bound, xn, x.len(), x.sample_rate)?;
    TagVector::from_probabilities(&p.vocab, tape.forward(probs)?.data().to_vec())
}

// ── losses ───────────────────────────────────────────────────────────

/// Epsilon floor inside loss logarithms (division and BCE guards).
pub const LOSS_EPS: f64 = 1e-8;

/// Floor for the log-magnitude term of the spectral loss. Deliberately much
/// larger than [`LOSS_EPS`]: near-silent bins sit at the floor instead of
/// contributing unbounded log-ratio noise, so the term tracks audible error.
pub const SPECTRAL_LOG_FLOOR: f64 = 1e-4;

/// Mean binary cross-entropy node between a probability node and constant
/// targets: mean over K of -[t log(p + eps) + (1 - t) log(1 - p + eps)].
pub fn bce_mean_nodes(tape: &mut Tape, probs: NodeId, targets: &[f64]) -> Result<NodeId> {
    let shape = tape.shape(probs).to_vec();
    let n: usize = shape.iter().product();
    if n != targets.len() {
        return Err(Error::contract(format!(
            "bce: {n} probabilities vs {} targets",
            targets.len()
        )));
    }
    let t = tape.constant(NDArray::new(shape.clone(), targets.to_vec()));
    let omt = tape.constant(NDArray::new(shape, targets.iter().map(|v| 1.0 - v).collect()));
    let pe = tape.add_scalar(probs, LOSS_EPS)?;
    let lp = tape.log(pe)?;
    let np = tape.neg(probs)?;
    let ome = tape.add_scalar(np, 1.0 + LOSS_EPS)?;
    let l1p = tape.log(ome)?;
    let pos = tape.mul(t, lp)?;
    let neg = tape.mul(omt, l1p)?;
    let s = tape.add(pos, neg)?;
    let m = tape.mean(s)?;
    tape.neg(m)
}

/// Hop used by the spectral loss transforms (looser than the mask STFT; the
/// loss needs coverage, not invertibility).
pub fn spectral_loss_cfg(fft_size: usize) -> Result<StftConfig> {
    StftConfig::new(fft_size, fft_size / 2)
}

/// Multi-scale spectral distance node: for each FFT size, mean L1 between
/// magnitudes plus mean L1 between log magnitudes, against precomputed
/// reference magnitudes.
pub fn spectral_loss_nodes(
    tape: &mut Tape,
    xhat: NodeId,
    len: usize,
    ref_mags: &[(StftConfig, NDArray)],
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (cfg, ref_mag) in ref_mags {
        let spec = dsp::stft_nodes(tape, xhat, *cfg, len)?;
        let mag = dsp::magnitude_nodes(tape, spec)?;
        let refc = tape.constant(ref_mag.clone());
        let diff = tape.sub(mag, refc)?;
        let l1 = tape.abs(diff)?;
        let lin = tape.mean(l1)?;

        let mag_e = tape.add_scalar(mag, SPECTRAL_LOG_FLOOR)?;
        let logm = tape.log(mag_e)?;
        let ref_log = tape.constant(NDArray::new(
            ref_mag.shape().to_vec(),
            ref_mag.data().iter().map(|&v| (v + SPECTRAL_LOG_FLOOR).ln()).collect(),
        ));
        let ldiff = tape.sub(logm, ref_log)?;
        let labs = tape.abs(ldiff)?;
        let llog = tape.mean(labs)?;

        let term = tape.add(lin, llog)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::config("spectral loss needs at least one fft size".to_string()))
}

/// Reference magnitudes for [`spectral_loss_nodes`].
pub fn reference_mags(x: &Waveform, fft_sizes: &[usize]) -> Result<Vec<(StftConfig, NDArray)>> {
    fft_sizes
        .iter()
        .map(|&f| {
            let cfg = spectral_loss_cfg(f)?;
            Ok((cfg, dsp::stft(x, cfg)?.magnitude()))
        })
        .collect()
}

/// Value-level multi-scale spectral loss between two equal-length waveforms.
pub fn multiscale_spectral_loss(x: &Waveform, xhat: &Waveform, fft_sizes: &[usize]) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(Error::contract(format!(
            "spectral loss: length mismatch {} vs {}",
            x.len(),
            xhat.len()
        )));
    }
    let refs = reference_mags(x, fft_sizes)?;
    let mut tape = Tape::new();
    let xh = tape.constant(NDArray::new(vec![xhat.len()], xhat.samples.clone()));
    let loss = spectral_loss_nodes(&mut tape, xh, xhat.len(), &refs)?;
    Ok(tape.forward(loss)?.scalar_value())
}

// ── checkpoint schema ────────────────────────────────────────────────

fn geom_entry(name: &str, l: &ConvLayer) -> Entry {
    Entry::f64(
        format!("{name}.geom"),
        NDArray::new(vec![2], vec![l.stride as f64, l.pad as f64]),
    )
}

fn layer_entries(name: &str, l: &ConvLayer, out: &mut Vec<Entry>) {
    out.push(Entry::f32(format!("{name}.w"), l.w.clone()));
    out.push(Entry::f32(format!("{name}.b"), l.b.clone()));
    out.push(geom_entry(name, l));
}

fn read_layer(map: &std::collections::BTreeMap<String, Entry>, name: &str) -> Result<ConvLayer> {
    let get = |suffix: &str| {
        map.get(&format!("{name}.{suffix}"))
            .ok_or_else(|| Error::format(format!("checkpoint missing array {name}.{suffix}")))
    };
    let geom = get("geom")?.array.clone();
    Ok(ConvLayer {
        w: get("w")?.array.clone(),
        b: get("b")?.array.clone(),
        stride: geom.data()[0] as usize,
        pad: geom.data()[1] as usize,
    })
}

fn vocab_entries(vocab: &TagVocabulary, out: &mut Vec<Entry>) {
    for (i, name) in vocab.names().iter().enumerate() {
        out.push(Entry::f32(format!("vocab.{i}.{name}"), NDArray::new(vec![0], vec![])));
    }
}

fn read_vocab(map: &std::collections::BTreeMap<String, Entry>) -> Result<TagVocabulary> {
    let mut named: Vec<(usize, String)> = Vec::new();
    for key in map.keys() {
        if let Some(rest) = key.strip_prefix("vocab.") {
            let (idx, name) = rest
                .split_once('.')
                .ok_or_else(|| Error::format(format!("malformed vocab entry '{key}'")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::format(format!("malformed vocab index in '{key}'")))?;
            named.push((idx, name.to_string()));
        }
    }
    named.sort();
    TagVocabulary::from_names(named.into_iter().map(|(_, n)| n).collect())
        .map_err(|e| Error::format(format!("checkpoint vocabulary: {e}")))
}

/// Serialize autoencoder params into checkpoint entries (stable order).
pub fn autoencoder_entries(p: &AutoencoderParams) -> Vec<Entry> {
    let mut out = Vec::new();
    out.push(Entry::f64("meta.kind", NDArray::new(vec![1], vec![0.0])));
    out.push(Entry::f64("meta.sample_rate", NDArray::new(vec![1], vec![f64::from(p.sample_rate)])));
    out.push(Entry::f64("meta.latent_scale", NDArray::new(vec![1], vec![p.latent_scale])));
    for (i, l) in p.enc.iter().enumerate() {
        layer_entries(&format!("enc.{i}"), l, &mut out);
    }
    layer_entries("dec.proj", &p.dec_proj, &mut out);
    for (i, l) in p.dec.iter().enumerate() {
        layer_entries(&format!("dec.{i}"), l, &mut out);
    }
    out.push(Entry::f32("codebook", p.codebook.clone()));
    out
}

pub fn save_autoencoder(path: impl AsRef<Path>, p: &AutoencoderParams) -> Result<()> {
    checkpoint::save(path, &autoencoder_entries(p))
}

pub fn load_autoencoder(path: impl AsRef<Path>) -> Result<AutoencoderParams> {
    let map = checkpoint::load_map(path.as_ref())?;
    let meta = |name: &str| -> Result<f64> {
        Ok(map
            .get(name)
            .ok_or_else(|| Error::format(format!("checkpoint missing {name}")))?
            .array
            .data()[0])
    };
    if meta("meta.kind")? != 0.0 {
        return Err(Error::format("checkpoint is not an autoencoder".to_string()));
    }
    let mut enc = Vec::new();
    for i in 0.. {
        if !map.contains_key(&format!("enc.{i}.w")) {
            break;
        }
        enc.push(read_layer(&map, &format!("enc.{i}"))?);
    }
    let dec_proj = read_layer(&map, "dec.proj")?;
    let mut dec = Vec::new();
    for i in 0.. {
        if !map.contains_key(&format!("dec.{i}.w")) {
            break;
        }
        dec.push(read_layer(&map, &format!("dec.{i}"))?);
    }
    let codebook = map
        .get("codebook")
        .ok_or_else(|| Error::format("checkpoint missing codebook".to_string()))?
        .array
        .clone();
    Ok(AutoencoderParams {
        enc,
        dec_proj,
        dec,
        codebook,
        latent_scale: meta("meta.latent_scale")?,
        sample_rate: meta("meta.sample_rate")? as u32,
        frozen: true,
    })
}

/// Serialize tagger params into checkpoint entries (stable order).
pub fn tagger_entries(p: &TaggerParams) -> Vec<Entry> {
    let mut out = Vec::new();
    out.push(Entry::f64("meta.kind", NDArray::new(vec![1], vec![1.0])));
    out.push(Entry::f64("meta.sample_rate", NDArray::new(vec![1], vec![f64::from(p.sample_rate)])));
    out.push(Entry::f64(
        "meta.arch",
        NDArray::new(vec![1], vec![match p.arch {
            TaggerArch::FcnMini => 0.0,
            TaggerArch::MrsMini => 1.0,
        }]),
    ));
    for (bi, br) in p.branches.iter().enumerate() {
        out.push(Entry::f64(
            format!("b{bi}.meta"),
            NDArray::new(vec![3], vec![br.fft_size as f64, br.hop as f64, br.n_mels as f64]),
        ));
        for (ci, l) in br.convs.iter().enumerate() {
            layer_entries(&format!("b{bi}.conv{ci}"), l, &mut out);
        }
        out.push(Entry::f32(format!("b{bi}.dense_w"), br.dense_w.clone()));
    }
    out.push(Entry::f32("dense_b", p.dense_b.clone()));
    vocab_entries(&p.vocab, &mut out);
    out
}

pub fn save_tagger(path: impl AsRef<Path>, p: &TaggerParams) -> Result<()> {
    checkpoint::save(path, &tagger_entries(p))
}

pub fn load_tagger(path: impl AsRef<Path>) -> Result<TaggerParams> {
    let map = checkpoint::load_map(path.as_ref())?;
    let meta = |name: &str| -> Result<f64> {
        Ok(map
            .get(name)
            .ok_or_else(|| Error::format(format!("checkpoint missing {name}")))?
            .array
            .data()[0])
    };
    if meta("meta.kind")? != 1.0 {
        return Err(Error::format("checkpoint is not a tagger".to_string()));
    }
    let arch = if meta("meta.arch")? == 0.0 { TaggerArch::FcnMini } else { TaggerArch::MrsMini };
    let mut branches = Vec::new();
    for bi in 0.. {
        let Some(m) = map.get(&format!("b{bi}.meta")) else { break };
        let md = m.array.data();
        let mut convs = Vec::new();
        for ci in 0.. {
            if !map.contains_key(&format!("b{bi}.conv{ci}.w")) {
                break;
            }
            convs.push(read_layer(&map, &format!("b{bi}.conv{ci}"))?);
        }
        let dense_w = map
            .get(&format!("b{bi}.dense_w"))
            .ok_or_else(|| Error::format(format!("checkpoint missing b{bi}.dense_w")))?
            .array
            .clone();
        branches.push(TaggerBranch {
            fft_size: md[0] as usize,
            hop: md[1] as usize,
            n_mels: md[2] as usize,
            convs,
            dense_w,
        });
    }
    Ok(TaggerParams {
        arch,
        branches,
        dense_b: map
            .get("dense_b")
            .ok_or_else(|| Error::format("checkpoint missing dense_b".to_string()))?
            .array
            .clone(),
        vocab: read_vocab(&map)?,
        sample_rate: meta("meta.sample_rate")? as u32,
        frozen: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_subset;
    use crate::data::{synth_source, SourceKind};

    fn tiny_ae() -> AutoencoderParams {
        AutoencoderParams::init(8000, 24.0, 3)
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let p = tiny_ae();
        let zero = Waveform::new(vec![0.0; 1600], 8000).unwrap();
        let e = encode(&p, &zero).unwrap();
        assert_eq!(e.values.shape(), &[200, LATENT_DIM]);
        assert!(e.values.all_finite());

        let x = synth_source(SourceKind::BellFm, 4, 2.0, 8000).unwrap();
        let e1 = encode(&p, &x).unwrap();
        assert_eq!(e1.values.shape(), &[2000, LATENT_DIM]);
        let e2 = encode(&p, &x).unwrap();
        assert!(e1.values.bit_eq(&e2.values));
    }

    #[test]
    fn decode_length_is_compression_times_steps() {
        let p = tiny_ae();
        let x = Waveform::new(vec![0.1; 800], 8000).unwrap();
        let e = encode(&p, &x).unwrap();
        let y = decode(&p, &e, false).unwrap();
        assert_eq!(y.len(), e.steps() * COMPRESSION);
    }

    #[test]
    fn encode_pads_non_multiple_lengths() {
        let p = tiny_ae();
        let x = Waveform::new(vec![0.1; 803], 8000).unwrap();
        let e = encode(&p, &x).unwrap();
        assert_eq!(e.steps(), 101); // ceil(803 / 8)
    }

    #[test]
    fn quantize_exact_match_and_ties() {
        let cb = NDArray::new(vec![8, LATENT_DIM], {
            let mut v = vec![0.0; 8 * LATENT_DIM];
            for (i, row) in v.chunks_mut(LATENT_DIM).enumerate() {
                row[0] = i as f64;
            }
            v
        });
        // row equal to entry 5
        let mut evals = vec![0.0; LATENT_DIM];
        evals[0] = 5.0;
        let e = NDArray::new(vec![1, LATENT_DIM], evals);
        let (idx, eq) = quantize_latent(&e, &cb).unwrap();
        assert_eq!(idx, vec![5]);
        assert_eq!(eq.data()[0], 5.0);

        // equidistant between entries 2 and 3 -> lower index wins
        let mut mid = vec![0.0; LATENT_DIM];
        mid[0] = 2.5;
        let e = NDArray::new(vec![1, LATENT_DIM], mid);
        let (idx, _) = quantize_latent(&e, &cb).unwrap();
        assert_eq!(idx, vec![2]);
    }

    #[test]
    fn quantize_matches_brute_force_scan() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let e = NDArray::randn(vec![20, LATENT_DIM], 1.0, &mut rng);
        let cb = NDArray::randn(vec![16, LATENT_DIM], 1.0, &mut rng);
        let (idx, eq) = quantize_latent(&e, &cb).unwrap();
        // independent brute-force oracle with explicit squared distances
        for row in 0..20 {
            let er = &e.data()[row * LATENT_DIM..(row + 1) * LATENT_DIM];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..16 {
                let cr = &cb.data()[k * LATENT_DIM..(k + 1) * LATENT_DIM];
                let d: f64 = er.iter().zip(cr).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assert_eq!(idx[row], best, "row {row}");
            assert_eq!(
                &eq.data()[row * LATENT_DIM..(row + 1) * LATENT_DIM],
                &cb.data()[best * LATENT_DIM..(best + 1) * LATENT_DIM]
            );
        }
    }

    #[test]
    fn empty_codebook_is_contract_error() {
        let e = NDArray::zeros(vec![2, LATENT_DIM]);
        let cb = NDArray::zeros(vec![0, LATENT_DIM]);
        assert!(matches!(quantize_latent(&e, &cb), Err(Error::Contract(_))));
    }

    #[test]
    fn quantized_decode_equals_decode_of_quantized_latent() {
        let p = tiny_ae();
        let x = synth_source(SourceKind::Percussive, 2, 0.5, 8000).unwrap();
        let e = encode(&p, &x).unwrap();
        let (_, eq) = quantize_latent(&e.values, &p.codebook).unwrap();
        let a = decode(&p, &e, true).unwrap();
        let b = decode(&p, &LatentCode::new(eq).unwrap(), false).unwrap();
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn straight_through_adjoint_is_identity_composition() {
        // adjoint w.r.t. e under quantize=true equals the adjoint w.r.t. e_q
        // with quantization frozen to its forward indices
        let p = tiny_ae();
        let x = Waveform::new(vec![0.05; 160], 8000).unwrap();
        let e0 = encode(&p, &x).unwrap();

        let grad_st = {
            let mut tape = Tape::new();
            let ae = p.bind(&mut tape, false);
            let e = tape.leaf(e0.values.clone());
            let y = decode_nodes(&mut tape, &ae, e, true).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s, e).unwrap()
        };
        let grad_direct = {
            let (_, eq) = quantize_latent(&e0.values, &p.codebook).unwrap();
            let mut tape = Tape::new();
            let ae = p.bind(&mut tape, false);
            let e = tape.leaf(eq);
            let y = decode_nodes(&mut tape, &ae, e, false).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s, e).unwrap()
        };
        assert!(grad_st.bit_eq(&grad_direct));
    }

    #[test]
    fn decode_grad_check_continuous_path() {
        use rand::SeedableRng;
        let p = tiny_ae();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let e0 = NDArray::randn(vec![16, LATENT_DIM], p.latent_scale * 0.3, &mut rng);
        let report = grad_check_subset(
            |t, e| {
                let ae = p.bind(t, false);
                let y = decode_nodes(t, &ae, e, false)?;
                let sq = t.mul(y, y)?;
                t.mean(sq)
            },
            &e0,
            1e-4,
            1e-3,
            Some(48),
            5,
        )
        .unwrap();
        assert!(report.pass, "decode grad check err {}", report.max_rel_err);
    }

    #[test]
    fn tagger_outputs_probabilities() {
        let vocab = TagVocabulary::default();
        for arch in [TaggerArch::FcnMini, TaggerArch::MrsMini] {
            let p = TaggerParams::init(arch, &vocab, 8000, 5);
            let x = synth_source(SourceKind::SustainedSaw, 6, 1.0, 8000).unwrap();
            let tags = tagger_forward(&p, &x).unwrap();
            assert_eq!(tags.values.len(), 5);
            assert!(tags.values.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn tagger_rejects_short_clips_and_wrong_rate() {
        let vocab = TagVocabulary::default();
        let p = TaggerParams::init(TaggerArch::FcnMini, &vocab, 8000, 5);
        let short = Waveform::new(vec![0.1; 500], 8000).unwrap();
        assert!(matches!(tagger_forward(&p, &short), Err(Error::Contract(_))));
        let wrong = Waveform::new(vec![0.1; 4000], 16000).unwrap();
        assert!(matches!(tagger_forward(&p, &wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn tagger_bce_grad_check_wrt_input() {
        use rand::SeedableRng;
        let vocab = TagVocabulary::default();
        let p = TaggerParams::init(TaggerArch::FcnMini, &vocab, 8000, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x0 = NDArray::randn(vec![2048], 0.2, &mut rng);
        let targets = [1.0, 0.0, 0.0, 1.0, 0.0];
        let report = grad_check_subset(
            |t, x| {
                let bound = p.bind(t, false);
                let probs = tagger_forward_nodes(t, &p, &bound, x, 2048, 8000)?;
                bce_mean_nodes(t, probs, &targets)
            },
            &x0,
            1e-5,
            1e-3,
            Some(32),
            11,
        )
        .unwrap();
        assert!(report.pass, "tagger grad check err {}", report.max_rel_err);
    }

    #[test]
    fn spectral_loss_basics() {
        let x = synth_source(SourceKind::TonalHarmonic, 3, 1.0, 8000).unwrap();
        let same = multiscale_spectral_loss(&x, &x, &[256, 512, 1024]).unwrap();
        assert!(same.abs() < 1e-12);

        let zero = Waveform::new(vec![0.0; x.len()], 8000).unwrap();
        let dz = multiscale_spectral_loss(&x, &zero, &[256, 512, 1024]).unwrap();
        assert!(dz > 0.0);

        let y = synth_source(SourceKind::Percussive, 3, 1.0, 8000).unwrap();
        let ab = multiscale_spectral_loss(&x, &y, &[256, 512]).unwrap();
        let ba = multiscale_spectral_loss(&y, &x, &[256, 512]).unwrap();
        assert!((ab - ba).abs() < 1e-12, "{ab} vs {ba}");
    }

    #[test]
    fn spectral_loss_length_mismatch() {
        let x = Waveform::new(vec![0.1; 1000], 8000).unwrap();
        let y = Waveform::new(vec![0.1; 999], 8000).unwrap();
        assert!(matches!(
            multiscale_spectral_loss(&x, &y, &[256]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn autoencoder_checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("tagsep-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut p = tiny_ae();
        p.quantize_weights_to_f32();
        p.frozen = true;
        let path = dir.join("ae.lmk");
        save_autoencoder(&path, &p).unwrap();
        let q = load_autoencoder(&path).unwrap();
        assert_eq!(q.enc.len(), p.enc.len());
        assert_eq!(q.latent_scale, p.latent_scale);
        assert!(q.codebook.bit_eq(&p.codebook));
        // saved -> loaded -> saved is byte-identical
        let path2 = dir.join("ae2.lmk");
        save_autoencoder(&path2, &q).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn tagger_checkpoint_round_trip_with_vocab() {
        let dir = std::env::temp_dir().join(format!("tagsep-ckpt2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let vocab = TagVocabulary::default();
        let mut p = TaggerParams::init(TaggerArch::MrsMini, &vocab, 8000, 12);
        p.quantize_weights_to_f32();
        p.frozen = true;
        let path = dir.join("tagger.lmk");
        save_tagger(&path, &p).unwrap();
        let q = load_tagger(&path).unwrap();
        assert_eq!(q.arch, TaggerArch::MrsMini);
        assert_eq!(q.vocab, vocab);
        assert_eq!(q.branches.len(), 2);
        let x = synth_source(SourceKind::BreathNoise, 7, 1.0, 8000).unwrap();
        let a = tagger_forward(&p, &x).unwrap();
        let b = tagger_forward(&q, &x).unwrap();
        for (u, v) in a.values.iter().zip(b.values.iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        let _ = std::fs::remove_dir_all(&dir);
    }
}
