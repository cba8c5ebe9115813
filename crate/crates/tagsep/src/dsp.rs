//! Differentiable signal processing: STFT/ISTFT, magnitudes, the spectral
//! mask, and mel features.
//!
//! Everything is expressed with tape primitives (framing + windowing folded
//! into fixed DFT bases + matmul), so gradients flow through the full
//! mask-and-invert path. Value-level wrappers build a throwaway tape, which
//! keeps a single numeric code path for both training and evaluation.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::autodiff::{NDArray, NodeId, Tape};
use crate::error::{Error, Result};

/// Mono audio: finite samples (nominally in [-1, 1]) plus a sample rate.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("waveform must be non-empty".to_string()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::numerical(None, "waveform contains non-finite samples"));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, &s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Analysis window. Only Hann is provided; it satisfies the overlap-add
/// condition at every hop that divides the FFT size with at least 2x overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowKind {
    Hann,
}

/// STFT geometry shared by the forward and inverse transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        let cfg = StftConfig { fft_size, hop, window: WindowKind::Hann };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hann with hop = fft/4: perfect reconstruction after normalization.
    pub fn with_default_hop(fft_size: usize) -> Result<Self> {
        Self::new(fft_size, fft_size / 4)
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size < 8 {
            return Err(Error::config(format!(
                "fft_size must be a power of two >= 8, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::config(format!(
                "hop must be in 1..={}, got {}",
                self.fft_size, self.hop
            )));
        }
        // COLA for Hann: hop must divide the FFT size and leave >= 2x overlap
        if self.fft_size % self.hop != 0 || self.hop > self.fft_size / 2 {
            return Err(Error::config(format!(
                "window/hop pair violates COLA: Hann needs hop | fft_size and hop <= fft_size/2 (fft {}, hop {})",
                self.fft_size, self.hop
            )));
        }
        Ok(())
    }

    /// Number of analysis frames for a signal of `len` samples:
    /// ceil((len + fft_size) / hop) with reflect padding of fft_size/2 per side.
    pub fn n_frames(&self, len: usize) -> usize {
        (len + self.fft_size).div_ceil(self.hop)
    }
}

/// Complex T x F spectrogram stored as separate real and imaginary planes,
/// tagged with the transform geometry that produced it.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub re: NDArray,
    pub im: NDArray,
    pub cfg: StftConfig,
    /// Length of the waveform this spectrogram was computed from.
    pub source_len: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.re.shape()[1]
    }

    /// |S| with the epsilon-smoothed magnitude used everywhere in this crate.
    pub fn magnitude(&self) -> NDArray {
        let mut out = Vec::with_capacity(self.re.len());
        for (&r, &i) in self.re.data().iter().zip(self.im.data().iter()) {
            out.push((r * r + i * i + MAG_EPS).sqrt());
        }
        NDArray::new(self.re.shape().to_vec(), out)
    }
}

/// Real-valued spectral mask in [0, 1) with the epsilon that bounded it.
#[derive(Debug, Clone)]
pub struct Mask {
    pub values: NDArray,
    pub epsilon: f64,
}

/// Smoothing inside sqrt so magnitude gradients stay finite at zero bins.
pub const MAG_EPS: f64 = 1e-12;

/// Default epsilon for the mask denominator.
pub const MASK_EPS: f64 = 1e-8;

// ── fixed bases, cached per geometry ─────────────────────────────────

struct Basis {
    /// [fft, F] windowed cosine bank (forward real part).
    fwd_re: NDArray,
    /// [fft, F] windowed negative-sine bank (forward imaginary part).
    fwd_im: NDArray,
    /// [F, fft] synthesis bank for the real plane (window and 1/N folded in).
    inv_re: NDArray,
    /// [F, fft] synthesis bank for the imaginary plane.
    inv_im: NDArray,
    /// Squared analysis window, for overlap-add normalization.
    win_sq: Vec<f64>,
}

fn hann(n: usize) -> Vec<f64> {
    // periodic Hann
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

fn basis_for(cfg: StftConfig) -> Arc<Basis> {
    static CACHE: OnceLock<Mutex<BTreeMap<(usize, usize), Arc<Basis>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    let key = (cfg.fft_size, cfg.hop);
    if let Some(b) = cache.lock().unwrap().get(&key) {
        return Arc::clone(b);
    }
    let n = cfg.fft_size;
    let f_bins = cfg.bins();
    let w = hann(n);
    let mut fwd_re = vec![0.0; n * f_bins];
    let mut fwd_im = vec![0.0; n * f_bins];
    let mut inv_re = vec![0.0; f_bins * n];
    let mut inv_im = vec![0.0; f_bins * n];
    for f in 0..f_bins {
        // conjugate-symmetry weight: interior bins count twice in the inverse
        let c = if f == 0 || f == n / 2 { 1.0 } else { 2.0 };
        for t in 0..n {
            let ang = 2.0 * std::f64::consts::PI * f as f64 * t as f64 / n as f64;
            fwd_re[t * f_bins + f] = w[t] * ang.cos();
            fwd_im[t * f_bins + f] = -w[t] * ang.sin();
            inv_re[f * n + t] = w[t] * c * ang.cos() / n as f64;
            inv_im[f * n + t] = -w[t] * c * ang.sin() / n as f64;
        }
    }
    let win_sq = w.iter().map(|x| x * x).collect();
    let b = Arc::new(Basis {
        fwd_re: NDArray::new(vec![n, f_bins], fwd_re),
        fwd_im: NDArray::new(vec![n, f_bins], fwd_im),
        inv_re: NDArray::new(vec![f_bins, n], inv_re),
        inv_im: NDArray::new(vec![f_bins, n], inv_im),
        win_sq,
    });
    cache.lock().unwrap().insert(key, Arc::clone(&b));
    b
}

/// Reciprocal of the overlap-added squared window over `padded_len` samples.
fn recip_window_norm(cfg: StftConfig, n_frames: usize, padded_len: usize) -> NDArray {
    let basis = basis_for(cfg);
    let mut wsum = vec![0.0; padded_len];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, &ws) in basis.win_sq.iter().enumerate() {
            if start + i < padded_len {
                wsum[start + i] += ws;
            }
        }
    }
    let recip = wsum.iter().map(|&s| 1.0 / s.max(1e-12)).collect();
    NDArray::new(vec![padded_len], recip)
}

// ── tape-level builders ──────────────────────────────────────────────

/// Spectrogram node pair on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SpecNodes {
    pub re: NodeId,
    pub im: NodeId,
    pub frames: usize,
    pub bins: usize,
}

/// Differentiable STFT of a 1-D signal node: reflect pad, frame, window+DFT
/// as matmuls against the fixed bases.
pub fn stft_nodes(tape: &mut Tape, x: NodeId, cfg: StftConfig, len: usize) -> Result<SpecNodes> {
    cfg.validate()?;
    if tape.shape(x) != [len] {
        return Err(Error::contract(format!(
            "stft: node shape {:?} does not match declared length {len}",
            tape.shape(x)
        )));
    }
    let n = cfg.fft_size;
    let half = n / 2;
    let n_frames = cfg.n_frames(len);
    let basis = basis_for(cfg);

    // short signals reflect-pad as far as they can and zero-fill the rest
    let (left, right) = (half.min(len - 1), half.min(len - 1));
    let padded = tape.pad_reflect(x, left, right)?;
    let frames = tape.frame(padded, n, cfg.hop, n_frames)?;
    let bre = tape.constant(basis.fwd_re.clone());
    let bim = tape.constant(basis.fwd_im.clone());
    let re = tape.matmul(frames, bre)?;
    let im = tape.matmul(frames, bim)?;
    Ok(SpecNodes { re, im, frames: n_frames, bins: cfg.bins() })
}

/// Differentiable inverse STFT: synthesis matmuls, overlap-add, COLA
/// normalization, and a trim back to `target_len` samples.
pub fn istft_nodes(
    tape: &mut Tape,
    spec: SpecNodes,
    cfg: StftConfig,
    target_len: usize,
) -> Result<NodeId> {
    cfg.validate()?;
    let n = cfg.fft_size;
    let half = n / 2;
    let n_frames = spec.frames;
    let padded_len = (n_frames - 1) * cfg.hop + n;
    if half + target_len > padded_len {
        return Err(Error::contract(format!(
            "istft: target_len {target_len} exceeds synthesizable range {}",
            padded_len - half
        )));
    }
    let basis = basis_for(cfg);
    let ire = tape.constant(basis.inv_re.clone());
    let iim = tape.constant(basis.inv_im.clone());
    let fr = tape.matmul(spec.re, ire)?;
    let fi = tape.matmul(spec.im, iim)?;
    let synth = tape.add(fr, fi)?;
    let ola = tape.overlap_add(synth, cfg.hop)?;
    let norm = tape.constant(recip_window_norm(cfg, n_frames, padded_len));
    let scaled = tape.mul(ola, norm)?;
    tape.slice(scaled, half, target_len)
}

/// |S| = sqrt(re^2 + im^2 + 1e-12), differentiable at zero bins.
pub fn magnitude_nodes(tape: &mut Tape, spec: SpecNodes) -> Result<NodeId> {
    let rr = tape.mul(spec.re, spec.re)?;
    let ii = tape.mul(spec.im, spec.im)?;
    let s = tape.add(rr, ii)?;
    let se = tape.add_scalar(s, MAG_EPS)?;
    tape.sqrt(se)
}

/// The mask: |J| / (max(|J|, |X|) + eps). `jmag` and `xmag` must be T x F
/// nodes of equal shape; on |J| == |X| the adjoint goes to |J|.
pub fn build_mask_nodes(tape: &mut Tape, jmag: NodeId, xmag: NodeId, eps: f64) -> Result<NodeId> {
    if tape.shape(jmag) != tape.shape(xmag) {
        return Err(Error::contract(format!(
            "build_mask: shape mismatch {:?} vs {:?}",
            tape.shape(jmag),
            tape.shape(xmag)
        )));
    }
    if eps <= 0.0 {
        return Err(Error::config(format!("mask epsilon must be positive, got {eps}")));
    }
    let m = tape.max(jmag, xmag)?;
    let denom = tape.add_scalar(m, eps)?;
    tape.div(jmag, denom)
}

/// S_bar = mask ⊙ X: complex scaling of both planes by a real mask.
pub fn apply_mask_nodes(tape: &mut Tape, mask: NodeId, spec: SpecNodes) -> Result<SpecNodes> {
    if tape.shape(mask) != tape.shape(spec.re) {
        return Err(Error::contract(format!(
            "apply_mask: mask {:?} vs spectrogram {:?}",
            tape.shape(mask),
            tape.shape(spec.re)
        )));
    }
    let re = tape.mul(mask, spec.re)?;
    let im = tape.mul(mask, spec.im)?;
    Ok(SpecNodes { re, im, ..spec })
}

/// log(1 + mel · |STFT|) features as a [T, n_mels] node.
pub fn mel_nodes(
    tape: &mut Tape,
    x: NodeId,
    len: usize,
    sample_rate: u32,
    n_mels: usize,
    cfg: StftConfig,
) -> Result<NodeId> {
    let spec = stft_nodes(tape, x, cfg, len)?;
    let mag = magnitude_nodes(tape, spec)?;
    let fb = tape.constant(mel_filterbank(sample_rate, cfg.fft_size, n_mels)?);
    let mel = tape.matmul(mag, fb)?;
    let mel1 = tape.add_scalar(mel, 1.0)?;
    tape.log(mel1)
}

/// Triangular HTK-spaced filterbank as an [F, n_mels] matrix with
/// L1-normalized filters.
pub fn mel_filterbank(sample_rate: u32, fft_size: usize, n_mels: usize) -> Result<NDArray> {
    let f_bins = fft_size / 2 + 1;
    if n_mels < 8 {
        return Err(Error::config(format!("n_mels must be >= 8, got {n_mels}")));
    }
    if n_mels > f_bins {
        return Err(Error::config(format!(
            "n_mels {n_mels} exceeds {f_bins} frequency bins"
        )));
    }
    static CACHE: OnceLock<Mutex<BTreeMap<(u32, usize, usize), NDArray>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    let key = (sample_rate, fft_size, n_mels);
    if let Some(m) = cache.lock().unwrap().get(&key) {
        return Ok(m.clone());
    }

    let to_mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let from_mel = |m: f64| 700.0 * (10.0f64.powf(m / 2595.0) - 1.0);
    let nyquist = f64::from(sample_rate) / 2.0;
    let mel_max = to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| from_mel(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let hz_per_bin = f64::from(sample_rate) / fft_size as f64;

    let mut fb = vec![0.0; f_bins * n_mels];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut total = 0.0;
        for b in 0..f_bins {
            let hz = b as f64 * hz_per_bin;
            let v = if hz >= lo && hz <= mid && mid > lo {
                (hz - lo) / (mid - lo)
            } else if hz > mid && hz <= hi && hi > mid {
                (hi - hz) / (hi - mid)
            } else {
                0.0
            };
            fb[b * n_mels + m] = v;
            total += v;
        }
        if total > 0.0 {
            for b in 0..f_bins {
                fb[b * n_mels + m] /= total;
            }
        }
    }
    let arr = NDArray::new(vec![f_bins, n_mels], fb);
    cache.lock().unwrap().insert(key, arr.clone());
    Ok(arr)
}

// ── value-level wrappers ─────────────────────────────────────────────

pub fn stft(x: &Waveform, cfg: StftConfig) -> Result<Spectrogram> {
    let mut tape = Tape::new();
    let xn = tape.constant(NDArray::new(vec![x.len()], x.samples.clone()));
    let spec = stft_nodes(&mut tape, xn, cfg, x.len())?;
    Ok(Spectrogram {
        re: tape.forward(spec.re)?,
        im: tape.forward(spec.im)?,
        cfg,
        source_len: x.len(),
    })
}

pub fn istft(spec: &Spectrogram, target_len: usize, sample_rate: u32) -> Result<Waveform> {
    let mut tape = Tape::new();
    let re = tape.constant(spec.re.clone());
    let im = tape.constant(spec.im.clone());
    let nodes = SpecNodes { re, im, frames: spec.frames(), bins: spec.bins() };
    let y = istft_nodes(&mut tape, nodes, spec.cfg, target_len)?;
    Waveform::new(tape.forward(y)?.data().to_vec(), sample_rate)
}

pub fn build_mask(jmag: &NDArray, xmag: &NDArray, eps: f64) -> Result<Mask> {
    let mut tape = Tape::new();
    let j = tape.constant(jmag.clone());
    let x = tape.constant(xmag.clone());
    let m = build_mask_nodes(&mut tape, j, x, eps)?;
    Ok(Mask { values: tape.forward(m)?, epsilon: eps })
}

pub fn apply_mask(mask: &Mask, spec: &Spectrogram) -> Result<Spectrogram> {
    let mut tape = Tape::new();
    let m = tape.constant(mask.values.clone());
    let re = tape.constant(spec.re.clone());
    let im = tape.constant(spec.im.clone());
    let nodes = SpecNodes { re, im, frames: spec.frames(), bins: spec.bins() };
    let masked = apply_mask_nodes(&mut tape, m, nodes)?;
    Ok(Spectrogram {
        re: tape.forward(masked.re)?,
        im: tape.forward(masked.im)?,
        cfg: spec.cfg,
        source_len: spec.source_len,
    })
}

pub fn mel_spectrogram(x: &Waveform, n_mels: usize, cfg: StftConfig) -> Result<NDArray> {
    let mut tape = Tape::new();
    let xn = tape.constant(NDArray::new(vec![x.len()], x.samples.clone()));
    let mel = mel_nodes(&mut tape, xn, x.len(), x.sample_rate, n_mels, cfg)?;
    tape.forward(mel)
}
