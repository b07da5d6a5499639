//! Test-time perturbations: additive white noise at a target SNR,
//! synthetic reverberation at a target RT60, and resampling-based speed
//! change. Applied to the test split of a corpus only; training and
//! validation audio passes through untouched.
//!
//! Noise is scaled against its own realized power, so the requested SNR
//! holds exactly rather than in expectation. Reverb convolves with an
//! exponentially decaying Gaussian-noise impulse response whose envelope
//! hits −60 dB at RT60 by construction. Speed change resamples with a
//! windowed-sinc kernel (16 zero crossings per side), shifting pitch
//! together with tempo.

use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, Waveform};
use crate::dsp;
use crate::simsource::{self, CorpusManifest, SimError, Split};
use crate::util;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("cannot set an SNR on silent input")]
    SilentInput,
    #[error("bad perturbation parameter: {0}")]
    BadParam(String),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Manifest(#[from] SimError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Perturbation kind selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Noise,
    Reverb,
    Speed,
}

/// A perturbation request: one kind plus its parameter and a seed.
///
/// Parameter ranges: SNR in [0, 20] dB, RT60 in [0.1, 2.0] s, speed
/// factor in [0.8, 1.25].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rt60: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_factor: Option<f64>,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn noise(snr_db: f64, seed: u64) -> Self {
        Self { kind: PerturbKind::Noise, snr_db: Some(snr_db), rt60: None, speed_factor: None, seed }
    }

    pub fn reverb(rt60: f64, seed: u64) -> Self {
        Self { kind: PerturbKind::Reverb, snr_db: None, rt60: Some(rt60), speed_factor: None, seed }
    }

    pub fn speed(factor: f64, seed: u64) -> Self {
        Self { kind: PerturbKind::Speed, snr_db: None, rt60: None, speed_factor: Some(factor), seed }
    }

    /// Checks that the parameter for the selected kind is present and in
    /// range, returning it.
    pub fn param(&self) -> Result<f64, PerturbError> {
        match self.kind {
            PerturbKind::Noise => {
                let v = self.snr_db.ok_or_else(|| PerturbError::BadParam("noise needs snr_db".into()))?;
                if !(0.0..=20.0).contains(&v) {
                    return Err(PerturbError::BadParam(format!("snr_db {v} outside [0, 20]")));
                }
                Ok(v)
            }
            PerturbKind::Reverb => {
                let v = self.rt60.ok_or_else(|| PerturbError::BadParam("reverb needs rt60".into()))?;
                if !(0.1..=2.0).contains(&v) {
                    return Err(PerturbError::BadParam(format!("rt60 {v} outside [0.1, 2.0]")));
                }
                Ok(v)
            }
            PerturbKind::Speed => {
                let v = self
                    .speed_factor
                    .ok_or_else(|| PerturbError::BadParam("speed needs speed_factor".into()))?;
                if !(0.8..=1.25).contains(&v) {
                    return Err(PerturbError::BadParam(format!("speed_factor {v} outside [0.8, 1.25]")));
                }
                Ok(v)
            }
        }
    }

    /// Short tag used in file names and reports, e.g. "noise10.0dB".
    pub fn tag(&self) -> String {
        match (self.kind, self.snr_db, self.rt60, self.speed_factor) {
            (PerturbKind::Noise, Some(v), _, _) => format!("noise{v}dB"),
            (PerturbKind::Reverb, _, Some(v), _) => format!("reverb{v}s"),
            (PerturbKind::Speed, _, _, Some(v)) => format!("speed{v}x"),
            _ => "invalid".into(),
        }
    }
}

/// Adds Gaussian white noise at exactly `snr_db` below the signal power.
///
/// The noise vector is rescaled by its own realized power, so the SNR
/// holds by construction, not just in expectation.
pub fn add_noise(w: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform, PerturbError> {
    let p_signal = w.power();
    if p_signal <= 0.0 {
        return Err(PerturbError::SilentInput);
    }
    let p_target = p_signal / 10f64.powf(snr_db / 10.0);
    let mut rng = util::rng_for(seed, "white-noise");
    let mut noise: Vec<f64> = (0..w.len()).map(|_| util::normal(&mut rng)).collect();
    let realized = audio::mean_square(&noise);
    let scale = (p_target / realized).sqrt();
    for n in &mut noise {
        *n *= scale;
    }
    let out: Vec<f64> = w.samples().iter().zip(&noise).map(|(&s, &n)| s + n).collect();
    Ok(Waveform::new(out, w.sample_rate())?)
}

/// Synthesizes a room impulse response: a unit direct-path tap followed
/// by a Gaussian tail decaying so the envelope reaches −60 dB at RT60.
///
/// h[0] = 1; h[n] = g[n]·10^(−3n/(rt60·fs)) for n ≥ 1, g ~ N(0,1);
/// length = ceil(rt60·fs).
pub fn make_rir(rt60: f64, fs: u32, seed: u64) -> Result<Vec<f64>, PerturbError> {
    if !(0.1..=2.0).contains(&rt60) {
        return Err(PerturbError::BadParam(format!("rt60 {rt60} outside [0.1, 2.0]")));
    }
    let decay_samples = rt60 * f64::from(fs);
    let len = decay_samples.ceil() as usize;
    let mut rng = util::rng_for(seed, "rir");
    let mut h = Vec::with_capacity(len);
    h.push(1.0);
    for n in 1..len {
        let envelope = 10f64.powf(-3.0 * n as f64 / decay_samples);
        h.push(util::normal(&mut rng) * envelope);
    }
    Ok(h)
}

/// Full linear convolution via FFT; output length is x.len()+h.len()−1.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut xr = vec![0.0; n];
    let mut xi = vec![0.0; n];
    let mut hr = vec![0.0; n];
    let mut hi = vec![0.0; n];
    xr[..x.len()].copy_from_slice(x);
    hr[..h.len()].copy_from_slice(h);
    dsp::fft_in_place(&mut xr, &mut xi);
    dsp::fft_in_place(&mut hr, &mut hi);
    // Pointwise product, then inverse transform via conjugation.
    for k in 0..n {
        let re = xr[k] * hr[k] - xi[k] * hi[k];
        let im = xr[k] * hi[k] + xi[k] * hr[k];
        xr[k] = re;
        xi[k] = -im;
    }
    dsp::fft_in_place(&mut xr, &mut xi);
    let scale = 1.0 / n as f64;
    (0..out_len).map(|i| xr[i] * scale).collect()
}

/// Convolves with a synthetic RIR, truncates to the input length, and
/// restores the input's peak level.
pub fn add_reverb(w: &Waveform, rt60: f64, seed: u64) -> Result<Waveform, PerturbError> {
    let h = make_rir(rt60, w.sample_rate(), seed)?;
    let full = convolve(w.samples(), &h);
    let mut out: Vec<f64> = full[..w.len()].to_vec();
    let peak_in = w.samples().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let peak_out = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak_out > 0.0 && peak_in > 0.0 {
        let scale = peak_in / peak_out;
        for v in &mut out {
            *v *= scale;
        }
    }
    Ok(Waveform::new(out, w.sample_rate())?)
}

/// Normalized sinc, sin(πx)/(πx).
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resampling-based speed change: output sample i is interpolated at
/// input position i·factor, so pitch shifts together with tempo.
///
/// Kernel: sinc lowpassed at cutoff min(1, 1/factor), Hann-windowed over
/// 16 zero crossings each side, normalized by the realized weight sum so
/// DC gain is exactly one even at the edges.
pub fn adjust_speed(w: &Waveform, factor: f64) -> Result<Waveform, PerturbError> {
    if !(0.8..=1.25).contains(&factor) {
        return Err(PerturbError::BadParam(format!("speed_factor {factor} outside [0.8, 1.25]")));
    }
    let x = w.samples();
    let n = x.len();
    let out_len = (n as f64 / factor).round() as usize;
    let cutoff = (1.0 / factor).min(1.0);
    let half_width = 16.0 / cutoff;

    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let t = i as f64 * factor;
        let lo = ((t - half_width).ceil() as isize).max(0) as usize;
        let hi = ((t + half_width).floor() as isize).min(n as isize - 1) as usize;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (k, &xv) in x[lo..=hi].iter().enumerate() {
            let u = (lo + k) as f64 - t;
            let window = 0.5 + 0.5 * (std::f64::consts::PI * u / half_width).cos();
            let wgt = cutoff * sinc(cutoff * u) * window;
            acc += wgt * xv;
            wsum += wgt;
        }
        out.push(if wsum.abs() > 1e-12 { acc / wsum } else { 0.0 });
    }
    Ok(Waveform::new(out, w.sample_rate())?)
}

/// Applies `spec` to one waveform with an explicit seed (the per-entry
/// seed when perturbing a manifest).
pub fn apply(w: &Waveform, spec: &PerturbSpec, seed: u64) -> Result<Waveform, PerturbError> {
    let param = spec.param()?;
    match spec.kind {
        PerturbKind::Noise => add_noise(w, param, seed),
        PerturbKind::Reverb => add_reverb(w, param, seed),
        PerturbKind::Speed => adjust_speed(w, param),
    }
}

/// Expresses `target` relative to `base_dir` (both need not share a
/// prefix; falls back to the absolute path when no relative form
/// exists, e.g. different roots).
fn relative_to(base_dir: &Path, target: &Path) -> PathBuf {
    let base: Vec<Component> = base_dir.components().collect();
    let tgt: Vec<Component> = target.components().collect();
    let common = base.iter().zip(&tgt).take_while(|(a, b)| a == b).count();
    if common == 0 {
        return target.to_path_buf();
    }
    let mut rel = PathBuf::new();
    for _ in common..base.len() {
        rel.push("..");
    }
    for c in &tgt[common..] {
        rel.push(c);
    }
    rel
}

/// Perturbs the test split of a corpus: perturbed WAVs are written under
/// `out_dir/wavs`, the returned manifest points test entries there and
/// leaves train/val entries at their original audio (paths rewritten
/// relative to `out_dir`). Per-entry seeds derive from (spec.seed,
/// utterance_id), so order of processing never matters.
pub fn perturb_manifest(
    manifest: &CorpusManifest,
    manifest_dir: &Path,
    spec: &PerturbSpec,
    out_dir: &Path,
) -> Result<CorpusManifest, PerturbError> {
    spec.param()?;
    let wav_dir = out_dir.join("wavs");
    fs::create_dir_all(&wav_dir)?;
    let manifest_dir = manifest_dir.canonicalize()?;
    let out_abs = out_dir.canonicalize()?;

    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let src = manifest_dir.join(&e.path);
        let mut entry = e.clone();
        if e.split == Split::Test {
            let seed = util::derive_seed(spec.seed, &format!("perturb/{}", e.utterance_id));
            let w = audio::read_wav(&src)?;
            let out = apply(&w, spec, seed)?;
            let rel = format!("wavs/{}.wav", e.utterance_id);
            audio::write_wav(&out, out_dir.join(&rel))?;
            entry.path = rel;
        } else {
            let src = src.canonicalize()?;
            entry.path = relative_to(&out_abs, &src).to_string_lossy().into_owned();
        }
        entries.push(entry);
    }
    let result = CorpusManifest { seed: manifest.seed, entries };
    simsource::write_manifest(&result, out_dir.join("manifest.jsonl"))?;
    Ok(result)
}
