//! Simulated synthesis pipelines and corpus generation.
//!
//! Real TTS stacks are replaced by additive residual models: every
//! simulated acoustic model or vocoder owns a `ResidualSignature` (a
//! short FIR coloration, a comb echo, and Gaussian noise) that it stamps
//! onto a base utterance. The family tag derives the FIR prototype: 16
//! random taps under an exponential decay window, orthogonalized across
//! the canonical families of the same kind so no two families share
//! their coloration direction, then scaled to a fixed L2 norm. The
//! instance seed jitters each tap by at most ±10%, picks the comb period
//! (8 plus instance seed mod 7 samples, so instance 0 of every family
//! shares one period), and scales the comb depth by at most ±25%.
//! Same-family instances therefore share their dominant envelope while
//! remaining individually identifiable through comb placement and
//! depth. Vocoder residuals default to more than twice the acoustic
//! gain and are applied last, so the vocoder's imprint dominates.
//!
//! Base utterances are deterministic pseudo-speech: a pitch-modulated
//! harmonic series with formant-like emphases, pause gating, and breath
//! noise, synthesized by a bank of complex oscillators advanced in 10 ms
//! blocks. Nothing here aims for intelligibility; the corpus exists to
//! carry fingerprints.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, Waveform, CANONICAL_SAMPLE_RATE};
use crate::util;

/// Default residual gain for vocoder sources.
pub const VOCODER_RESIDUAL_GAIN: f64 = 0.05;
/// Default comb gain for vocoder sources.
pub const VOCODER_COMB_GAIN: f64 = 0.020;
/// Default residual gain for acoustic-model sources (vocoders dominate
/// by construction: at least 2x this value).
pub const ACOUSTIC_RESIDUAL_GAIN: f64 = 0.015;
/// Default comb gain for acoustic-model sources.
pub const ACOUSTIC_COMB_GAIN: f64 = 0.006;
/// Default std-dev of the Gaussian part of every residual.
pub const RESIDUAL_NOISE_SIGMA: f64 = 2e-4;

/// FIR length of every residual signature.
pub const FIR_LEN: usize = 16;

/// L2 norm of every family's FIR prototype. Together with the residual
/// gain cap this keeps the residual-to-signal energy ratio inside its
/// contract band while maximizing the learnable coloration contrast.
pub const TAP_NORM: f64 = 1.4;

/// Canonical families per kind, in prototype-orthogonalization order.
const VOCODER_FAMILY_ORDER: [&str; 4] = ["P", "H", "M", "S"];
const ACOUSTIC_FAMILY_ORDER: [&str; 3] = ["F2", "GD", "T2"];

const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("duration {0} s out of range [1.0, 10.0]")]
    BadDuration(f64),
    #[error("invalid signature: {0}")]
    BadSignature(String),
    #[error("duplicate pipeline {0} in one split")]
    DuplicatePipeline(String),
    #[error("empty pipeline list for split {0}")]
    EmptySplit(Split),
    #[error("manifest error: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Which synthesis stage a source simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    AcousticModel,
    Vocoder,
}

/// The residual a source adds: FIR coloration + comb echo + noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSignature {
    pub fir_taps: [f64; FIR_LEN],
    pub comb_period: usize,
    pub comb_gain: f64,
    pub residual_gain: f64,
    pub noise_sigma: f64,
}

impl ResidualSignature {
    fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=0.05).contains(&self.comb_gain) {
            return Err(SimError::BadSignature(format!("comb_gain {} outside [0, 0.05]", self.comb_gain)));
        }
        if !(0.001..=0.05).contains(&self.residual_gain) {
            return Err(SimError::BadSignature(format!(
                "residual_gain {} outside [0.001, 0.05]",
                self.residual_gain
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(SimError::BadSignature(format!("noise_sigma {}", self.noise_sigma)));
        }
        if self.comb_period == 0 {
            return Err(SimError::BadSignature("comb_period must be positive".into()));
        }
        Ok(())
    }
}

/// One simulated source: a (kind, family, instance) identity plus the
/// signature derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    kind: SourceKind,
    family: String,
    instance_seed: u64,
    signature: ResidualSignature,
}

fn normalize_taps(taps: &mut [f64; FIR_LEN], target: f64) {
    let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    for t in taps.iter_mut() {
        *t *= target / norm;
    }
}

/// Decay-windowed random taps for one family, unit L2. The decay window
/// concentrates tap energy early, keeping the spectral envelope smooth
/// across frequency.
fn raw_family_taps(kind_tag: &str, family: &str) -> [f64; FIR_LEN] {
    let family_seed = util::fnv1a64(format!("{kind_tag}/{family}").as_bytes());
    let mut proto_rng = util::rng_for(family_seed, "fir-prototype");
    let mut taps = [0.0f64; FIR_LEN];
    for (k, t) in taps.iter_mut().enumerate() {
        *t = util::normal(&mut proto_rng) * (-(k as f64) / 3.0).exp();
    }
    normalize_taps(&mut taps, 1.0);
    taps
}

fn project_out(taps: &mut [f64; FIR_LEN], basis: &[f64; FIR_LEN]) {
    let dot: f64 = taps.iter().zip(basis).map(|(a, b)| a * b).sum();
    for (t, b) in taps.iter_mut().zip(basis) {
        *t -= dot * b;
    }
}

/// The family's FIR prototype at norm `TAP_NORM`. Canonical families of
/// one kind are Gram-Schmidt orthogonalized in a fixed order, so every
/// pair of families is equally distant and no pair lands close by
/// chance; unknown families keep their raw direction.
fn family_prototype(kind_tag: &str, order: &[&str], family: &str) -> [f64; FIR_LEN] {
    let mut taps = raw_family_taps(kind_tag, family);
    if let Some(pos) = order.iter().position(|f| *f == family) {
        let mut basis: Vec<[f64; FIR_LEN]> = Vec::new();
        for prev in &order[..pos] {
            let mut p = raw_family_taps(kind_tag, prev);
            for b in &basis {
                project_out(&mut p, b);
            }
            normalize_taps(&mut p, 1.0);
            basis.push(p);
        }
        for b in &basis {
            project_out(&mut taps, b);
        }
        normalize_taps(&mut taps, 1.0);
    }
    for t in taps.iter_mut() {
        *t *= TAP_NORM;
    }
    taps
}

impl SourceSpec {
    /// Builds a source whose signature is fully determined by its
    /// identity: the family fixes the FIR prototype (decay-windowed
    /// random taps, orthogonalized across canonical families, fixed L2
    /// norm, so colorations are spectrally smooth and maximally
    /// distinct); the instance seed jitters each tap by at most ±10%,
    /// selects the comb period as 8 + seed mod 7 samples, and scales the
    /// comb depth by at most ±25%. Same-family instances therefore share
    /// their dominant envelope but remain individually identifiable.
    pub fn new(kind: SourceKind, family: impl Into<String>, instance_seed: u64) -> Result<Self, SimError> {
        let family = family.into();
        if family.is_empty() || !family.chars().all(|c| c.is_ascii_alphanumeric()) {
            return Err(SimError::BadSignature(format!(
                "family tag {family:?} must be nonempty ASCII alphanumeric"
            )));
        }
        let (kind_tag, order): (&str, &[&str]) = match kind {
            SourceKind::AcousticModel => ("acoustic", &ACOUSTIC_FAMILY_ORDER),
            SourceKind::Vocoder => ("vocoder", &VOCODER_FAMILY_ORDER),
        };
        let family_seed = util::fnv1a64(format!("{kind_tag}/{family}").as_bytes());
        let mut taps = family_prototype(kind_tag, order, &family);
        let mut inst_rng = util::rng_for(family_seed, &format!("instance-{instance_seed}"));
        for t in taps.iter_mut() {
            *t *= 1.0 + 0.1 * util::uniform_in(&mut inst_rng, -1.0, 1.0);
        }
        let comb_depth_scale = 1.0 + 0.25 * util::uniform_in(&mut inst_rng, -1.0, 1.0);

        // Short instance-determined periods keep the comb's spectral
        // ripples wider than one filterbank band, so instances separate,
        // while instance 0 of every family shares one period.
        let comb_period = 8 + (instance_seed % 7) as usize;
        let (residual_gain, comb_gain) = match kind {
            SourceKind::Vocoder => (VOCODER_RESIDUAL_GAIN, VOCODER_COMB_GAIN),
            SourceKind::AcousticModel => (ACOUSTIC_RESIDUAL_GAIN, ACOUSTIC_COMB_GAIN),
        };
        let comb_gain = comb_gain * comb_depth_scale;
        let signature = ResidualSignature {
            fir_taps: taps,
            comb_period,
            comb_gain,
            residual_gain,
            noise_sigma: RESIDUAL_NOISE_SIGMA,
        };
        signature.validate()?;
        Ok(Self { kind, family, instance_seed, signature })
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn family(&self) -> &str {
        &self.family
    }

    pub fn instance_seed(&self) -> u64 {
        self.instance_seed
    }

    pub fn signature(&self) -> &ResidualSignature {
        &self.signature
    }

    /// Short identifier used in labels and file names: family plus
    /// instance number, e.g. "P0"; plain family for instance 0 of an
    /// acoustic model, e.g. "T2".
    pub fn id(&self) -> String {
        match self.kind {
            SourceKind::Vocoder => format!("{}{}", self.family, self.instance_seed),
            SourceKind::AcousticModel => {
                if self.instance_seed == 0 {
                    self.family.clone()
                } else {
                    format!("{}-{}", self.family, self.instance_seed)
                }
            }
        }
    }
}

/// Corpus split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One synthesis pipeline: optional acoustic stage, then a vocoder.
/// `acoustic: None` models copy synthesis (vocoder resynthesizing real
/// audio), labeled "COPY" in manifests.
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub acoustic: Option<SourceSpec>,
    pub vocoder: SourceSpec,
}

impl PipelineSpec {
    pub fn acoustic_id(&self) -> String {
        self.acoustic.as_ref().map_or_else(|| "COPY".to_string(), SourceSpec::id)
    }

    pub fn id(&self) -> String {
        format!("{}+{}", self.acoustic_id(), self.vocoder.id())
    }
}

/// The pipelines sampled for one split and how many utterances each
/// pipeline contributes.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub pipelines: Vec<PipelineSpec>,
    pub n_per_source: usize,
}

/// Everything corpus synthesis needs.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub seed: u64,
    pub duration_secs: f64,
    pub train: SplitPlan,
    pub val: SplitPlan,
    pub test: SplitPlan,
}

impl CorpusSpec {
    pub fn plan(&self, split: Split) -> &SplitPlan {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    /// WAV path relative to the manifest's directory.
    pub path: String,
    pub acoustic_label: String,
    pub vocoder_label: String,
    pub split: Split,
}

/// Corpus manifest: the global seed plus one entry per utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
    seed: u64,
}

/// Writes a manifest as JSON lines: a header object followed by one
/// object per entry, in entry order.
pub fn write_manifest(m: &CorpusManifest, path: impl AsRef<Path>) -> Result<(), SimError> {
    let mut out = io::BufWriter::new(fs::File::create(path.as_ref())?);
    let header = ManifestHeader { schema_version: MANIFEST_SCHEMA_VERSION, seed: m.seed };
    serde_json::to_writer(&mut out, &header).map_err(|e| SimError::BadManifest(e.to_string()))?;
    out.write_all(b"\n")?;
    for e in &m.entries {
        serde_json::to_writer(&mut out, e).map_err(|e| SimError::BadManifest(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a manifest and validates split disjointness by utterance id.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest, SimError> {
    let file = io::BufReader::new(fs::File::open(path.as_ref())?);
    let mut lines = file.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| SimError::BadManifest("empty manifest".into()))??;
    let header: ManifestHeader = serde_json::from_str(&header_line)
        .map_err(|e| SimError::BadManifest(format!("bad header: {e}")))?;
    if header.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(SimError::BadManifest(format!(
            "unsupported schema version {}",
            header.schema_version
        )));
    }
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| SimError::BadManifest(format!("bad entry: {e}")))?;
        if !seen.insert(entry.utterance_id.clone()) {
            return Err(SimError::BadManifest(format!(
                "utterance_id {} appears more than once",
                entry.utterance_id
            )));
        }
        entries.push(entry);
    }
    Ok(CorpusManifest { seed: header.seed, entries })
}

/// Deterministic pseudo-speech at 24 kHz.
///
/// A bank of harmonic oscillators follows a vibrato- and drift-modulated
/// pitch track; amplitudes carry three formant-like bumps and a gentle
/// spectral rolloff so every analysis band sees energy. Voiced segments
/// alternate with shallow pauses through raised-cosine ramps, and a low
/// level of breath noise fills the gaps between harmonics. Utterance
/// parameters are drawn from deliberately narrow ranges and the result
/// is normalized to a fixed RMS (peak capped at 0.9): across-utterance
/// spectral variance must stay small against source residuals, which
/// sit 20 to 40 dB below the content.
pub fn make_base_utterance(seed: u64, duration_secs: f64) -> Result<Waveform, SimError> {
    if !(1.0..=10.0).contains(&duration_secs) {
        return Err(SimError::BadDuration(duration_secs));
    }
    let fs = f64::from(CANONICAL_SAMPLE_RATE);
    let n = (duration_secs * fs).round() as usize;

    // Narrow parameter ranges plus a wide vibrato: each utterance sweeps
    // its harmonics across the same filterbank neighborhoods, so
    // time-averaged spectra concentrate tightly around a shared profile
    // and source residuals stay the dominant across-utterance contrast.
    let mut params = util::rng_for(seed, "base/params");
    let f0_base = util::uniform_in(&mut params, 124.0, 132.0);
    let vib_rate = util::uniform_in(&mut params, 5.0, 6.0);
    let vib_depth = util::uniform_in(&mut params, 0.04, 0.05);
    let vib_phase = util::uniform_in(&mut params, 0.0, std::f64::consts::TAU);

    // Formant-like emphases: (center Hz, width Hz, gain).
    let formants = [
        (
            util::uniform_in(&mut params, 585.0, 615.0),
            util::uniform_in(&mut params, 175.0, 185.0),
            util::uniform_in(&mut params, 1.9, 2.1),
        ),
        (
            util::uniform_in(&mut params, 1680.0, 1720.0),
            util::uniform_in(&mut params, 250.0, 260.0),
            util::uniform_in(&mut params, 1.3, 1.5),
        ),
        (
            util::uniform_in(&mut params, 2960.0, 3040.0),
            util::uniform_in(&mut params, 310.0, 330.0),
            util::uniform_in(&mut params, 0.9, 1.1),
        ),
    ];

    // Harmonics up to ~10.5 kHz; drift never pushes them past Nyquist.
    let n_harm = ((10_500.0 / f0_base).floor() as usize).clamp(8, 120);
    let mut amps = Vec::with_capacity(n_harm);
    let mut osc: Vec<(f64, f64)> = Vec::with_capacity(n_harm);
    for h in 1..=n_harm {
        let f = h as f64 * f0_base;
        let mut boost = 1.0;
        for &(fc, bw, g) in &formants {
            let d = (f - fc) / bw;
            boost += g * (-0.5 * d * d).exp();
        }
        amps.push((h as f64).powf(-0.35) * boost);
        let phase = util::uniform_in(&mut params, 0.0, std::f64::consts::TAU);
        osc.push((phase.cos(), phase.sin()));
    }

    // Breath noise keeps every analysis band, including those above the
    // highest harmonic, well above digital silence.
    let breath_gain = util::uniform_in(&mut params, 0.053, 0.055);

    // Segment plan: voiced stretches with per-segment level jitter,
    // separated by shallow pauses.
    let mut level = vec![0.0f64; n];
    {
        let mut pos = 0usize;
        let mut voiced = true;
        let mut seg_levels: Vec<(usize, f64)> = Vec::new(); // (start, level)
        while pos < n {
            let (len_s, lvl) = if voiced {
                let db = util::uniform_in(&mut params, -0.25, 0.25);
                (util::uniform_in(&mut params, 0.30, 0.34), 10f64.powf(db / 20.0))
            } else {
                (util::uniform_in(&mut params, 0.09, 0.11), 0.35)
            };
            seg_levels.push((pos, lvl));
            pos += (len_s * fs).round() as usize;
            voiced = !voiced;
        }
        // Paint levels, then smooth each boundary with a 20 ms ramp.
        for (i, &(start, lvl)) in seg_levels.iter().enumerate() {
            let end = seg_levels.get(i + 1).map_or(n, |s| s.0).min(n);
            level[start..end].fill(lvl);
        }
        let ramp = 480usize;
        for &(start, lvl) in seg_levels.iter().skip(1) {
            if start >= n {
                break;
            }
            // Segments are all longer than the ramp, so level[start−1]
            // still holds the previous segment's plateau.
            let prev = level[start - 1];
            for j in 0..ramp.min(n - start) {
                let w = 0.5 - 0.5 * (std::f64::consts::PI * j as f64 / ramp as f64).cos();
                level[start + j] = prev + (lvl - prev) * w;
            }
        }
    }

    let mut drift_rng = util::rng_for(seed, "base/drift");
    let mut noise_rng = util::rng_for(seed, "base/noise");

    let block = 240usize;
    let mut x = vec![0.0f64; n];
    let mut drift = 0.0f64;
    let mut b0 = 0usize;
    while b0 < n {
        let b1 = (b0 + block).min(n);
        drift = (drift + 0.002 * util::normal(&mut drift_rng)).clamp(-0.03, 0.03);
        let t = b0 as f64 / fs;
        let vib = vib_depth * (std::f64::consts::TAU * vib_rate * t + vib_phase).sin();
        let f0 = f0_base * (1.0 + drift) * (1.0 + vib);

        for (h, ((c0, s0), &a)) in osc.iter_mut().zip(&amps).enumerate() {
            let fh = (h + 1) as f64 * f0;
            if fh >= 11_800.0 {
                continue;
            }
            let ang = std::f64::consts::TAU * fh / fs;
            let (dc, ds) = (ang.cos(), ang.sin());
            let (mut c, mut s) = (*c0, *s0);
            for xi in &mut x[b0..b1] {
                let nc = c * dc - s * ds;
                s = c * ds + s * dc;
                c = nc;
                *xi += a * s;
            }
            // Keep the oscillator on the unit circle.
            let mag = (c * c + s * s).sqrt();
            *c0 = c / mag;
            *s0 = s / mag;
        }
        b0 = b1;
    }

    for i in 0..n {
        x[i] = x[i] * level[i] + breath_gain * level[i] * util::normal(&mut noise_rng);
    }

    // Fixed loudness: RMS normalization keeps the energy coefficient of
    // the feature matrix constant across utterances, where peak
    // normalization would let it wander with phase alignment.
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        let mut scale = 0.12 / rms;
        let peak = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if peak * scale > 0.9 {
            scale = 0.9 / peak;
        }
        for v in &mut x {
            *v *= scale;
        }
    }
    Ok(Waveform::new(x, CANONICAL_SAMPLE_RATE)?)
}

/// Stamps a source's residual onto a waveform:
/// out = w + g·FIR(w) + c·w[n−T] + noise, clamped to [-1, 1].
pub fn apply_source(w: &Waveform, s: &SourceSpec, rng_seed: u64) -> Result<Waveform, SimError> {
    s.signature.validate()?;
    let sig = &s.signature;
    let x = w.samples();
    let n = x.len();
    let mut out = Vec::with_capacity(n);

    for i in 0..n {
        let mut fir = 0.0;
        let top = i.min(FIR_LEN - 1);
        for (k, &tap) in sig.fir_taps[..=top].iter().enumerate() {
            fir += tap * x[i - k];
        }
        let comb = if i >= sig.comb_period { x[i - sig.comb_period] } else { 0.0 };
        out.push(x[i] + sig.residual_gain * fir + sig.comb_gain * comb);
    }
    if sig.noise_sigma > 0.0 {
        let mut rng = util::rng_for(rng_seed, "source-noise");
        for v in &mut out {
            *v += sig.noise_sigma * util::normal(&mut rng);
        }
    }
    for v in &mut out {
        *v = v.clamp(-1.0, 1.0);
    }
    let mut result = Waveform::new(out, w.sample_rate())?;
    if let Some(id) = w.source_id() {
        result = result.with_source_id(format!("{id}+{}", s.id()));
    } else {
        result = result.with_source_id(s.id());
    }
    Ok(result)
}

/// Seed for an utterance's base waveform. Depends only on the corpus
/// seed, split, and index, so every pipeline in a split shares base
/// content while splits stay disjoint.
fn base_seed(corpus_seed: u64, split: Split, index: usize) -> u64 {
    util::derive_seed(corpus_seed, &format!("base/{split}/{index}"))
}

/// Seed for a residual-noise stream. Depends on the utterance id and
/// stage, so generation order never matters.
fn stage_seed(corpus_seed: u64, utterance_id: &str, stage: &str) -> u64 {
    util::derive_seed(corpus_seed, &format!("stage/{utterance_id}/{stage}"))
}

/// Synthesizes a full corpus under `out_dir`: WAVs in `wavs/`, manifest
/// at `manifest.jsonl` with paths relative to `out_dir`.
///
/// Within a split, all pipelines voice the same base utterances, so
/// classifiers can only succeed on residuals, not content. The acoustic
/// residual is applied before the vocoder residual, always.
pub fn synth_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<CorpusManifest, SimError> {
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wavs");
    fs::create_dir_all(&wav_dir)?;

    for split in Split::ALL {
        let plan = spec.plan(split);
        if plan.pipelines.is_empty() || plan.n_per_source == 0 {
            return Err(SimError::EmptySplit(split));
        }
        let mut seen = BTreeSet::new();
        for p in &plan.pipelines {
            if !seen.insert(p.id()) {
                return Err(SimError::DuplicatePipeline(p.id()));
            }
        }
    }

    let mut entries = Vec::new();
    for split in Split::ALL {
        let plan = spec.plan(split);
        for i in 0..plan.n_per_source {
            let base = make_base_utterance(base_seed(spec.seed, split, i), spec.duration_secs)?;
            for pipeline in &plan.pipelines {
                let utterance_id =
                    format!("{split}_{i:04}_{}_{}", pipeline.acoustic_id(), pipeline.vocoder.id());
                let mut w = base.clone();
                if let Some(ac) = &pipeline.acoustic {
                    w = apply_source(&w, ac, stage_seed(spec.seed, &utterance_id, "acoustic"))?;
                }
                w = apply_source(&w, &pipeline.vocoder, stage_seed(spec.seed, &utterance_id, "vocoder"))?;

                let rel_path = format!("wavs/{utterance_id}.wav");
                audio::write_wav(&w, out_dir.join(&rel_path))?;
                entries.push(ManifestEntry {
                    utterance_id,
                    path: rel_path,
                    acoustic_label: pipeline.acoustic_id(),
                    vocoder_label: pipeline.vocoder.id(),
                    split,
                });
            }
        }
    }

    let manifest = CorpusManifest { seed: spec.seed, entries };
    write_manifest(&manifest, out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
