//! Mono PCM WAV input/output and the canonical in-memory waveform.
//!
//! Only RIFF/WAVE with format tag 1 (PCM), 16-bit, single channel is
//! supported; the experiment pipeline standardizes on 24 kHz. Samples are
//! held as f64 so downstream DSP never loses precision to the container
//! format. Values outside [-1, 1] are legal in memory (noise and reverb
//! can overshoot) and are clamped only when writing to disk.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Canonical sample rate for the experiment pipeline.
pub const CANONICAL_SAMPLE_RATE: u32 = 24_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed WAV: {0}")]
    Format(String),
    #[error("unsupported WAV: {0}")]
    Unsupported(String),
    #[error("audio has zero samples")]
    EmptyAudio,
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
}

/// Mono audio: finite f64 samples at a fixed sample rate.
///
/// Invariants (enforced at construction): at least one sample, every
/// sample finite, sample rate positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
    source_id: Option<String>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::EmptyAudio);
        }
        if sample_rate == 0 {
            return Err(AudioError::InvalidSampleRate(sample_rate));
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite { index });
        }
        Ok(Self { samples, sample_rate, source_id: None })
    }

    /// Attaches a label identifying where this waveform came from.
    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = Some(id.into());
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_id(&self) -> Option<&str> {
        self.source_id.as_deref()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false: emptiness is rejected at construction.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean-square power, (1/N)·Σ s².
    pub fn power(&self) -> f64 {
        let sum: f64 = self.samples.iter().map(|s| s * s).sum();
        sum / self.samples.len() as f64
    }
}

/// Mean-square power of a sample slice. Zero for an empty slice.
pub fn mean_square(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), AudioError> {
    r.read_exact(buf)
        .map_err(|_| AudioError::Format(format!("truncated while reading {what}")))
}

fn u16_le(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Reads a PCM 16-bit mono WAV file.
///
/// Unknown RIFF chunks are skipped (with word-alignment padding); the fmt
/// chunk must precede data. Sample values are int16 divided by 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let mut file = io::BufReader::new(fs::File::open(path.as_ref())?);

    let mut riff = [0u8; 12];
    read_exact_or_format(&mut file, &mut riff, "RIFF header")?;
    if &riff[0..4] != b"RIFF" || &riff[8..12] != b"WAVE" {
        return Err(AudioError::Format("missing RIFF/WAVE signature".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // tag, channels, rate, bits
    loop {
        let mut head = [0u8; 8];
        if file.read_exact(&mut head).is_err() {
            return Err(AudioError::Format("no data chunk".into()));
        }
        let id = &head[0..4];
        let size = u32_le(&head[4..8]) as usize;
        if id == b"fmt " {
            if size < 16 {
                return Err(AudioError::Format("fmt chunk too short".into()));
            }
            let mut body = vec![0u8; size];
            read_exact_or_format(&mut file, &mut body, "fmt chunk")?;
            fmt = Some((u16_le(&body[0..2]), u16_le(&body[2..4]), u32_le(&body[4..8]), u16_le(&body[14..16])));
        } else if id == b"data" {
            let (tag, channels, rate, bits) =
                fmt.ok_or_else(|| AudioError::Format("data chunk before fmt".into()))?;
            if tag != 1 {
                return Err(AudioError::Unsupported(format!("format tag {tag}, only PCM (1) supported")));
            }
            if channels != 1 {
                return Err(AudioError::Unsupported(format!("{channels} channels, only mono supported")));
            }
            if bits != 16 {
                return Err(AudioError::Unsupported(format!("{bits}-bit samples, only 16-bit supported")));
            }
            if size % 2 != 0 {
                return Err(AudioError::Format("data chunk length is odd".into()));
            }
            let mut payload = vec![0u8; size];
            read_exact_or_format(&mut file, &mut payload, "data payload")?;
            let samples: Vec<f64> = payload
                .chunks_exact(2)
                .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0)
                .collect();
            if samples.is_empty() {
                return Err(AudioError::EmptyAudio);
            }
            if rate == 0 {
                return Err(AudioError::InvalidSampleRate(rate));
            }
            return Waveform::new(samples, rate);
        } else {
            // Skip unknown chunk plus its alignment pad byte.
            let skip = size + (size & 1);
            let mut remaining = skip;
            let mut scratch = [0u8; 512];
            while remaining > 0 {
                let take = remaining.min(scratch.len());
                read_exact_or_format(&mut file, &mut scratch[..take], "chunk body")?;
                remaining -= take;
            }
        }
    }
}

/// Writes a waveform as PCM 16-bit mono.
///
/// Samples are scaled by 32768, rounded, and clamped to the int16 range;
/// the number of clamped samples is reported through `log::warn`.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let mut clamped = 0usize;
    let mut payload = Vec::with_capacity(w.len() * 2);
    for &s in w.samples() {
        let scaled = (s * 32768.0).round();
        let v = if scaled > f64::from(i16::MAX) {
            clamped += 1;
            i16::MAX
        } else if scaled < f64::from(i16::MIN) {
            clamped += 1;
            i16::MIN
        } else {
            scaled as i16
        };
        payload.extend_from_slice(&v.to_le_bytes());
    }
    if clamped > 0 {
        log::warn!("write_wav: clamped {clamped} of {} samples to [-1, 1]", w.len());
    }

    let data_len = payload.len() as u32;
    let mut out = io::BufWriter::new(fs::File::create(path.as_ref())?);
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // PCM
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&w.sample_rate().to_le_bytes())?;
    out.write_all(&(w.sample_rate() * 2).to_le_bytes())?; // byte rate
    out.write_all(&2u16.to_le_bytes())?; // block align
    out.write_all(&16u16.to_le_bytes())?;
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}
