//! LFCC front end: framing, spectra, linear filterbank, DCT.
//!
//! The pipeline is `frame_and_window(480, 240)` with a Hamming window,
//! a zero-padded 512-point power spectrum, 40 triangular filters spaced
//! linearly from 0 to Nyquist with log compression, and an orthonormal
//! DCT-II keeping 20 coefficients. Output is padded or truncated to a
//! fixed 500×20 matrix so every utterance presents the classifier with
//! the same shape.
//!
//! Numerical conventions that downstream tests rely on:
//! - Each triangular filter's weights are normalized to sum to 1, so a
//!   flat spectrum produces identical energy in every filter.
//! - All arithmetic is f64; the final matrix is stored as f32 so cached
//!   features round-trip bit-exactly through the on-disk format.
//! - No pre-emphasis, no deltas, no mean normalization.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::audio::Waveform;

/// Analysis window length in samples (20 ms at 24 kHz).
pub const WINDOW_LEN: usize = 480;
/// Hop between frames in samples (10 ms at 24 kHz).
pub const HOP_LEN: usize = 240;
/// FFT size: next power of two above the window length.
pub const N_FFT: usize = 512;
/// Number of triangular filters.
pub const N_FILTERS: usize = 40;
/// Cepstral coefficients kept per frame.
pub const N_COEFFS: usize = 20;
/// Fixed frame count after padding/truncation.
pub const N_FRAMES: usize = 500;
/// Log floor added to filter energies.
pub const LOG_FLOOR: f64 = 1e-10;

const CACHE_MAGIC: &[u8; 4] = b"LFCC";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("input of {len} samples is shorter than the {min}-sample window")]
    TooShort { len: usize, min: usize },
    #[error("bad DSP configuration: {0}")]
    BadConfig(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed feature cache: {0}")]
    BadCache(String),
}

/// Dense row-major f64 matrix used by the front-end stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Windowed frames of a waveform.
#[derive(Debug, Clone)]
pub struct FrameMatrix {
    frames: Mat,
    window_len: usize,
    hop: usize,
}

impl FrameMatrix {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}

/// Fixed-shape LFCC features: 500 frames by 20 coefficients.
///
/// `true_frames` records how many rows carry real data; rows at or past
/// it are zero when the input was shorter than 500 frames. Coefficients
/// are stored as f32 (computed in f64) so the in-memory value equals the
/// on-disk cache value exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LfccMatrix {
    coeffs: Vec<f32>,
    true_frames: usize,
}

impl LfccMatrix {
    /// Builds a matrix from raw row-major coefficients (500 rows of 20).
    pub fn from_coeffs(coeffs: Vec<f32>, true_frames: usize) -> Result<Self, DspError> {
        if coeffs.len() != N_FRAMES * N_COEFFS || true_frames > N_FRAMES {
            return Err(DspError::BadConfig(format!(
                "expected {} coefficients and true_frames <= {N_FRAMES}, got {} and {true_frames}",
                N_FRAMES * N_COEFFS,
                coeffs.len()
            )));
        }
        Ok(Self { coeffs, true_frames })
    }

    pub fn true_frames(&self) -> usize {
        self.true_frames
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.coeffs[t * N_COEFFS..(t + 1) * N_COEFFS]
    }

    pub fn coeffs(&self) -> &[f32] {
        &self.coeffs
    }

    /// Row-major f64 copy, shaped for the classifier's 1×500×20 input.
    pub fn to_f64(&self) -> Vec<f64> {
        self.coeffs.iter().map(|&c| f64::from(c)).collect()
    }
}

/// Hamming window, w[n] = 0.54 − 0.46·cos(2πn/(M−1)).
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (std::f64::consts::TAU * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Slices a waveform into Hamming-windowed frames of `window_len`
/// samples every `hop` samples. Only complete windows are kept:
/// T = floor((N − M)/H) + 1.
pub fn frame_and_window(w: &Waveform, window_len: usize, hop: usize) -> Result<FrameMatrix, DspError> {
    if window_len == 0 || hop == 0 || hop > window_len {
        return Err(DspError::BadConfig(format!(
            "window_len {window_len} and hop {hop} must satisfy 0 < hop <= window_len"
        )));
    }
    let samples = w.samples();
    if samples.len() < window_len {
        return Err(DspError::TooShort { len: samples.len(), min: window_len });
    }
    let n_frames = (samples.len() - window_len) / hop + 1;
    let window = hamming(window_len);
    let mut frames = Mat::zeros(n_frames, window_len);
    for t in 0..n_frames {
        let src = &samples[t * hop..t * hop + window_len];
        for ((dst, &s), &w) in frames.row_mut(t).iter_mut().zip(src).zip(&window) {
            *dst = s * w;
        }
    }
    Ok(FrameMatrix { frames, window_len, hop })
}

/// In-place radix-2 decimation-in-time FFT.
///
/// `re` and `im` must share a power-of-two length. Forward transform,
/// no normalization: X_k = Σ x_n e^{-2πikn/N}.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert_eq!(n, im.len());
    debug_assert!(n.is_power_of_two());
    if n < 2 {
        return;
    }

    // Bit-reversal permutation.
    let shift = n.leading_zeros() + 1;
    for i in 0..n {
        let j = i.reverse_bits() >> shift;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let mut len = 2;
    while len <= n {
        let ang = -std::f64::consts::TAU / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut cr = 1.0;
            let mut ci = 0.0;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let nr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = nr;
            }
        }
        len <<= 1;
    }
}

/// Per-frame zero-padded power spectrum, bins 0..n_fft/2 inclusive.
pub fn power_spectrum(frames: &FrameMatrix, n_fft: usize) -> Result<Mat, DspError> {
    if !n_fft.is_power_of_two() {
        return Err(DspError::BadConfig(format!("n_fft {n_fft} is not a power of two")));
    }
    if n_fft < frames.window_len() {
        return Err(DspError::BadConfig(format!(
            "n_fft {n_fft} is smaller than the window length {}",
            frames.window_len()
        )));
    }
    let n_bins = n_fft / 2 + 1;
    let mut out = Mat::zeros(frames.n_frames(), n_bins);
    let mut re = vec![0.0; n_fft];
    let mut im = vec![0.0; n_fft];
    for t in 0..frames.n_frames() {
        let frame = frames.frame(t);
        re[..frame.len()].copy_from_slice(frame);
        re[frame.len()..].fill(0.0);
        im.fill(0.0);
        fft_in_place(&mut re, &mut im);
        for (k, dst) in out.row_mut(t).iter_mut().enumerate() {
            *dst = re[k] * re[k] + im[k] * im[k];
        }
    }
    Ok(out)
}

/// Triangular filter weights over `n_bins` spectrum bins.
///
/// Filter edges are linearly spaced from 0 to fs/2; each filter's
/// weights are normalized to sum to 1, so filter energy is a weighted
/// average of bin powers and a flat spectrum excites every filter
/// identically.
pub fn linear_filter_weights(n_filters: usize, n_bins: usize, fs: u32, n_fft: usize) -> Mat {
    // Edge positions in fractional bin units: bin k sits at frequency
    // k·fs/n_fft, so frequency f maps to f·n_fft/fs.
    let edge = |i: usize| -> f64 {
        let f = i as f64 * (f64::from(fs) / 2.0) / (n_filters + 1) as f64;
        f * n_fft as f64 / f64::from(fs)
    };
    let mut weights = Mat::zeros(n_filters, n_bins);
    for i in 0..n_filters {
        let (lo, mid, hi) = (edge(i), edge(i + 1), edge(i + 2));
        let row = weights.row_mut(i);
        let mut sum = 0.0;
        for (k, w) in row.iter_mut().enumerate() {
            let p = k as f64;
            let tri = ((p - lo) / (mid - lo)).min((hi - p) / (hi - mid));
            *w = tri.max(0.0);
            sum += *w;
        }
        if sum > 0.0 {
            for w in row.iter_mut() {
                *w /= sum;
            }
        }
    }
    weights
}

/// Applies the linear filterbank and log compression:
/// out = ln(filter energy + 1e-10).
pub fn linear_filterbank(spec: &Mat, n_filters: usize, fs: u32) -> Result<Mat, DspError> {
    if n_filters < 2 {
        return Err(DspError::BadConfig(format!("n_filters {n_filters} must be at least 2")));
    }
    let n_fft = (spec.cols() - 1) * 2;
    let weights = linear_filter_weights(n_filters, spec.cols(), fs, n_fft);
    let mut out = Mat::zeros(spec.rows(), n_filters);
    for t in 0..spec.rows() {
        let s = spec.row(t);
        for (i, dst) in out.row_mut(t).iter_mut().enumerate() {
            let energy: f64 = weights.row(i).iter().zip(s).map(|(w, p)| w * p).sum();
            *dst = (energy + LOG_FLOOR).ln();
        }
    }
    Ok(out)
}

/// Orthonormal DCT-II per row, keeping the first `n_keep` coefficients.
///
/// C_k = α_k Σ_n x_n cos(π(2n+1)k / 2N) with α_0 = √(1/N), α_k = √(2/N).
pub fn dct_reduce(fb: &Mat, n_keep: usize) -> Result<Mat, DspError> {
    let n = fb.cols();
    if n_keep > n {
        return Err(DspError::BadConfig(format!(
            "cannot keep {n_keep} DCT coefficients from {n} filters"
        )));
    }
    // Basis table: basis[k][n] = α_k·cos(π(2n+1)k/2N).
    let mut basis = Mat::zeros(n_keep, n);
    for k in 0..n_keep {
        let alpha = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for (j, b) in basis.row_mut(k).iter_mut().enumerate() {
            *b = alpha * (std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    let mut out = Mat::zeros(fb.rows(), n_keep);
    for t in 0..fb.rows() {
        let x = fb.row(t);
        for (k, dst) in out.row_mut(t).iter_mut().enumerate() {
            *dst = basis.row(k).iter().zip(x).map(|(b, v)| b * v).sum();
        }
    }
    Ok(out)
}

/// Full LFCC pipeline producing the fixed 500×20 feature matrix.
pub fn extract_lfcc(w: &Waveform) -> Result<LfccMatrix, DspError> {
    let frames = frame_and_window(w, WINDOW_LEN, HOP_LEN)?;
    let spec = power_spectrum(&frames, N_FFT)?;
    let fb = linear_filterbank(&spec, N_FILTERS, w.sample_rate())?;
    let cep = dct_reduce(&fb, N_COEFFS)?;

    let true_frames = cep.rows().min(N_FRAMES);
    let mut coeffs = vec![0.0f32; N_FRAMES * N_COEFFS];
    for t in 0..true_frames {
        for (dst, &v) in coeffs[t * N_COEFFS..(t + 1) * N_COEFFS].iter_mut().zip(cep.row(t)) {
            *dst = v as f32;
        }
    }
    Ok(LfccMatrix { coeffs, true_frames })
}

/// Writes a feature matrix to the binary cache format: a 16-byte header
/// (magic "LFCC", version, true_frames, reserved) followed by 500×20
/// little-endian f32 values.
pub fn write_feature_cache(m: &LfccMatrix, path: impl AsRef<Path>) -> Result<(), DspError> {
    let mut out = io::BufWriter::new(fs::File::create(path.as_ref())?);
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    out.write_all(&(m.true_frames as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for &c in &m.coeffs {
        out.write_all(&c.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a feature matrix previously written by [`write_feature_cache`].
pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<LfccMatrix, DspError> {
    let mut file = io::BufReader::new(fs::File::open(path.as_ref())?);
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|_| DspError::BadCache("truncated header".into()))?;
    if &header[0..4] != CACHE_MAGIC {
        return Err(DspError::BadCache("bad magic".into()));
    }
    let version = u32::from_le_bytes([header[4], header[5], header[6], header[7]]);
    if version != CACHE_VERSION {
        return Err(DspError::BadCache(format!("unsupported version {version}")));
    }
    let true_frames = u32::from_le_bytes([header[8], header[9], header[10], header[11]]) as usize;
    if true_frames > N_FRAMES {
        return Err(DspError::BadCache(format!("true_frames {true_frames} exceeds {N_FRAMES}")));
    }
    let mut payload = vec![0u8; N_FRAMES * N_COEFFS * 4];
    file.read_exact(&mut payload)
        .map_err(|_| DspError::BadCache("truncated payload".into()))?;
    let coeffs: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(LfccMatrix { coeffs, true_frames })
}
