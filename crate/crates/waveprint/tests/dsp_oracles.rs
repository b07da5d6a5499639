//! Oracle checks for the DSP front end: the FFT against a direct
//! O(n²) DFT, the DCT against direct summation, and shape/shift
//! properties of the full LFCC pipeline.

use proptest::prelude::*;
use waveprint::audio::Waveform;
use waveprint::dsp;
use waveprint::util;

/// Direct-summation DFT: X_k = Σ_n x_n·e^{-2πikn/N}. The trusted
/// reference the fast transform must reproduce.
fn dft_oracle(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for t in 0..n {
            let ang = -std::f64::consts::TAU * (k * t) as f64 / n as f64;
            let (c, s) = (ang.cos(), ang.sin());
            sr += re[t] * c - im[t] * s;
            si += re[t] * s + im[t] * c;
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
    (out_re, out_im)
}

/// Direct-summation orthonormal DCT-II.
fn dct_oracle(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let alpha = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            alpha
                * x.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        v * (std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2 * n) as f64)
                            .cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

#[test]
fn fft_matches_dft_oracle_up_to_64_points() {
    let mut rng = util::rng_for(101, "fft-oracle");
    for &n in &[2usize, 4, 8, 16, 32, 64] {
        for _ in 0..20 {
            let re: Vec<f64> = (0..n).map(|_| util::uniform_in(&mut rng, -1.0, 1.0)).collect();
            let im: Vec<f64> = (0..n).map(|_| util::uniform_in(&mut rng, -1.0, 1.0)).collect();
            let (oracle_re, oracle_im) = dft_oracle(&re, &im);
            let (mut fre, mut fim) = (re.clone(), im.clone());
            dsp::fft_in_place(&mut fre, &mut fim);
            for k in 0..n {
                assert!((fre[k] - oracle_re[k]).abs() < 1e-9, "n={n} k={k} re");
                assert!((fim[k] - oracle_im[k]).abs() < 1e-9, "n={n} k={k} im");
            }
        }
    }
}

#[test]
fn bin_centered_cosine_concentrates_at_its_bin() {
    // Rectangular window: a cosine at exactly k·fs/n has all its energy
    // in bins k and n−k, none elsewhere.
    let n = 64;
    let k = 5;
    let re: Vec<f64> =
        (0..n).map(|t| (std::f64::consts::TAU * (k * t) as f64 / n as f64).cos()).collect();
    let im = vec![0.0; n];
    let (mut fre, mut fim) = (re, im);
    dsp::fft_in_place(&mut fre, &mut fim);
    for j in 0..n {
        let mag = (fre[j] * fre[j] + fim[j] * fim[j]).sqrt();
        if j == k || j == n - k {
            assert!((mag - n as f64 / 2.0).abs() < 1e-9, "bin {j} mag {mag}");
        } else {
            assert!(mag < 1e-9, "bin {j} should be empty, got {mag}");
        }
    }
}

#[test]
fn dct_matches_direct_summation_oracle() {
    let mut rng = util::rng_for(202, "dct-oracle");
    for &n in &[4usize, 8, 16, 40, 64] {
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| util::uniform_in(&mut rng, -5.0, 5.0)).collect();
            let oracle = dct_oracle(&x);
            let mut m = dsp::Mat::zeros(1, n);
            m.row_mut(0).copy_from_slice(&x);
            let fast = dsp::dct_reduce(&m, n).unwrap();
            for k in 0..n {
                assert!((fast.row(0)[k] - oracle[k]).abs() < 1e-9, "n={n} k={k}");
            }
        }
    }
}

#[test]
fn lfcc_time_shift_moves_rows_by_one() {
    // Shifting the input by exactly one hop relabels frames: row t of the
    // original is row t−1 of the shifted signal.
    let mut rng = util::rng_for(303, "shift");
    let n = 24_000;
    let samples: Vec<f64> = (0..n + dsp::HOP_LEN)
        .map(|_| util::uniform_in(&mut rng, -0.5, 0.5))
        .collect();
    let full = Waveform::new(samples.clone(), 24_000).unwrap();
    let shifted = Waveform::new(samples[dsp::HOP_LEN..].to_vec(), 24_000).unwrap();
    let a = dsp::extract_lfcc(&full).unwrap();
    let b = dsp::extract_lfcc(&shifted).unwrap();
    assert!(a.true_frames() >= 2 && b.true_frames() >= 2);
    for t in 1..a.true_frames() {
        for c in 0..dsp::N_COEFFS {
            let lhs = f64::from(a.row(t)[c]);
            let rhs = f64::from(b.row(t - 1)[c]);
            assert!((lhs - rhs).abs() < 1e-9, "row {t} coeff {c}: {lhs} vs {rhs}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lfcc_shape_is_fixed_for_any_valid_length(len in 480usize..140_000, seed in 0u64..1000) {
        let mut rng = util::rng_for(seed, "shape");
        let samples: Vec<f64> = (0..len).map(|_| util::uniform_in(&mut rng, -0.9, 0.9)).collect();
        let w = Waveform::new(samples, 24_000).unwrap();
        let m = dsp::extract_lfcc(&w).unwrap();
        prop_assert_eq!(m.coeffs().len(), 500 * 20);
        let expected = ((len - dsp::WINDOW_LEN) / dsp::HOP_LEN + 1).min(500);
        prop_assert_eq!(m.true_frames(), expected);
        for t in m.true_frames()..500 {
            prop_assert!(m.row(t).iter().all(|&c| c == 0.0));
        }
    }
}
