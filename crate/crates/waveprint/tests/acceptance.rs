//! Acceptance gate: eleven numbered criteria covering transform
//! oracles, gradient correctness, training invariants, the experiment
//! grid's qualitative orderings, perturbation fidelity, metric
//! exactness, embedding quality, and end-to-end determinism. Each
//! criterion prints one PASS/FAIL line. Criteria 4-7 and 10 share one
//! suite run over the checked-in configs; criterion 11 reruns the whole
//! suite and compares metrics bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use waveprint::audio::{self, Waveform};
use waveprint::dsp::{self, LfccMatrix, Mat, N_COEFFS, N_FRAMES, WINDOW_LEN};
use waveprint::eval::{self, ConfusionMatrix};
use waveprint::exp::{self, ExperimentConfig, SuiteReport};
use waveprint::nn::{
    self, max_grad_rel_error, softmax, softmax_cross_entropy, FingerprintClassifier, Graph,
    ParamStore, Res2Block, Tensor,
};
use waveprint::perturb;
use waveprint::simsource::{self, make_base_utterance, Split};
use waveprint::util;

fn report(criterion: u32, ok: bool, detail: &str) {
    println!("ACCEPTANCE criterion {criterion:02}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion:02} failed: {detail}");
}

// ---------- shared suite run over the checked-in configs ----------

struct SuiteOutcome {
    dir: PathBuf,
    cfgs: Vec<ExperimentConfig>,
    report: SuiteReport,
}

static SUITE: OnceLock<Result<SuiteOutcome, String>> = OnceLock::new();

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_grid() -> Result<Vec<ExperimentConfig>, String> {
    let mut files: Vec<PathBuf> = fs::read_dir(configs_dir())
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    files.iter().map(|f| exp::load_config(f).map_err(|e| e.to_string())).collect()
}

fn run_grid(out: &Path) -> Result<(Vec<ExperimentConfig>, SuiteReport), String> {
    let cfgs = load_grid()?;
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| e.to_string())?;
    }
    let report = exp::run_suite(&cfgs, out).map_err(|e| e.to_string())?;
    Ok((cfgs, report))
}

fn suite() -> &'static SuiteOutcome {
    let result = SUITE.get_or_init(|| {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance/a");
        let (cfgs, report) = run_grid(&dir)?;
        Ok(SuiteOutcome { dir, cfgs, report })
    });
    match result {
        Ok(o) => o,
        Err(e) => panic!("shared suite run failed: {e}"),
    }
}

fn row_f1(outcome: &SuiteOutcome, id: &str) -> f64 {
    let row = outcome
        .report
        .rows
        .iter()
        .find(|r| r.experiment_id == id)
        .unwrap_or_else(|| panic!("row {id} missing from suite report"));
    assert_eq!(row.status, "ok", "row {id} failed: {:?}", row.error);
    row.macro_f1.unwrap()
}

// ---------- criterion 1: transform oracles ----------

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
fn criterion_01_transform_oracles_and_feature_shape() {
    let start = Instant::now();
    let mut rng = util::rng_for(2024, "acceptance-dsp");

    let mut dft_err: f64 = 0.0;
    for &n in &[2usize, 4, 8, 16, 32, 64] {
        for _ in 0..10 {
            let re: Vec<f64> = (0..n).map(|_| util::uniform_in(&mut rng, -1.0, 1.0)).collect();
            let im: Vec<f64> = (0..n).map(|_| util::uniform_in(&mut rng, -1.0, 1.0)).collect();
            let (oracle_re, oracle_im) = dft_oracle(&re, &im);
            let (mut fre, mut fim) = (re, im);
            dsp::fft_in_place(&mut fre, &mut fim);
            for k in 0..n {
                dft_err = dft_err.max((fre[k] - oracle_re[k]).abs()).max((fim[k] - oracle_im[k]).abs());
            }
        }
    }

    let mut dct_err: f64 = 0.0;
    for &n in &[2usize, 3, 8, 20, 40, 64] {
        let mut fb = Mat::zeros(4, n);
        for r in 0..4 {
            for v in fb.row_mut(r) {
                *v = util::uniform_in(&mut rng, -2.0, 2.0);
            }
        }
        let full = dsp::dct_reduce(&fb, n).unwrap();
        for r in 0..4 {
            let oracle = dct_oracle(fb.row(r));
            for k in 0..n {
                dct_err = dct_err.max((full.row(r)[k] - oracle[k]).abs());
            }
        }
    }

    let mut shapes_ok = true;
    for _ in 0..100 {
        let len = WINDOW_LEN + util::below(&mut rng, 150_000);
        let samples: Vec<f64> = (0..len).map(|_| util::uniform_in(&mut rng, -0.5, 0.5)).collect();
        let w = Waveform::new(samples, 24_000).unwrap();
        let m = dsp::extract_lfcc(&w).unwrap();
        let n_frames = ((len - WINDOW_LEN) / dsp::HOP_LEN + 1).min(N_FRAMES);
        shapes_ok &= m.coeffs().len() == N_FRAMES * N_COEFFS && m.true_frames() == n_frames;
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = dft_err < 1e-9 && dct_err < 1e-9 && shapes_ok && elapsed < 10.0;
    report(
        1,
        ok,
        &format!("dft err {dft_err:.2e}, dct err {dct_err:.2e}, shapes {shapes_ok}, {elapsed:.1}s < 10s"),
    );
}

// ---------- criterion 2: gradient checks ----------

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = util::rng_for(seed, "grad-check-params");
    for v in store.data_mut() {
        *v = scale * util::normal(&mut rng);
    }
}

fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = util::rng_for(seed, "grad-check-input");
    Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| util::normal(&mut rng)).collect())
}

fn linear_ce_error() -> f64 {
    let mut store = ParamStore::new();
    store.add("w", &[4, 6], vec![0.0; 24]);
    store.add("b", &[4], vec![0.0; 4]);
    randomize(&mut store, 205, 0.5);
    let w = store.find("w").unwrap();
    let b = store.find("b").unwrap();
    let input = random_tensor(6, 1, 1, 206);

    let loss_fn = |store: &ParamStore| {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let out = g.linear(store, x, w, b);
        softmax_cross_entropy(&g.value(out).data, 1).0
    };
    let mut dstore = vec![0.0; store.n_values()];
    {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let out = g.linear(&store, x, w, b);
        let (_, dl) = softmax_cross_entropy(&g.value(out).data, 1);
        g.backward(&store, out, Tensor::vector(dl), &mut dstore);
    }
    let indices: Vec<usize> = (0..store.n_values()).collect();
    max_grad_rel_error(&mut store, &indices, &dstore, loss_fn, 1e-5)
}

fn conv_error() -> f64 {
    let mut store = ParamStore::new();
    store.add("conv.w", &[3, 2, 3, 3], vec![0.0; 54]);
    store.add("conv.b", &[3], vec![0.0; 3]);
    store.add("fc.w", &[2, 3], vec![0.0; 6]);
    store.add("fc.b", &[2], vec![0.0; 2]);
    randomize(&mut store, 208, 0.4);
    let cw = store.find("conv.w").unwrap();
    let cb = store.find("conv.b").unwrap();
    let fw = store.find("fc.w").unwrap();
    let fb = store.find("fc.b").unwrap();
    let input = random_tensor(2, 8, 6, 209);

    let build = |g: &mut Graph, store: &ParamStore| {
        let x = g.input(input.clone());
        let c = g.conv2d(store, x, cw, cb, 2, 1);
        let r = g.relu(c);
        let p = g.global_avg_pool(r);
        g.linear(store, p, fw, fb)
    };
    let loss_fn = |store: &ParamStore| {
        let mut g = Graph::new();
        let out = build(&mut g, store);
        softmax_cross_entropy(&g.value(out).data, 0).0
    };
    let mut dstore = vec![0.0; store.n_values()];
    {
        let mut g = Graph::new();
        let out = build(&mut g, &store);
        let (_, dl) = softmax_cross_entropy(&g.value(out).data, 0);
        g.backward(&store, out, Tensor::vector(dl), &mut dstore);
    }
    let indices: Vec<usize> = (0..store.n_values()).collect();
    max_grad_rel_error(&mut store, &indices, &dstore, loss_fn, 1e-4)
}

fn block_error(in_c: usize, out_c: usize, stride: usize, seed: u64) -> f64 {
    let mut store = ParamStore::new();
    let block = Res2Block::new(&mut store, "blk", 0, in_c, out_c, stride, 4).unwrap();
    store.add("fc.w", &[3, out_c], vec![0.0; 3 * out_c]);
    store.add("fc.b", &[3], vec![0.0; 3]);
    randomize(&mut store, seed, 0.3);
    let fw = store.find("fc.w").unwrap();
    let fb = store.find("fc.b").unwrap();
    let input = random_tensor(in_c, 6, 6, seed + 1);

    let build = |g: &mut Graph, store: &ParamStore| {
        let x = g.input(input.clone());
        let y = block.forward(g, store, x);
        let r = g.relu(y);
        let p = g.global_avg_pool(r);
        g.linear(store, p, fw, fb)
    };
    let loss_fn = |store: &ParamStore| {
        let mut g = Graph::new();
        let out = build(&mut g, store);
        softmax_cross_entropy(&g.value(out).data, 2).0
    };
    let mut dstore = vec![0.0; store.n_values()];
    {
        let mut g = Graph::new();
        let out = build(&mut g, &store);
        let (_, dl) = softmax_cross_entropy(&g.value(out).data, 2);
        g.backward(&store, out, Tensor::vector(dl), &mut dstore);
    }
    let indices: Vec<usize> = (0..store.n_values()).collect();
    max_grad_rel_error(&mut store, &indices, &dstore, loss_fn, 1e-4)
}

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let start = Instant::now();
    let linear_err = linear_ce_error();
    let conv_err = conv_error();
    let block_err = block_error(8, 8, 1, 221).max(block_error(8, 16, 2, 222));
    let elapsed = start.elapsed().as_secs_f64();
    let ok = linear_err < 1e-6 && conv_err < 1e-4 && block_err < 1e-4 && elapsed < 60.0;
    report(
        2,
        ok,
        &format!(
            "linear/CE {linear_err:.2e} < 1e-6, conv {conv_err:.2e} < 1e-4, block {block_err:.2e} < 1e-4, {elapsed:.1}s < 60s"
        ),
    );
}

// ---------- criterion 3: training-start invariant ----------

#[test]
fn criterion_03_zero_head_gives_ln_c_loss_and_uniform_predictions() {
    let n_classes = 7;
    let model = FingerprintClassifier::new(n_classes, 33).unwrap();
    let mut rng = util::rng_for(34, "acceptance-start");
    let mut max_loss_dev: f64 = 0.0;
    let mut max_prob_dev: f64 = 0.0;
    for _ in 0..3 {
        let coeffs: Vec<f32> =
            (0..N_FRAMES * N_COEFFS).map(|_| util::normal(&mut rng) as f32).collect();
        let m = LfccMatrix::from_coeffs(coeffs, N_FRAMES).unwrap();
        let logits = model.logits(&nn::lfcc_tensor(&m), m.true_frames());
        let (loss, _) = softmax_cross_entropy(&logits, 0);
        max_loss_dev = max_loss_dev.max((loss - (n_classes as f64).ln()).abs());
        for p in softmax(&logits) {
            max_prob_dev = max_prob_dev.max((p - 1.0 / n_classes as f64).abs());
        }
    }
    let ok = max_loss_dev < 1e-9 && max_prob_dev < 1e-12;
    report(3, ok, &format!("loss dev {max_loss_dev:.2e} < 1e-9, prob dev {max_prob_dev:.2e}"));
}

// ---------- criteria 4-7: experiment grid ----------

#[test]
fn criterion_04_vocoder_family_attribution_is_strong() {
    let s = suite();
    let f1 = row_f1(s, "V1");
    let elapsed = s
        .report
        .rows
        .iter()
        .find(|r| r.experiment_id == "V1")
        .map(|r| r.elapsed_secs)
        .unwrap();
    let ok = f1 >= 0.95 && elapsed < 1800.0;
    report(4, ok, &format!("V1 macro-F1 {f1:.4} >= 0.95, {elapsed:.0}s < 1800s"));
}

#[test]
fn criterion_05_instance_and_unseen_instance_tasks_are_harder() {
    let s = suite();
    let v1 = row_f1(s, "V1");
    let v2 = row_f1(s, "V2");
    let v3 = row_f1(s, "V3");
    let ok = v2 < v1 && v3 < v1 && v2 >= 0.70 && v3 >= 0.70;
    report(5, ok, &format!("V1 {v1:.4} > V2 {v2:.4} >= 0.70, V1 > V3 {v3:.4} >= 0.70"));
}

#[test]
fn criterion_06_vocoder_fingerprints_dominate_acoustic_fingerprints() {
    let s = suite();
    let r1 = row_f1(s, "R1");
    let r2 = row_f1(s, "R2");
    let ok = r1 <= 0.45 && r2 >= 0.90;
    report(6, ok, &format!("R1 macro-F1 {r1:.4} <= 0.45 (collapse), R2 {r2:.4} >= 0.90"));
}

#[test]
fn criterion_07_perturbation_ordering_matches_expectations() {
    let s = suite();
    let r2 = row_f1(s, "R2");
    let n1 = row_f1(s, "N1");
    let n2 = row_f1(s, "N2");
    let n3 = row_f1(s, "N3");
    let ok = n1 > n3 && n3 > n2 && (r2 - n1) <= 0.05;
    report(
        7,
        ok,
        &format!("noise {n1:.4} > speed {n3:.4} > reverb {n2:.4}; noise drop {:.4} <= 0.05", r2 - n1),
    );
}

// ---------- criterion 8: perturbation fidelity ----------

fn schroeder_rt60(h: &[f64], fs: u32) -> f64 {
    let mut edc: Vec<f64> = Vec::with_capacity(h.len());
    let mut acc = 0.0;
    for &v in h.iter().rev() {
        acc += v * v;
        edc.push(acc);
    }
    edc.reverse();
    let e0 = edc[0];
    let db: Vec<f64> = edc.iter().map(|&e| 10.0 * (e / e0).log10()).collect();
    let idx_at = |level: f64| db.iter().position(|&d| d <= level).expect("decay reaches level");
    let dt = (idx_at(-25.0) - idx_at(-5.0)) as f64 / f64::from(fs);
    dt * 3.0
}

#[test]
fn criterion_08_perturbations_hit_their_physical_targets() {
    let w = make_base_utterance(88, 2.0).unwrap();

    let mut snr_dev: f64 = 0.0;
    for &snr in &[0.0f64, 5.0, 10.0, 20.0] {
        let y = perturb::add_noise(&w, snr, 880).unwrap();
        let noise_power = y
            .samples()
            .iter()
            .zip(w.samples())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / y.samples().len() as f64;
        let realized = 10.0 * (audio::mean_square(w.samples()) / noise_power).log10();
        snr_dev = snr_dev.max((realized - snr).abs());
    }

    let mut rt_rel_dev: f64 = 0.0;
    for &rt in &[0.5f64, 1.0, 1.5] {
        let h = perturb::make_rir(rt, 24_000, 881).unwrap();
        let est = schroeder_rt60(&h, 24_000);
        rt_rel_dev = rt_rel_dev.max((est - rt).abs() / rt);
    }

    let mut len_dev: i64 = 0;
    for &factor in &[0.8f64, 0.9, 1.1, 1.25] {
        let y = perturb::adjust_speed(&w, factor).unwrap();
        let expected = (w.samples().len() as f64 / factor).round() as i64;
        len_dev = len_dev.max((y.samples().len() as i64 - expected).abs());
    }

    let ok = snr_dev <= 0.1 && rt_rel_dev <= 0.05 && len_dev <= 1;
    report(
        8,
        ok,
        &format!("SNR dev {snr_dev:.3} dB <= 0.1, RT60 rel dev {:.2}% <= 5%, length dev {len_dev} <= 1", 100.0 * rt_rel_dev),
    );
}

// ---------- criterion 9: metric exactness ----------

#[test]
fn criterion_09_macro_f1_matches_hand_computation() {
    let classes = vec!["a".to_string(), "b".to_string()];
    let y_true = [0usize, 0, 1, 1];
    let y_pred = [0usize, 1, 1, 1];
    let cm = ConfusionMatrix::from_indices(&y_true, &y_pred, &classes).unwrap();
    let m = eval::metrics(&cm).unwrap();
    let dev = (m.macro_avg.f1 - 11.0 / 15.0).abs();
    report(9, dev < 1e-12, &format!("macro-F1 dev from 11/15 is {dev:.2e} < 1e-12"));
}

// ---------- criterion 10: embedding cluster recovery ----------

#[test]
fn criterion_10_embeddings_form_recoverable_clusters() {
    let s = suite();
    let v1_dir = s.dir.join("V1");
    let (model, _) = nn::load_checkpoint(v1_dir.join("checkpoint.vtck")).unwrap();
    let manifest = simsource::read_manifest(v1_dir.join("corpus/manifest.jsonl")).unwrap();
    let corpus_dir = v1_dir.join("corpus");

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for e in manifest.entries_for(Split::Test) {
        let wav = corpus_dir.join(&e.path);
        let cache = wav.with_extension("lfcc");
        let m = dsp::read_feature_cache(&cache)
            .or_else(|_| dsp::extract_lfcc(&audio::read_wav(&wav).unwrap()))
            .unwrap();
        features.push(m);
        labels.push(exp::vocoder_family(&e.vocoder_label));
    }
    let classes: Vec<String> = {
        let mut c = labels.clone();
        c.sort();
        c.dedup();
        c
    };
    let label_idx: Vec<usize> =
        labels.iter().map(|l| classes.iter().position(|c| c == l).unwrap()).collect();

    let cfg = s.cfgs.iter().find(|c| c.experiment_id == "V1").unwrap();
    let embeds = model.embed_batch(&features);
    let seed = util::derive_seed(cfg.seed, "tsne");
    let emb_a = eval::tsne(&embeds, 30.0, 1000, seed).unwrap();
    let emb_b = eval::tsne(&embeds, 30.0, 1000, seed).unwrap();

    let sil = eval::silhouette(&emb_a.coords, &label_idx);
    let bit_exact = emb_a.coords == emb_b.coords;
    let ok = sil > 0.4 && bit_exact;
    report(10, ok, &format!("silhouette {sil:.3} > 0.4, rerun bit-exact {bit_exact}"));
}

// ---------- criterion 11: end-to-end determinism ----------

fn metrics_files(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            metrics_files(&path, out);
        } else if path.file_name().is_some_and(|n| n == "metrics.json") {
            out.push(path);
        }
    }
}

#[test]
fn criterion_11_suite_rerun_is_byte_identical() {
    let s = suite();
    let dir_b = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance/b");
    let (_, report_b) = run_grid(&dir_b).unwrap_or_else(|e| panic!("second suite run failed: {e}"));
    assert!(report_b.rows.iter().all(|r| r.status == "ok"), "rerun rows: {:?}", report_b.rows);

    let mut files_a = Vec::new();
    metrics_files(&s.dir, &mut files_a);
    files_a.sort();

    let mut compared = 0usize;
    let mut identical = true;
    for a in &files_a {
        let rel = a.strip_prefix(&s.dir).unwrap();
        let b = dir_b.join(rel);
        let bytes_a = fs::read(a).unwrap();
        let bytes_b = fs::read(&b).unwrap_or_default();
        if bytes_a != bytes_b {
            identical = false;
            eprintln!("metrics differ: {}", rel.display());
        }
        compared += 1;
    }

    let ok = identical && compared >= 13;
    report(11, ok, &format!("{compared} metrics files byte-identical across reruns: {identical}"));
}
