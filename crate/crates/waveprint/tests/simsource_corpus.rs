//! Corpus-level properties: counting and balance, byte-identical
//! reruns, split disjointness, and the separability structure that
//! makes family classification easy and instance classification harder.

use std::collections::BTreeSet;
use std::fs;

use waveprint::dsp;
use waveprint::simsource::{
    self, CorpusSpec, PipelineSpec, SourceKind, SourceSpec, Split, SplitPlan,
};

fn vocoder(family: &str, instance: u64) -> SourceSpec {
    SourceSpec::new(SourceKind::Vocoder, family, instance).unwrap()
}

fn copy_pipeline(family: &str, instance: u64) -> PipelineSpec {
    PipelineSpec { acoustic: None, vocoder: vocoder(family, instance) }
}

fn four_family_spec(seed: u64, n_train: usize, n_eval: usize) -> CorpusSpec {
    let pipelines = || {
        vec![
            copy_pipeline("P", 0),
            copy_pipeline("H", 0),
            copy_pipeline("M", 0),
            copy_pipeline("S", 0),
        ]
    };
    CorpusSpec {
        seed,
        duration_secs: 1.0,
        train: SplitPlan { pipelines: pipelines(), n_per_source: n_train },
        val: SplitPlan { pipelines: pipelines(), n_per_source: n_eval },
        test: SplitPlan { pipelines: pipelines(), n_per_source: n_eval },
    }
}

#[test]
fn corpus_counts_are_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let spec = four_family_spec(11, 25, 2);
    let manifest = simsource::synth_corpus(&spec, dir.path()).unwrap();

    let train: Vec<_> = manifest.entries_for(Split::Train).collect();
    assert_eq!(train.len(), 100);
    for fam in ["P0", "H0", "M0", "S0"] {
        let n = train.iter().filter(|e| e.vocoder_label == fam).count();
        assert_eq!(n, 25, "family {fam}");
    }
    // Copy synthesis throughout.
    assert!(manifest.entries.iter().all(|e| e.acoustic_label == "COPY"));
    // Every split carries all four vocoder labels.
    for split in Split::ALL {
        let labels: BTreeSet<_> =
            manifest.entries_for(split).map(|e| e.vocoder_label.clone()).collect();
        assert_eq!(labels.len(), 4, "{split}");
    }
    // WAVs exist at the recorded relative paths.
    for e in &manifest.entries {
        assert!(dir.path().join(&e.path).is_file(), "{}", e.path);
    }
}

#[test]
fn rerun_is_byte_identical_even_in_a_different_directory() {
    let spec = CorpusSpec {
        seed: 77,
        duration_secs: 1.0,
        train: SplitPlan { pipelines: vec![copy_pipeline("P", 0), copy_pipeline("H", 0)], n_per_source: 3 },
        val: SplitPlan { pipelines: vec![copy_pipeline("P", 0), copy_pipeline("H", 0)], n_per_source: 1 },
        test: SplitPlan { pipelines: vec![copy_pipeline("P", 0), copy_pipeline("H", 0)], n_per_source: 1 },
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let ma = simsource::synth_corpus(&spec, dir_a.path()).unwrap();
    let mb = simsource::synth_corpus(&spec, dir_b.path()).unwrap();
    assert_eq!(ma, mb);

    let bytes_a = fs::read(dir_a.path().join("manifest.jsonl")).unwrap();
    let bytes_b = fs::read(dir_b.path().join("manifest.jsonl")).unwrap();
    assert_eq!(bytes_a, bytes_b, "manifest bytes differ");

    for e in &ma.entries {
        let wa = fs::read(dir_a.path().join(&e.path)).unwrap();
        let wb = fs::read(dir_b.path().join(&e.path)).unwrap();
        assert_eq!(wa, wb, "wav bytes differ for {}", e.utterance_id);
    }
}

#[test]
fn splits_share_no_utterance_ids_and_use_disjoint_content() {
    let dir = tempfile::tempdir().unwrap();
    let spec = four_family_spec(5, 3, 2);
    let manifest = simsource::synth_corpus(&spec, dir.path()).unwrap();

    let mut seen = BTreeSet::new();
    for e in &manifest.entries {
        assert!(seen.insert(&e.utterance_id), "duplicate id {}", e.utterance_id);
    }

    // Same index, same pipeline, different split: the audio must differ
    // because base content is split-specific.
    let train = fs::read(dir.path().join("wavs/train_0000_COPY_P0.wav")).unwrap();
    let test = fs::read(dir.path().join("wavs/test_0000_COPY_P0.wav")).unwrap();
    assert_ne!(train, test);
}

/// Between-family LFCC centroid distance must dominate within-family
/// instance distance. This gap is what separates family classification
/// from the harder instance-level task.
#[test]
fn families_separate_more_than_instances() {
    let sources = [vocoder("P", 0), vocoder("P", 1), vocoder("H", 0), vocoder("H", 1)];
    let n_utts = 50;
    let dims = 500 * 20;
    let mut centroids = vec![vec![0.0f64; dims]; sources.len()];

    for i in 0..n_utts {
        let base = simsource::make_base_utterance(9000 + i as u64, 2.0).unwrap();
        for (s, spec) in sources.iter().enumerate() {
            let w = simsource::apply_source(&base, spec, 3_000_000 + (s * n_utts + i) as u64).unwrap();
            let feat = dsp::extract_lfcc(&w).unwrap();
            for (acc, &c) in centroids[s].iter_mut().zip(feat.coeffs()) {
                *acc += f64::from(c) / n_utts as f64;
            }
        }
    }

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let within_p = dist(&centroids[0], &centroids[1]);
    let within_h = dist(&centroids[2], &centroids[3]);
    let mut between = f64::INFINITY;
    for p in 0..2 {
        for h in 2..4 {
            between = between.min(dist(&centroids[p], &centroids[h]));
        }
    }
    let within = within_p.max(within_h);
    assert!(
        between > 3.0 * within,
        "separability too weak: between {between:.4} vs within {within:.4}"
    );
    assert!(within > 0.0, "instances should not coincide");
}
