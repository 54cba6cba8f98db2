//! Worked examples checked against independent oracles: corpus geometry,
//! sampling frequencies, the forward pass, cosine scoring and short
//! training runs.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metasv::episode::{random_erase, sample_episode, EpisodeConfig, EraseMode};
use metasv::eval::{cosine, score_trials, Label, Trial, TrialSet};
use metasv::grad::Tensor;
use metasv::network::{classify, embed, embed_transformed, init_params, Embedding, POOL_EPS};
use metasv::rng::stream;
use metasv::synth::{generate_corpus, random_crop};
use metasv::train::{train_baseline, train_mltc_stage2, train_pn, TrainSetup};
use metasv::{
    Corpus, CorpusConfig, FeatureMatrix, NetworkConfig, NetworkDims, NetworkParams, TrainConfig,
    TransformCoeffs,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn utterance_means(corpus: &Corpus) -> Vec<(usize, Vec<f64>)> {
    corpus
        .utterances
        .iter()
        .map(|u| (u.speaker, u.features.time_mean()))
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn intra_speaker_distances_are_smaller_than_inter_speaker() {
    let cfg = CorpusConfig {
        num_speakers: 10,
        utterances_per_speaker: 20,
        heldout_speakers: 2,
        heldout_utterances_per_speaker: 2,
        session_noise: 0.1,
        frame_noise: 0.1,
        min_frames: 50,
        max_frames: 80,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg, 11).unwrap().corpus;
    let means = utterance_means(&corpus);
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d = euclid(&means[i].1, &means[j].1);
            if means[i].0 == means[j].0 {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    assert!(intra / (n_intra as f64) < inter / (n_inter as f64));
}

#[test]
fn noise_free_corpus_is_perfectly_separable() {
    let cfg = CorpusConfig {
        num_speakers: 12,
        utterances_per_speaker: 5,
        heldout_speakers: 3,
        heldout_utterances_per_speaker: 3,
        session_noise: 0.0,
        frame_noise: 0.0,
        min_frames: 10,
        max_frames: 20,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg, 3).unwrap().corpus;
    let means = utterance_means(&corpus);
    let speakers = cfg.num_speakers + cfg.heldout_speakers;
    let mut centroids = vec![vec![0.0; cfg.dim]; speakers];
    let mut counts = vec![0.0; speakers];
    for (s, m) in &means {
        for (c, v) in centroids[*s].iter_mut().zip(m) {
            *c += v;
        }
        counts[*s] += 1.0;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    for (s, m) in &means {
        let nearest = (0..speakers)
            .min_by(|&a, &b| euclid(m, &centroids[a]).total_cmp(&euclid(m, &centroids[b])))
            .unwrap();
        assert_eq!(nearest, *s);
    }
}

#[test]
fn crop_lengths_and_offsets_are_uniform() {
    let t = 100;
    // frame t holds the value t, so a crop's start is its first value
    let x = FeatureMatrix::new(t, 1, (0..t).map(|v| v as f64).collect());
    let mut r = stream(5, "crop-frequency", 0);
    let (lo, hi) = (20usize, 40usize);
    let mut lengths = vec![0usize; hi + 1];
    let mut starts = vec![0usize; t];
    let n = 10_000;
    for _ in 0..n {
        let c = random_crop(&x, lo, hi, &mut r).unwrap();
        let start = c.data()[0] as usize;
        for (k, &v) in c.data().iter().enumerate() {
            assert_eq!(v, (start + k) as f64, "crop is contiguous");
        }
        lengths[c.frames()] += 1;
        starts[start] += 1;
    }
    let p = 1.0 / (hi - lo + 1) as f64;
    let expected = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for len in lo..=hi {
        let dev = (lengths[len] as f64 - expected).abs();
        assert!(
            dev <= 3.0 * sigma,
            "length {len}: {} vs {expected:.1}",
            lengths[len]
        );
    }
    assert!(
        starts[..=t - lo].iter().all(|&c| c > 0),
        "every valid start observed"
    );
    assert!(starts[t - lo + 1..].iter().all(|&c| c == 0));
}

#[test]
fn episode_inclusion_is_uniform_over_speakers() {
    let cfg = CorpusConfig {
        num_speakers: 200,
        utterances_per_speaker: 4,
        heldout_speakers: 2,
        heldout_utterances_per_speaker: 2,
        dim: 2,
        latent_dim: 2,
        min_frames: 2,
        max_frames: 3,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg, 1).unwrap().corpus;
    let ep = EpisodeConfig {
        n_speakers: 20,
        k_support: 1,
        k_query: 1,
        crop_min: 1,
        crop_max: 1,
        ..EpisodeConfig::default()
    };
    let episodes = 10_000;
    let mut counts = vec![0usize; cfg.num_speakers];
    for i in 0..episodes {
        let e = sample_episode(&corpus, &ep, &mut stream(8, "episodes", i)).unwrap();
        for &s in &e.speakers {
            counts[s] += 1;
        }
    }
    // Each episode draws 20 of 200 speakers without replacement, so a given
    // speaker's inclusion count over independent episodes is Binomial(10000, 0.1).
    let p = ep.n_speakers as f64 / cfg.num_speakers as f64;
    let expected = episodes as f64 * p;
    let sigma = (episodes as f64 * p * (1.0 - p)).sqrt();
    for (s, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64 - expected).abs() <= 3.0 * sigma,
            "speaker {s}: {c} vs {expected}"
        );
    }
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 199 degrees of freedom; the 0.999 quantile is about 280
    assert!(chi2 < 280.0, "chi-square {chi2}");
}

#[test]
fn scattered_erase_on_100_by_40() {
    let mut r = rng(40);
    let x = FeatureMatrix::new(
        100,
        40,
        (0..4000).map(|_| r.random_range(1.0..2.0)).collect(),
    );
    let y = random_erase(&x, 0.1, EraseMode::Scattered, &mut stream(1, "erase", 0));
    let zeroed = y.data().iter().filter(|v| **v == 0.0).count();
    let same = x
        .data()
        .iter()
        .zip(y.data())
        .filter(|(a, b)| a.to_bits() == b.to_bits())
        .count();
    assert_eq!((zeroed, same), (400, 3600));
}

/// Straight-line forward pass over plain nested loops.
fn forward_oracle(x: &FeatureMatrix, p: &NetworkParams, c: Option<&TransformCoeffs>) -> Vec<f64> {
    let affine = |input: &[f64], w: &Tensor, b: &Tensor, layer: usize| -> Vec<f64> {
        let fan_out = b.data().len();
        let mut out = vec![0.0; fan_out];
        for j in 0..fan_out {
            let (s, o) = match c {
                Some(c) => (c.scale[layer].data()[j], c.offset[layer].data()[j]),
                None => (1.0, 0.0),
            };
            let mut acc = 0.0;
            for (i, &v) in input.iter().enumerate() {
                acc += v * w.data()[i * fan_out + j] * s;
            }
            out[j] = acc + b.data()[j] + o;
        }
        out
    };
    let frames: Vec<Vec<f64>> = (0..x.frames())
        .map(|t| {
            let mut h = x.frame(t).to_vec();
            for (l, layer) in p.frame_layers.iter().enumerate() {
                h = affine(&h, &layer.weight, &layer.bias, l)
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
            }
            h
        })
        .collect();
    let width = frames[0].len();
    let n = frames.len() as f64;
    let mut pooled = vec![0.0; 2 * width];
    for j in 0..width {
        let mean = frames.iter().map(|f| f[j]).sum::<f64>() / n;
        let var = frames
            .iter()
            .map(|f| (f[j] - mean) * (f[j] - mean))
            .sum::<f64>()
            / n;
        pooled[j] = mean;
        pooled[width + j] = (var + POOL_EPS).sqrt();
    }
    affine(&pooled, &p.fc1.weight, &p.fc1.bias, p.frame_layers.len())
}

fn random_coeffs(dims: &NetworkDims, r: &mut ChaCha8Rng) -> TransformCoeffs {
    let mut c = TransformCoeffs::identity(dims);
    for t in &mut c.scale {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = r.random_range(0.5..1.5));
    }
    for t in &mut c.offset {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = r.random_range(-0.3..0.3));
    }
    c
}

#[test]
fn forward_pass_matches_loop_oracle() {
    let mut r = rng(9);
    for trial in 0..10 {
        let cfg = NetworkConfig {
            frame_layers: vec![r.random_range(4..=24), r.random_range(4..=24)],
            embedding_dim: r.random_range(2..=12),
            fc2_dim: 6,
        };
        let dims = NetworkDims::new(7, &cfg, 5).unwrap();
        let mut p = init_params(&dims, trial).unwrap();
        for layer in p.frame_layers.iter_mut().chain([&mut p.fc1]) {
            layer
                .bias
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = r.random_range(-0.2..0.2));
        }
        let frames = r.random_range(1..=30);
        let x = FeatureMatrix::new(
            frames,
            7,
            (0..frames * 7).map(|_| r.random_range(-2.0..2.0)).collect(),
        );
        let c = random_coeffs(&dims, &mut r);
        for (got, want) in [
            (embed(&x, &p).unwrap().vector, forward_oracle(&x, &p, None)),
            (
                embed_transformed(&x, &p, &c).unwrap().vector,
                forward_oracle(&x, &p, Some(&c)),
            ),
        ] {
            assert_eq!(got.len(), dims.embedding);
            for (g, w) in got.iter().zip(&want) {
                assert!(
                    (g - w).abs() <= 1e-10 * w.abs().max(1.0),
                    "trial {trial}: {g} vs {w}"
                );
            }
        }
    }
}

#[test]
fn classifier_softmax_arithmetic() {
    let dims = NetworkDims::new(
        4,
        &NetworkConfig {
            frame_layers: vec![3],
            embedding_dim: 3,
            fc2_dim: 3,
        },
        2,
    )
    .unwrap();
    let mut p = init_params(&dims, 0).unwrap();
    p.fc2.weight.data_mut().fill(0.0);
    p.classifier.weight.data_mut().fill(0.0);
    p.classifier.bias = Tensor::vector(vec![3f64.ln(), 0.0]);
    let emb = Embedding {
        vector: vec![0.3, -1.0, 2.0],
        normalized: false,
    };
    let post = classify(&emb, &p).unwrap();
    assert!(
        (post[0] - 0.75).abs() < 1e-12 && (post[1] - 0.25).abs() < 1e-12,
        "{post:?}"
    );
}

#[test]
fn cosine_scores_match_dot_over_norms() {
    let mut r = rng(12);
    let mut embeddings = HashMap::new();
    for id in 0..40 {
        embeddings.insert(
            id,
            (0..16)
                .map(|_| r.random_range(-1.0..1.0))
                .collect::<Vec<f64>>(),
        );
    }
    let trials: Vec<Trial> = (0..200)
        .map(|_| {
            let a = r.random_range(0..40);
            let b = (a + r.random_range(1..40)) % 40;
            Trial {
                enroll: a,
                test: b,
                label: if r.random_bool(0.5) {
                    Label::Target
                } else {
                    Label::Nontarget
                },
            }
        })
        .collect();
    let scored = score_trials(
        &TrialSet {
            trials,
            scores: None,
        },
        &embeddings,
    )
    .unwrap();
    for (t, s) in scored.trials.iter().zip(scored.scores.as_ref().unwrap()) {
        let (a, b) = (&embeddings[&t.enroll], &embeddings[&t.test]);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((s - dot / (na * nb)).abs() <= 1e-12);
        assert_eq!(*s, cosine(a, b));
    }
}

fn small_world(speakers: usize, noise: f64) -> (Corpus, NetworkConfig, EpisodeConfig) {
    let cfg = CorpusConfig {
        num_speakers: speakers,
        utterances_per_speaker: 12,
        heldout_speakers: 2,
        heldout_utterances_per_speaker: 2,
        dim: 16,
        latent_dim: 8,
        min_frames: 30,
        max_frames: 50,
        session_noise: noise,
        frame_noise: noise,
    };
    let net = NetworkConfig {
        frame_layers: vec![32, 32],
        embedding_dim: 16,
        fc2_dim: 16,
    };
    let ep = EpisodeConfig {
        n_speakers: 5,
        k_support: 1,
        k_query: 3,
        crop_min: 20,
        crop_max: 30,
        ..EpisodeConfig::default()
    };
    (generate_corpus(&cfg, 21).unwrap().corpus, net, ep)
}

fn window_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn baseline_beats_uniform_classifier_on_separable_corpus() {
    let (corpus, net, ep) = small_world(10, 0.1);
    let train = TrainConfig {
        steps_stage1: 200,
        ..TrainConfig::default()
    };
    let setup = TrainSetup {
        corpus: &corpus,
        network: &net,
        episode: &ep,
        train: &train,
        seed: 4,
    };
    let (_, report) = train_baseline(&setup).unwrap();
    let ce: Vec<f64> = report.records.iter().map(|r| r.ce).collect();
    let tail = window_mean(&ce[ce.len() - 20..]);
    assert!(tail < 10f64.ln(), "final CE {tail}");
    assert!(tail < window_mean(&ce[..20]));
}

#[test]
fn stage2_makes_progress_and_starts_near_identity() {
    let (corpus, net, ep) = small_world(30, 0.8);
    let train = TrainConfig {
        steps_stage1: 100,
        steps_stage2: 300,
        ..TrainConfig::default()
    };
    let setup = TrainSetup {
        corpus: &corpus,
        network: &net,
        episode: &ep,
        train: &train,
        seed: 6,
    };
    let (theta, _) = train_pn(&setup).unwrap();
    let (_, report) = train_mltc_stage2(&setup, &theta).unwrap();
    let pn: Vec<f64> = report.records.iter().map(|r| r.pn).collect();
    assert_eq!(pn.len(), 300);
    let (head, tail) = (window_mean(&pn[..30]), window_mean(&pn[pn.len() - 30..]));
    assert!(tail <= head, "stage-2 PN loss went from {head} to {tail}");

    let untrained = TrainConfig {
        steps_stage2: 0,
        ..train.clone()
    };
    let setup0 = TrainSetup {
        train: &untrained,
        ..setup
    };
    let (init, _) = train_mltc_stage2(&setup0, &theta).unwrap();
    for u in corpus.utterances.iter().take(20) {
        let plain = embed(&u.features, &theta).unwrap().vector;
        let near = embed_transformed(&u.features, &theta, &init)
            .unwrap()
            .vector;
        let norm = plain.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(euclid(&plain, &near) <= 1e-2 * norm);
    }
}
