//! Deterministic synthetic multi-speaker corpus.
//!
//! Every frame of an utterance is `A · latent + session + noise`, where `A`
//! is a fixed random projection from the speaker latent space to feature
//! space, `session` is drawn once per utterance and `noise` once per frame.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::rng::{self, Rng};

pub const CORPUS_MAGIC: &[u8; 4] = b"MSVC";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Training speakers.
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Evaluation speakers, disjoint from the training ones.
    pub heldout_speakers: usize,
    pub heldout_utterances_per_speaker: usize,
    pub dim: usize,
    pub latent_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub session_noise: f64,
    pub frame_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_speakers: 200,
            utterances_per_speaker: 30,
            heldout_speakers: 50,
            heldout_utterances_per_speaker: 10,
            dim: 40,
            latent_dim: 16,
            min_frames: 200,
            max_frames: 400,
            session_noise: 0.6,
            frame_noise: 1.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if self.num_speakers < 2 {
            return bad("num_speakers must be at least 2");
        }
        if self.utterances_per_speaker == 0 {
            return bad("utterances_per_speaker must be positive");
        }
        if self.heldout_speakers > 0 && self.heldout_utterances_per_speaker == 0 {
            return bad("heldout_utterances_per_speaker must be positive");
        }
        if self.dim == 0 || self.latent_dim == 0 {
            return bad("dim and latent_dim must be positive");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("need 0 < min_frames <= max_frames");
        }
        if !(self.session_noise >= 0.0 && self.frame_noise >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub speaker: usize,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub speaker: usize,
    pub features: FeatureMatrix,
}

/// Training speakers have ids `0..train_speakers`; held-out speakers follow.
/// Utterance ids are positions in `utterances`.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dim: usize,
    pub train_speakers: usize,
    pub heldout_speakers: usize,
    pub utterances: Vec<Utterance>,
}

pub struct Generated {
    pub corpus: Corpus,
    pub speakers: Vec<SpeakerProfile>,
    /// Row-major `dim × latent_dim` projection.
    pub projection: Vec<f64>,
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Builds the corpus. Pure in `(config, seed)`; each speaker draws from its
/// own stream so the result does not depend on thread scheduling.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Generated> {
    config.validate()?;
    let (d, l) = (config.dim, config.latent_dim);
    let mut prng = rng::stream(seed, "corpus/projection", 0);
    let scale = 1.0 / (l as f64).sqrt();
    let projection: Vec<f64> = (0..d * l).map(|_| normal(&mut prng) * scale).collect();

    let total = config.num_speakers + config.heldout_speakers;
    let per_speaker: Vec<(SpeakerProfile, Vec<(usize, FeatureMatrix)>)> = (0..total)
        .into_par_iter()
        .map(|speaker| {
            let mut rng = rng::stream(seed, "corpus/speaker", speaker as u64);
            let latent: Vec<f64> = (0..l).map(|_| normal(&mut rng)).collect();
            let base: Vec<f64> = (0..d)
                .map(|i| {
                    projection[i * l..(i + 1) * l]
                        .iter()
                        .zip(&latent)
                        .map(|(a, z)| a * z)
                        .sum()
                })
                .collect();
            let count = if speaker < config.num_speakers {
                config.utterances_per_speaker
            } else {
                config.heldout_utterances_per_speaker
            };
            let utts = (0..count)
                .map(|_| {
                    let frames = rng.random_range(config.min_frames..=config.max_frames);
                    let session: Vec<f64> = (0..d)
                        .map(|_| config.session_noise * normal(&mut rng))
                        .collect();
                    let mut data = Vec::with_capacity(frames * d);
                    for _ in 0..frames {
                        for i in 0..d {
                            data.push(base[i] + session[i] + config.frame_noise * normal(&mut rng));
                        }
                    }
                    (speaker, FeatureMatrix::new(frames, d, data))
                })
                .collect();
            (SpeakerProfile { speaker, latent }, utts)
        })
        .collect();

    let mut speakers = Vec::with_capacity(total);
    let mut utterances = Vec::new();
    for (profile, utts) in per_speaker {
        speakers.push(profile);
        for (speaker, features) in utts {
            utterances.push(Utterance {
                id: utterances.len(),
                speaker,
                features,
            });
        }
    }
    Ok(Generated {
        corpus: Corpus {
            dim: d,
            train_speakers: config.num_speakers,
            heldout_speakers: config.heldout_speakers,
            utterances,
        },
        speakers,
        projection,
    })
}

impl Corpus {
    pub fn is_heldout_speaker(&self, speaker: usize) -> bool {
        speaker >= self.train_speakers
    }

    /// Utterance ids of each training speaker, indexed by speaker id.
    pub fn train_index(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.train_speakers];
        for u in &self.utterances {
            if u.speaker < self.train_speakers {
                idx[u.speaker].push(u.id);
            }
        }
        idx
    }

    /// Utterance ids of each held-out speaker, in held-out speaker order.
    pub fn heldout_index(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.heldout_speakers];
        for u in &self.utterances {
            if u.speaker >= self.train_speakers {
                idx[u.speaker - self.train_speakers].push(u.id);
            }
        }
        idx
    }

    pub fn utterance(&self, id: usize) -> Option<&Utterance> {
        self.utterances.get(id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let frames: usize = self.utterances.iter().map(|u| u.features.frames()).sum();
        let mut out = Vec::with_capacity(24 + self.utterances.len() * 8 + frames * self.dim * 8);
        out.extend_from_slice(CORPUS_MAGIC);
        for v in [
            CORPUS_VERSION,
            self.train_speakers as u32,
            self.heldout_speakers as u32,
            self.utterances.len() as u32,
            self.dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for u in &self.utterances {
            out.extend_from_slice(&(u.speaker as u32).to_le_bytes());
            out.extend_from_slice(&(u.features.frames() as u32).to_le_bytes());
            for v in u.features.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Corpus> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Corpus::from_bytes(&bytes).map_err(|detail| Error::format(path, detail))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Corpus, String> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CORPUS_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let train_speakers = r.u32()? as usize;
        let heldout_speakers = r.u32()? as usize;
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err("zero feature dimension".into());
        }
        let mut utterances = Vec::with_capacity(count);
        for id in 0..count {
            let speaker = r.u32()? as usize;
            if speaker >= train_speakers + heldout_speakers {
                return Err(format!("utterance {id}: speaker {speaker} out of range"));
            }
            let frames = r.u32()? as usize;
            if frames == 0 {
                return Err(format!("utterance {id}: zero frames"));
            }
            let raw = r.take(frames * dim * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            utterances.push(Utterance {
                id,
                speaker,
                features: FeatureMatrix::new(frames, dim, data),
            });
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Corpus {
            dim,
            train_speakers,
            heldout_speakers,
            utterances,
        })
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Random contiguous slice: length uniform in `[len_min, min(len_max, T)]`,
/// start uniform over the valid positions.
pub fn random_crop(
    x: &FeatureMatrix,
    len_min: usize,
    len_max: usize,
    rng: &mut Rng,
) -> Result<FeatureMatrix> {
    if len_min == 0 || len_min > len_max {
        return Err(Error::Config(format!("crop bounds [{len_min}, {len_max}]")));
    }
    let t = x.frames();
    if t < len_min {
        return Err(Error::TooShort {
            frames: t,
            min: len_min,
        });
    }
    let len = rng.random_range(len_min..=len_max.min(t));
    let start = rng.random_range(0..=t - len);
    Ok(x.slice(start, len))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            num_speakers: 4,
            utterances_per_speaker: 3,
            heldout_speakers: 2,
            heldout_utterances_per_speaker: 2,
            dim: 5,
            latent_dim: 3,
            min_frames: 4,
            max_frames: 9,
            session_noise: 0.1,
            frame_noise: 0.1,
        }
    }

    #[test]
    fn noise_free_frames_equal_projected_latent() {
        let cfg = CorpusConfig {
            session_noise: 0.0,
            frame_noise: 0.0,
            ..small()
        };
        let g = generate_corpus(&cfg, 3).unwrap();
        for u in &g.corpus.utterances {
            let latent = &g.speakers[u.speaker].latent;
            let base: Vec<f64> = (0..cfg.dim)
                .map(|i| {
                    (0..cfg.latent_dim)
                        .map(|j| g.projection[i * cfg.latent_dim + j] * latent[j])
                        .sum()
                })
                .collect();
            for t in 0..u.features.frames() {
                assert_eq!(u.features.frame(t), base.as_slice());
            }
        }
    }

    #[test]
    fn layout_and_bounds() {
        let cfg = small();
        let c = generate_corpus(&cfg, 1).unwrap().corpus;
        assert_eq!(c.utterances.len(), 4 * 3 + 2 * 2);
        assert!(c
            .utterances
            .iter()
            .all(
                |u| (cfg.min_frames..=cfg.max_frames).contains(&u.features.frames())
                    && u.features.dim() == 5
            ));
        assert_eq!(c.train_index().len(), 4);
        assert_eq!(c.heldout_index(), vec![vec![12, 13], vec![14, 15]]);
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(generate_corpus(
            &CorpusConfig {
                num_speakers: 1,
                ..small()
            },
            0
        )
        .is_err());
        assert!(generate_corpus(
            &CorpusConfig {
                min_frames: 10,
                ..small()
            },
            0
        )
        .is_err());
        assert!(generate_corpus(
            &CorpusConfig {
                frame_noise: -1.0,
                ..small()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn binary_roundtrip_and_truncation() {
        let c = generate_corpus(&small(), 9).unwrap().corpus;
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"MSVC");
        assert_eq!(Corpus::from_bytes(&bytes).unwrap(), c);
        assert!(Corpus::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Corpus::from_bytes(&bad).is_err());
    }

    #[test]
    fn crop_edge_cases() {
        let x = FeatureMatrix::new(5, 2, (0..10).map(|v| v as f64).collect());
        let mut rng = rng::stream(0, "t", 0);
        assert_eq!(random_crop(&x, 5, 5, &mut rng).unwrap(), x);
        let one = random_crop(&x, 1, 1, &mut rng).unwrap();
        assert_eq!(one.frames(), 1);
        assert!((0..5).any(|t| x.frame(t) == one.frame(0)));
        assert!(matches!(
            random_crop(&x, 6, 8, &mut rng),
            Err(Error::TooShort { frames: 5, min: 6 })
        ));
        // len_max beyond T is clipped
        assert_eq!(random_crop(&x, 5, 50, &mut rng).unwrap(), x);
    }
}
