//! Episodic minibatches and random-erasing augmentation.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::rng::Rng;
use crate::synth::{random_crop, Corpus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EraseMode {
    /// One contiguous time-frequency block.
    Rectangle,
    /// Individual cells chosen uniformly without replacement.
    Scattered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub n_speakers: usize,
    pub k_support: usize,
    pub k_query: usize,
    pub crop_min: usize,
    pub crop_max: usize,
    pub erase_fraction: f64,
    pub erase_mode: EraseMode,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_speakers: 20,
            k_support: 1,
            k_query: 3,
            crop_min: 200,
            crop_max: 400,
            erase_fraction: 0.1,
            erase_mode: EraseMode::Rectangle,
        }
    }
}

impl EpisodeConfig {
    pub fn batch_size(&self) -> usize {
        self.n_speakers * (self.k_support + self.k_query)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("episode: {m}")));
        if self.n_speakers == 0 || self.k_support == 0 || self.k_query == 0 {
            return bad("n_speakers, k_support and k_query must be positive");
        }
        if self.crop_min == 0 || self.crop_min > self.crop_max {
            return bad("need 0 < crop_min <= crop_max");
        }
        if !(0.0..=1.0).contains(&self.erase_fraction) {
            return bad("erase_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One meta-learning minibatch. Rows of `support`/`query` are indexed by the
/// position of the speaker in `speakers`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub speakers: Vec<usize>,
    pub support: Vec<Vec<FeatureMatrix>>,
    pub query: Vec<Vec<FeatureMatrix>>,
    pub support_ids: Vec<Vec<usize>>,
    pub query_ids: Vec<Vec<usize>>,
    pub support_aug: Option<Vec<Vec<FeatureMatrix>>>,
    pub query_aug: Option<Vec<Vec<FeatureMatrix>>>,
}

impl Episode {
    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn support_count(&self) -> usize {
        self.support.iter().map(Vec::len).sum()
    }

    pub fn query_count(&self) -> usize {
        self.query.iter().map(Vec::len).sum()
    }
}

/// Samples `n_speakers` distinct training speakers, then `k_support + k_query`
/// distinct utterances per speaker, cropping each one.
pub fn sample_episode(corpus: &Corpus, config: &EpisodeConfig, rng: &mut Rng) -> Result<Episode> {
    config.validate()?;
    let by_speaker = corpus.train_index();
    if by_speaker.len() < config.n_speakers {
        return Err(Error::Insufficient(format!(
            "episode needs {} speakers, corpus has {}",
            config.n_speakers,
            by_speaker.len()
        )));
    }
    let per = config.k_support + config.k_query;
    if let Some((s, u)) = by_speaker.iter().enumerate().find(|(_, u)| u.len() < per) {
        return Err(Error::Insufficient(format!(
            "speaker {s} has {} utterances, episode needs {per}",
            u.len()
        )));
    }

    let speakers: Vec<usize> = index::sample(rng, by_speaker.len(), config.n_speakers).into_vec();
    let mut ep = Episode {
        speakers: speakers.clone(),
        support: Vec::with_capacity(speakers.len()),
        query: Vec::with_capacity(speakers.len()),
        support_ids: Vec::with_capacity(speakers.len()),
        query_ids: Vec::with_capacity(speakers.len()),
        support_aug: None,
        query_aug: None,
    };
    for &s in &speakers {
        let pool = &by_speaker[s];
        let picked: Vec<usize> = index::sample(rng, pool.len(), per)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let mut crops = Vec::with_capacity(per);
        for &id in &picked {
            let u = &corpus.utterances[id];
            crops.push(random_crop(
                &u.features,
                config.crop_min,
                config.crop_max,
                rng,
            )?);
        }
        let query = crops.split_off(config.k_support);
        ep.support.push(crops);
        ep.query.push(query);
        ep.support_ids.push(picked[..config.k_support].to_vec());
        ep.query_ids.push(picked[config.k_support..].to_vec());
    }
    Ok(ep)
}

/// Number of cells erased for a `cells`-element matrix at fraction `rho`:
/// `floor(rho · cells)`, with a 1e-9 guard against binary rounding of `rho`.
pub fn erase_count(cells: usize, rho: f64) -> usize {
    ((rho * cells as f64 + 1e-9).floor() as usize).min(cells)
}

/// Flat row-major cell indices to zero in a `frames × dim` matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EraseMask {
    pub frames: usize,
    pub dim: usize,
    pub cells: Vec<usize>,
}

impl EraseMask {
    pub fn apply(&self, x: &FeatureMatrix) -> FeatureMatrix {
        assert_eq!((x.frames(), x.dim()), (self.frames, self.dim), "mask shape");
        let mut out = x.clone();
        let data = out.data_mut();
        for &c in &self.cells {
            data[c] = 0.0;
        }
        out
    }
}

fn factor_pairs(area: usize, frames: usize, dim: usize) -> Vec<(usize, usize)> {
    (1..=frames.min(area))
        .filter(|&h| area.is_multiple_of(h) && area / h <= dim)
        .map(|h| (h, area / h))
        .collect()
}

pub fn erase_mask(
    frames: usize,
    dim: usize,
    rho: f64,
    mode: EraseMode,
    rng: &mut Rng,
) -> EraseMask {
    assert!(
        (0.0..=1.0).contains(&rho),
        "erase fraction {rho} outside [0, 1]"
    );
    let mut area = erase_count(frames * dim, rho);
    let cells = match mode {
        _ if area == 0 => Vec::new(),
        EraseMode::Scattered => {
            let mut c = index::sample(rng, frames * dim, area).into_vec();
            c.sort_unstable();
            c
        }
        EraseMode::Rectangle => {
            // Areas with no fitting factor pair shrink to the nearest one that has one.
            let pairs = loop {
                let p = factor_pairs(area, frames, dim);
                if !p.is_empty() {
                    break p;
                }
                area -= 1;
            };
            let (h, w) = pairs[rng.random_range(0..pairs.len())];
            let t0 = rng.random_range(0..=frames - h);
            let f0 = rng.random_range(0..=dim - w);
            let mut c = Vec::with_capacity(h * w);
            for t in t0..t0 + h {
                for f in f0..f0 + w {
                    c.push(t * dim + f);
                }
            }
            c
        }
    };
    EraseMask { frames, dim, cells }
}

pub fn random_erase(x: &FeatureMatrix, rho: f64, mode: EraseMode, rng: &mut Rng) -> FeatureMatrix {
    erase_mask(x.frames(), x.dim(), rho, mode, rng).apply(x)
}

fn erase_all(
    sets: &[Vec<FeatureMatrix>],
    rho: f64,
    mode: EraseMode,
    rng: &mut Rng,
) -> Vec<Vec<FeatureMatrix>> {
    sets.iter()
        .map(|group| {
            group
                .iter()
                .map(|x| random_erase(x, rho, mode, rng))
                .collect()
        })
        .collect()
}

/// Attaches an erased copy of every support matrix, aligned position by position.
pub fn augment_support(
    mut e: Episode,
    rho: f64,
    mode: EraseMode,
    rng: &mut Rng,
) -> Result<Episode> {
    if e.support_aug.is_some() {
        return Err(Error::Misaligned("support set is already augmented".into()));
    }
    e.support_aug = Some(erase_all(&e.support, rho, mode, rng));
    Ok(e)
}

/// Query-set counterpart of [`augment_support`].
pub fn augment_query(mut e: Episode, rho: f64, mode: EraseMode, rng: &mut Rng) -> Result<Episode> {
    if e.query_aug.is_some() {
        return Err(Error::Misaligned("query set is already augmented".into()));
    }
    e.query_aug = Some(erase_all(&e.query, rho, mode, rng));
    Ok(e)
}
