//! Verification trials, cosine scoring, EER, minDCF and score fusion.
//!
//! Both metrics are computed on the same ROC point list: one operating point
//! per distinct score (accept when `score >= threshold`) plus the two ends,
//! accept-all and reject-all. EER interpolates linearly between the two
//! adjacent points where the miss rate overtakes the false-accept rate.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Nontarget,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: usize,
    pub test: usize,
    pub label: Label,
}

impl fmt::Display for Trial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.enroll, self.test, self.label.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub scores: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0 && self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::Config(
                "dcf: need 0 < p_target < 1 and positive costs".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub targets_per_speaker: usize,
    pub nontargets_per_speaker: usize,
    pub dcf: DcfParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            targets_per_speaker: 40,
            nontargets_per_speaker: 200,
            dcf: DcfParams::default(),
        }
    }
}

fn nontarget_owner(a: usize, b: usize, sa: usize, sb: usize) -> usize {
    if (a + b).is_multiple_of(2) {
        sa.min(sb)
    } else {
        sa.max(sb)
    }
}

/// Samples a balanced trial list from utterance ids grouped by speaker.
///
/// Each speaker contributes `targets` same-speaker pairs and `nontargets`
/// cross-speaker pairs. Every unordered cross pair belongs to exactly one of
/// its two speakers, so no pair can be drawn twice.
pub fn build_trials(
    groups: &[Vec<usize>],
    targets: usize,
    nontargets: usize,
    seed: u64,
) -> Result<TrialSet> {
    if groups.len() < 2 {
        return Err(Error::Insufficient(format!(
            "trials need at least 2 speakers, got {}",
            groups.len()
        )));
    }
    if let Some(s) = groups.iter().position(|g| g.len() < 2) {
        return Err(Error::Insufficient(format!(
            "speaker group {s} has fewer than 2 utterances"
        )));
    }
    let owner_of: HashMap<usize, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(s, g)| g.iter().map(move |&u| (u, s)))
        .collect();

    let mut cross: Vec<Vec<(usize, usize)>> = vec![Vec::new(); groups.len()];
    for (sa, ga) in groups.iter().enumerate() {
        for gb in &groups[sa + 1..] {
            for &a in ga {
                for &b in gb {
                    let sb = owner_of[&b];
                    let own = nontarget_owner(a, b, sa, sb);
                    let pair = if own == sa { (a, b) } else { (b, a) };
                    cross[own].push(pair);
                }
            }
        }
    }

    let mut rng: Rng = rng::stream(seed, "trials", 0);
    let mut trials = Vec::with_capacity(groups.len() * (targets + nontargets));
    for (s, g) in groups.iter().enumerate() {
        let same: Vec<(usize, usize)> = (0..g.len())
            .flat_map(|i| (i + 1..g.len()).map(move |j| (i, j)))
            .map(|(i, j)| (g[i], g[j]))
            .collect();
        if targets > same.len() {
            return Err(Error::Insufficient(format!(
                "speaker group {s}: {targets} target trials requested, {} pairs available",
                same.len()
            )));
        }
        if nontargets > cross[s].len() {
            return Err(Error::Insufficient(format!(
                "speaker group {s}: {nontargets} nontarget trials requested, {} pairs available",
                cross[s].len()
            )));
        }
        let mut picked: Vec<usize> = sample(&mut rng, same.len(), targets).into_vec();
        picked.sort_unstable();
        trials.extend(picked.into_iter().map(|i| Trial {
            enroll: same[i].0,
            test: same[i].1,
            label: Label::Target,
        }));
        let mut picked: Vec<usize> = sample(&mut rng, cross[s].len(), nontargets).into_vec();
        picked.sort_unstable();
        trials.extend(picked.into_iter().map(|i| Trial {
            enroll: cross[s][i].0,
            test: cross[s][i].1,
            label: Label::Nontarget,
        }));
    }
    Ok(TrialSet {
        trials,
        scores: None,
    })
}

/// Cosine similarity of the two vectors after length normalization, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    dot.clamp(-1.0, 1.0)
}

pub fn score_trials(ts: &TrialSet, embeddings: &HashMap<usize, Vec<f64>>) -> Result<TrialSet> {
    let lookup = |u: usize| embeddings.get(&u).ok_or(Error::MissingEmbedding(u));
    let scores = ts
        .trials
        .iter()
        .map(|t| Ok(cosine(lookup(t.enroll)?, lookup(t.test)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(TrialSet {
        trials: ts.trials.clone(),
        scores: Some(scores),
    })
}

/// Miss and false-accept rates at every operating point, ordered by rising threshold.
pub fn roc_points(ts: &TrialSet) -> Result<Vec<(f64, f64)>> {
    let scores = ts
        .scores
        .as_ref()
        .ok_or_else(|| Error::Misaligned("trial set has no scores".into()))?;
    if scores.len() != ts.trials.len() {
        return Err(Error::Misaligned(format!(
            "{} scores for {} trials",
            scores.len(),
            ts.trials.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Degenerate(format!("score {i} is not finite")));
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(&ts.trials)
        .map(|(&s, t)| (s, t.label == Label::Target))
        .collect();
    let n_tgt = pairs.iter().filter(|p| p.1).count();
    let n_non = pairs.len() - n_tgt;
    if n_tgt == 0 || n_non == 0 {
        return Err(Error::Degenerate(format!(
            "metrics need both classes ({n_tgt} target, {n_non} nontarget trials)"
        )));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (n_tgt as f64, n_non as f64);
    let mut points = Vec::with_capacity(pairs.len() + 2);
    points.push((0.0, 1.0));
    let (mut miss, mut rejected_non) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        // threshold at pairs[i].0: everything below is rejected
        points.push((miss as f64 / nt, (n_non - rejected_non) as f64 / nn));
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                miss += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
    }
    points.push((1.0, 0.0));
    Ok(points)
}

pub fn eer(ts: &TrialSet) -> Result<f64> {
    Ok(eer_from_points(&roc_points(ts)?))
}

pub(crate) fn eer_from_points(points: &[(f64, f64)]) -> f64 {
    for w in points.windows(2) {
        let ((m0, f0), (m1, f1)) = (w[0], w[1]);
        let (d0, d1) = (m0 - f0, m1 - f1);
        if d1 >= 0.0 {
            if d0 == d1 {
                return (m0 + f0) / 2.0;
            }
            let t = -d0 / (d1 - d0);
            return m0 + t * (m1 - m0);
        }
    }
    unreachable!("the reject-all point always has miss >= false accept")
}

pub fn min_dcf(ts: &TrialSet, p: &DcfParams) -> Result<f64> {
    p.validate()?;
    let points = roc_points(ts)?;
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    Ok(points
        .iter()
        .map(|&(pm, pf)| (p.c_miss * p.p_target * pm + p.c_fa * (1.0 - p.p_target) * pf) / norm)
        .fold(f64::INFINITY, f64::min))
}

/// Equal-weight mean of two score sets over the same trial list.
pub fn fuse_scores(a: &TrialSet, b: &TrialSet) -> Result<TrialSet> {
    if a.trials != b.trials {
        return Err(Error::Misaligned(
            "fused score sets cover different trial lists".into(),
        ));
    }
    let (Some(sa), Some(sb)) = (&a.scores, &b.scores) else {
        return Err(Error::Misaligned(
            "both score sets must be scored before fusion".into(),
        ));
    };
    Ok(TrialSet {
        trials: a.trials.clone(),
        scores: Some(sa.iter().zip(sb).map(|(x, y)| (x + y) / 2.0).collect()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub system: String,
    pub eer: f64,
    pub min_dcf: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn metrics(system: &str, ts: &TrialSet, dcf: &DcfParams) -> Result<Metrics> {
    let n_target = ts
        .trials
        .iter()
        .filter(|t| t.label == Label::Target)
        .count();
    Ok(Metrics {
        system: system.to_string(),
        eer: eer(ts)?,
        min_dcf: min_dcf(ts, dcf)?,
        n_target,
        n_nontarget: ts.trials.len() - n_target,
    })
}

impl Metrics {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

pub fn trials_to_string(ts: &TrialSet) -> String {
    ts.trials.iter().map(|t| format!("{t}\n")).collect()
}

pub fn scores_to_string(ts: &TrialSet) -> Result<String> {
    let scores = ts
        .scores
        .as_ref()
        .ok_or_else(|| Error::Misaligned("trial set has no scores".into()))?;
    Ok(ts
        .trials
        .iter()
        .zip(scores)
        .map(|(t, s)| format!("{} {} {s}\n", t.enroll, t.test))
        .collect())
}

fn fields<'a>(path: &Path, line_no: usize, line: &'a str) -> Result<[&'a str; 3]> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    parts.try_into().map_err(|_| {
        Error::format(
            path,
            format!("line {line_no}: expected 3 space-separated fields"),
        )
    })
}

fn parse_id(path: &Path, line_no: usize, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::format(path, format!("line {line_no}: bad utterance id '{s}'")))
}

fn nonblank(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn parse_trials(path: &Path, text: &str) -> Result<TrialSet> {
    let mut trials = Vec::new();
    for (n, line) in nonblank(text) {
        let [e, t, l] = fields(path, n, line)?;
        let label = match l {
            "target" => Label::Target,
            "nontarget" => Label::Nontarget,
            other => {
                return Err(Error::format(
                    path,
                    format!("line {n}: bad label '{other}'"),
                ))
            }
        };
        let trial = Trial {
            enroll: parse_id(path, n, e)?,
            test: parse_id(path, n, t)?,
            label,
        };
        if trial.enroll == trial.test {
            return Err(Error::format(
                path,
                format!("line {n}: enroll and test are the same utterance"),
            ));
        }
        trials.push(trial);
    }
    if trials.is_empty() {
        return Err(Error::format(path, "no trials"));
    }
    Ok(TrialSet {
        trials,
        scores: None,
    })
}

/// Attaches a score file to `trials`, checking that both list the same pairs in the same order.
pub fn parse_scores(path: &Path, text: &str, trials: &TrialSet) -> Result<TrialSet> {
    let mut scores = Vec::with_capacity(trials.trials.len());
    for (n, line) in nonblank(text) {
        let [e, t, s] = fields(path, n, line)?;
        let (e, t) = (parse_id(path, n, e)?, parse_id(path, n, t)?);
        let expected = trials.trials.get(scores.len()).ok_or_else(|| {
            Error::format(
                path,
                format!("more score lines than the {} trials", trials.trials.len()),
            )
        })?;
        if (expected.enroll, expected.test) != (e, t) {
            return Err(Error::format(
                path,
                format!(
                    "line {n}: pair {e} {t} does not match trial {} {}",
                    expected.enroll, expected.test
                ),
            ));
        }
        let s: f64 = s
            .parse()
            .map_err(|_| Error::format(path, format!("line {n}: bad score '{s}'")))?;
        scores.push(s);
    }
    if scores.len() != trials.trials.len() {
        return Err(Error::format(
            path,
            format!("{} scores for {} trials", scores.len(), trials.trials.len()),
        ));
    }
    Ok(TrialSet {
        trials: trials.trials.clone(),
        scores: Some(scores),
    })
}

pub fn read_trials(path: &Path) -> Result<TrialSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(path, &text)
}

pub fn read_scores(path: &Path, trials: &TrialSet) -> Result<TrialSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(path, &text, trials)
}
