//! Training procedures for every system.
//!
//! | system     | stage 1                         | stage 2                          |
//! |------------|---------------------------------|----------------------------------|
//! | `baseline` | CE                              |                                  |
//! | `pn`       | CE + λ·PN                       |                                  |
//! | `mltc`     | CE + λ·PN                       | PN on transform coefficients     |
//! | `acl`      | CE + λ·(PN + contrastive), erased support |                        |
//! | `mltc-acl` | as `acl`                        | PN on transform coefficients     |
//! | `mlft`     | CE + λ·PN                       | PN on the whole backbone         |
//! | `acl-q`    | CE + λ·(PN + contrastive), erased query |                          |
//!
//! Every random draw comes from a named stream keyed by the run seed and the
//! step index, so two systems that share a stage 1 recipe produce identical
//! stage 1 checkpoints under the same seed.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::episode::{augment_query, augment_support, sample_episode, Episode, EpisodeConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FrameBatch};
use crate::grad::{Graph, Tensor, Var};
use crate::loss::{self, Metric};
use crate::network::{
    bind_coeffs, bind_params, forward_embeddings, forward_logits, init_params, NetworkConfig,
    NetworkDims, NetworkParams, TransformCoeffs,
};
use crate::optim::{adam_step, AdamConfig, AdamState, ExpSchedule};
use crate::rng;
use crate::synth::Corpus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Baseline,
    Pn,
    Mltc,
    Acl,
    MltcAcl,
    Mlft,
    AclQ,
}

impl System {
    pub const ALL: [System; 7] = [
        System::Baseline,
        System::Pn,
        System::Mltc,
        System::Acl,
        System::MltcAcl,
        System::Mlft,
        System::AclQ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Baseline => "baseline",
            System::Pn => "pn",
            System::Mltc => "mltc",
            System::Acl => "acl",
            System::MltcAcl => "mltc-acl",
            System::Mlft => "mlft",
            System::AclQ => "acl-q",
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            System::Baseline => Objective::Ce,
            System::Pn | System::Mltc | System::Mlft => Objective::Cp,
            System::Acl | System::MltcAcl => Objective::Cpc(AugTarget::Support),
            System::AclQ => Objective::Cpc(AugTarget::Query),
        }
    }

    pub fn stage2(self) -> Option<Stage2> {
        match self {
            System::Mltc | System::MltcAcl => Some(Stage2::Coefficients),
            System::Mlft => Some(Stage2::FineTune),
            _ => None,
        }
    }

    /// The single-stage system whose checkpoint is this system's stage 1.
    pub fn stage1_system(self) -> System {
        match self {
            System::Mltc | System::Mlft => System::Pn,
            System::MltcAcl => System::Acl,
            s => s,
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|sys| sys.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown system '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugTarget {
    Support,
    Query,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Global cross-entropy only.
    Ce,
    /// `CE + λ·PN`.
    Cp,
    /// `CE + λ·(PN + contrastive)` against erased copies of one set.
    Cpc(AugTarget),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage2 {
    /// Learn transformation coefficients over a frozen backbone.
    Coefficients,
    /// Update the backbone itself with the PN loss alone.
    FineTune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub stage2_lr_start: f64,
    pub stage2_lr_end: f64,
    pub lambda: f64,
    pub metric: Metric,
    pub normalize_embeddings: bool,
    /// L2 penalty gradient added to weight matrices (not biases or coefficients).
    pub weight_decay: f64,
    /// Half-width of the uniform noise around identity coefficients.
    pub coeff_init_noise: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps_stage1: 2000,
            steps_stage2: 500,
            lr_start: 1e-3,
            lr_end: 1e-4,
            stage2_lr_start: 1e-4,
            stage2_lr_end: 1e-5,
            lambda: 0.5,
            metric: Metric::SquaredEuclidean,
            normalize_embeddings: true,
            weight_decay: 1e-4,
            coeff_init_noise: 1e-3,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        for (name, start, end) in [
            ("stage 1", self.lr_start, self.lr_end),
            ("stage 2", self.stage2_lr_start, self.stage2_lr_end),
        ] {
            if !(start > 0.0 && end > 0.0 && end <= start) {
                return bad(&format!(
                    "{name} learning rates must be positive and non-increasing"
                ));
            }
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.coeff_init_noise >= 0.0) {
            return bad("weight_decay and coeff_init_noise must be non-negative");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn stage1_schedule(&self) -> ExpSchedule {
        ExpSchedule {
            start: self.lr_start,
            end: self.lr_end,
            steps: self.steps_stage1,
        }
    }

    pub fn stage2_schedule(&self) -> ExpSchedule {
        ExpSchedule {
            start: self.stage2_lr_start,
            end: self.stage2_lr_end,
            steps: self.steps_stage2,
        }
    }
}

/// Loss components recorded for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub pn: f64,
    pub contra: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub wall_time: Duration,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_ce,loss_pn,loss_contra";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.lr, r.total, r.ce, r.pn, r.contra
            ));
        }
        s
    }

    /// Appends a later stage's records, renumbering their steps.
    pub fn append(&mut self, other: TrainReport) {
        let offset = self.records.len();
        self.records
            .extend(other.records.into_iter().map(|r| StepRecord {
                step: r.step + offset,
                ..r
            }));
        self.wall_time += other.wall_time;
    }
}

/// Everything a training run reads.
#[derive(Clone, Copy)]
pub struct TrainSetup<'a> {
    pub corpus: &'a Corpus,
    pub network: &'a NetworkConfig,
    pub episode: &'a EpisodeConfig,
    pub train: &'a TrainConfig,
    pub seed: u64,
}

impl TrainSetup<'_> {
    pub fn dims(&self) -> Result<NetworkDims> {
        NetworkDims::new(self.corpus.dim, self.network, self.corpus.train_speakers)
    }

    fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.train.validate()
    }
}

/// Row layout of an episode stacked into one frame batch: support rows,
/// then query rows, then augmented rows (if any), each speaker-major.
struct Layout {
    support_counts: Vec<usize>,
    query_counts: Vec<usize>,
    support_rows: Vec<usize>,
    query_rows: Vec<usize>,
    aug_rows: Vec<usize>,
    labels: Vec<usize>,
}

fn stack_episode(ep: &Episode) -> Result<(FrameBatch, Layout)> {
    let support_counts: Vec<usize> = ep.support.iter().map(Vec::len).collect();
    let query_counts: Vec<usize> = ep.query.iter().map(Vec::len).collect();
    let ns: usize = support_counts.iter().sum();
    let nq: usize = query_counts.iter().sum();
    let aug = ep.support_aug.as_ref().or(ep.query_aug.as_ref());
    let mut mats: Vec<&FeatureMatrix> = ep
        .support
        .iter()
        .flatten()
        .chain(ep.query.iter().flatten())
        .collect();
    let mut labels: Vec<usize> = Vec::with_capacity(ns + nq);
    for (group, &spk) in ep.support.iter().zip(&ep.speakers) {
        labels.extend(std::iter::repeat_n(spk, group.len()));
    }
    for (group, &spk) in ep.query.iter().zip(&ep.speakers) {
        labels.extend(std::iter::repeat_n(spk, group.len()));
    }
    let na = aug.map_or(0, |a| a.iter().map(Vec::len).sum());
    if let Some(a) = aug {
        mats.extend(a.iter().flatten());
    }
    let batch = FrameBatch::stack(mats)
        .ok_or_else(|| Error::Misaligned("episode matrices differ in width".into()))?;
    Ok((
        batch,
        Layout {
            support_counts,
            query_counts,
            support_rows: (0..ns).collect(),
            query_rows: (ns..ns + nq).collect(),
            aug_rows: (ns + nq..ns + nq + na).collect(),
            labels,
        },
    ))
}

struct Losses {
    total: Var,
    ce: Option<Var>,
    pn: Option<Var>,
    contra: Option<Var>,
}

fn metric_space(g: &mut Graph, emb: Var, cfg: &TrainConfig) -> Var {
    if cfg.normalize_embeddings {
        g.normalize_rows(emb)
    } else {
        emb
    }
}

fn pn_term(g: &mut Graph, z: Var, layout: &Layout, metric: Metric) -> Result<Var> {
    let s = g.select_rows(z, &layout.support_rows)?;
    let q = g.select_rows(z, &layout.query_rows)?;
    loss::pn_loss(
        g,
        s,
        &layout.support_counts,
        q,
        &layout.query_counts,
        metric,
    )
}

fn build_objective(
    g: &mut Graph,
    params: &crate::network::BoundParams,
    emb: Var,
    layout: &Layout,
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<Losses> {
    let labelled: Vec<usize> = layout
        .support_rows
        .iter()
        .chain(&layout.query_rows)
        .copied()
        .collect();
    let e = if layout.aug_rows.is_empty() {
        emb
    } else {
        g.select_rows(emb, &labelled)?
    };
    let logits = forward_logits(g, params, None, e)?;
    let ce = loss::ce_loss(g, logits, &layout.labels)?;
    if objective == Objective::Ce {
        return Ok(Losses {
            total: ce,
            ce: Some(ce),
            pn: None,
            contra: None,
        });
    }
    let z = metric_space(g, emb, cfg);
    let pn = pn_term(g, z, layout, cfg.metric)?;
    match objective {
        Objective::Cp => Ok(Losses {
            total: loss::combined_cp(g, ce, pn, cfg.lambda)?,
            ce: Some(ce),
            pn: Some(pn),
            contra: None,
        }),
        Objective::Cpc(target) => {
            let (rows, counts) = match target {
                AugTarget::Support => (&layout.support_rows, &layout.support_counts),
                AugTarget::Query => (&layout.query_rows, &layout.query_counts),
            };
            let orig = g.select_rows(z, rows)?;
            let aug = g.select_rows(z, &layout.aug_rows)?;
            let contra = loss::contrastive_loss(g, orig, aug, counts, cfg.metric)?;
            Ok(Losses {
                total: loss::combined_cpc(g, ce, pn, contra, cfg.lambda)?,
                ce: Some(ce),
                pn: Some(pn),
                contra: Some(contra),
            })
        }
        Objective::Ce => unreachable!(),
    }
}

fn record(g: &Graph, step: usize, lr: f64, l: &Losses) -> Result<StepRecord> {
    let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x));
    let r = StepRecord {
        step,
        lr,
        total: g.scalar(l.total),
        ce: v(l.ce),
        pn: v(l.pn),
        contra: v(l.contra),
    };
    if !r.total.is_finite() {
        return Err(Error::Diverged { step, what: "loss" });
    }
    Ok(r)
}

/// Adam step on `params`, with the L2 decay gradient added to entries of
/// `decay_mask`. Parameters the loss does not reach get no update at all.
fn apply_update(
    params: &mut [Tensor],
    grads: &crate::grad::Gradients,
    vars: &[Var],
    decay_mask: &[bool],
    decay: f64,
    state: &mut AdamState,
    lr: f64,
    adam: &AdamConfig,
    step: usize,
) -> Result<()> {
    let mut gs = Vec::with_capacity(params.len());
    for ((p, &v), &decayed) in params.iter().zip(vars).zip(decay_mask) {
        let mut gt = grads.get(v);
        if decayed && decay > 0.0 && grads.is_reachable(v) {
            for (g, w) in gt.data_mut().iter_mut().zip(p.data()) {
                *g += decay * w;
            }
        }
        if !gt.all_finite() {
            return Err(Error::Diverged {
                step,
                what: "gradient",
            });
        }
        gs.push(gt);
    }
    adam_step(params, &gs, state, lr, adam);
    Ok(())
}

fn prepare_episode(
    setup: &TrainSetup<'_>,
    objective: Objective,
    stream: &str,
    step: usize,
) -> Result<Episode> {
    let mut ep_rng = rng::stream(setup.seed, stream, step as u64);
    let ep = sample_episode(setup.corpus, setup.episode, &mut ep_rng)?;
    let mut erase_rng = rng::stream(setup.seed, "erase", step as u64);
    let (rho, mode) = (setup.episode.erase_fraction, setup.episode.erase_mode);
    match objective {
        Objective::Cpc(AugTarget::Support) => augment_support(ep, rho, mode, &mut erase_rng),
        Objective::Cpc(AugTarget::Query) => augment_query(ep, rho, mode, &mut erase_rng),
        _ => Ok(ep),
    }
}

/// Stage 1: trains a freshly initialized backbone on `objective`.
pub fn train_stage1(
    setup: &TrainSetup<'_>,
    objective: Objective,
) -> Result<(NetworkParams, TrainReport)> {
    setup.validate()?;
    let clock = Instant::now();
    let dims = setup.dims()?;
    let init = init_params(&dims, setup.seed)?;
    let decay_mask = init.weight_mask();
    let mut tensors = init.to_tensors();
    let mut state = AdamState::new(&tensors);
    let schedule = setup.train.stage1_schedule();
    let mut report = TrainReport {
        seed: setup.seed,
        ..Default::default()
    };

    for step in 0..setup.train.steps_stage1 {
        let ep = prepare_episode(setup, objective, "episodes", step)?;
        let (batch, layout) = stack_episode(&ep)?;
        let current = NetworkParams::from_tensors(dims.clone(), tensors)?;
        let mut g = Graph::new();
        let bp = bind_params(&mut g, &current, true);
        let emb = forward_embeddings(&mut g, &bp, None, &batch)?;
        let losses = build_objective(&mut g, &bp, emb, &layout, objective, setup.train)?;
        let lr = schedule.lr(step);
        report.records.push(record(&g, step, lr, &losses)?);
        let grads = g.backward(losses.total)?;
        tensors = current.to_tensors();
        apply_update(
            &mut tensors,
            &grads,
            &bp.vars,
            &decay_mask,
            setup.train.weight_decay,
            &mut state,
            lr,
            &setup.train.adam,
            step,
        )?;
    }
    report.wall_time = clock.elapsed();
    Ok((NetworkParams::from_tensors(dims, tensors)?, report))
}

pub fn train_baseline(setup: &TrainSetup<'_>) -> Result<(NetworkParams, TrainReport)> {
    train_stage1(setup, Objective::Ce)
}

pub fn train_pn(setup: &TrainSetup<'_>) -> Result<(NetworkParams, TrainReport)> {
    train_stage1(setup, Objective::Cp)
}

pub fn train_acl(setup: &TrainSetup<'_>) -> Result<(NetworkParams, TrainReport)> {
    train_stage1(setup, Objective::Cpc(AugTarget::Support))
}

pub fn train_acl_q(setup: &TrainSetup<'_>) -> Result<(NetworkParams, TrainReport)> {
    train_stage1(setup, Objective::Cpc(AugTarget::Query))
}

/// PN loss of one plain (support + query) episode through the given forward path.
fn stage2_loss(
    g: &mut Graph,
    bp: &crate::network::BoundParams,
    bc: Option<&crate::network::BoundCoeffs>,
    ep: &Episode,
    cfg: &TrainConfig,
) -> Result<Losses> {
    let (batch, layout) = stack_episode(ep)?;
    let emb = forward_embeddings(g, bp, bc, &batch)?;
    let z = metric_space(g, emb, cfg);
    let pn = pn_term(g, z, &layout, cfg.metric)?;
    Ok(Losses {
        total: pn,
        ce: None,
        pn: Some(pn),
        contra: None,
    })
}

/// Stage 2 of MLTC: learns transformation coefficients with the PN loss
/// while `frozen` stays bit-identical.
pub fn train_mltc_stage2(
    setup: &TrainSetup<'_>,
    frozen: &NetworkParams,
) -> Result<(TransformCoeffs, TrainReport)> {
    setup.validate()?;
    let clock = Instant::now();
    let dims = frozen.dims.clone();
    let mut coeff_rng = rng::stream(setup.seed, "coeffs", 0);
    let init = TransformCoeffs::near_identity(&dims, setup.train.coeff_init_noise, &mut coeff_rng);
    let mut tensors = init.to_tensors();
    let mut state = AdamState::new(&tensors);
    let schedule = setup.train.stage2_schedule();
    let no_decay = vec![false; tensors.len()];
    let mut report = TrainReport {
        seed: setup.seed,
        ..Default::default()
    };

    for step in 0..setup.train.steps_stage2 {
        let ep = prepare_episode(setup, Objective::Cp, "episodes-stage2", step)?;
        let current = TransformCoeffs::from_tensors(&dims, tensors)?;
        let mut g = Graph::new();
        let bp = bind_params(&mut g, frozen, false);
        let bc = bind_coeffs(&mut g, &current, true);
        let losses = stage2_loss(&mut g, &bp, Some(&bc), &ep, setup.train)?;
        let lr = schedule.lr(step);
        report.records.push(record(&g, step, lr, &losses)?);
        let grads = g.backward(losses.total)?;
        tensors = current.to_tensors();
        apply_update(
            &mut tensors,
            &grads,
            &bc.vars,
            &no_decay,
            0.0,
            &mut state,
            lr,
            &setup.train.adam,
            step,
        )?;
    }
    report.wall_time = clock.elapsed();
    Ok((TransformCoeffs::from_tensors(&dims, tensors)?, report))
}

/// MLFT ablation: fine-tunes the whole backbone with the PN loss alone.
/// The classifier is unreachable from that loss and is left untouched.
pub fn train_mlft(
    setup: &TrainSetup<'_>,
    pretrained: &NetworkParams,
) -> Result<(NetworkParams, TrainReport)> {
    setup.validate()?;
    let clock = Instant::now();
    let dims = pretrained.dims.clone();
    let decay_mask = pretrained.weight_mask();
    let mut tensors = pretrained.to_tensors();
    let mut state = AdamState::new(&tensors);
    let schedule = setup.train.stage2_schedule();
    let mut report = TrainReport {
        seed: setup.seed,
        ..Default::default()
    };

    for step in 0..setup.train.steps_stage2 {
        let ep = prepare_episode(setup, Objective::Cp, "episodes-stage2", step)?;
        let current = NetworkParams::from_tensors(dims.clone(), tensors)?;
        let mut g = Graph::new();
        let bp = bind_params(&mut g, &current, true);
        let losses = stage2_loss(&mut g, &bp, None, &ep, setup.train)?;
        let lr = schedule.lr(step);
        report.records.push(record(&g, step, lr, &losses)?);
        let grads = g.backward(losses.total)?;
        tensors = current.to_tensors();
        apply_update(
            &mut tensors,
            &grads,
            &bp.vars,
            &decay_mask,
            setup.train.weight_decay,
            &mut state,
            lr,
            &setup.train.adam,
            step,
        )?;
    }
    report.wall_time = clock.elapsed();
    Ok((NetworkParams::from_tensors(dims, tensors)?, report))
}

/// A finished system: backbone, optional coefficients and the per-step log.
#[derive(Clone, Debug)]
pub struct Trained {
    pub system: System,
    pub params: NetworkParams,
    pub coeffs: Option<TransformCoeffs>,
    pub report: TrainReport,
}

/// Runs stage 2 of `system` on top of an existing stage 1 backbone.
/// Single-stage systems return the backbone as is.
pub fn train_stage2(
    setup: &TrainSetup<'_>,
    system: System,
    stage1: &NetworkParams,
) -> Result<Trained> {
    let (params, coeffs, report) = match system.stage2() {
        None => (stage1.clone(), None, TrainReport::default()),
        Some(Stage2::Coefficients) => {
            let (c, r) = train_mltc_stage2(setup, stage1)?;
            (stage1.clone(), Some(c), r)
        }
        Some(Stage2::FineTune) => {
            let (p, r) = train_mlft(setup, stage1)?;
            (p, None, r)
        }
    };
    Ok(Trained {
        system,
        params,
        coeffs,
        report,
    })
}

/// Runs both stages of `system`.
pub fn train_system(setup: &TrainSetup<'_>, system: System) -> Result<Trained> {
    let (stage1, mut report) = train_stage1(setup, system.objective())?;
    let second = train_stage2(setup, system, &stage1)?;
    report.append(second.report);
    Ok(Trained { report, ..second })
}

/// MLTC&ACL: ACL backbone followed by coefficient training.
pub fn train_combined(setup: &TrainSetup<'_>) -> Result<Trained> {
    train_system(setup, System::MltcAcl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, CorpusConfig};

    fn corpus() -> Corpus {
        generate_corpus(
            &CorpusConfig {
                num_speakers: 6,
                utterances_per_speaker: 5,
                heldout_speakers: 0,
                heldout_utterances_per_speaker: 0,
                dim: 6,
                latent_dim: 3,
                min_frames: 8,
                max_frames: 12,
                session_noise: 0.3,
                frame_noise: 0.5,
            },
            2,
        )
        .unwrap()
        .corpus
    }

    fn configs() -> (NetworkConfig, EpisodeConfig, TrainConfig) {
        (
            NetworkConfig {
                frame_layers: vec![8, 8],
                embedding_dim: 4,
                fc2_dim: 4,
            },
            EpisodeConfig {
                n_speakers: 3,
                k_support: 1,
                k_query: 2,
                crop_min: 4,
                crop_max: 8,
                ..EpisodeConfig::default()
            },
            TrainConfig {
                steps_stage1: 6,
                steps_stage2: 4,
                ..TrainConfig::default()
            },
        )
    }

    #[test]
    fn system_names_roundtrip() {
        for s in System::ALL {
            assert_eq!(s.name().parse::<System>().unwrap(), s);
        }
        assert!("resnet".parse::<System>().is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let c = corpus();
        let (n, e, mut t) = configs();
        t.steps_stage1 = 0;
        let setup = TrainSetup {
            corpus: &c,
            network: &n,
            episode: &e,
            train: &t,
            seed: 3,
        };
        let (p, r) = train_baseline(&setup).unwrap();
        assert_eq!(p, init_params(&setup.dims().unwrap(), 3).unwrap());
        assert!(r.records.is_empty());
    }

    #[test]
    fn recorded_components_add_up() {
        let c = corpus();
        let (n, e, t) = configs();
        let setup = TrainSetup {
            corpus: &c,
            network: &n,
            episode: &e,
            train: &t,
            seed: 4,
        };
        let (_, base) = train_baseline(&setup).unwrap();
        assert!(base
            .records
            .iter()
            .all(|r| r.pn == 0.0 && r.contra == 0.0 && r.total == r.ce));
        let (_, pn) = train_pn(&setup).unwrap();
        for r in &pn.records {
            assert!((r.total - loss::combined_cp_value(r.ce, r.pn, t.lambda)).abs() <= 1e-12);
        }
        let (_, acl) = train_acl(&setup).unwrap();
        for r in &acl.records {
            assert!(r.contra > 0.0);
            assert!(
                (r.total - loss::combined_cpc_value(r.ce, r.pn, r.contra, t.lambda)).abs() <= 1e-12
            );
        }
        assert_eq!(pn.records[0].lr, t.lr_start);
        assert!((pn.records.last().unwrap().lr - t.lr_end).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_tracks_baseline() {
        let c = corpus();
        let (n, e, mut t) = configs();
        t.lambda = 0.0;
        let setup = TrainSetup {
            corpus: &c,
            network: &n,
            episode: &e,
            train: &t,
            seed: 5,
        };
        let (a, ra) = train_baseline(&setup).unwrap();
        let (b, rb) = train_pn(&setup).unwrap();
        assert_eq!(a, b);
        for (x, y) in ra.records.iter().zip(&rb.records) {
            assert_eq!(x.ce, y.ce);
        }
    }

    #[test]
    fn stage2_freezes_backbone() {
        let c = corpus();
        let (n, e, t) = configs();
        let setup = TrainSetup {
            corpus: &c,
            network: &n,
            episode: &e,
            train: &t,
            seed: 6,
        };
        let (theta, _) = train_pn(&setup).unwrap();
        let before = theta.checksum();
        let (coeffs, report) = train_mltc_stage2(&setup, &theta).unwrap();
        assert_eq!(theta.checksum(), before);
        assert_eq!(report.records.len(), 4);
        assert!(report
            .records
            .iter()
            .all(|r| r.ce == 0.0 && r.total == r.pn));
        assert_ne!(coeffs, TransformCoeffs::identity(&theta.dims));
    }

    #[test]
    fn mlft_never_touches_classifier() {
        let c = corpus();
        let (n, e, t) = configs();
        let setup = TrainSetup {
            corpus: &c,
            network: &n,
            episode: &e,
            train: &t,
            seed: 7,
        };
        let (theta, _) = train_pn(&setup).unwrap();
        let (tuned, _) = train_mlft(&setup, &theta).unwrap();
        assert_eq!(tuned.classifier, theta.classifier);
        assert_eq!(tuned.fc2, theta.fc2);
        assert_ne!(tuned.fc1, theta.fc1);

        let mut zero = t.clone();
        zero.steps_stage2 = 0;
        let setup0 = TrainSetup {
            train: &zero,
            ..setup
        };
        assert_eq!(train_mlft(&setup0, &theta).unwrap().0, theta);
    }

    #[test]
    fn two_stage_systems_share_stage1() {
        let c = corpus();
        let (n, e, t) = configs();
        let setup = TrainSetup {
            corpus: &c,
            network: &n,
            episode: &e,
            train: &t,
            seed: 8,
        };
        let mltc = train_system(&setup, System::Mltc).unwrap();
        let (pn, _) = train_pn(&setup).unwrap();
        assert_eq!(mltc.params, pn);
        assert!(mltc.coeffs.is_some());
        assert_eq!(mltc.report.records.len(), t.steps_stage1 + t.steps_stage2);
        let steps: Vec<usize> = mltc.report.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, (0..10).collect::<Vec<_>>());
        let csv = mltc.report.to_csv();
        assert!(csv.starts_with("step,lr,loss_total,loss_ce,loss_pn,loss_contra\n"));
        assert_eq!(csv.lines().count(), 11);
    }

    #[test]
    fn invalid_schedule_rejected() {
        let c = corpus();
        let (n, e, mut t) = configs();
        t.lr_end = 1e-2;
        let setup = TrainSetup {
            corpus: &c,
            network: &n,
            episode: &e,
            train: &t,
            seed: 1,
        };
        assert!(matches!(train_pn(&setup), Err(Error::Config(_))));
    }
}
