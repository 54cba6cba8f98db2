//! The full system × seed matrix: train, score held-out trials, fuse, and
//! tabulate.
//!
//! Output layout under the output directory:
//!
//! ```text
//! manifest.json                  corpus checksum and resolved config
//! trials.txt
//! cells/<system>/seed-<s>/       checkpoint.bin metrics.csv scores.txt metrics.json
//! cells/fusion/seed-<s>/         scores.txt metrics.json   (MLTC + ACL, equal weights)
//! report.csv                     EER and minDCF per system and seed, plus means
//! trends.csv                     directional checks between systems
//! ```
//!
//! No file records wall time, so reruns are byte-identical.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    build_trials, fuse_scores, metrics, score_trials, scores_to_string, trials_to_string, Metrics,
    TrialSet,
};
use crate::io::write_atomic;
use crate::network::{extract_embeddings, Checkpoint, NetworkParams, TransformCoeffs};
use crate::synth::{generate_corpus, Corpus};
use crate::train::{train_stage1, train_stage2, System, TrainReport, TrainSetup, Trained};

/// Slack, in EER rate units, allowed by the directional trend checks.
pub const TREND_SLACK: f64 = 0.005;

pub const FUSION_LABEL: &str = "fusion";

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "METASV_THREADS";

pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trial list over the held-out speakers of `corpus`.
pub fn heldout_trials(corpus: &Corpus, cfg: &RunConfig) -> Result<TrialSet> {
    build_trials(
        &corpus.heldout_index(),
        cfg.eval.targets_per_speaker,
        cfg.eval.nontargets_per_speaker,
        cfg.seed,
    )
}

/// Scores `trials` with embeddings of the full (uncropped) utterances.
pub fn score_model(
    corpus: &Corpus,
    trials: &TrialSet,
    params: &NetworkParams,
    coeffs: Option<&TransformCoeffs>,
) -> Result<TrialSet> {
    let mut ids: Vec<usize> = trials
        .trials
        .iter()
        .flat_map(|t| [t.enroll, t.test])
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let mats = ids
        .iter()
        .map(|&id| {
            corpus
                .utterance(id)
                .map(|u| &u.features)
                .ok_or(Error::MissingEmbedding(id))
        })
        .collect::<Result<Vec<_>>>()?;
    let embs = extract_embeddings(&mats, params, coeffs)?;
    let table: HashMap<usize, Vec<f64>> = ids.into_iter().zip(embs).collect();
    score_trials(trials, &table)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub scores: TrialSet,
    pub checkpoint: Option<Checkpoint>,
    pub report: Option<TrainReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub label: String,
    pub eer: Vec<f64>,
    pub min_dcf: Vec<f64>,
    pub mean_eer: f64,
    pub mean_min_dcf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendKind {
    Required,
    Soft,
}

/// `lhs ≤ min(rhs…) + slack` on mean EER.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trend {
    pub kind: TrendKind,
    pub lhs: String,
    pub rhs: Vec<String>,
    pub lhs_eer: f64,
    pub rhs_eer: f64,
    pub slack: f64,
    pub holds: bool,
}

impl Trend {
    pub fn describe(&self) -> String {
        let rhs = if self.rhs.len() == 1 {
            self.rhs[0].clone()
        } else {
            format!("min({})", self.rhs.join(", "))
        };
        format!("{} <= {} + {}", self.lhs, rhs, self.slack)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<Row>,
    pub trends: Vec<Trend>,
    pub cells: Vec<Cell>,
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn report_csv(&self) -> String {
        let mut header = vec!["system".to_string()];
        for s in &self.seeds {
            header.push(format!("eer_seed{s}"));
            header.push(format!("min_dcf_seed{s}"));
        }
        header.push("eer_mean".into());
        header.push("min_dcf_mean".into());
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.rows {
            let mut f = vec![r.label.clone()];
            for (e, d) in r.eer.iter().zip(&r.min_dcf) {
                f.push(e.to_string());
                f.push(d.to_string());
            }
            f.push(r.mean_eer.to_string());
            f.push(r.mean_min_dcf.to_string());
            out.push_str(&f.join(","));
            out.push('\n');
        }
        out
    }

    pub fn trends_csv(&self) -> String {
        let mut out = String::from("kind,relation,lhs_mean_eer,rhs_mean_eer,slack,holds\n");
        for t in &self.trends {
            let kind = match t.kind {
                TrendKind::Required => "required",
                TrendKind::Soft => "soft",
            };
            out.push_str(&format!(
                "{kind},{},{},{},{},{}\n",
                t.describe(),
                t.lhs_eer,
                t.rhs_eer,
                t.slack,
                t.holds
            ));
        }
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn tabulate(labels: &[String], cells: &[Cell], seeds: &[u64]) -> Vec<Row> {
    labels
        .iter()
        .map(|label| {
            let mine: Vec<&Cell> = seeds
                .iter()
                .map(|s| {
                    cells
                        .iter()
                        .find(|c| &c.label == label && c.seed == *s)
                        .expect("every cell ran")
                })
                .collect();
            let eer: Vec<f64> = mine.iter().map(|c| c.metrics.eer).collect();
            let min_dcf: Vec<f64> = mine.iter().map(|c| c.metrics.min_dcf).collect();
            Row {
                label: label.clone(),
                mean_eer: mean(&eer),
                mean_min_dcf: mean(&min_dcf),
                eer,
                min_dcf,
            }
        })
        .collect()
}

/// Directional relations between systems that are present in `rows`.
pub fn trends(rows: &[Row]) -> Vec<Trend> {
    use TrendKind::*;
    let relations: [(TrendKind, &str, &[&str]); 8] = [
        (Required, "pn", &["baseline"]),
        (Required, "mltc", &["pn"]),
        (Required, "acl", &["pn"]),
        (Required, "mltc-acl", &["mltc", "acl"]),
        (Required, FUSION_LABEL, &["mltc", "acl"]),
        (Soft, "mltc", &["mlft"]),
        (Soft, "pn", &["mlft"]),
        (Soft, "acl", &["acl-q"]),
    ];
    let eer = |l: &str| rows.iter().find(|r| r.label == l).map(|r| r.mean_eer);
    relations
        .iter()
        .filter_map(|&(kind, lhs, rhs)| {
            let lhs_eer = eer(lhs)?;
            let rhs_eer = rhs.iter().map(|r| eer(r)).collect::<Option<Vec<f64>>>()?;
            let rhs_eer = rhs_eer.into_iter().fold(f64::INFINITY, f64::min);
            let slack = if kind == Required { TREND_SLACK } else { 0.0 };
            Some(Trend {
                kind,
                lhs: lhs.into(),
                rhs: rhs.iter().map(|s| s.to_string()).collect(),
                lhs_eer,
                rhs_eer,
                slack,
                holds: lhs_eer <= rhs_eer + slack,
            })
        })
        .collect()
}

/// Stage-1 backbones keyed by (stage-1 system, seed).
type Stage1 = BTreeMap<(System, u64), (NetworkParams, TrainReport)>;

fn run_stage1(corpus: &Corpus, cfg: &RunConfig) -> Result<Stage1> {
    let mut jobs: Vec<(System, u64)> = Vec::new();
    for &seed in &cfg.experiment.seeds {
        for &sys in &cfg.experiment.systems {
            let base = sys.stage1_system();
            if !jobs.contains(&(base, seed)) {
                jobs.push((base, seed));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(sys, seed)| {
            let setup = setup(corpus, cfg, seed);
            train_stage1(&setup, sys.objective())
                .map(|r| ((sys, seed), r))
                .map_err(|e| context(e, sys, seed))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().collect())
}

fn setup<'a>(corpus: &'a Corpus, cfg: &'a RunConfig, seed: u64) -> TrainSetup<'a> {
    TrainSetup {
        corpus,
        network: &cfg.network,
        episode: &cfg.episode,
        train: &cfg.train,
        seed,
    }
}

fn context(e: Error, sys: System, seed: u64) -> Error {
    Error::Cell {
        system: sys.name().into(),
        seed,
        source: Box::new(e),
    }
}

/// Trains, then scores, one system at one seed from its stage-1 backbone.
fn run_cell(
    corpus: &Corpus,
    cfg: &RunConfig,
    trials: &TrialSet,
    stage1: &Stage1,
    sys: System,
    seed: u64,
) -> Result<Cell> {
    let (theta, report1) = &stage1[&(sys.stage1_system(), seed)];
    let trained: Trained = train_stage2(&setup(corpus, cfg, seed), sys, theta)?;
    let mut report = report1.clone();
    report.append(trained.report);
    let scores = score_model(corpus, trials, &trained.params, trained.coeffs.as_ref())?;
    Ok(Cell {
        label: sys.name().into(),
        seed,
        metrics: metrics(sys.name(), &scores, &cfg.eval.dcf)?,
        scores,
        checkpoint: Some(Checkpoint {
            params: trained.params,
            coeffs: trained.coeffs,
        }),
        report: Some(report),
    })
}

/// Runs the configured matrix in memory.
pub fn run_matrix(corpus: &Corpus, cfg: &RunConfig, trials: &TrialSet) -> Result<ExperimentReport> {
    let stage1 = run_stage1(corpus, cfg)?;
    let jobs: Vec<(System, u64)> = cfg
        .experiment
        .seeds
        .iter()
        .flat_map(|&s| cfg.experiment.systems.iter().map(move |&sys| (sys, s)))
        .collect();
    let mut cells = jobs
        .par_iter()
        .map(|&(sys, seed)| {
            run_cell(corpus, cfg, trials, &stage1, sys, seed).map_err(|e| context(e, sys, seed))
        })
        .collect::<Result<Vec<Cell>>>()?;

    let mut labels: Vec<String> = cfg
        .experiment
        .systems
        .iter()
        .map(|s| s.name().to_string())
        .collect();
    let has = |s: System| cfg.experiment.systems.contains(&s);
    if has(System::Mltc) && has(System::Acl) {
        for &seed in &cfg.experiment.seeds {
            let find = |l: &str| {
                cells
                    .iter()
                    .find(|c| c.label == l && c.seed == seed)
                    .expect("cell ran")
            };
            let fused = fuse_scores(&find("mltc").scores, &find("acl").scores)?;
            cells.push(Cell {
                label: FUSION_LABEL.into(),
                seed,
                metrics: metrics(FUSION_LABEL, &fused, &cfg.eval.dcf)?,
                scores: fused,
                checkpoint: None,
                report: None,
            });
        }
        labels.push(FUSION_LABEL.into());
    }
    let rows = tabulate(&labels, &cells, &cfg.experiment.seeds);
    Ok(ExperimentReport {
        seeds: cfg.experiment.seeds.clone(),
        trends: trends(&rows),
        rows,
        cells,
    })
}

pub fn cell_dir(out_dir: &Path, label: &str, seed: u64) -> PathBuf {
    out_dir
        .join("cells")
        .join(label)
        .join(format!("seed-{seed}"))
}

#[derive(Serialize)]
struct Manifest<'a> {
    corpus_sha256: String,
    n_trials: usize,
    config: &'a RunConfig,
}

/// Generates the corpus, runs every cell and writes all outputs under `out_dir`.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let corpus = generate_corpus(&cfg.corpus, cfg.seed)?.corpus;
        let trials = heldout_trials(&corpus, cfg)?;
        let report = run_matrix(&corpus, cfg, &trials)?;

        let manifest = Manifest {
            corpus_sha256: sha256_hex(&corpus.to_bytes()),
            n_trials: trials.trials.len(),
            config: cfg,
        };
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        write_atomic(&out_dir.join("manifest.json"), json.as_bytes())?;
        write_atomic(
            &out_dir.join("trials.txt"),
            trials_to_string(&trials).as_bytes(),
        )?;
        for c in &report.cells {
            let dir = cell_dir(out_dir, &c.label, c.seed);
            if let Some(ck) = &c.checkpoint {
                ck.write(&dir.join("checkpoint.bin"))?;
            }
            if let Some(r) = &c.report {
                write_atomic(&dir.join("metrics.csv"), r.to_csv().as_bytes())?;
            }
            write_atomic(
                &dir.join("scores.txt"),
                scores_to_string(&c.scores)?.as_bytes(),
            )?;
            write_atomic(&dir.join("metrics.json"), c.metrics.to_json().as_bytes())?;
        }
        write_atomic(&out_dir.join("report.csv"), report.report_csv().as_bytes())?;
        write_atomic(&out_dir.join("trends.csv"), report.trends_csv().as_bytes())?;
        Ok(report)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, eer: f64) -> Row {
        Row {
            label: label.into(),
            eer: vec![eer],
            min_dcf: vec![0.5],
            mean_eer: eer,
            mean_min_dcf: 0.5,
        }
    }

    #[test]
    fn trends_only_cover_present_systems() {
        let rows = vec![row("baseline", 0.10), row("pn", 0.104), row("acl", 0.2)];
        let t = trends(&rows);
        assert_eq!(t.len(), 2);
        assert!(t[0].holds, "within slack");
        assert!(!t[1].holds);
        assert_eq!(t[1].describe(), "acl <= pn + 0.005");
    }

    #[test]
    fn min_of_two_references() {
        let rows = vec![row("mltc", 0.08), row("acl", 0.07), row("mltc-acl", 0.074)];
        let t = trends(&rows);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].rhs_eer, 0.07);
        assert!(t[0].holds);
        assert_eq!(t[0].describe(), "mltc-acl <= min(mltc, acl) + 0.005");
    }

    #[test]
    fn report_layout() {
        let rep = ExperimentReport {
            seeds: vec![4, 9],
            rows: vec![Row {
                label: "pn".into(),
                eer: vec![0.1, 0.2],
                min_dcf: vec![0.5, 0.7],
                mean_eer: 0.15,
                mean_min_dcf: 0.6,
            }],
            trends: vec![],
            cells: vec![],
        };
        assert_eq!(
            rep.report_csv(),
            "system,eer_seed4,min_dcf_seed4,eer_seed9,min_dcf_seed9,eer_mean,min_dcf_mean\npn,0.1,0.5,0.2,0.7,0.15,0.6\n"
        );
    }
}
