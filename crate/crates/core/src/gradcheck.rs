//! Finite-difference verification of every primitive, every loss and both
//! forward paths of the network.
//!
//! Each case draws its inputs from a named stream. When a draw puts a ReLU
//! input within `min_relu_margin` of the kink, the case is redrawn with the
//! next attempt index, since central differences are meaningless there.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FrameBatch};
use crate::grad::{finite_difference_check, FdReport, Graph, Tensor, Var};
use crate::loss::{self, Metric};
use crate::network::{
    bound_from_vars, coeffs_from_vars, forward_embeddings, forward_logits, init_params,
    NetworkConfig, NetworkDims, TransformCoeffs,
};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub step: f64,
    pub tolerance: f64,
    pub min_relu_margin: f64,
    pub max_attempts: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: 10,
            step: 1e-5,
            tolerance: 1e-4,
            min_relu_margin: 1e-4,
            max_attempts: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub attempts: u64,
    pub report: FdReport,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.report.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.report.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// Worst relative error per case name, in first-seen order.
    pub fn by_case(&self) -> Vec<(&'static str, f64, bool)> {
        let mut out: Vec<(&'static str, f64, bool)> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|e| e.0 == c.name) {
                Some(e) => {
                    e.1 = e.1.max(c.report.max_rel_error);
                    e.2 &= c.report.passed;
                }
                None => out.push((c.name, c.report.max_rel_error, c.report.passed)),
            }
        }
        out
    }
}

type Objective = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A differentiable scalar function together with the point to check it at.
struct Case {
    f: Objective,
    params: Vec<Tensor>,
}

fn normal(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    normal(rng, shape, 1.0).map(|x| 0.5 + x.abs())
}

/// Reduces any node to a scalar with fixed random weights so every output
/// coordinate carries a distinct gradient.
fn project(g: &mut Graph, v: Var, weights: &[f64]) -> Result<Var> {
    Ok(g.weighted_sum(v, weights)?)
}

fn weights(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn unary(rng: &mut Rng, x: Tensor, op: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    let out_len = {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = op(&mut g, v).expect("probe");
        g.value(y).len()
    };
    let w = weights(rng, out_len);
    Case {
        f: Box::new(move |g, p| {
            let y = op(g, p[0])?;
            project(g, y, &w)
        }),
        params: vec![x],
    }
}

fn binary(
    rng: &mut Rng,
    a: Tensor,
    b: Tensor,
    op: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Case {
    let out_len = {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = op(&mut g, va, vb).expect("probe");
        g.value(y).len()
    };
    let w = weights(rng, out_len);
    Case {
        f: Box::new(move |g, p| {
            let y = op(g, p[0], p[1])?;
            project(g, y, &w)
        }),
        params: vec![a, b],
    }
}

const SEGMENTS: [(usize, usize); 3] = [(0, 2), (2, 3), (5, 2)];

fn primitive(name: &str, rng: &mut Rng) -> Case {
    let m = |rng: &mut Rng, r, c| normal(rng, &[r, c], 1.0);
    match name {
        "matmul" => {
            let (a, b) = (m(rng, 3, 4), m(rng, 4, 2));
            binary(rng, a, b, |g, a, b| Ok(g.matmul(a, b)?))
        }
        "add" => {
            let (a, b) = (m(rng, 3, 4), m(rng, 3, 4));
            binary(rng, a, b, |g, a, b| Ok(g.add(a, b)?))
        }
        "sub" => {
            let (a, b) = (m(rng, 2, 5), m(rng, 2, 5));
            binary(rng, a, b, |g, a, b| Ok(g.sub(a, b)?))
        }
        "mul" => {
            let (a, b) = (m(rng, 3, 3), m(rng, 3, 3));
            binary(rng, a, b, |g, a, b| Ok(g.mul(a, b)?))
        }
        "add_row" => {
            let (a, b) = (m(rng, 4, 3), normal(rng, &[3], 1.0));
            binary(rng, a, b, |g, a, b| Ok(g.add_row(a, b)?))
        }
        "mul_row" => {
            let (a, b) = (m(rng, 4, 3), normal(rng, &[3], 1.0));
            binary(rng, a, b, |g, a, b| Ok(g.mul_row(a, b)?))
        }
        "concat_cols" => {
            let (a, b) = (m(rng, 3, 2), m(rng, 3, 4));
            binary(rng, a, b, |g, a, b| Ok(g.concat_cols(a, b)?))
        }
        "sq_dist" => {
            let (a, b) = (m(rng, 3, 4), m(rng, 2, 4));
            binary(rng, a, b, |g, a, b| Ok(g.sq_dist(a, b)?))
        }
        "cos_sim" => {
            let (a, b) = (m(rng, 3, 4), m(rng, 2, 4));
            binary(rng, a, b, |g, a, b| Ok(g.cos_sim(a, b)?))
        }
        "relu" => {
            let x = m(rng, 4, 5);
            unary(rng, x, |g, a| Ok(g.relu(a)))
        }
        "neg" => {
            let x = m(rng, 2, 3);
            unary(rng, x, |g, a| Ok(g.neg(a)))
        }
        "scale" => {
            let x = m(rng, 2, 3);
            unary(rng, x, |g, a| Ok(g.scale(a, -1.7)))
        }
        "add_scalar" => {
            let x = m(rng, 2, 3);
            unary(rng, x, |g, a| Ok(g.add_scalar(a, 0.4)))
        }
        "log" => {
            let x = positive(rng, &[3, 3]);
            unary(rng, x, |g, a| Ok(g.log(a)))
        }
        "sqrt_eps" => {
            let x = positive(rng, &[3, 3]);
            unary(rng, x, |g, a| Ok(g.sqrt_eps(a, 1e-8)))
        }
        "segment_mean" => {
            let x = m(rng, 7, 3);
            unary(rng, x, |g, a| Ok(g.segment_mean(a, &SEGMENTS)?))
        }
        "segment_var" => {
            let x = m(rng, 7, 3);
            unary(rng, x, |g, a| Ok(g.segment_var(a, &SEGMENTS)?))
        }
        "select_rows" => {
            let x = m(rng, 4, 3);
            unary(rng, x, |g, a| Ok(g.select_rows(a, &[2, 0, 2, 3])?))
        }
        "row_norm" => {
            let x = m(rng, 3, 4);
            unary(rng, x, |g, a| Ok(g.row_norm(a)?))
        }
        "normalize_rows" => {
            let x = m(rng, 3, 4);
            unary(rng, x, |g, a| Ok(g.normalize_rows(a)))
        }
        "softmax_rows" => {
            let x = m(rng, 3, 4);
            unary(rng, x, |g, a| Ok(g.softmax_rows(a)))
        }
        "log_softmax_rows" => {
            let x = m(rng, 3, 4);
            unary(rng, x, |g, a| Ok(g.log_softmax_rows(a)))
        }
        "pick" => {
            let x = m(rng, 3, 4);
            unary(rng, x, |g, a| Ok(g.pick(a, &[3, 0, 1])?))
        }
        "sum" => {
            let x = m(rng, 3, 4);
            unary(rng, x, |g, a| Ok(g.sum(a)))
        }
        "mean" => {
            let x = m(rng, 3, 4);
            unary(rng, x, |g, a| Ok(g.mean(a)))
        }
        "weighted_sum" => {
            let x = m(rng, 3, 4);
            let w = weights(rng, 12);
            Case {
                f: Box::new(move |g, p| Ok(g.weighted_sum(p[0], &w)?)),
                params: vec![x],
            }
        }
        "mlp" => {
            let params = vec![
                m(rng, 5, 4),
                m(rng, 4, 6),
                normal(rng, &[6], 1.0),
                m(rng, 6, 3),
                m(rng, 3, 1),
            ];
            Case {
                f: Box::new(|g, p| {
                    let h = g.matmul(p[0], p[1])?;
                    let h = g.add_row(h, p[2])?;
                    let h = g.relu(h);
                    let h = g.matmul(h, p[3])?;
                    let h = g.relu(h);
                    let h = g.matmul(h, p[4])?;
                    let h = g.mul(h, h)?;
                    Ok(g.mean(h))
                }),
                params,
            }
        }
        other => unreachable!("unknown primitive case {other}"),
    }
}

pub const PRIMITIVES: [&str; 27] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_row",
    "concat_cols",
    "sq_dist",
    "cos_sim",
    "relu",
    "neg",
    "scale",
    "add_scalar",
    "log",
    "sqrt_eps",
    "segment_mean",
    "segment_var",
    "select_rows",
    "row_norm",
    "normalize_rows",
    "softmax_rows",
    "log_softmax_rows",
    "pick",
    "sum",
    "mean",
    "weighted_sum",
    "mlp",
];

/// Random small episode shape: per-speaker support and query counts.
fn episode_shape(rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let n = rng.random_range(2..=4);
    let support = (0..n).map(|_| rng.random_range(1..=3)).collect();
    let query = (0..n).map(|_| rng.random_range(1..=3)).collect();
    (support, query)
}

fn maybe_normalize(g: &mut Graph, v: Var, normalize: bool) -> Var {
    if normalize {
        g.normalize_rows(v)
    } else {
        v
    }
}

fn loss_case(name: &str, rng: &mut Rng) -> Case {
    let (sc, qc) = episode_shape(rng);
    let n = sc.len();
    let (ns, nq): (usize, usize) = (sc.iter().sum(), qc.iter().sum());
    let dim = rng.random_range(2..=8);
    let classes = n + rng.random_range(0..=3);
    let labels: Vec<usize> = (0..ns + nq).map(|_| rng.random_range(0..classes)).collect();
    let metric = if rng.random_bool(0.5) {
        Metric::SquaredEuclidean
    } else {
        Metric::Cosine
    };
    let normalize = rng.random_bool(0.5);
    let lambda = rng.random_range(0.1..1.0);
    let support = normal(rng, &[ns, dim], 1.0);
    let query = normal(rng, &[nq, dim], 1.0);
    let aug = normal(rng, &[ns, dim], 1.0);
    let logits = normal(rng, &[ns + nq, classes], 1.0);
    let sc2 = sc.clone();

    let pn = move |g: &mut Graph, s: Var, q: Var| -> Result<Var> {
        let s = maybe_normalize(g, s, normalize);
        let q = maybe_normalize(g, q, normalize);
        loss::pn_loss(g, s, &sc, q, &qc, metric)
    };
    let contra = move |g: &mut Graph, s: Var, a: Var| -> Result<Var> {
        let s = maybe_normalize(g, s, normalize);
        let a = maybe_normalize(g, a, normalize);
        loss::contrastive_loss(g, s, a, &sc2, metric)
    };
    match name {
        "pn_loss" => Case {
            f: Box::new(move |g, p| pn(g, p[0], p[1])),
            params: vec![support, query],
        },
        "ce_loss" => Case {
            f: Box::new(move |g, p| loss::ce_loss(g, p[0], &labels)),
            params: vec![logits],
        },
        "contrastive_loss" => Case {
            f: Box::new(move |g, p| contra(g, p[0], p[1])),
            params: vec![support, aug],
        },
        "combined_cp" => Case {
            f: Box::new(move |g, p| {
                let ce = loss::ce_loss(g, p[0], &labels)?;
                let pn = pn(g, p[1], p[2])?;
                loss::combined_cp(g, ce, pn, lambda)
            }),
            params: vec![logits, support, query],
        },
        "combined_cpc" => Case {
            f: Box::new(move |g, p| {
                let ce = loss::ce_loss(g, p[0], &labels)?;
                let pn = pn(g, p[1], p[2])?;
                let c = contra(g, p[1], p[3])?;
                loss::combined_cpc(g, ce, pn, c, lambda)
            }),
            params: vec![logits, support, query, aug],
        },
        other => unreachable!("unknown loss case {other}"),
    }
}

pub const LOSSES: [&str; 5] = [
    "pn_loss",
    "ce_loss",
    "contrastive_loss",
    "combined_cp",
    "combined_cpc",
];

/// A tiny network and an episode of short utterances through it.
fn network_case(name: &str, rng: &mut Rng, seed: u64) -> Case {
    let (sc, qc) = episode_shape(rng);
    let n = sc.len();
    let input = 5;
    let cfg = NetworkConfig {
        frame_layers: vec![6, 6],
        embedding_dim: rng.random_range(4..=8),
        fc2_dim: 6,
    };
    let dims = NetworkDims::new(input, &cfg, n + 2).expect("valid dims");
    let theta = init_params(&dims, seed).expect("init");
    let mut params = theta.to_tensors();
    // random biases so ReLU inputs are not symmetric around zero
    for t in params.iter_mut().filter(|t| t.rank() == 1) {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = 0.3 * z;
        }
    }
    let n_theta = params.len();

    let utterances = |rng: &mut Rng, count: usize| -> Vec<FeatureMatrix> {
        (0..count)
            .map(|_| {
                let frames = rng.random_range(3..=6);
                FeatureMatrix::new(
                    frames,
                    input,
                    normal(rng, &[frames, input], 1.0).into_data(),
                )
            })
            .collect()
    };
    let (ns, nq) = (sc.iter().sum::<usize>(), qc.iter().sum::<usize>());
    let mut mats = utterances(rng, ns + nq);
    let aug: Vec<FeatureMatrix> = mats[..ns]
        .iter()
        .map(|x| {
            let mut y = x.clone();
            for v in y.data_mut() {
                if rng.random_bool(0.1) {
                    *v = 0.0;
                }
            }
            y
        })
        .collect();
    mats.extend(aug);
    let batch = FrameBatch::stack(mats.iter()).expect("same width");
    let labels: Vec<usize> = (0..ns + nq).map(|i| (i * 7 + 3) % (n + 2)).collect();
    let support_rows: Vec<usize> = (0..ns).collect();
    let query_rows: Vec<usize> = (ns..ns + nq).collect();
    let labelled: Vec<usize> = (0..ns + nq).collect();
    let aug_rows: Vec<usize> = (ns + nq..2 * ns + nq).collect();

    match name {
        "forward_plain" => Case {
            f: Box::new(move |g, p| {
                let bp = bound_from_vars(p.to_vec());
                let emb = forward_embeddings(g, &bp, None, &batch)?;
                let e = g.select_rows(emb, &labelled)?;
                let logits = forward_logits(g, &bp, None, e)?;
                let ce = loss::ce_loss(g, logits, &labels)?;
                let z = g.normalize_rows(emb);
                let s = g.select_rows(z, &support_rows)?;
                let q = g.select_rows(z, &query_rows)?;
                let a = g.select_rows(z, &aug_rows)?;
                let pn = loss::pn_loss(g, s, &sc, q, &qc, Metric::SquaredEuclidean)?;
                let c = loss::contrastive_loss(g, s, a, &sc, Metric::SquaredEuclidean)?;
                loss::combined_cpc(g, ce, pn, c, 0.5)
            }),
            params,
        },
        "forward_transformed" => {
            let coeffs = TransformCoeffs::near_identity(&dims, 0.3, rng);
            params.extend(coeffs.to_tensors());
            Case {
                f: Box::new(move |g, p| {
                    let bp = bound_from_vars(p[..n_theta].to_vec());
                    let bc = coeffs_from_vars(p[n_theta..].to_vec());
                    let emb = forward_embeddings(g, &bp, Some(&bc), &batch)?;
                    let e = g.select_rows(emb, &labelled)?;
                    let logits = forward_logits(g, &bp, Some(&bc), e)?;
                    let ce = loss::ce_loss(g, logits, &labels)?;
                    let z = g.normalize_rows(emb);
                    let s = g.select_rows(z, &support_rows)?;
                    let q = g.select_rows(z, &query_rows)?;
                    let pn = loss::pn_loss(g, s, &sc, q, &qc, Metric::Cosine)?;
                    loss::combined_cp(g, ce, pn, 0.5)
                }),
                params,
            }
        }
        other => unreachable!("unknown network case {other}"),
    }
}

pub const NETWORK: [&str; 2] = ["forward_plain", "forward_transformed"];

fn build(name: &'static str, rng: &mut Rng, seed: u64) -> Case {
    if LOSSES.contains(&name) {
        loss_case(name, rng)
    } else if NETWORK.contains(&name) {
        network_case(name, rng, seed)
    } else {
        primitive(name, rng)
    }
}

/// Checks one case at one seed, redrawing while a ReLU input sits too close to zero.
pub fn check_case(name: &'static str, seed: u64, cfg: &GradcheckConfig) -> Result<CaseResult> {
    for attempt in 0..cfg.max_attempts {
        let mut rng = rng::stream(seed, &format!("gradcheck/{name}"), attempt);
        let case = build(name, &mut rng, seed.wrapping_add(attempt));
        let report = finite_difference_check(&case.f, &case.params, cfg.step, cfg.tolerance)?;
        if report.relu_margin.is_some_and(|m| m < cfg.min_relu_margin) {
            continue;
        }
        return Ok(CaseResult {
            name,
            seed,
            attempts: attempt + 1,
            report,
        });
    }
    Err(Error::Degenerate(format!(
        "gradcheck case {name} seed {seed}: no draw with ReLU margin >= {} in {} attempts",
        cfg.min_relu_margin, cfg.max_attempts
    )))
}

pub fn all_cases() -> Vec<&'static str> {
    PRIMITIVES
        .iter()
        .chain(&LOSSES)
        .chain(&NETWORK)
        .copied()
        .collect()
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for name in all_cases() {
        for seed in 0..cfg.seeds {
            report.cases.push(check_case(name, seed, cfg)?);
        }
    }
    Ok(report)
}
