//! The embedding extractor: per-frame affine+ReLU stack, statistics pooling,
//! two utterance-level affine layers and a global speaker classifier.
//!
//! The embedding is the output of the first utterance-level layer, taken
//! before its activation. [`TransformCoeffs`] rescale and shift every
//! extractor layer (`relu((W ⊙ s) x + b + o)`, one `s` and `o` entry per
//! output unit) while leaving the backbone weights untouched.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FrameBatch};
use crate::grad::{softmax_row, Graph, Tensor, Var};
use crate::rng::{self, Rng};
use crate::synth::ByteReader;

/// Added to the pooled variance before the square root.
pub const POOL_EPS: f64 = 1e-8;
/// Utterances per forward pass when extracting embeddings outside training.
const EXTRACT_CHUNK: usize = 32;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSVK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub frame_layers: Vec<usize>,
    pub embedding_dim: usize,
    pub fc2_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            frame_layers: vec![128, 128, 128],
            embedding_dim: 64,
            fc2_dim: 64,
        }
    }
}

/// Full dimension chain of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkDims {
    pub input: usize,
    pub frame: Vec<usize>,
    pub embedding: usize,
    pub fc2: usize,
    pub classes: usize,
}

impl NetworkDims {
    pub fn new(input: usize, config: &NetworkConfig, classes: usize) -> Result<Self> {
        let dims = NetworkDims {
            input,
            frame: config.frame_layers.clone(),
            embedding: config.embedding_dim,
            fc2: config.fc2_dim,
            classes,
        };
        dims.validate()?;
        Ok(dims)
    }

    fn validate(&self) -> Result<()> {
        if self.frame.is_empty() {
            return Err(Error::Config(
                "network: at least one frame layer is required".into(),
            ));
        }
        if self.input == 0
            || self.embedding == 0
            || self.fc2 == 0
            || self.classes == 0
            || self.frame.contains(&0)
        {
            return Err(Error::Config("network: all widths must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer in declaration order: frame layers,
    /// fc1, fc2, classifier.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut prev = self.input;
        for &w in &self.frame {
            shapes.push((prev, w));
            prev = w;
        }
        shapes.push((2 * prev, self.embedding));
        shapes.push((self.embedding, self.fc2));
        shapes.push((self.fc2, self.classes));
        shapes
    }

    /// Layers that carry transformation coefficients (all but the classifier).
    pub fn extractor_widths(&self) -> Vec<usize> {
        let shapes = self.layer_shapes();
        shapes[..shapes.len() - 1]
            .iter()
            .map(|&(_, out)| out)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `fan_in × fan_out`; inputs are rows.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub dims: NetworkDims,
    pub frame_layers: Vec<Affine>,
    pub fc1: Affine,
    pub fc2: Affine,
    pub classifier: Affine,
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(dims: &NetworkDims, seed: u64) -> Result<NetworkParams> {
    dims.validate()?;
    let mut rng = rng::stream(seed, "init", 0);
    let tensors = dims
        .layer_shapes()
        .into_iter()
        .flat_map(|(fan_in, fan_out)| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            [
                Tensor::matrix(fan_in, fan_out, w).expect("layer shape"),
                Tensor::zeros(&[fan_out]),
            ]
        })
        .collect();
    NetworkParams::from_tensors(dims.clone(), tensors)
}

impl NetworkParams {
    /// Weights and biases in declaration order: `W, b` per layer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Affine> {
        self.frame_layers
            .iter()
            .chain([&self.fc1, &self.fc2, &self.classifier])
    }

    pub fn from_tensors(dims: NetworkDims, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = dims.layer_shapes();
        if tensors.len() != 2 * shapes.len() {
            return Err(Error::Misaligned(format!(
                "expected {} parameter tensors, got {}",
                2 * shapes.len(),
                tensors.len()
            )));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        let mut it = tensors.into_iter();
        for (fan_in, fan_out) in shapes {
            let (weight, bias) = (it.next().unwrap(), it.next().unwrap());
            if weight.shape() != [fan_in, fan_out] || bias.shape() != [fan_out] {
                return Err(Error::Misaligned(format!(
                    "layer {fan_in}→{fan_out}: got weight {:?}, bias {:?}",
                    weight.shape(),
                    bias.shape()
                )));
            }
            layers.push(Affine { weight, bias });
        }
        let classifier = layers.pop().unwrap();
        let fc2 = layers.pop().unwrap();
        let fc1 = layers.pop().unwrap();
        Ok(NetworkParams {
            dims,
            frame_layers: layers,
            fc1,
            fc2,
            classifier,
        })
    }

    /// Which of [`Self::tensors`] are weight matrices (as opposed to biases).
    pub fn weight_mask(&self) -> Vec<bool> {
        self.layers().flat_map(|_| [true, false]).collect()
    }

    /// SHA-256 of the serialized parameter section.
    pub fn checksum(&self) -> [u8; 32] {
        let mut bytes = Vec::new();
        write_params(&mut bytes, self);
        Sha256::digest(&bytes).into()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Per-output-unit scale `s` and offset `o` for every extractor layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformCoeffs {
    pub scale: Vec<Tensor>,
    pub offset: Vec<Tensor>,
}

impl TransformCoeffs {
    /// `s = 1`, `o = 0`: leaves the backbone unchanged.
    pub fn identity(dims: &NetworkDims) -> Self {
        let widths = dims.extractor_widths();
        TransformCoeffs {
            scale: widths.iter().map(|&w| Tensor::ones(&[w])).collect(),
            offset: widths.iter().map(|&w| Tensor::zeros(&[w])).collect(),
        }
    }

    /// Identity perturbed by uniform noise in `±noise`.
    pub fn near_identity(dims: &NetworkDims, noise: f64, rng: &mut Rng) -> Self {
        let mut c = TransformCoeffs::identity(dims);
        for t in c.scale.iter_mut().chain(c.offset.iter_mut()) {
            for v in t.data_mut() {
                *v += rng.random_range(-noise..=noise);
            }
        }
        c
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.scale
            .iter()
            .zip(&self.offset)
            .flat_map(|(s, o)| [s, o])
            .collect()
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    pub fn from_tensors(dims: &NetworkDims, tensors: Vec<Tensor>) -> Result<Self> {
        let widths = dims.extractor_widths();
        if tensors.len() != 2 * widths.len() {
            return Err(Error::Misaligned(format!(
                "expected {} coefficient tensors, got {}",
                2 * widths.len(),
                tensors.len()
            )));
        }
        let mut c = TransformCoeffs {
            scale: Vec::new(),
            offset: Vec::new(),
        };
        let mut it = tensors.into_iter();
        for w in widths {
            let (s, o) = (it.next().unwrap(), it.next().unwrap());
            if s.shape() != [w] || o.shape() != [w] {
                return Err(Error::Misaligned(format!(
                    "coefficients for width {w}: got {:?} and {:?}",
                    s.shape(),
                    o.shape()
                )));
            }
            c.scale.push(s);
            c.offset.push(o);
        }
        Ok(c)
    }

    fn check(&self, dims: &NetworkDims) -> Result<()> {
        TransformCoeffs::from_tensors(dims, self.to_tensors()).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl Embedding {
    pub fn normalize(&self) -> Embedding {
        let norm = self.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        Embedding {
            vector: self.vector.iter().map(|v| v / norm).collect(),
            normalized: true,
        }
    }
}

/// Network parameters registered as graph leaves.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub frame: Vec<(Var, Var)>,
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
    pub classifier: (Var, Var),
    /// All handles in declaration order.
    pub vars: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct BoundCoeffs {
    /// `(scale, offset)` per extractor layer.
    pub layers: Vec<(Var, Var)>,
    pub vars: Vec<Var>,
}

pub fn bind_params(g: &mut Graph, p: &NetworkParams, trainable: bool) -> BoundParams {
    let vars: Vec<Var> = p
        .tensors()
        .into_iter()
        .map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    bound_from_vars(vars)
}

pub(crate) fn bound_from_vars(vars: Vec<Var>) -> BoundParams {
    let pairs: Vec<(Var, Var)> = vars.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    let n = pairs.len();
    BoundParams {
        frame: pairs[..n - 3].to_vec(),
        fc1: pairs[n - 3],
        fc2: pairs[n - 2],
        classifier: pairs[n - 1],
        vars,
    }
}

pub fn bind_coeffs(g: &mut Graph, c: &TransformCoeffs, trainable: bool) -> BoundCoeffs {
    let vars: Vec<Var> = c
        .tensors()
        .into_iter()
        .map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    coeffs_from_vars(vars)
}

pub(crate) fn coeffs_from_vars(vars: Vec<Var>) -> BoundCoeffs {
    BoundCoeffs {
        layers: vars.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
        vars,
    }
}

/// `x W + b`, or `x (W ⊙ s) + b + o` with coefficients.
fn affine(g: &mut Graph, x: Var, layer: (Var, Var), coeff: Option<(Var, Var)>) -> Result<Var> {
    let (w, b) = layer;
    Ok(match coeff {
        None => {
            let h = g.matmul(x, w)?;
            g.add_row(h, b)?
        }
        Some((s, o)) => {
            let ws = g.mul_row(w, s)?;
            let h = g.matmul(x, ws)?;
            let h = g.add_row(h, b)?;
            g.add_row(h, o)?
        }
    })
}

/// Embeddings (`[utterances, embedding]`) for a stacked frame batch.
pub fn forward_embeddings(
    g: &mut Graph,
    p: &BoundParams,
    coeffs: Option<&BoundCoeffs>,
    batch: &FrameBatch,
) -> Result<Var> {
    let expected = g.value(p.frame[0].0).dims2().0;
    if batch.dim() != expected {
        return Err(Error::WidthMismatch {
            got: batch.dim(),
            expected,
        });
    }
    let coeff = |i: usize| coeffs.map(|c| c.layers[i]);
    let mut h = g.constant(batch.frames.clone());
    for (i, &layer) in p.frame.iter().enumerate() {
        let a = affine(g, h, layer, coeff(i))?;
        h = g.relu(a);
    }
    let mean = g.segment_mean(h, &batch.segments)?;
    let var = g.segment_var(h, &batch.segments)?;
    let std = g.sqrt_eps(var, POOL_EPS);
    let pooled = g.concat_cols(mean, std)?;
    affine(g, pooled, p.fc1, coeff(p.frame.len()))
}

/// Classifier logits (`[utterances, classes]`) from embeddings.
pub fn forward_logits(
    g: &mut Graph,
    p: &BoundParams,
    coeffs: Option<&BoundCoeffs>,
    emb: Var,
) -> Result<Var> {
    let h = g.relu(emb);
    let h = affine(g, h, p.fc2, coeffs.map(|c| c.layers[p.frame.len() + 1]))?;
    let h = g.relu(h);
    affine(g, h, p.classifier, None)
}

/// Embeddings of many utterances, extracted in fixed-size chunks.
pub fn extract_embeddings(
    xs: &[&FeatureMatrix],
    p: &NetworkParams,
    coeffs: Option<&TransformCoeffs>,
) -> Result<Vec<Vec<f64>>> {
    if let Some(c) = coeffs {
        c.check(&p.dims)?;
    }
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(EXTRACT_CHUNK) {
        if let Some(bad) = chunk.iter().find(|x| x.dim() != p.dims.input) {
            return Err(Error::WidthMismatch {
                got: bad.dim(),
                expected: p.dims.input,
            });
        }
        let batch = FrameBatch::stack(chunk.iter().copied()).expect("uniform widths");
        let mut g = Graph::new();
        let bp = bind_params(&mut g, p, false);
        let bc = coeffs.map(|c| bind_coeffs(&mut g, c, false));
        let e = forward_embeddings(&mut g, &bp, bc.as_ref(), &batch)?;
        let t = g.value(e);
        out.extend((0..t.dims2().0).map(|r| t.row(r).to_vec()));
    }
    Ok(out)
}

pub fn embed(x: &FeatureMatrix, p: &NetworkParams) -> Result<Embedding> {
    let mut v = extract_embeddings(&[x], p, None)?;
    Ok(Embedding {
        vector: v.pop().unwrap(),
        normalized: false,
    })
}

pub fn embed_transformed(
    x: &FeatureMatrix,
    p: &NetworkParams,
    c: &TransformCoeffs,
) -> Result<Embedding> {
    let mut v = extract_embeddings(&[x], p, Some(c))?;
    Ok(Embedding {
        vector: v.pop().unwrap(),
        normalized: false,
    })
}

/// Posterior over all training speakers for one embedding.
pub fn classify(emb: &Embedding, p: &NetworkParams) -> Result<Vec<f64>> {
    if emb.vector.len() != p.dims.embedding {
        return Err(Error::WidthMismatch {
            got: emb.vector.len(),
            expected: p.dims.embedding,
        });
    }
    let mut g = Graph::new();
    let bp = bind_params(&mut g, p, false);
    let e = g.constant(Tensor::matrix(1, emb.vector.len(), emb.vector.clone())?);
    let logits = forward_logits(&mut g, &bp, None, e)?;
    Ok(softmax_row(g.value(logits).data()))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_params(out: &mut Vec<u8>, p: &NetworkParams) {
    let d = &p.dims;
    put_u32(out, d.input);
    put_u32(out, d.frame.len());
    for &w in &d.frame {
        put_u32(out, w);
    }
    put_u32(out, d.embedding);
    put_u32(out, d.fc2);
    put_u32(out, d.classes);
    for t in p.tensors() {
        put_tensor(out, t);
    }
}

/// Backbone parameters plus optional transformation coefficients. The
/// coefficient section follows the parameter section, so adding it leaves
/// the parameter bytes unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub coeffs: Option<TransformCoeffs>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize);
        write_params(&mut out, &self.params);
        match &self.coeffs {
            None => put_u32(&mut out, 0),
            Some(c) => {
                put_u32(&mut out, 1);
                for t in c.tensors() {
                    put_tensor(&mut out, t);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let input = r.u32()? as usize;
        let n_frame = r.u32()? as usize;
        let frame = (0..n_frame)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<std::result::Result<_, _>>()?;
        let dims = NetworkDims {
            input,
            frame,
            embedding: r.u32()? as usize,
            fc2: r.u32()? as usize,
            classes: r.u32()? as usize,
        };
        dims.validate().map_err(|e| e.to_string())?;
        let mut tensors = Vec::new();
        for (fan_in, fan_out) in dims.layer_shapes() {
            tensors.push(read_tensor(&mut r, vec![fan_in, fan_out])?);
            tensors.push(read_tensor(&mut r, vec![fan_out])?);
        }
        let has_coeffs = r.u32()?;
        let mut coeff_tensors = Vec::new();
        match has_coeffs {
            0 => {}
            1 => {
                for w in dims.extractor_widths() {
                    coeff_tensors.push(read_tensor(&mut r, vec![w])?);
                    coeff_tensors.push(read_tensor(&mut r, vec![w])?);
                }
            }
            other => return Err(format!("bad coefficient flag {other}")),
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let params =
            NetworkParams::from_tensors(dims.clone(), tensors).map_err(|e| e.to_string())?;
        let coeffs = if has_coeffs == 1 {
            Some(TransformCoeffs::from_tensors(&dims, coeff_tensors).map_err(|e| e.to_string())?)
        } else {
            None
        };
        Ok(Checkpoint { params, coeffs })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|d| Error::format(path, d))
    }
}

fn read_tensor(r: &mut ByteReader<'_>, shape: Vec<usize>) -> std::result::Result<Tensor, String> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| r.f64())
        .collect::<std::result::Result<_, _>>()?;
    Tensor::new(shape, data).map_err(|e| e.to_string())
}
