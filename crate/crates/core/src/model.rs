//! Forward pass: stacked LSTM encoder, two Siamese similarity branches,
//! class prototypes and distance-based classification.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{BatchNormMode, BatchStats, Graph, ParamSet, Tensor, Var};
use crate::embedding::EmbeddedSequence;
use crate::error::{Error, Result};

pub const ENCODER_LAYERS: usize = 3;
pub const BN_MOMENTUM: f64 = 0.9;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Token embedding width `E`.
    pub embed_dim: usize,
    /// Encoder hidden width, equal to the similarity dimension `M`.
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl Distance {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euclidean" => Some(Self::Euclidean),
            "squared" | "squared_euclidean" => Some(Self::SquaredEuclidean),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Euclidean => "euclidean",
            Self::SquaredEuclidean => "squared",
        }
    }

    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Self::Euclidean => sq.sqrt(),
            Self::SquaredEuclidean => sq,
        }
    }

    pub fn apply(self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        match self {
            Self::Euclidean => g.euclidean_distance(a, b),
            Self::SquaredEuclidean => g.squared_euclidean_distance(a, b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    S1,
    S2,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::S1 => "s1",
            Branch::S2 => "s2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics.
    Train,
    /// Stored running statistics.
    Infer,
}

pub struct SimilarityOutput {
    /// Dense + ReLU activations before normalization.
    pub pre_norm: Var,
    pub out: Var,
    pub stats: Option<BatchStats>,
}

fn enc_w(layer: usize) -> String {
    format!("encoder.l{layer}.w")
}

fn enc_b(layer: usize) -> String {
    format!("encoder.l{layer}.b")
}

fn sim_id(branch: Branch, field: &str) -> String {
    format!("{}.{field}", branch.prefix())
}

#[derive(Clone, Debug)]
pub struct ProtSiModel {
    pub dims: ModelDims,
    pub params: ParamSet,
}

impl ProtSiModel {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`; batch normalization
    /// starts as the identity with zero mean and unit variance.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.embed_dim == 0 || dims.hidden == 0 {
            return Err(Error::config("M", "model dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let r = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-r..=r)).collect();
            Tensor::new(shape.to_vec(), data)
        };
        let h = dims.hidden;
        let mut params = ParamSet::new();
        for layer in 0..ENCODER_LAYERS {
            let input = if layer == 0 { dims.embed_dim } else { h };
            params.insert(enc_w(layer), uniform(&[input + h, 4 * h], input + h)?, true)?;
            params.insert(enc_b(layer), uniform(&[4 * h], input + h)?, true)?;
        }
        for branch in [Branch::S1, Branch::S2] {
            params.insert(sim_id(branch, "w"), uniform(&[2 * h, h], 2 * h)?, true)?;
            params.insert(sim_id(branch, "b"), uniform(&[h], 2 * h)?, true)?;
            params.insert(sim_id(branch, "gamma"), Tensor::filled(&[h], 1.0), true)?;
            params.insert(sim_id(branch, "beta"), Tensor::zeros(&[h]), true)?;
            params.insert(sim_id(branch, "running_mean"), Tensor::zeros(&[h]), false)?;
            params.insert(sim_id(branch, "running_var"), Tensor::filled(&[h], 1.0), false)?;
        }
        Ok(Self { dims, params })
    }

    /// Rebuilds a model from a parameter set, checking every expected tensor.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let b0 = params.tensor(&enc_b(0))?;
        if b0.len() % 4 != 0 || b0.is_empty() {
            return Err(Error::Usage(format!("encoder bias has length {}", b0.len())));
        }
        let h = b0.len() / 4;
        let w0 = params.tensor(&enc_w(0))?;
        if w0.rank() != 2 || w0.rows() <= h {
            return Err(Error::Usage(format!("encoder input weight has shape {:?}", w0.shape())));
        }
        let dims = ModelDims {
            embed_dim: w0.rows() - h,
            hidden: h,
        };
        let reference = Self::init(dims, 0)?;
        for p in reference.params.iter() {
            let got = params.get(&p.id).ok_or_else(|| Error::Usage(format!("missing parameter {}", p.id)))?;
            if got.tensor.shape() != p.tensor.shape() || got.trainable != p.trainable {
                return Err(Error::Usage(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.id,
                    got.tensor.shape(),
                    p.tensor.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Usage("checkpoint holds unexpected parameters".into()));
        }
        Ok(Self { dims, params })
    }

    /// Copies every parameter of `from` into `to` (used to tie the branches
    /// in tests and experiments).
    pub fn copy_branch(&mut self, from: Branch, to: Branch) -> Result<()> {
        for field in ["w", "b", "gamma", "beta", "running_mean", "running_var"] {
            let t = self.params.tensor(&sim_id(from, field))?.clone();
            *self.params.tensor_mut(&sim_id(to, field))? = t;
        }
        Ok(())
    }

    /// Encodes a batch of sequences into a `[B, M]` matrix. Each row is the
    /// top-layer hidden state after the last unmasked token of its sequence.
    pub fn encode_batch(&self, g: &mut Graph, seqs: &[&EmbeddedSequence]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::Usage("encode_batch: no sequences".into()));
        }
        let e = self.dims.embed_dim;
        let h = self.dims.hidden;
        let rows: Vec<Vec<&[f64]>> = seqs.iter().map(|s| s.valid_rows().collect()).collect();
        for (s, r) in seqs.iter().zip(&rows) {
            if s.dim() != e {
                return Err(Error::Shape {
                    op: "encode_batch",
                    shapes: vec![s.matrix.shape().to_vec(), vec![e]],
                });
            }
            if r.is_empty() {
                return Err(Error::EmptyInput("sequence has no unmasked tokens".into()));
            }
        }
        let b = seqs.len();
        let steps = rows.iter().map(Vec::len).max().unwrap();

        let mut inputs = Vec::with_capacity(steps);
        let mut masks = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut x = vec![0.0; b * e];
            let mut keep = vec![0.0; b * h];
            let mut all = true;
            for (i, r) in rows.iter().enumerate() {
                if let Some(tok) = r.get(t) {
                    x[i * e..(i + 1) * e].copy_from_slice(tok);
                    keep[i * h..(i + 1) * h].iter_mut().for_each(|v| *v = 1.0);
                } else {
                    all = false;
                }
            }
            inputs.push(g.constant(Tensor::new(vec![b, e], x)?));
            masks.push(if all {
                None
            } else {
                let hold = keep.iter().map(|k| 1.0 - k).collect();
                Some((g.constant(Tensor::new(vec![b, h], keep)?), g.constant(Tensor::new(vec![b, h], hold)?)))
            });
        }

        let mut hidden = None;
        for layer in 0..ENCODER_LAYERS {
            let w = g.param(&self.params, &enc_w(layer))?;
            let bias = g.param(&self.params, &enc_b(layer))?;
            let mut hs = g.constant(Tensor::zeros(&[b, h]));
            let mut cs = g.constant(Tensor::zeros(&[b, h]));
            let mut outputs = Vec::with_capacity(steps);
            for t in 0..steps {
                let xh = g.concat(inputs[t], hs)?;
                let pre = g.matmul(xh, w)?;
                let z = g.add(pre, bias)?;
                let zi = g.slice(z, 0, h)?;
                let zf = g.slice(z, h, h)?;
                let zg = g.slice(z, 2 * h, h)?;
                let zo = g.slice(z, 3 * h, h)?;
                let gi = g.sigmoid(zi)?;
                let gf = g.sigmoid(zf)?;
                let gg = g.tanh(zg)?;
                let go = g.sigmoid(zo)?;
                let kept = g.mul(gf, cs)?;
                let written = g.mul(gi, gg)?;
                let c_new = g.add(kept, written)?;
                let c_act = g.tanh(c_new)?;
                let h_new = g.mul(go, c_act)?;
                match masks[t] {
                    None => {
                        cs = c_new;
                        hs = h_new;
                    }
                    Some((keep, hold)) => {
                        cs = blend(g, c_new, cs, keep, hold)?;
                        hs = blend(g, h_new, hs, keep, hold)?;
                    }
                }
                outputs.push(hs);
            }
            hidden = Some(hs);
            inputs = outputs;
        }
        Ok(hidden.unwrap())
    }

    /// Encodes one sequence into an `M`-vector.
    pub fn encode_sequence(&self, g: &mut Graph, seq: &EmbeddedSequence) -> Result<Var> {
        let m = self.encode_batch(g, &[seq])?;
        g.row(m, 0)
    }

    /// `concat(answer, model) -> dense -> ReLU -> batch norm` for every row
    /// of `answers` (`[B, M]`) against the encoded model answer (`[M]`).
    pub fn similarity_batch(
        &self,
        g: &mut Graph,
        branch: Branch,
        answers: Var,
        model: Var,
        mode: NormMode,
    ) -> Result<SimilarityOutput> {
        let rows = g.value(answers).rows();
        let tiled = g.stack_rows(&vec![model; rows])?;
        let x = g.concat(answers, tiled)?;
        let w = g.param(&self.params, &sim_id(branch, "w"))?;
        let b = g.param(&self.params, &sim_id(branch, "b"))?;
        let dense = g.matmul(x, w)?;
        let dense = g.add(dense, b)?;
        let pre_norm = g.relu(dense)?;
        let gamma = g.param(&self.params, &sim_id(branch, "gamma"))?;
        let beta = g.param(&self.params, &sim_id(branch, "beta"))?;
        let (out, stats) = match mode {
            NormMode::Train => g.batchnorm(pre_norm, gamma, beta, BatchNormMode::Train)?,
            NormMode::Infer => {
                let running_mean = self.params.tensor(&sim_id(branch, "running_mean"))?.data();
                let running_var = self.params.tensor(&sim_id(branch, "running_var"))?.data();
                g.batchnorm(
                    pre_norm,
                    gamma,
                    beta,
                    BatchNormMode::Infer {
                        running_mean,
                        running_var,
                    },
                )?
            }
        };
        Ok(SimilarityOutput { pre_norm, out, stats })
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, branch: Branch, stats: &BatchStats) -> Result<()> {
        for (field, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let t = self.params.tensor_mut(&sim_id(branch, field))?;
            if t.len() != batch.len() {
                return Err(Error::Shape {
                    op: "update_running_stats",
                    shapes: vec![t.shape().to_vec(), vec![batch.len()]],
                });
            }
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        Ok(())
    }
}

fn blend(g: &mut Graph, new: Var, old: Var, keep: Var, hold: Var) -> Result<Var> {
    let a = g.mul(new, keep)?;
    let b = g.mul(old, hold)?;
    g.add(a, b)
}

/// Means of consecutive row groups of `x` (`[groups * per_group, M]`).
pub fn group_means(g: &mut Graph, x: Var, groups: usize, per_group: usize) -> Result<Vec<Var>> {
    let t = g.value(x);
    if per_group == 0 || t.rank() != 2 || t.rows() != groups * per_group {
        return Err(Error::Usage(format!(
            "group_means: {:?} rows cannot form {groups} groups of {per_group}",
            t.shape()
        )));
    }
    let mut out = Vec::with_capacity(groups);
    for grp in 0..groups {
        let rows = (0..per_group)
            .map(|j| g.row(x, grp * per_group + j))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.stack_rows(&rows)?;
        out.push(g.mean_rows(stacked)?);
    }
    Ok(out)
}

/// Class prototypes from class-major support vectors `[N * K, M]`.
pub fn compute_prototypes(g: &mut Graph, support: Var, n_way: usize, k_shot: usize) -> Result<Vec<Var>> {
    group_means(g, support, n_way, k_shot)
}

/// Distances from `query` to each prototype, as an `[N]` vector.
pub fn prototype_distances(g: &mut Graph, prototypes: &[Var], query: Var, distance: Distance) -> Result<Var> {
    let d = prototypes
        .iter()
        .map(|&c| distance.apply(g, c, query))
        .collect::<Result<Vec<_>>>()?;
    g.concat_vectors(&d)
}

/// Softmax over negative distances.
pub fn class_probabilities(g: &mut Graph, prototypes: &[Var], query: Var, distance: Distance) -> Result<Var> {
    let d = prototype_distances(g, prototypes, query, distance)?;
    let neg = g.scale(d, -1.0)?;
    g.softmax(neg)
}

/// Index of the smallest distance; ties go to the lowest index.
pub fn predict(distances: &[f64]) -> usize {
    let mut best = 0;
    for (i, d) in distances.iter().enumerate() {
        if *d < distances[best] {
            best = i;
        }
    }
    best
}

/// Materialized prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_label: i64,
    pub values: Vec<f64>,
    pub member_count: usize,
}

impl Prototype {
    pub fn from_members(class_label: i64, members: &[Vec<f64>]) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Usage("prototype: no members".into()))?;
        let mut values = vec![0.0; first.len()];
        for m in members {
            if m.len() != values.len() {
                return Err(Error::Usage("prototype: ragged members".into()));
            }
            values.iter_mut().zip(m).for_each(|(v, x)| *v += x);
        }
        values.iter_mut().for_each(|v| *v /= members.len() as f64);
        Ok(Self {
            class_label,
            values,
            member_count: members.len(),
        })
    }
}

/// Encodes a parameter set in the PSCK layout:
///
/// ```text
/// "PSCK" | u32 version | u32 tensor count
/// per tensor: u32 name length | name | u8 trainable | u32 rank | rank x u32 dims | f64 values
/// ```
pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.id.len() as u32).to_le_bytes());
        out.extend_from_slice(p.id.as_bytes());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for d in p.tensor.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], context: &str) -> Result<ParamSet> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<(usize, &[u8])> {
        if bytes.len() - pos < n {
            return Err(Error::format(context, Some(pos as u64), format!("truncated while reading {what}")));
        }
        let at = pos;
        pos += n;
        Ok((at, &bytes[at..at + n]))
    };
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());

    let (_, magic) = take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(context, Some(0), "bad magic, expected PSCK"));
    }
    let (at, v) = take(4, "version")?;
    let version = u32_of(v);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(context, Some(at as u64), format!("unsupported version {version}")));
    }
    let count = u32_of(take(4, "tensor count")?.1);
    let mut params = ParamSet::new();
    for _ in 0..count {
        let (at, l) = take(4, "name length")?;
        let name_len = u32_of(l) as usize;
        let name = std::str::from_utf8(take(name_len, "name")?.1)
            .map_err(|_| Error::format(context, Some(at as u64 + 4), "name is not UTF-8"))?
            .to_string();
        let (flag_at, flag) = take(1, "trainable flag")?;
        let trainable = match flag[0] {
            0 => false,
            1 => true,
            b => return Err(Error::format(context, Some(flag_at as u64), format!("trainable flag {b}"))),
        };
        let rank = u32_of(take(4, "rank")?.1) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_of(take(4, "dimension")?.1) as usize);
        }
        let n: usize = shape.iter().product();
        let (vals_at, raw) = take(n.checked_mul(8).unwrap_or(usize::MAX), "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor =
            Tensor::new(shape, data).map_err(|e| Error::format(context, Some(vals_at as u64), e.to_string()))?;
        params
            .insert(name, tensor, trainable)
            .map_err(|e| Error::format(context, Some(at as u64), e.to_string()))?;
    }
    if pos != bytes.len() {
        return Err(Error::format(context, Some(pos as u64), "trailing bytes after last tensor"));
    }
    Ok(params)
}

/// Writes through a sibling temporary file and renames, so a crash never
/// leaves a half-written checkpoint at `path`.
pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, encode_checkpoint(params))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    decode_checkpoint(&fs::read(path)?, &path.display().to_string())
}
