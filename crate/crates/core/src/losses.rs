//! Supervised, paraphrasing and contrastive losses, and the annealed
//! combination of the three.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{group_means, Distance};

/// Floor applied inside the logarithm of the supervised loss.
pub const PROB_FLOOR: f64 = 1e-12;

pub struct SupervisedLoss {
    pub loss: Var,
    /// At least one labeled probability fell below [`PROB_FLOOR`].
    pub clamped: bool,
}

/// Mean negative log-probability of the labeled class over all queries.
pub fn supervised_loss(g: &mut Graph, probabilities: &[Var], labels: &[usize]) -> Result<SupervisedLoss> {
    if probabilities.is_empty() || probabilities.len() != labels.len() {
        return Err(Error::Usage(format!(
            "supervised_loss: {} probability rows for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let mut terms = Vec::with_capacity(labels.len());
    let mut clamped = false;
    for (&p, &y) in probabilities.iter().zip(labels) {
        let n = g.value(p).len();
        if y >= n {
            return Err(Error::Usage(format!("supervised_loss: label {y} outside {n} classes")));
        }
        let py = g.slice(p, y, 1)?;
        clamped |= g.value(py).item() < PROB_FLOOR;
        terms.push(g.log_clamped(py, PROB_FLOOR)?);
    }
    let all = g.concat_vectors(&terms)?;
    let total = g.sum(all)?;
    let loss = g.scale(total, -1.0 / labels.len() as f64)?;
    Ok(SupervisedLoss { loss, clamped })
}

/// Per-answer means of paraphrase vectors laid out answer-major
/// (`[S * Z, M]`).
pub fn unlabeled_prototypes(g: &mut Graph, paraphrases: Var, s: usize, z: usize) -> Result<Vec<Var>> {
    group_means(g, paraphrases, s, z)
}

/// Row `s` is the softmax over `-d(c_t, delta_s)` for every unlabeled
/// prototype `c_t`.
pub fn paraphrase_probabilities(
    g: &mut Graph,
    unlabeled: &[Var],
    prototypes: &[Var],
    distance: Distance,
) -> Result<Vec<Var>> {
    if unlabeled.is_empty() || unlabeled.len() != prototypes.len() {
        return Err(Error::Usage(format!(
            "paraphrase_probabilities: {} vectors for {} prototypes",
            unlabeled.len(),
            prototypes.len()
        )));
    }
    unlabeled
        .iter()
        .map(|&u| crate::model::class_probabilities(g, prototypes, u, distance))
        .collect()
}

/// `-(1/S) sum_s p_s . log(p_s + beta)`.
pub fn paraphrasing_loss(g: &mut Graph, rows: &[Var], beta: f64) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Usage("paraphrasing_loss: no rows".into()));
    }
    if beta <= 0.0 {
        return Err(Error::config("beta", format!("must be positive, got {beta}")));
    }
    let mut terms = Vec::with_capacity(rows.len());
    for &p in rows {
        let shape = g.value(p).shape().to_vec();
        let shift = g.constant(Tensor::filled(&shape, beta));
        let shifted = g.add(p, shift)?;
        let logs = g.log(shifted)?;
        terms.push(g.dot(p, logs)?);
    }
    let all = g.concat_vectors(&terms)?;
    let total = g.sum(all)?;
    g.scale(total, -1.0 / rows.len() as f64)
}

/// Membership of the contrastive batch: the `S` originals followed by the
/// paraphrases in the sampled columns, column by column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveBatch {
    pub s: usize,
    /// Sampled paraphrase columns, distinct, in `[0, Z)`.
    pub columns: Vec<usize>,
    /// Source answer of each member.
    pub sources: Vec<usize>,
    pub tau: f64,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Row of member `i` in the answer-major `[S * Z, M]` paraphrase matrix,
    /// or `None` for an original.
    pub fn paraphrase_row(&self, i: usize, z: usize) -> Option<usize> {
        if i < self.s {
            None
        } else {
            let (col, src) = ((i - self.s) / self.s, (i - self.s) % self.s);
            Some(src * z + self.columns[col])
        }
    }

    /// With `L = 1` every member has exactly one partner; the pairing is an
    /// involution.
    pub fn partner(&self, i: usize) -> Option<usize> {
        if self.columns.len() != 1 {
            return None;
        }
        Some(if i < self.s { i + self.s } else { i - self.s })
    }
}

pub fn build_contrastive_batch(s: usize, z: usize, l: usize, tau: f64, seed: u64) -> Result<ContrastiveBatch> {
    if l == 0 || l > z {
        return Err(Error::config("L", format!("need 1 <= L <= Z = {z}, got {l}")));
    }
    if tau <= 0.0 {
        return Err(Error::config("tau", format!("must be positive, got {tau}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns = index::sample(&mut rng, z, l).into_vec();
    let sources = (0..s * (l + 1)).map(|i| i % s).collect();
    Ok(ContrastiveBatch { s, columns, sources, tau })
}

/// For each anchor, `-log(sum_pos exp(a.b/tau) / sum_{all others} exp(a.b/tau))`,
/// averaged over anchors. Positives share the anchor's source answer. With
/// `originals_only` only the `S` original vectors act as anchors.
pub fn contrastive_loss(g: &mut Graph, vectors: &[Var], batch: &ContrastiveBatch, originals_only: bool) -> Result<Var> {
    if vectors.len() != batch.len() {
        return Err(Error::Usage(format!(
            "contrastive_loss: {} vectors for a batch of {}",
            vectors.len(),
            batch.len()
        )));
    }
    let anchors = if originals_only { batch.s } else { batch.len() };
    let mut terms = Vec::with_capacity(anchors);
    for i in 0..anchors {
        let mut pos = Vec::new();
        let mut all = Vec::new();
        for j in 0..batch.len() {
            if j == i {
                continue;
            }
            let d = g.dot(vectors[i], vectors[j])?;
            let logit = g.scale(d, 1.0 / batch.tau)?;
            if batch.sources[j] == batch.sources[i] {
                pos.push(logit);
            }
            all.push(logit);
        }
        if pos.is_empty() {
            return Err(Error::Usage(format!("contrastive_loss: anchor {i} has no positive")));
        }
        let pos = g.concat_vectors(&pos)?;
        let all = g.concat_vectors(&all)?;
        let lp = g.log_sum_exp(pos)?;
        let la = g.log_sum_exp(all)?;
        terms.push(g.sub(la, lp)?);
    }
    let all = g.concat_vectors(&terms)?;
    let total = g.sum(all)?;
    g.scale(total, 1.0 / anchors as f64)
}

/// `t = (epochs - epoch) / (epochs + n)`, epochs counted from zero.
pub fn anneal_t(epoch: usize, total_epochs: usize, n: usize) -> Result<f64> {
    if epoch >= total_epochs || n == 0 {
        return Err(Error::Usage(format!(
            "anneal_t: need 0 <= epoch < {total_epochs} and n >= 1, got epoch {epoch}, n {n}"
        )));
    }
    Ok((total_epochs - epoch) as f64 / (total_epochs + n) as f64)
}

/// Coefficients of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl LossWeights {
    /// `t^alpha`, `1 - t^alpha` and `gamma`. Dropping L2 hands its weight to
    /// L1; dropping L3 zeroes gamma.
    pub fn annealed(t: f64, alpha: f64, gamma: f64, disable_l2: bool, disable_l3: bool) -> Self {
        let ta = t.powf(alpha);
        let (l1, l2) = if disable_l2 { (1.0, 0.0) } else { (ta, 1.0 - ta) };
        Self {
            l1,
            l2,
            l3: if disable_l3 { 0.0 } else { gamma },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub t: f64,
    pub t_pow_alpha: f64,
    pub total: f64,
}

/// `t^alpha * l1 + (1 - t^alpha) * l2 + gamma * l3`.
pub fn total_loss(l1: f64, l2: f64, l3: f64, t: f64, alpha: f64, gamma: f64) -> LossBreakdown {
    let w = LossWeights::annealed(t, alpha, gamma, false, false);
    LossBreakdown {
        l1,
        l2,
        l3,
        t,
        t_pow_alpha: w.l1,
        total: w.l1 * l1 + w.l2 * l2 + w.l3 * l3,
    }
}

/// The weighted sum as a graph node.
pub fn combine(g: &mut Graph, l1: Var, l2: Var, l3: Var, w: LossWeights) -> Result<Var> {
    let a = g.scale(l1, w.l1)?;
    let b = g.scale(l2, w.l2)?;
    let c = g.scale(l3, w.l3)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn supervised_examples() {
        let mut g = Graph::new();
        let a = vec_var(&mut g, &[0.7, 0.3]);
        let b = vec_var(&mut g, &[0.2, 0.8]);
        let l = supervised_loss(&mut g, &[a, b], &[0, 1]).unwrap();
        let want = -(0.7f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((g.value(l.loss).item() - want).abs() < 1e-12);
        assert!(!l.clamped);

        let u = vec_var(&mut g, &[0.25; 4]);
        let l = supervised_loss(&mut g, &[u], &[2]).unwrap();
        assert!((g.value(l.loss).item() - 4f64.ln()).abs() < 1e-12);

        let one_hot = vec_var(&mut g, &[0.0, 1.0]);
        let l = supervised_loss(&mut g, &[one_hot], &[1]).unwrap();
        assert_eq!(g.value(l.loss).item(), 0.0);
        let l = supervised_loss(&mut g, &[one_hot], &[0]).unwrap();
        assert!(l.clamped);
        assert!((g.value(l.loss).item() - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn paraphrasing_examples() {
        let mut g = Graph::new();
        let one = vec_var(&mut g, &[1.0]);
        let l = paraphrasing_loss(&mut g, &[one], 0.01).unwrap();
        assert!((g.value(l).item() + 1.01f64.ln()).abs() < 1e-12);

        let half = vec_var(&mut g, &[0.5, 0.5]);
        let l = paraphrasing_loss(&mut g, &[half, half], 0.01).unwrap();
        assert!((g.value(l).item() + 0.51f64.ln()).abs() < 1e-12);

        let sharp = vec_var(&mut g, &[0.9, 0.1]);
        let ls = paraphrasing_loss(&mut g, &[sharp], 0.01).unwrap();
        let lh = paraphrasing_loss(&mut g, &[half], 0.01).unwrap();
        assert!(g.value(ls).item() < g.value(lh).item());
    }

    #[test]
    fn unlabeled_probabilities() {
        let mut g = Graph::new();
        let para = g
            .constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap());
        let protos = unlabeled_prototypes(&mut g, para, 1, 2).unwrap();
        assert_eq!(g.value(protos[0]).data(), &[1.0, 1.0]);

        let u = vec_var(&mut g, &[0.0, 0.0]);
        let c0 = vec_var(&mut g, &[0.0, 0.0]);
        let c1 = vec_var(&mut g, &[2.0, 0.0]);
        let rows = paraphrase_probabilities(&mut g, &[u, u], &[c0, c1], Distance::Euclidean).unwrap();
        let p = g.value(rows[0]).data();
        assert!((p[0] - 0.8807970779778823).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_batch_layout() {
        let b = build_contrastive_batch(5, 5, 1, 1.0, 3).unwrap();
        assert_eq!(b.len(), 10);
        assert!(b.columns[0] < 5);
        assert_eq!(b, build_contrastive_batch(5, 5, 1, 1.0, 3).unwrap());
        for i in 0..10 {
            assert_eq!(b.partner(b.partner(i).unwrap()), Some(i));
        }
        assert_eq!(b.paraphrase_row(7, 5), Some(2 * 5 + b.columns[0]));
        let b3 = build_contrastive_batch(2, 5, 3, 1.0, 0).unwrap();
        let mut cols = b3.columns.clone();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!(cols.len(), 3);
        assert!(matches!(build_contrastive_batch(5, 2, 3, 1.0, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn contrastive_examples() {
        let mut g = Graph::new();
        let b = build_contrastive_batch(1, 1, 1, 1.0, 0).unwrap();
        let x = vec_var(&mut g, &[0.3, -0.2]);
        let y = vec_var(&mut g, &[1.0, 0.5]);
        let l = contrastive_loss(&mut g, &[x, y], &b, false).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let b = build_contrastive_batch(2, 1, 1, 1.0, 0).unwrap();
        let v = vec_var(&mut g, &[0.4, 0.4]);
        let l = contrastive_loss(&mut g, &[v; 4], &b, false).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn anneal_sequence() {
        let t: Vec<f64> = (0..5).map(|e| anneal_t(e, 5, 1).unwrap()).collect();
        for (e, v) in t.iter().enumerate() {
            assert!((v - (5 - e) as f64 / 6.0).abs() < 1e-15);
        }
        assert!(anneal_t(5, 5, 1).is_err());
        assert!(anneal_t(0, 5, 0).is_err());
    }

    #[test]
    fn total_examples() {
        let b = total_loss(1.0, 2.0, 3.0, 5.0 / 6.0, 0.8, 0.02);
        assert!((b.t_pow_alpha - 0.86429).abs() < 1e-5);
        assert!((b.total - (b.t_pow_alpha + 2.0 * (1.0 - b.t_pow_alpha) + 0.06)).abs() < 1e-12);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.5, 0.8, 0.0).total, total_loss(1.0, 2.0, 99.0, 0.5, 0.8, 0.0).total);
        assert!(0.5f64.powf(1.2) < 0.5f64.powf(0.8));

        let w = LossWeights::annealed(0.5, 0.8, 0.02, true, true);
        assert_eq!((w.l1, w.l2, w.l3), (1.0, 0.0, 0.0));
    }
}
