//! Episodic training, evaluation and gradient checking of the full model.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{attach_paraphrases, Paraphraser};
use crate::config::{MetricPooling, Optimizer, TrainConfig};
use crate::data::synthetic::{self, SyntheticSpec};
use crate::data::{sample_episodes, DatasetSplit, Episode, EpisodeShape, QuestionSpec};
use crate::diff::{finite_difference_check, BatchStats, GradCheckReport, Gradients, Graph, ParamSet, Var};
use crate::embedding::{answer_key, model_answer_key, paraphrase_key, EmbeddedSequence, EmbeddingProvider, HashEmbedder};
use crate::error::{Error, Result};
use crate::losses::{
    anneal_t, build_contrastive_batch, combine, contrastive_loss, paraphrase_probabilities, paraphrasing_loss,
    supervised_loss, unlabeled_prototypes, LossBreakdown, LossWeights,
};
use crate::metrics::{score_distribution, MetricsBundle, RaterPair, ScoreDistribution};
use crate::model::{
    class_probabilities, compute_prototypes, predict, prototype_distances, Branch, ModelDims, NormMode, ProtSiModel,
};

pub use crate::model::{load_checkpoint, save_checkpoint};

const VAL_SEED_OFFSET: u64 = 1 << 32;
const TEST_SEED_OFFSET: u64 = 2 << 32;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Episodes for the three phases. Held-out episodes carry no unlabeled
/// answers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSets {
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
    pub test: Vec<Episode>,
}

pub fn episode_shape(cfg: &TrainConfig, question: &QuestionSpec) -> EpisodeShape {
    EpisodeShape {
        n_way: cfg.n_way.unwrap_or_else(|| question.num_classes()),
        k_shot: cfg.k_shot,
        w_query: cfg.w_query,
        s_unlabeled: cfg.s_unlabeled,
    }
}

/// Samples training episodes (with paraphrases attached) from `train` and
/// held-out episodes from `val` and from the evaluation partition.
pub fn build_episodes(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    question: &QuestionSpec,
    paraphraser: &Paraphraser,
) -> Result<EpisodeSets> {
    let shape = episode_shape(cfg, question);
    let pool = split.unlabeled_pool(cfg.strict_unlabeled);
    let mut train = sample_episodes(&split.train, question, &shape, &pool, cfg.episodes_per_epoch, cfg.episode_seed)?;
    for ep in &mut train {
        attach_paraphrases(ep, paraphraser, cfg.z_paraphrases)?;
    }
    let held_out = EpisodeShape { s_unlabeled: 0, ..shape };
    let val = sample_episodes(
        &split.val,
        question,
        &held_out,
        &[],
        cfg.eval_episodes,
        cfg.episode_seed.wrapping_add(VAL_SEED_OFFSET),
    )?;
    let test = sample_episodes(
        split.eval_part(),
        question,
        &held_out,
        &[],
        cfg.eval_episodes,
        cfg.episode_seed.wrapping_add(TEST_SEED_OFFSET),
    )?;
    Ok(EpisodeSets { train, val, test })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub episode: usize,
    pub loss: LossBreakdown,
    pub weights: LossWeights,
    pub accuracy: f64,
    /// A labeled-class probability hit the log floor.
    pub clamped: bool,
    pub wall_time_ms: Option<f64>,
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".to_string()
    }
}

impl TrainLogEntry {
    /// JSON object on one line, floats with 17 significant digits.
    pub fn to_json_line(&self) -> String {
        let l = &self.loss;
        let w = &self.weights;
        let mut s = format!(
            "{{\"epoch\":{},\"episode\":{},\"loss\":{{\"l1\":{},\"l2\":{},\"l3\":{},\"t\":{},\"t_pow_alpha\":{},\"total\":{}}},\
             \"weights\":{{\"l1\":{},\"l2\":{},\"l3\":{}}},\"accuracy\":{},\"clamped\":{}",
            self.epoch,
            self.episode,
            num(l.l1),
            num(l.l2),
            num(l.l3),
            num(l.t),
            num(l.t_pow_alpha),
            num(l.total),
            num(w.l1),
            num(w.l2),
            num(w.l3),
            num(self.accuracy),
            self.clamped,
        );
        if let Some(ms) = self.wall_time_ms {
            s.push_str(&format!(",\"wall_time_ms\":{}", num(ms)));
        }
        s.push('}');
        s
    }
}

/// Embeddings of everything an episode feeds through the encoder.
struct EpisodeInputs {
    support: Vec<EmbeddedSequence>,
    query: Vec<EmbeddedSequence>,
    unlabeled: Vec<EmbeddedSequence>,
    /// Answer-major: variant `z` of answer `s` at `s * Z + z`.
    paraphrases: Vec<EmbeddedSequence>,
}

fn embed_inputs(provider: &dyn EmbeddingProvider, ep: &Episode, with_unlabeled: bool) -> Result<EpisodeInputs> {
    let embed = |id: &str, text: &str| provider.embed(&answer_key(id), text);
    let support = ep.support.iter().map(|a| embed(&a.answer.answer_id, &a.answer.text)).collect::<Result<_>>()?;
    let query = ep.query.iter().map(|a| embed(&a.answer.answer_id, &a.answer.text)).collect::<Result<_>>()?;
    let (mut unlabeled, mut paraphrases) = (Vec::new(), Vec::new());
    if with_unlabeled {
        if ep.paraphrases.len() != ep.unlabeled.len() {
            return Err(Error::Usage(format!("episode {}: paraphrases not attached", ep.seed)));
        }
        for (a, variants) in ep.unlabeled.iter().zip(&ep.paraphrases) {
            unlabeled.push(embed(&a.answer_id, &a.text)?);
            for (z, v) in variants.iter().enumerate() {
                paraphrases.push(provider.embed(&paraphrase_key(&a.answer_id, z), v)?);
            }
        }
    }
    Ok(EpisodeInputs {
        support,
        query,
        unlabeled,
        paraphrases,
    })
}

/// Embeds the model answer of `question`.
pub fn embed_model_answer(provider: &dyn EmbeddingProvider, question: &QuestionSpec) -> Result<EmbeddedSequence> {
    provider.embed(&model_answer_key(&question.question_id), &question.model_answer_text)
}

fn row_block(g: &mut Graph, x: Var, start: usize, len: usize) -> Result<Var> {
    let rows = (start..start + len).map(|i| g.row(x, i)).collect::<Result<Vec<_>>>()?;
    g.stack_rows(&rows)
}

/// Everything one training step computes.
pub struct EpisodeForward {
    pub graph: Graph,
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub weights: LossWeights,
    /// Predicted index into the episode's `class_list`, per query.
    pub predictions: Vec<usize>,
    pub support_stats: Option<BatchStats>,
    pub query_stats: Option<BatchStats>,
    pub clamped: bool,
}

impl EpisodeForward {
    pub fn accuracy(&self, ep: &Episode) -> f64 {
        let hits = self.predictions.iter().zip(&ep.query).filter(|(p, q)| **p == q.class).count();
        hits as f64 / ep.query.len() as f64
    }
}

fn contrastive_seed(ep: &Episode, epoch: usize) -> u64 {
    ep.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Training-mode forward pass of one episode and its combined loss.
pub fn episode_forward(
    model: &ProtSiModel,
    cfg: &TrainConfig,
    ep: &Episode,
    model_answer: &EmbeddedSequence,
    provider: &dyn EmbeddingProvider,
    epoch: usize,
) -> Result<EpisodeForward> {
    let (n, k, w) = (ep.n_way(), ep.k_shot(), ep.w_query());
    let (s, z) = (ep.unlabeled.len(), cfg.z_paraphrases);
    if s == 0 {
        return Err(Error::Usage("episode_forward: training episodes need unlabeled answers".into()));
    }
    let inputs = embed_inputs(provider, ep, true)?;
    if inputs.paraphrases.len() != s * z {
        return Err(Error::Usage(format!("episode {}: expected {z} paraphrases per answer", ep.seed)));
    }
    let mut g = Graph::new();
    let mut seqs: Vec<&EmbeddedSequence> = vec![model_answer];
    seqs.extend(&inputs.support);
    seqs.extend(&inputs.query);
    seqs.extend(&inputs.unlabeled);
    seqs.extend(&inputs.paraphrases);
    let enc = model.encode_batch(&mut g, &seqs)?;
    let model_vec = g.row(enc, 0)?;
    let sup_enc = row_block(&mut g, enc, 1, n * k)?;
    let qry_enc = row_block(&mut g, enc, 1 + n * k, n * w)?;
    let unl_enc = row_block(&mut g, enc, 1 + n * k + n * w, s + s * z)?;

    let sup = model.similarity_batch(&mut g, Branch::S1, sup_enc, model_vec, NormMode::Train)?;
    let qry = model.similarity_batch(&mut g, Branch::S2, qry_enc, model_vec, NormMode::Train)?;
    let unl = model.similarity_batch(&mut g, cfg.unlabeled_branch, unl_enc, model_vec, NormMode::Train)?;

    let prototypes = compute_prototypes(&mut g, sup.out, n, k)?;
    let mut probs = Vec::with_capacity(n * w);
    let mut predictions = Vec::with_capacity(n * w);
    for i in 0..n * w {
        let q = g.row(qry.out, i)?;
        let d = prototype_distances(&mut g, &prototypes, q, cfg.distance)?;
        predictions.push(predict(g.value(d).data()));
        probs.push(class_probabilities(&mut g, &prototypes, q, cfg.distance)?);
    }
    let labels: Vec<usize> = ep.query.iter().map(|q| q.class).collect();
    let l1 = supervised_loss(&mut g, &probs, &labels)?;

    let originals: Vec<Var> = (0..s).map(|i| g.row(unl.out, i)).collect::<Result<_>>()?;
    let para = row_block(&mut g, unl.out, s, s * z)?;
    let unl_protos = unlabeled_prototypes(&mut g, para, s, z)?;
    let rows = paraphrase_probabilities(&mut g, &originals, &unl_protos, cfg.distance)?;
    let l2 = paraphrasing_loss(&mut g, &rows, cfg.beta)?;

    let batch = build_contrastive_batch(s, z, cfg.l_columns, cfg.tau, contrastive_seed(ep, epoch))?;
    let members: Vec<Var> = (0..batch.len())
        .map(|i| match batch.paraphrase_row(i, z) {
            None => Ok(originals[i]),
            Some(r) => g.row(unl.out, s + r),
        })
        .collect::<Result<_>>()?;
    let l3 = contrastive_loss(&mut g, &members, &batch, cfg.contrastive_originals_only)?;

    let t = anneal_t(epoch, cfg.epochs, cfg.anneal_n)?;
    let weights = LossWeights::annealed(t, cfg.alpha, cfg.gamma, cfg.disable_l2, cfg.disable_l3);
    let total = combine(&mut g, l1.loss, l2, l3, weights)?;
    let breakdown = LossBreakdown {
        l1: g.value(l1.loss).item(),
        l2: g.value(l2).item(),
        l3: g.value(l3).item(),
        t,
        t_pow_alpha: t.powf(cfg.alpha),
        total: g.value(total).item(),
    };
    Ok(EpisodeForward {
        graph: g,
        total,
        breakdown,
        weights,
        predictions,
        support_stats: sup.stats,
        query_stats: qry.stats,
        clamped: l1.clamped,
    })
}

/// Inference-mode prediction for every query of `ep`, as indices into its
/// `class_list`.
pub fn predict_episode(
    model: &ProtSiModel,
    cfg: &TrainConfig,
    ep: &Episode,
    model_answer: &EmbeddedSequence,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<usize>> {
    let (n, k, w) = (ep.n_way(), ep.k_shot(), ep.w_query());
    let inputs = embed_inputs(provider, ep, false)?;
    let mut g = Graph::new();
    let mut seqs: Vec<&EmbeddedSequence> = vec![model_answer];
    seqs.extend(&inputs.support);
    seqs.extend(&inputs.query);
    let enc = model.encode_batch(&mut g, &seqs)?;
    let model_vec = g.row(enc, 0)?;
    let sup_enc = row_block(&mut g, enc, 1, n * k)?;
    let qry_enc = row_block(&mut g, enc, 1 + n * k, n * w)?;
    let sup = model.similarity_batch(&mut g, Branch::S1, sup_enc, model_vec, NormMode::Infer)?;
    let qry = model.similarity_batch(&mut g, Branch::S2, qry_enc, model_vec, NormMode::Infer)?;
    let prototypes = compute_prototypes(&mut g, sup.out, n, k)?;
    (0..n * w)
        .map(|i| {
            let q = g.row(qry.out, i)?;
            let d = prototype_distances(&mut g, &prototypes, q, cfg.distance)?;
            Ok(predict(g.value(d).data()))
        })
        .collect()
}

/// Scores a single answer against the support set of `support_episode`.
/// Returns the predicted score and the class probabilities in the order of
/// the episode's `class_list`.
pub fn predict_answer(
    model: &ProtSiModel,
    cfg: &TrainConfig,
    question: &QuestionSpec,
    provider: &dyn EmbeddingProvider,
    support_episode: &Episode,
    answer_id: &str,
    text: &str,
) -> Result<(i64, Vec<f64>)> {
    let (n, k) = (support_episode.n_way(), support_episode.k_shot());
    let inputs = embed_inputs(provider, support_episode, false)?;
    let answer = provider.embed(&answer_key(answer_id), text)?;
    let model_answer = embed_model_answer(provider, question)?;
    let mut g = Graph::new();
    let mut seqs: Vec<&EmbeddedSequence> = vec![&model_answer];
    seqs.extend(&inputs.support);
    seqs.push(&answer);
    let enc = model.encode_batch(&mut g, &seqs)?;
    let model_vec = g.row(enc, 0)?;
    let sup_enc = row_block(&mut g, enc, 1, n * k)?;
    let ans_enc = row_block(&mut g, enc, 1 + n * k, 1)?;
    let sup = model.similarity_batch(&mut g, Branch::S1, sup_enc, model_vec, NormMode::Infer)?;
    let ans = model.similarity_batch(&mut g, Branch::S2, ans_enc, model_vec, NormMode::Infer)?;
    let prototypes = compute_prototypes(&mut g, sup.out, n, k)?;
    let q = g.row(ans.out, 0)?;
    let d = prototype_distances(&mut g, &prototypes, q, cfg.distance)?;
    let best = predict(g.value(d).data());
    let p = class_probabilities(&mut g, &prototypes, q, cfg.distance)?;
    Ok((support_episode.class_list[best], g.value(p).data().to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub episode: usize,
    pub answer_id: String,
    pub truth: i64,
    pub predicted: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsBundle,
    pub distribution: ScoreDistribution,
    pub predictions: Vec<QueryPrediction>,
}

/// Predicts every query of every episode (in parallel, merged in episode
/// order) and computes metrics over rubric class indices.
pub fn evaluate(
    model: &ProtSiModel,
    cfg: &TrainConfig,
    question: &QuestionSpec,
    provider: &dyn EmbeddingProvider,
    episodes: &[Episode],
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::EmptyDataset("no evaluation episodes".into()));
    }
    let model_answer = embed_model_answer(provider, question)?;
    let per_episode: Vec<Vec<usize>> = episodes
        .par_iter()
        .map(|ep| predict_episode(model, cfg, ep, &model_answer, provider))
        .collect::<Result<_>>()?;

    let c = question.num_classes();
    let index = |score: i64| {
        question
            .class_index(score)
            .ok_or_else(|| Error::InsufficientData(format!("score {score} outside the rubric")))
    };
    let mut predictions = Vec::new();
    let mut pairs = Vec::with_capacity(episodes.len());
    let (mut all_truth, mut all_pred) = (Vec::new(), Vec::new());
    for (e, (ep, preds)) in episodes.iter().zip(&per_episode).enumerate() {
        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        for (q, &p) in ep.query.iter().zip(preds) {
            let (ts, ps) = (ep.class_list[q.class], ep.class_list[p]);
            truth.push(index(ts)?);
            pred.push(index(ps)?);
            predictions.push(QueryPrediction {
                episode: e,
                answer_id: q.answer.answer_id.clone(),
                truth: ts,
                predicted: ps,
            });
        }
        all_truth.extend_from_slice(&truth);
        all_pred.extend_from_slice(&pred);
        pairs.push(RaterPair::new(truth, pred, c)?);
    }
    let pooled = RaterPair::new(all_truth, all_pred, c)?;
    let metrics = match cfg.metric_pooling {
        MetricPooling::Pooled => MetricsBundle::from_pair(&pooled),
        MetricPooling::Averaged => MetricsBundle::averaged(&pairs)?,
    };
    Ok(EvalReport {
        metrics,
        distribution: score_distribution(&pooled),
        predictions,
    })
}

enum OptimizerState {
    Sgd,
    Adam {
        step: i32,
        m: BTreeMap<String, Vec<f64>>,
        v: BTreeMap<String, Vec<f64>>,
    },
}

impl OptimizerState {
    fn new(kind: Optimizer) -> Self {
        match kind {
            Optimizer::Sgd => Self::Sgd,
            Optimizer::Adam => Self::Adam {
                step: 0,
                m: BTreeMap::new(),
                v: BTreeMap::new(),
            },
        }
    }

    fn apply(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        match self {
            Self::Sgd => {
                for (id, gr) in grads.iter() {
                    let t = params.tensor_mut(id)?;
                    t.data_mut().iter_mut().zip(gr.data()).for_each(|(p, g)| *p -= lr * g);
                }
            }
            Self::Adam { step, m, v } => {
                *step += 1;
                let (c1, c2) = (1.0 - ADAM_BETA1.powi(*step), 1.0 - ADAM_BETA2.powi(*step));
                for (id, gr) in grads.iter() {
                    let mm = m.entry(id.clone()).or_insert_with(|| vec![0.0; gr.len()]);
                    let vv = v.entry(id.clone()).or_insert_with(|| vec![0.0; gr.len()]);
                    let t = params.tensor_mut(id)?;
                    for (((p, g), mi), vi) in t.data_mut().iter_mut().zip(gr.data()).zip(mm.iter_mut()).zip(vv.iter_mut()) {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                        *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochValidation {
    pub epoch: usize,
    pub accuracy: f64,
    pub qwk: f64,
}

pub struct TrainOutcome {
    pub model: ProtSiModel,
    /// Parameters after the epoch with the highest validation QWK.
    pub best: Option<(usize, ProtSiModel)>,
    pub log: Vec<TrainLogEntry>,
    pub validation: Vec<EpochValidation>,
}

impl TrainOutcome {
    /// The best-validation model, or the final one when validation never ran.
    pub fn selected(&self) -> &ProtSiModel {
        self.best.as_ref().map(|(_, m)| m).unwrap_or(&self.model)
    }
}

pub fn model_dims(cfg: &TrainConfig, provider: &dyn EmbeddingProvider) -> Result<ModelDims> {
    if provider.dim() != cfg.e {
        return Err(Error::config(
            "e",
            format!("embedder produces dimension {}, config says {}", provider.dim(), cfg.e),
        ));
    }
    Ok(ModelDims {
        embed_dim: cfg.e,
        hidden: cfg.m,
    })
}

/// Trains on `sets.train` for `cfg.epochs` passes, one gradient step per
/// episode, validating on `sets.val` after each epoch. Log lines are
/// streamed to `log_sink` as they are produced.
pub fn run_training(
    cfg: &TrainConfig,
    question: &QuestionSpec,
    sets: &EpisodeSets,
    provider: &dyn EmbeddingProvider,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sets.train.is_empty() {
        return Err(Error::EmptyDataset("no training episodes".into()));
    }
    let mut model = ProtSiModel::init(model_dims(cfg, provider)?, cfg.model_seed)?;
    let model_answer = embed_model_answer(provider, question)?;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.epochs * sets.train.len());
    let mut validation = Vec::new();
    let mut best: Option<(usize, f64, ProtSiModel)> = None;

    for epoch in 0..cfg.epochs {
        for (i, ep) in sets.train.iter().enumerate() {
            let started = Instant::now();
            let fwd = episode_forward(&model, cfg, ep, &model_answer, provider, epoch)?;
            if !fwd.breakdown.total.is_finite() {
                let dump = serde_json::to_string(ep).unwrap_or_default();
                log::error!("non-finite loss at epoch {epoch}, episode {i}: {:?}; episode: {dump}", fwd.breakdown);
                return Err(Error::Divergence {
                    epoch,
                    episode: i,
                    detail: format!("loss {:?} on episode seed {}", fwd.breakdown, ep.seed),
                });
            }
            let grads = fwd.graph.gradients(fwd.total, &model.params)?;
            if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    episode: i,
                    detail: format!("non-finite gradient for {id} on episode seed {}", ep.seed),
                });
            }
            opt.apply(&mut model.params, &grads, cfg.learning_rate)?;
            if let Some(st) = &fwd.support_stats {
                model.update_running_stats(Branch::S1, st)?;
            }
            if let Some(st) = &fwd.query_stats {
                model.update_running_stats(Branch::S2, st)?;
            }
            let entry = TrainLogEntry {
                epoch,
                episode: i,
                loss: fwd.breakdown,
                weights: fwd.weights,
                accuracy: fwd.accuracy(ep),
                clamped: fwd.clamped,
                wall_time_ms: cfg.log_wall_time.then(|| started.elapsed().as_secs_f64() * 1e3),
            };
            if let Some(sink) = log_sink.as_mut() {
                writeln!(sink, "{}", entry.to_json_line())?;
            }
            log.push(entry);
        }
        if !sets.val.is_empty() {
            let report = evaluate(&model, cfg, question, provider, &sets.val)?;
            log::info!(
                "epoch {epoch}: validation accuracy {:.4}, qwk {:.4}",
                report.metrics.accuracy,
                report.metrics.qwk
            );
            validation.push(EpochValidation {
                epoch,
                accuracy: report.metrics.accuracy,
                qwk: report.metrics.qwk,
            });
            if best.as_ref().is_none_or(|(_, q, _)| report.metrics.qwk > *q) {
                best = Some((epoch, report.metrics.qwk, model.clone()));
            }
        }
    }
    Ok(TrainOutcome {
        model,
        best: best.map(|(e, _, m)| (e, m)),
        log,
        validation,
    })
}

/// Two-way split, or three-way when `test_fraction > 0`. Every class must
/// keep `K + W` answers in each partition.
pub fn split_records(cfg: &TrainConfig, records: &[crate::data::AnswerRecord]) -> Result<DatasetSplit> {
    let min = cfg.k_shot + cfg.w_query;
    if cfg.test_fraction > 0.0 {
        crate::data::split_three_way(records, cfg.train_fraction, cfg.test_fraction, cfg.data_seed, min)
    } else {
        crate::data::split_dataset(records, cfg.train_fraction, cfg.data_seed, min)
    }
}

/// Result of [`run_pipeline`].
pub struct PipelineOutcome {
    pub split: DatasetSplit,
    pub episodes: EpisodeSets,
    pub training: TrainOutcome,
    /// [`TrainOutcome::selected`] evaluated on `episodes.test`.
    pub report: EvalReport,
}

/// Split, sample episodes, train, and evaluate the best-validation
/// parameters on the held-out episodes.
pub fn run_pipeline(
    cfg: &TrainConfig,
    records: &[crate::data::AnswerRecord],
    question: &QuestionSpec,
    provider: &dyn EmbeddingProvider,
    paraphraser: &Paraphraser,
    log_sink: Option<&mut dyn Write>,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let split = split_records(cfg, records)?;
    let episodes = build_episodes(cfg, &split, question, paraphraser)?;
    let training = run_training(cfg, question, &episodes, provider, log_sink)?;
    let report = evaluate(training.selected(), cfg, question, provider, &episodes.test)?;
    Ok(PipelineOutcome {
        split,
        episodes,
        training,
        report,
    })
}

/// A one-episode problem small enough for finite differences.
pub struct GradcheckInstance {
    pub model: ProtSiModel,
    pub config: TrainConfig,
    pub question: QuestionSpec,
    pub episode: Episode,
    pub provider: HashEmbedder,
    /// Scales the backward pass of parameters with this id prefix; a
    /// negative control for the check itself.
    pub fault: Option<(String, f64)>,
}

/// Toy embedder, `M = 16`, one episode with `N = 3, K = 2, W = 1, S = 2,
/// Z = 2, L = 1`.
pub fn gradcheck_instance(seed: u64) -> Result<GradcheckInstance> {
    let config = TrainConfig {
        n_way: Some(3),
        k_shot: 2,
        w_query: 1,
        s_unlabeled: 2,
        z_paraphrases: 2,
        l_columns: 1,
        m: 16,
        e: 8,
        episodes_per_epoch: 1,
        eval_episodes: 1,
        model_seed: seed,
        episode_seed: seed,
        ..TrainConfig::default()
    };
    let task = synthetic::generate(&SyntheticSpec {
        classes: 3,
        per_class: 6,
        label_noise: 0.0,
        seed,
    });
    let shape = episode_shape(&config, &task.question);
    let mut episode = crate::data::sample_episode(&task.records, &task.question, &shape, &task.records, seed)?;
    attach_paraphrases(&mut episode, &Paraphraser::Rule { seed }, config.z_paraphrases)?;
    let provider = HashEmbedder::new(config.e, seed, config.max_tokens)?;
    let model = ProtSiModel::init(model_dims(&config, &provider)?, seed)?;
    Ok(GradcheckInstance {
        model,
        config,
        question: task.question,
        episode,
        provider,
        fault: None,
    })
}

impl GradcheckInstance {
    pub fn loss(&self, params: &ParamSet) -> Result<(Graph, Var)> {
        let model = ProtSiModel {
            dims: self.model.dims,
            params: params.clone(),
        };
        let ma = embed_model_answer(&self.provider, &self.question)?;
        let mut fwd = episode_forward(&model, &self.config, &self.episode, &ma, &self.provider, 0)?;
        if let Some((prefix, factor)) = &self.fault {
            fwd.graph.inject_gradient_fault(prefix.clone(), *factor);
        }
        Ok((fwd.graph, fwd.total))
    }

    pub fn check(&self, step: f64, rel_tolerance: f64) -> Result<GradCheckReport> {
        finite_difference_check(|p| self.loss(p), &self.model.params, step, rel_tolerance)
    }
}

/// Parameter group of an id: `encoder.l0.w -> encoder.l0`, `s1.gamma -> s1`.
pub fn param_group(id: &str) -> String {
    id.rsplit_once('.').map_or(id, |(g, _)| g).to_string()
}
