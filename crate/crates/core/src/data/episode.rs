use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnswerRecord, QuestionSpec};
use crate::error::{Error, Result};

/// Episode dimensions: `n_way` classes, `k_shot` support and `w_query` query
/// answers per class, `s_unlabeled` unlabeled answers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub w_query: usize,
    pub s_unlabeled: usize,
}

/// A labeled answer inside an episode; `class` indexes the episode's
/// `class_list`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledAnswer {
    pub answer: AnswerRecord,
    pub class: usize,
}

/// One few-shot task.
///
/// `support` is class-major: the `k_shot` answers of `class_list[0]`, then
/// those of `class_list[1]`, and so on. `query` follows the same layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub question_id: String,
    pub seed: u64,
    pub class_list: Vec<i64>,
    pub support: Vec<LabeledAnswer>,
    pub query: Vec<LabeledAnswer>,
    pub unlabeled: Vec<AnswerRecord>,
    /// One list of paraphrases per unlabeled answer, once attached.
    #[serde(default)]
    pub paraphrases: Vec<Vec<String>>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_list.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.len() / self.class_list.len()
    }

    pub fn w_query(&self) -> usize {
        self.query.len() / self.class_list.len()
    }

    /// Checks the structural invariants; `z` additionally checks attached
    /// paraphrases.
    pub fn validate(&self, z: Option<usize>) -> Result<()> {
        let n = self.class_list.len();
        if n == 0 || self.support.len() % n != 0 || self.query.len() % n != 0 {
            return Err(Error::Usage("episode: ragged support or query".into()));
        }
        let (k, w) = (self.k_shot(), self.w_query());
        for (set, per) in [(&self.support, k), (&self.query, w)] {
            for (i, la) in set.iter().enumerate() {
                if la.class != i / per || la.answer.score != Some(self.class_list[la.class]) {
                    return Err(Error::Usage(format!(
                        "episode: answer {} out of class-major order",
                        la.answer.answer_id
                    )));
                }
            }
        }
        let support_ids: HashSet<&str> = self.support.iter().map(|a| a.answer.answer_id.as_str()).collect();
        if let Some(dup) = self.query.iter().find(|a| support_ids.contains(a.answer.answer_id.as_str())) {
            return Err(Error::Usage(format!(
                "episode: answer {} in both support and query",
                dup.answer.answer_id
            )));
        }
        if let Some(z) = z {
            if self.paraphrases.len() != self.unlabeled.len() || self.paraphrases.iter().any(|p| p.len() != z) {
                return Err(Error::Usage(format!("episode: every unlabeled answer needs exactly {z} paraphrases")));
            }
        }
        Ok(())
    }
}

/// Samples one episode from `part`.
///
/// `n_way` score classes are drawn uniformly without replacement from the
/// rubric, then `k_shot + w_query` answers per class without replacement, and
/// `s_unlabeled` answers from `unlabeled_pool`. Deterministic in `seed`.
pub fn sample_episode(
    part: &[AnswerRecord],
    question: &QuestionSpec,
    shape: &EpisodeShape,
    unlabeled_pool: &[AnswerRecord],
    seed: u64,
) -> Result<Episode> {
    let classes: Vec<i64> = question.scores().collect();
    if shape.n_way == 0 || shape.k_shot == 0 || shape.w_query == 0 {
        return Err(Error::InsufficientData("episode shape counts must be positive".into()));
    }
    if shape.n_way > classes.len() {
        return Err(Error::InsufficientData(format!(
            "N={} exceeds the {} rubric classes of question {}",
            shape.n_way,
            classes.len(),
            question.question_id
        )));
    }
    if unlabeled_pool.len() < shape.s_unlabeled {
        return Err(Error::InsufficientData(format!(
            "unlabeled pool has {} answers, needs {}",
            unlabeled_pool.len(),
            shape.s_unlabeled
        )));
    }
    let mut by_class: BTreeMap<i64, Vec<&AnswerRecord>> = BTreeMap::new();
    for r in part {
        if let Some(s) = r.score {
            by_class.entry(s).or_default().push(r);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, classes.len(), shape.n_way).into_vec();
    picked.sort_unstable();
    let class_list: Vec<i64> = picked.iter().map(|&i| classes[i]).collect();

    let need = shape.k_shot + shape.w_query;
    let mut support = Vec::with_capacity(shape.n_way * shape.k_shot);
    let mut query = Vec::with_capacity(shape.n_way * shape.w_query);
    for (ci, score) in class_list.iter().enumerate() {
        let pool = by_class.get(score).map(Vec::as_slice).unwrap_or(&[]);
        if pool.len() < need {
            return Err(Error::InsufficientData(format!(
                "class {score} has {} answers, needs K+W = {need}",
                pool.len()
            )));
        }
        let chosen = index::sample(&mut rng, pool.len(), need).into_vec();
        for (j, &i) in chosen.iter().enumerate() {
            let la = LabeledAnswer {
                answer: pool[i].clone(),
                class: ci,
            };
            if j < shape.k_shot {
                support.push(la);
            } else {
                query.push(la);
            }
        }
    }
    let unlabeled = index::sample(&mut rng, unlabeled_pool.len(), shape.s_unlabeled)
        .into_iter()
        .map(|i| unlabeled_pool[i].clone())
        .collect();

    Ok(Episode {
        question_id: question.question_id.clone(),
        seed,
        class_list,
        support,
        query,
        unlabeled,
        paraphrases: Vec::new(),
    })
}

/// `count` episodes with seeds `base_seed + i`.
pub fn sample_episodes(
    part: &[AnswerRecord],
    question: &QuestionSpec,
    shape: &EpisodeShape,
    unlabeled_pool: &[AnswerRecord],
    count: usize,
    base_seed: u64,
) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| sample_episode(part, question, shape, unlabeled_pool, base_seed.wrapping_add(i as u64)))
        .collect()
}

pub fn write_episodes_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in episodes {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episodes_jsonl(path: &Path) -> Result<Vec<Episode>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{} line {}", path.display(), i + 1), None, e.to_string()))?;
        ep.validate(None)?;
        out.push(ep);
    }
    Ok(out)
}
