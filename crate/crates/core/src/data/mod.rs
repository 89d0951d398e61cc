//! Answer records, question metadata, dataset splits and episode sampling.

mod episode;
mod load;
mod split;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use episode::{
    read_episodes_jsonl, sample_episode, sample_episodes, write_episodes_jsonl, Episode, EpisodeShape,
    LabeledAnswer,
};
pub use load::{
    exclude_answer, load_jsonl, load_question_meta, load_records, load_tsv, resolve_question,
    write_records_jsonl, LoadDiagnostics, ModelAnswerSource, QuestionMeta, ResolvedQuestion,
    AUTO_FULL_MARK,
};
pub use split::{split_dataset, split_three_way, DatasetSplit};

/// One student answer. `score` is absent for answers used only as unlabeled
/// material.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub answer_id: String,
    pub question_id: String,
    pub text: String,
    pub score: Option<i64>,
    /// Second rater's score, kept for inter-rater diagnostics only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score2: Option<i64>,
}

impl AnswerRecord {
    pub fn new(answer_id: impl Into<String>, question_id: impl Into<String>, text: impl Into<String>, score: Option<i64>) -> Self {
        Self {
            answer_id: answer_id.into(),
            question_id: question_id.into(),
            text: text.into(),
            score,
            score2: None,
        }
    }
}

/// Rubric and model answer of one question. Score classes are the integers
/// `rubric_min..=rubric_max`; class index `i` stands for score `rubric_min + i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub question_id: String,
    pub rubric_min: i64,
    pub rubric_max: i64,
    pub model_answer_text: String,
}

impl QuestionSpec {
    pub fn new(question_id: impl Into<String>, rubric_min: i64, rubric_max: i64, model_answer_text: impl Into<String>) -> Result<Self> {
        let q = Self {
            question_id: question_id.into(),
            rubric_min,
            rubric_max,
            model_answer_text: model_answer_text.into(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rubric_max <= self.rubric_min {
            return Err(Error::InsufficientData(format!(
                "question {}: rubric_max {} must exceed rubric_min {}",
                self.question_id, self.rubric_max, self.rubric_min
            )));
        }
        if self.model_answer_text.trim().is_empty() {
            return Err(Error::EmptyInput(format!("question {}: empty model answer", self.question_id)));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        (self.rubric_max - self.rubric_min + 1) as usize
    }

    pub fn scores(&self) -> impl Iterator<Item = i64> {
        self.rubric_min..=self.rubric_max
    }

    pub fn class_index(&self, score: i64) -> Option<usize> {
        (self.rubric_min..=self.rubric_max)
            .contains(&score)
            .then(|| (score - self.rubric_min) as usize)
    }

    pub fn in_rubric(&self, score: i64) -> bool {
        self.class_index(score).is_some()
    }
}
