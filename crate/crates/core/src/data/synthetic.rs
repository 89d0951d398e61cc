//! Generated tasks whose class structure is known by construction.
//!
//! Answers are built from three disjoint vocabularies: words of the model
//! answer, off-topic words and fillers. Class `c` of `C` draws each content
//! word from the model-answer vocabulary with probability `1 - c/(C-1)`, so
//! class 0 overlaps the model answer completely and class `C-1` not at all.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnswerRecord, QuestionSpec};

const ON_TOPIC: &[&str] = &[
    "light", "gray", "absorbs", "heat", "color", "temperature", "lid", "dark", "reflects", "energy", "warmer",
    "sunlight",
];
const OFF_TOPIC: &[&str] = &[
    "banana", "river", "guitar", "yesterday", "mountain", "pencil", "soccer", "window", "purple", "cousin",
    "pizza", "holiday",
];
const FILLER: &[&str] = &["the", "it", "because", "is", "a", "so", "would", "be"];

pub const QUESTION_ID: &str = "synthetic";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Fraction of answers whose gold label is replaced by a different class.
    pub label_noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub question: QuestionSpec,
    pub records: Vec<AnswerRecord>,
}

/// The model answer used by every synthetic task.
pub fn model_answer() -> String {
    "light gray absorbs heat dark color reflects energy lid temperature warmer sunlight".to_string()
}

/// Two classes: class 0 shares every content word with the model answer,
/// class 1 shares none.
pub fn separable(per_class: usize, seed: u64) -> SyntheticTask {
    generate(&SyntheticSpec {
        classes: 2,
        per_class,
        label_noise: 0.0,
        seed,
    })
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticTask {
    assert!(spec.classes >= 2, "need at least two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let question = QuestionSpec::new(QUESTION_ID, 0, spec.classes as i64 - 1, model_answer()).expect("valid spec");
    let mut records = Vec::with_capacity(spec.classes * spec.per_class);
    for c in 0..spec.classes {
        let overlap = 1.0 - c as f64 / (spec.classes - 1) as f64;
        for i in 0..spec.per_class {
            let len = rng.random_range(5..=8);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    let vocab = if rng.random_bool(0.25) {
                        FILLER
                    } else if rng.random_bool(overlap) {
                        ON_TOPIC
                    } else {
                        OFF_TOPIC
                    };
                    *vocab.choose(&mut rng).unwrap()
                })
                .collect();
            let mut label = c as i64;
            if spec.label_noise > 0.0 && rng.random_bool(spec.label_noise) {
                let shift = rng.random_range(1..spec.classes) as i64;
                label = (label + shift) % spec.classes as i64;
            }
            records.push(AnswerRecord::new(
                format!("syn-{c}-{i}"),
                QUESTION_ID,
                words.join(" "),
                Some(label),
            ));
        }
    }
    SyntheticTask { question, records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn words(s: &str) -> HashSet<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn separable_by_construction() {
        let task = separable(40, 3);
        let model = words(&task.question.model_answer_text);
        assert!(model.iter().all(|w| ON_TOPIC.contains(&w.as_str())));
        for r in &task.records {
            let shared = words(&r.text).intersection(&model).count();
            match r.score {
                Some(0) => assert!(words(&r.text).iter().all(|w| !OFF_TOPIC.contains(&w.as_str()))),
                Some(1) => assert_eq!(shared, 0, "{}", r.text),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn label_noise_rate() {
        let task = generate(&SyntheticSpec {
            classes: 3,
            per_class: 1000,
            label_noise: 0.1,
            seed: 1,
        });
        let flipped = task
            .records
            .iter()
            .filter(|r| !r.answer_id.starts_with(&format!("syn-{}-", r.score.unwrap())))
            .count();
        let rate = flipped as f64 / task.records.len() as f64;
        assert!((rate - 0.1).abs() < 0.02, "{rate}");
    }
}
