use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnswerRecord, QuestionSpec};
use crate::error::{Error, Result};

const REQUIRED_COLUMNS: [&str; 5] = ["Id", "EssaySet", "Score1", "Score2", "EssayText"];

/// Sentinel model-answer value requesting a full-mark student answer.
pub const AUTO_FULL_MARK: &str = "auto_full_mark";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadDiagnostics {
    /// Data rows seen, for every question.
    pub rows: usize,
    /// Rows dropped as malformed.
    pub skipped: usize,
    /// 1-based file line numbers of the dropped rows.
    pub skipped_lines: Vec<u64>,
}

/// Reads an ASAP-SAS style TSV and keeps the rows of `question_id`.
///
/// The gold score is `Score1`. Rows with a wrong field count, a non-integer
/// score or blank text are skipped and counted.
pub fn load_tsv(path: &Path, question_id: &str) -> Result<(Vec<AnswerRecord>, LoadDiagnostics)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cols: Vec<usize> = REQUIRED_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let (id_c, set_c, s1_c, s2_c, text_c) = (cols[0], cols[1], cols[2], cols[3], cols[4]);

    let mut diag = LoadDiagnostics::default();
    let mut out = Vec::new();
    for row in reader.records() {
        diag.rows += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                diag.skipped += 1;
                diag.skipped_lines.push(e.position().map(|p| p.line()).unwrap_or(0));
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let mut skip = || {
            diag.skipped += 1;
            diag.skipped_lines.push(line);
        };
        let (Some(id), Some(set), Some(s1), Some(text)) =
            (row.get(id_c), row.get(set_c), row.get(s1_c), row.get(text_c))
        else {
            skip();
            continue;
        };
        if row.len() != headers.len() {
            skip();
            continue;
        }
        if set.trim() != question_id {
            continue;
        }
        let Ok(score) = s1.trim().parse::<i64>() else {
            skip();
            continue;
        };
        if text.trim().is_empty() || id.trim().is_empty() {
            skip();
            continue;
        }
        let mut rec = AnswerRecord::new(id.trim(), question_id, text, Some(score));
        rec.score2 = row.get(s2_c).and_then(|s| s.trim().parse().ok());
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no usable rows for question {question_id} in {}",
            path.display()
        )));
    }
    Ok((out, diag))
}

/// Reads JSON-lines records `{answer_id, question_id, text, score}`, keeping
/// those of `question_id` when given.
pub fn load_jsonl(path: &Path, question_id: Option<&str>) -> Result<Vec<AnswerRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnswerRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{} line {}", path.display(), i + 1), None, e.to_string()))?;
        if rec.text.trim().is_empty() {
            return Err(Error::format(
                format!("{} line {}", path.display(), i + 1),
                None,
                "empty answer text",
            ));
        }
        if question_id.is_none_or(|q| q == rec.question_id) {
            out.push(rec);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("no records in {}", path.display())));
    }
    Ok(out)
}

/// Dispatches on extension: `.jsonl`/`.json` are JSON-lines, anything else TSV.
pub fn load_records(path: &Path, question_id: &str) -> Result<(Vec<AnswerRecord>, LoadDiagnostics)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => {
            let recs = load_jsonl(path, Some(question_id))?;
            let diag = LoadDiagnostics {
                rows: recs.len(),
                ..Default::default()
            };
            Ok((recs, diag))
        }
        _ => load_tsv(path, question_id),
    }
}

pub fn write_records_jsonl(path: &Path, records: &[AnswerRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelAnswerSource {
    Text(String),
    AutoFullMark,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionMeta {
    pub rubric_min: i64,
    pub rubric_max: i64,
    pub model_answer: ModelAnswerSource,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeta {
    rubric_min: i64,
    rubric_max: i64,
    model_answer_text: String,
}

/// Reads the question metadata map `question_id -> {rubric_min, rubric_max,
/// model_answer_text}`; `model_answer_text` may be `"auto_full_mark"`.
pub fn load_question_meta(path: &Path) -> Result<BTreeMap<String, QuestionMeta>> {
    let raw: BTreeMap<String, RawMeta> = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| Error::format(path.display().to_string(), None, e.to_string()))?;
    Ok(raw
        .into_iter()
        .map(|(k, r)| {
            let model_answer = if r.model_answer_text == AUTO_FULL_MARK {
                ModelAnswerSource::AutoFullMark
            } else {
                ModelAnswerSource::Text(r.model_answer_text)
            };
            (
                k,
                QuestionMeta {
                    rubric_min: r.rubric_min,
                    rubric_max: r.rubric_max,
                    model_answer,
                },
            )
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedQuestion {
    pub spec: QuestionSpec,
    /// Student answer promoted to model answer, if any.
    pub substituted_answer_id: Option<String>,
}

/// Builds the [`QuestionSpec`]. A missing model answer is replaced by one
/// randomly chosen full-mark student answer; callers must then drop that
/// answer from every sampling pool (see [`exclude_answer`]).
pub fn resolve_question(
    question_id: &str,
    meta: &QuestionMeta,
    records: &[AnswerRecord],
    seed: u64,
) -> Result<ResolvedQuestion> {
    match &meta.model_answer {
        ModelAnswerSource::Text(t) => Ok(ResolvedQuestion {
            spec: QuestionSpec::new(question_id, meta.rubric_min, meta.rubric_max, t.clone())?,
            substituted_answer_id: None,
        }),
        ModelAnswerSource::AutoFullMark => {
            let full: Vec<&AnswerRecord> = records
                .iter()
                .filter(|r| r.question_id == question_id && r.score == Some(meta.rubric_max))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pick = full.choose(&mut rng).ok_or_else(|| {
                Error::InsufficientData(format!(
                    "question {question_id}: no model answer and no full-mark ({}) student answer to substitute",
                    meta.rubric_max
                ))
            })?;
            Ok(ResolvedQuestion {
                spec: QuestionSpec::new(question_id, meta.rubric_min, meta.rubric_max, pick.text.clone())?,
                substituted_answer_id: Some(pick.answer_id.clone()),
            })
        }
    }
}

pub fn exclude_answer(records: Vec<AnswerRecord>, answer_id: &str) -> Vec<AnswerRecord> {
    records.into_iter().filter(|r| r.answer_id != answer_id).collect()
}
