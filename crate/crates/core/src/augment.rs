//! Paraphrases of unlabeled answers: a seeded rule-based perturber, or a
//! cache of externally generated variants.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Episode;
use crate::embedding::tokenize;
use crate::error::{Error, Result};

const DROPOUT: f64 = 0.1;
const MAX_ATTEMPTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParaphraseOrigin {
    RuleBased,
    FileCache,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseSet {
    pub source_answer_id: String,
    pub variants: Vec<String>,
    pub origin: ParaphraseOrigin,
}

fn perturb(tokens: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out: Vec<String> = tokens.iter().filter(|_| !rng.random_bool(DROPOUT)).cloned().collect();
    if out.is_empty() {
        out.push(tokens[rng.random_range(0..tokens.len())].clone());
    }
    if out.len() >= 2 {
        let i = rng.random_range(0..out.len() - 1);
        out.swap(i, i + 1);
    }
    let j = rng.random_range(0..out.len());
    out.insert(j + 1, out[j].clone());
    out
}

/// `z` variants of `text`, each made by token dropout, one adjacent swap and
/// one duplication. Variant `i` depends only on `(text, seed, i)`.
pub fn paraphrase_rule_based(answer_id: &str, text: &str, z: usize, seed: u64) -> Result<ParaphraseSet> {
    if z == 0 {
        return Err(Error::config("Z", "must be at least 1"));
    }
    let tokens = tokenize(text, usize::MAX)
        .map_err(|_| Error::TooShort(format!("answer {answer_id} has no tokens")))?
        .tokens;
    if tokens.len() < 2 {
        return Err(Error::TooShort(format!("answer {answer_id} has a single token")));
    }
    let mut variants = Vec::with_capacity(z);
    for i in 0..z {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut variant = None;
        for _ in 0..MAX_ATTEMPTS {
            let v = perturb(&tokens, &mut rng);
            let joined = v.join(" ");
            if v != tokens && joined != text {
                variant = Some(joined);
                break;
            }
        }
        variants.push(variant.unwrap_or_else(|| [tokens.as_slice(), tokens.as_slice()].concat().join(" ")));
    }
    Ok(ParaphraseSet {
        source_answer_id: answer_id.to_string(),
        variants,
        origin: ParaphraseOrigin::RuleBased,
    })
}

/// Variants for answers too short to perturb: the text repeated.
pub fn duplication_fallback(answer_id: &str, text: &str, z: usize) -> ParaphraseSet {
    let t = text.trim();
    ParaphraseSet {
        source_answer_id: answer_id.to_string(),
        variants: vec![format!("{t} {t}"); z],
        origin: ParaphraseOrigin::RuleBased,
    }
}

#[derive(Deserialize)]
struct CacheLine {
    answer_id: String,
    variants: Vec<String>,
}

/// Reads a JSON-lines cache of `{answer_id, variants}` objects.
pub fn load_paraphrase_cache(path: &Path, z: usize) -> Result<BTreeMap<String, ParaphraseSet>> {
    let reader = BufReader::new(File::open(path)?);
    let mut map = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{} line {}", path.display(), i + 1);
        let parsed: CacheLine = serde_json::from_str(&line).map_err(|e| Error::format(ctx(), None, e.to_string()))?;
        if parsed.variants.len() != z {
            return Err(Error::config(
                "Z",
                format!("{}: answer {} has {} variants, expected {z}", ctx(), parsed.answer_id, parsed.variants.len()),
            ));
        }
        if parsed.variants.iter().any(|v| v.trim().is_empty()) {
            return Err(Error::format(ctx(), None, format!("answer {} has an empty variant", parsed.answer_id)));
        }
        if map.contains_key(&parsed.answer_id) {
            return Err(Error::format(ctx(), None, format!("duplicate answer_id {}", parsed.answer_id)));
        }
        map.insert(
            parsed.answer_id.clone(),
            ParaphraseSet {
                source_answer_id: parsed.answer_id,
                variants: parsed.variants,
                origin: ParaphraseOrigin::FileCache,
            },
        );
    }
    Ok(map)
}

/// Where paraphrases come from.
#[derive(Clone, Debug)]
pub enum Paraphraser {
    /// Rule-based variants; the per-answer seed is derived from `seed` and
    /// the answer id, so an answer gets the same variants in every episode.
    Rule { seed: u64 },
    Cache(BTreeMap<String, ParaphraseSet>),
}

impl Paraphraser {
    pub fn paraphrase(&self, answer_id: &str, text: &str, z: usize) -> Result<ParaphraseSet> {
        match self {
            Paraphraser::Rule { seed } => {
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                h.update(answer_id.as_bytes());
                let d = h.finalize();
                let answer_seed = u64::from_le_bytes(d[..8].try_into().unwrap());
                match paraphrase_rule_based(answer_id, text, z, answer_seed) {
                    Err(Error::TooShort(_)) => Ok(duplication_fallback(answer_id, text, z)),
                    other => other,
                }
            }
            Paraphraser::Cache(map) => {
                let set = map
                    .get(answer_id)
                    .ok_or_else(|| Error::InsufficientData(format!("no cached paraphrases for answer {answer_id}")))?;
                if set.variants.len() != z {
                    return Err(Error::config("Z", format!("cache holds {} variants, expected {z}", set.variants.len())));
                }
                Ok(set.clone())
            }
        }
    }
}

/// Fills `episode.paraphrases` with `z` variants per unlabeled answer.
pub fn attach_paraphrases(episode: &mut Episode, paraphraser: &Paraphraser, z: usize) -> Result<()> {
    episode.paraphrases = episode
        .unlabeled
        .iter()
        .map(|a| paraphraser.paraphrase(&a.answer_id, &a.text, z).map(|s| s.variants))
        .collect::<Result<_>>()?;
    episode.validate(Some(z))
}
