//! Training configuration.
//!
//! The file format is one `key = value` pair per line; `#` starts a comment.
//! Unknown and repeated keys are rejected. Single-letter aliases (`N`, `K`,
//! `W`, `S`, `Z`, `L`, `M`, `E`) are accepted for the episode and model sizes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Branch, Distance};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderChoice {
    /// Seeded hash embeddings.
    Toy,
    /// Precomputed PSEB file.
    File(PathBuf),
}

impl EmbedderChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "toy" | "hash" => Some(Self::Toy),
            _ => s.strip_prefix("file:").filter(|p| !p.is_empty()).map(|p| Self::File(p.into())),
        }
    }
}

impl fmt::Display for EmbedderChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Toy => write!(f, "toy"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParaphraserChoice {
    Rule,
    Cache(PathBuf),
}

impl ParaphraserChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rule" => Some(Self::Rule),
            _ => s.strip_prefix("cache:").filter(|p| !p.is_empty()).map(|p| Self::Cache(p.into())),
        }
    }
}

impl fmt::Display for ParaphraserChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rule => write!(f, "rule"),
            Self::Cache(p) => write!(f, "cache:{}", p.display()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricPooling {
    Pooled,
    Averaged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Classes per episode; `None` uses every rubric class.
    pub n_way: Option<usize>,
    pub k_shot: usize,
    pub w_query: usize,
    pub s_unlabeled: usize,
    pub z_paraphrases: usize,
    pub l_columns: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub anneal_n: usize,
    pub episodes_per_epoch: usize,
    pub eval_episodes: usize,
    pub m: usize,
    pub e: usize,
    pub max_tokens: usize,
    pub distance: Distance,
    pub data_seed: u64,
    pub model_seed: u64,
    pub episode_seed: u64,
    pub disable_l2: bool,
    pub disable_l3: bool,
    pub embedder: EmbedderChoice,
    pub paraphraser: ParaphraserChoice,
    pub optimizer: Optimizer,
    pub unlabeled_branch: Branch,
    pub contrastive_originals_only: bool,
    pub metric_pooling: MetricPooling,
    pub train_fraction: f64,
    /// Zero keeps a two-way split; held-out episodes then come from `val`.
    pub test_fraction: f64,
    /// Draw unlabeled answers only from the training partition.
    pub strict_unlabeled: bool,
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_way: None,
            k_shot: 3,
            w_query: 1,
            s_unlabeled: 5,
            z_paraphrases: 5,
            l_columns: 1,
            alpha: 0.8,
            beta: 0.01,
            gamma: 0.02,
            tau: 1.0,
            learning_rate: 1e-3,
            epochs: 5,
            anneal_n: 1,
            episodes_per_epoch: 200,
            eval_episodes: 50,
            m: 64,
            e: 64,
            max_tokens: 90,
            distance: Distance::Euclidean,
            data_seed: 0,
            model_seed: 0,
            episode_seed: 0,
            disable_l2: false,
            disable_l3: false,
            embedder: EmbedderChoice::Toy,
            paraphraser: ParaphraserChoice::Rule,
            optimizer: Optimizer::Sgd,
            unlabeled_branch: Branch::S1,
            contrastive_originals_only: false,
            metric_pooling: MetricPooling::Pooled,
            train_fraction: 0.8,
            test_fraction: 0.0,
            strict_unlabeled: false,
            log_wall_time: false,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got {v:?}"))),
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses the flat format on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let canonical = cfg.set(key, value)?;
            if !seen.insert(canonical) {
                return Err(Error::config(canonical, "given more than once"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field by name and returns its canonical key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<&'static str> {
        let canonical = match key {
            "N" | "n_way" => {
                self.n_way = if v == "auto" { None } else { Some(parse_num("n_way", v)?) };
                "n_way"
            }
            "K" | "k_shot" => {
                self.k_shot = parse_num("k_shot", v)?;
                "k_shot"
            }
            "W" | "w_query" => {
                self.w_query = parse_num("w_query", v)?;
                "w_query"
            }
            "S" | "s_unlabeled" => {
                self.s_unlabeled = parse_num("s_unlabeled", v)?;
                "s_unlabeled"
            }
            "Z" | "z_paraphrases" => {
                self.z_paraphrases = parse_num("z_paraphrases", v)?;
                "z_paraphrases"
            }
            "L" | "l_columns" => {
                self.l_columns = parse_num("l_columns", v)?;
                "l_columns"
            }
            "M" | "m" => {
                self.m = parse_num("m", v)?;
                "m"
            }
            "E" | "e" => {
                self.e = parse_num("e", v)?;
                "e"
            }
            "alpha" => {
                self.alpha = parse_num(key, v)?;
                "alpha"
            }
            "beta" => {
                self.beta = parse_num(key, v)?;
                "beta"
            }
            "gamma" => {
                self.gamma = parse_num(key, v)?;
                "gamma"
            }
            "tau" => {
                self.tau = parse_num(key, v)?;
                "tau"
            }
            "learning_rate" => {
                self.learning_rate = parse_num(key, v)?;
                "learning_rate"
            }
            "epochs" => {
                self.epochs = parse_num(key, v)?;
                "epochs"
            }
            "anneal_n" => {
                self.anneal_n = parse_num(key, v)?;
                "anneal_n"
            }
            "episodes_per_epoch" => {
                self.episodes_per_epoch = parse_num(key, v)?;
                "episodes_per_epoch"
            }
            "eval_episodes" => {
                self.eval_episodes = parse_num(key, v)?;
                "eval_episodes"
            }
            "max_tokens" => {
                self.max_tokens = parse_num(key, v)?;
                "max_tokens"
            }
            "distance" => {
                self.distance =
                    Distance::parse(v).ok_or_else(|| Error::config(key, format!("expected euclidean or squared, got {v:?}")))?;
                "distance"
            }
            "data_seed" => {
                self.data_seed = parse_num(key, v)?;
                "data_seed"
            }
            "model_seed" => {
                self.model_seed = parse_num(key, v)?;
                "model_seed"
            }
            "episode_seed" => {
                self.episode_seed = parse_num(key, v)?;
                "episode_seed"
            }
            "disable_l2" => {
                self.disable_l2 = parse_bool(key, v)?;
                "disable_l2"
            }
            "disable_l3" => {
                self.disable_l3 = parse_bool(key, v)?;
                "disable_l3"
            }
            "embedder" => {
                self.embedder =
                    EmbedderChoice::parse(v).ok_or_else(|| Error::config(key, format!("expected toy or file:PATH, got {v:?}")))?;
                "embedder"
            }
            "paraphraser" => {
                self.paraphraser = ParaphraserChoice::parse(v)
                    .ok_or_else(|| Error::config(key, format!("expected rule or cache:PATH, got {v:?}")))?;
                "paraphraser"
            }
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::Adam,
                    _ => return Err(Error::config(key, format!("expected sgd or adam, got {v:?}"))),
                };
                "optimizer"
            }
            "unlabeled_branch" => {
                self.unlabeled_branch = match v {
                    "s1" => Branch::S1,
                    "s2" => Branch::S2,
                    _ => return Err(Error::config(key, format!("expected s1 or s2, got {v:?}"))),
                };
                "unlabeled_branch"
            }
            "contrastive_anchors" => {
                self.contrastive_originals_only = match v {
                    "all" => false,
                    "originals" => true,
                    _ => return Err(Error::config(key, format!("expected all or originals, got {v:?}"))),
                };
                "contrastive_anchors"
            }
            "metric_pooling" => {
                self.metric_pooling = match v {
                    "pooled" => MetricPooling::Pooled,
                    "averaged" => MetricPooling::Averaged,
                    _ => return Err(Error::config(key, format!("expected pooled or averaged, got {v:?}"))),
                };
                "metric_pooling"
            }
            "train_fraction" => {
                self.train_fraction = parse_num(key, v)?;
                "train_fraction"
            }
            "test_fraction" => {
                self.test_fraction = parse_num(key, v)?;
                "test_fraction"
            }
            "strict_unlabeled" => {
                self.strict_unlabeled = parse_bool(key, v)?;
                "strict_unlabeled"
            }
            "log_wall_time" => {
                self.log_wall_time = parse_bool(key, v)?;
                "log_wall_time"
            }
            _ => return Err(Error::config(key, "unknown key")),
        };
        Ok(canonical)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_way", self.n_way.unwrap_or(2)),
            ("k_shot", self.k_shot),
            ("w_query", self.w_query),
            ("s_unlabeled", self.s_unlabeled),
            ("z_paraphrases", self.z_paraphrases),
            ("l_columns", self.l_columns),
            ("epochs", self.epochs),
            ("anneal_n", self.anneal_n),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("eval_episodes", self.eval_episodes),
            ("m", self.m),
            ("e", self.e),
            ("max_tokens", self.max_tokens),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.n_way == Some(1) {
            return Err(Error::config("n_way", "must be at least 2"));
        }
        if self.e < 2 {
            return Err(Error::config("e", "must be at least 2"));
        }
        if self.l_columns > self.z_paraphrases {
            return Err(Error::config("l_columns", "must not exceed z_paraphrases"));
        }
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("tau", self.tau),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config("gamma", format!("must be non-negative, got {}", self.gamma)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", format!("must lie in (0, 1), got {}", self.train_fraction)));
        }
        if !(self.test_fraction >= 0.0 && self.train_fraction + self.test_fraction < 1.0) {
            return Err(Error::config(
                "test_fraction",
                format!("must be non-negative and leave room for validation, got {}", self.test_fraction),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for TrainConfig {
    /// Renders every field in the file format; parsing the output gives the
    /// same configuration back.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.n_way.map_or("auto".to_string(), |n| n.to_string());
        writeln!(f, "n_way = {n}")?;
        writeln!(f, "k_shot = {}", self.k_shot)?;
        writeln!(f, "w_query = {}", self.w_query)?;
        writeln!(f, "s_unlabeled = {}", self.s_unlabeled)?;
        writeln!(f, "z_paraphrases = {}", self.z_paraphrases)?;
        writeln!(f, "l_columns = {}", self.l_columns)?;
        writeln!(f, "alpha = {:?}", self.alpha)?;
        writeln!(f, "beta = {:?}", self.beta)?;
        writeln!(f, "gamma = {:?}", self.gamma)?;
        writeln!(f, "tau = {:?}", self.tau)?;
        writeln!(f, "learning_rate = {:?}", self.learning_rate)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "anneal_n = {}", self.anneal_n)?;
        writeln!(f, "episodes_per_epoch = {}", self.episodes_per_epoch)?;
        writeln!(f, "eval_episodes = {}", self.eval_episodes)?;
        writeln!(f, "m = {}", self.m)?;
        writeln!(f, "e = {}", self.e)?;
        writeln!(f, "max_tokens = {}", self.max_tokens)?;
        writeln!(f, "distance = {}", self.distance.name())?;
        writeln!(f, "data_seed = {}", self.data_seed)?;
        writeln!(f, "model_seed = {}", self.model_seed)?;
        writeln!(f, "episode_seed = {}", self.episode_seed)?;
        writeln!(f, "disable_l2 = {}", self.disable_l2)?;
        writeln!(f, "disable_l3 = {}", self.disable_l3)?;
        writeln!(f, "embedder = {}", self.embedder)?;
        writeln!(f, "paraphraser = {}", self.paraphraser)?;
        let opt = match self.optimizer {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        };
        writeln!(f, "optimizer = {opt}")?;
        writeln!(f, "unlabeled_branch = {}", self.unlabeled_branch.prefix())?;
        let anchors = if self.contrastive_originals_only { "originals" } else { "all" };
        writeln!(f, "contrastive_anchors = {anchors}")?;
        let pooling = match self.metric_pooling {
            MetricPooling::Pooled => "pooled",
            MetricPooling::Averaged => "averaged",
        };
        writeln!(f, "metric_pooling = {pooling}")?;
        writeln!(f, "train_fraction = {:?}", self.train_fraction)?;
        writeln!(f, "test_fraction = {:?}", self.test_fraction)?;
        writeln!(f, "strict_unlabeled = {}", self.strict_unlabeled)?;
        writeln!(f, "log_wall_time = {}", self.log_wall_time)
    }
}
