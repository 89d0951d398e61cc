use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use protsi::augment::{load_paraphrase_cache, Paraphraser};
use protsi::config::{EmbedderChoice, ParaphraserChoice, TrainConfig};
use protsi::data::synthetic::{self, SyntheticSpec};
use protsi::data::{
    exclude_answer, load_jsonl, load_question_meta, load_records, read_episodes_jsonl, resolve_question,
    write_episodes_jsonl, write_records_jsonl, AnswerRecord, Episode, LoadDiagnostics, ResolvedQuestion,
};
use protsi::embedding::{EmbeddingProvider, FileEmbedder, HashEmbedder};
use protsi::model::ProtSiModel;
use protsi::training::{
    build_episodes, evaluate, gradcheck_instance, load_checkpoint, param_group, predict_answer, run_pipeline,
    save_checkpoint, split_records, EvalReport, PipelineOutcome,
};
use protsi::Error;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{usage, CliError, CliResult, Common, EXIT_CHECK_FAILED};

const RECORDS_FILE: &str = "records.jsonl";
const QUESTIONS_FILE: &str = "questions.json";

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn provider(cfg: &TrainConfig, manifest: &mut RunManifest) -> CliResult<Box<dyn EmbeddingProvider>> {
    Ok(match &cfg.embedder {
        EmbedderChoice::Toy => Box::new(HashEmbedder::new(cfg.e, cfg.data_seed, cfg.max_tokens)?),
        EmbedderChoice::File(p) => {
            manifest.input(p)?;
            Box::new(FileEmbedder::open(p, cfg.max_tokens)?)
        }
    })
}

fn paraphraser(cfg: &TrainConfig, manifest: &mut RunManifest) -> CliResult<Paraphraser> {
    Ok(match &cfg.paraphraser {
        ParaphraserChoice::Rule => Paraphraser::Rule { seed: cfg.data_seed },
        ParaphraserChoice::Cache(p) => {
            manifest.input(p)?;
            Paraphraser::Cache(load_paraphrase_cache(p, cfg.z_paraphrases)?)
        }
    })
}

/// Question spec and its records from an ingest directory.
fn load_question(c: &Common, manifest: &mut RunManifest) -> CliResult<(ResolvedQuestion, Vec<AnswerRecord>)> {
    let dir = c.data_dir()?;
    let qpath = dir.join(QUESTIONS_FILE);
    let rpath = dir.join(RECORDS_FILE);
    manifest.input(&qpath)?;
    manifest.input(&rpath)?;
    let text = std::fs::read_to_string(&qpath).map_err(Error::from)?;
    let mut questions: BTreeMap<String, ResolvedQuestion> = serde_json::from_str(&text).map_err(Error::from)?;
    let id = match &c.question {
        Some(q) => q.clone(),
        None if questions.len() == 1 => questions.keys().next().unwrap().clone(),
        None => {
            return Err(usage(format!(
                "--question is required; {} holds {:?}",
                qpath.display(),
                questions.keys().collect::<Vec<_>>()
            )))
        }
    };
    let question = questions
        .remove(&id)
        .ok_or_else(|| usage(format!("question {id} not found in {}", qpath.display())))?;
    let records = load_jsonl(&rpath, Some(&id))?;
    Ok((question, records))
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> CliResult<ProtSiModel> {
    manifest.input(path)?;
    Ok(ProtSiModel::from_params(load_checkpoint(path)?)?)
}

fn load_episodes(path: &Path, manifest: &mut RunManifest) -> CliResult<Vec<Episode>> {
    manifest.input(path)?;
    Ok(read_episodes_jsonl(path)?)
}

/// Effective config plus a manifest that records it and the config file.
fn start(c: &Common, command: &str) -> CliResult<(TrainConfig, RunManifest)> {
    let cfg = c.train_config()?;
    let mut manifest = RunManifest::new(command, Some(&cfg));
    if let Some(p) = &c.config {
        manifest.input(p)?;
    }
    Ok((cfg, manifest))
}

pub fn ingest(c: &Common, dataset: &Path, questions: &Path) -> CliResult<()> {
    let out = c.out_dir()?;
    let seed = c.seed.unwrap_or(0);
    let mut manifest = RunManifest::new("ingest", None);
    manifest.input(dataset)?;
    manifest.input(questions)?;

    let meta = load_question_meta(questions)?;
    let mut all = Vec::new();
    let mut resolved = BTreeMap::new();
    let mut diagnostics: BTreeMap<String, LoadDiagnostics> = BTreeMap::new();
    for (qid, m) in &meta {
        let (records, diag) = load_records(dataset, qid)?;
        let q = resolve_question(qid, m, &records, seed)?;
        let records = match &q.substituted_answer_id {
            Some(id) => {
                info!("question {qid}: model answer taken from full-mark answer {id}");
                exclude_answer(records, id)
            }
            None => records,
        };
        info!("question {qid}: {} records, {} rows skipped", records.len(), diag.skipped);
        all.extend(records);
        resolved.insert(qid.clone(), q);
        diagnostics.insert(qid.clone(), diag);
    }

    let records_path = out.join(RECORDS_FILE);
    write_records_jsonl(&records_path, &all)?;
    let questions_path = out.join(QUESTIONS_FILE);
    write_json(&questions_path, &resolved)?;
    let diag_path = out.join("diagnostics.json");
    write_json(&diag_path, &diagnostics)?;
    for p in [&records_path, &questions_path, &diag_path] {
        manifest.artifact(p);
    }
    manifest.write(&out)?;
    println!("ingested {} records for {} question(s) into {}", all.len(), resolved.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct SplitSummary<'a> {
    train: Vec<&'a str>,
    val: Vec<&'a str>,
    test: Vec<&'a str>,
    unlabeled: Vec<&'a str>,
}

fn ids(records: &[AnswerRecord]) -> Vec<&str> {
    records.iter().map(|r| r.answer_id.as_str()).collect()
}

pub fn episodes(c: &Common) -> CliResult<()> {
    let out = c.out_dir()?;
    let (cfg, mut manifest) = start(c, "episodes")?;
    let (question, records) = load_question(c, &mut manifest)?;
    let para = paraphraser(&cfg, &mut manifest)?;
    let split = split_records(&cfg, &records)?;
    let sets = build_episodes(&cfg, &split, &question.spec, &para)?;

    let split_path = out.join("split.json");
    write_json(
        &split_path,
        &SplitSummary {
            train: ids(&split.train),
            val: ids(&split.val),
            test: ids(&split.test),
            unlabeled: ids(&split.unlabeled),
        },
    )?;
    manifest.artifact(&split_path);
    for (name, eps) in [("train", &sets.train), ("val", &sets.val), ("test", &sets.test)] {
        let p = out.join(format!("episodes_{name}.jsonl"));
        write_episodes_jsonl(&p, eps)?;
        manifest.artifact(&p);
    }
    manifest.write(&out)?;
    println!(
        "wrote {} train, {} val and {} test episodes to {}",
        sets.train.len(),
        sets.val.len(),
        sets.test.len(),
        out.display()
    );
    Ok(())
}

fn write_report(out: &Path, report: &EvalReport, manifest: &mut RunManifest) -> CliResult<()> {
    let metrics = out.join("metrics.json");
    write_json(&metrics, &report.metrics)?;
    let dist = out.join("distribution.json");
    write_json(&dist, &report.distribution)?;
    let preds = out.join("predictions.jsonl");
    let mut w = BufWriter::new(File::create(&preds).map_err(Error::from)?);
    for p in &report.predictions {
        serde_json::to_writer(&mut w, p).map_err(Error::from)?;
        w.write_all(b"\n").map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    for p in [&metrics, &dist, &preds] {
        manifest.artifact(p);
    }
    Ok(())
}

/// Trains one configuration into `out`, writing log, checkpoints and the
/// test report.
fn train_into(
    cfg: &TrainConfig,
    question: &ResolvedQuestion,
    records: &[AnswerRecord],
    out: &Path,
    manifest: &mut RunManifest,
) -> CliResult<PipelineOutcome> {
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let prov = provider(cfg, manifest)?;
    let para = paraphraser(cfg, manifest)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(Error::from)?);
    let outcome = run_pipeline(cfg, records, &question.spec, prov.as_ref(), &para, Some(&mut log))?;
    log.flush().map_err(Error::from)?;
    manifest.artifact(&log_path);

    let config_path = out.join("config.txt");
    std::fs::write(&config_path, cfg.to_string()).map_err(Error::from)?;
    let best = out.join("best.psck");
    save_checkpoint(&outcome.training.selected().params, &best)?;
    let last = out.join("final.psck");
    save_checkpoint(&outcome.training.model.params, &last)?;
    let val = out.join("validation.json");
    write_json(&val, &outcome.training.validation)?;
    let test = out.join("episodes_test.jsonl");
    write_episodes_jsonl(&test, &outcome.episodes.test)?;
    for p in [&config_path, &best, &last, &val, &test] {
        manifest.artifact(p);
    }
    write_report(out, &outcome.report, manifest)?;
    Ok(outcome)
}

pub fn train(c: &Common) -> CliResult<()> {
    let out = c.out_dir()?;
    let (cfg, mut manifest) = start(c, "train")?;
    let (question, records) = load_question(c, &mut manifest)?;
    let outcome = train_into(&cfg, &question, &records, &out, &mut manifest)?;
    manifest.write(&out)?;
    let best_epoch = outcome.training.best.as_ref().map(|(e, _)| e.to_string()).unwrap_or("-".into());
    println!(
        "trained {} steps; best epoch {best_epoch}; test accuracy {:.4}, qwk {:.4}",
        outcome.training.log.len(),
        outcome.report.metrics.accuracy,
        outcome.report.metrics.qwk
    );
    Ok(())
}

pub fn eval(c: &Common, checkpoint: &Path, episodes: &Path) -> CliResult<()> {
    let out = c.out_dir()?;
    let (cfg, mut manifest) = start(c, "eval")?;
    let (question, _) = load_question(c, &mut manifest)?;
    let model = load_model(checkpoint, &mut manifest)?;
    let eps = load_episodes(episodes, &mut manifest)?;
    let prov = provider(&cfg, &mut manifest)?;
    let report = evaluate(&model, &cfg, &question.spec, prov.as_ref(), &eps)?;
    write_report(&out, &report, &mut manifest)?;
    manifest.write(&out)?;
    println!(
        "accuracy {:.4}, qwk {:.4} over {} predictions",
        report.metrics.accuracy,
        report.metrics.qwk,
        report.predictions.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    answer_id: &'a str,
    score: i64,
    probabilities: Vec<f64>,
}

pub fn predict(
    c: &Common,
    checkpoint: &Path,
    episodes: &Path,
    index: usize,
    answer_id: &str,
    text: &str,
) -> CliResult<()> {
    let (cfg, mut manifest) = start(c, "predict")?;
    let (question, _) = load_question(c, &mut manifest)?;
    let model = load_model(checkpoint, &mut manifest)?;
    let eps = load_episodes(episodes, &mut manifest)?;
    let support = eps
        .get(index)
        .ok_or_else(|| usage(format!("--episode-index {index} out of range ({} episodes)", eps.len())))?;
    let prov = provider(&cfg, &mut manifest)?;
    let (score, probabilities) = predict_answer(&model, &cfg, &question.spec, prov.as_ref(), support, answer_id, text)?;
    let line = serde_json::to_string(&Prediction {
        answer_id,
        score,
        probabilities,
    })
    .map_err(Error::from)?;
    println!("{line}");
    Ok(())
}

#[derive(Serialize)]
struct ArmSummary {
    arm: &'static str,
    disable_l2: bool,
    disable_l3: bool,
    accuracy: f64,
    qwk: f64,
    final_loss: f64,
}

pub fn ablate(c: &Common) -> CliResult<()> {
    let out = c.out_dir()?;
    let (base, mut manifest) = start(c, "ablate")?;
    let (question, records) = load_question(c, &mut manifest)?;
    let mut summary = Vec::new();
    for (arm, d2, d3) in [
        ("full", false, false),
        ("no_l3", false, true),
        ("no_l2", true, false),
        ("l1_only", true, true),
    ] {
        let cfg = TrainConfig {
            disable_l2: d2,
            disable_l3: d3,
            ..base.clone()
        };
        let outcome = train_into(&cfg, &question, &records, &out.join(arm), &mut manifest)?;
        let m = &outcome.report.metrics;
        println!("{arm:8} accuracy {:.4} qwk {:.4}", m.accuracy, m.qwk);
        summary.push(ArmSummary {
            arm,
            disable_l2: d2,
            disable_l3: d3,
            accuracy: m.accuracy,
            qwk: m.qwk,
            final_loss: outcome.training.log.last().map_or(f64::NAN, |e| e.loss.total),
        });
    }
    let path = out.join("ablation.json");
    write_json(&path, &summary)?;
    manifest.artifact(&path);
    manifest.write(&out)?;
    Ok(())
}

pub fn gradcheck(c: &Common, step: f64, tolerance: f64, fault: Option<(String, f64)>) -> CliResult<()> {
    let cfg = c.train_config()?;
    if cfg.embedder != EmbedderChoice::Toy {
        return Err(CliError::from(Error::Config {
            field: "embedder".into(),
            detail: "gradcheck needs the toy embedder".into(),
        }));
    }
    let mut inst = gradcheck_instance(cfg.model_seed)?;
    let ic = &mut inst.config;
    ic.alpha = cfg.alpha;
    ic.beta = cfg.beta;
    ic.gamma = cfg.gamma;
    ic.tau = cfg.tau;
    ic.distance = cfg.distance;
    ic.disable_l2 = cfg.disable_l2;
    ic.disable_l3 = cfg.disable_l3;
    ic.unlabeled_branch = cfg.unlabeled_branch;
    ic.contrastive_originals_only = cfg.contrastive_originals_only;
    inst.fault = fault;

    let report = inst.check(step, tolerance)?;
    println!("loss {:.6e}, step {step:e}, tolerance {tolerance:e}", report.loss);
    for (group, err) in report.by_group(param_group) {
        println!("{group:12} max relative error {err:.3e}");
    }
    let worst = report.worst().expect("trainable parameters");
    println!(
        "worst {} entry {}: analytic {:.6e}, numeric {:.6e}, relative error {:.3e}",
        worst.id, worst.worst_index, worst.analytic, worst.numeric, worst.max_rel_error
    );
    if report.passed {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(CliError {
            code: EXIT_CHECK_FAILED,
            message: format!(
                "gradient check failed; worst parameter {} (group {})",
                worst.id,
                param_group(&worst.id)
            ),
        })
    }
}

pub fn synth(c: &Common, classes: usize, per_class: usize, label_noise: f64) -> CliResult<()> {
    if classes < 2 {
        return Err(usage("--classes must be at least 2"));
    }
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(usage("--label-noise must lie in [0, 1]"));
    }
    let out = c.out_dir()?;
    let task = synthetic::generate(&SyntheticSpec {
        classes,
        per_class,
        label_noise,
        seed: c.seed.unwrap_or(0),
    });
    let data: PathBuf = out.join("dataset.tsv");
    let mut w = BufWriter::new(File::create(&data).map_err(Error::from)?);
    let io = |e: std::io::Error| CliError::from(Error::from(e));
    writeln!(w, "Id\tEssaySet\tScore1\tScore2\tEssayText").map_err(io)?;
    for r in &task.records {
        let s = r.score.expect("generated answers are labeled");
        writeln!(w, "{}\t{}\t{s}\t{s}\t{}", r.answer_id, r.question_id, r.text).map_err(io)?;
    }
    w.flush().map_err(io)?;
    let q = &task.question;
    let meta = BTreeMap::from([(
        q.question_id.clone(),
        serde_json::json!({
            "rubric_min": q.rubric_min,
            "rubric_max": q.rubric_max,
            "model_answer_text": q.model_answer_text,
        }),
    )]);
    write_json(&out.join("questions.json"), &meta)?;
    println!("wrote {} answers to {}", task.records.len(), data.display());
    Ok(())
}
