use serde::Serialize;
use wsnad::checkpoint::Checkpoint;
use wsnad::config::{DataSource, RunConfig};
use wsnad::data::Corpus;
use wsnad::detect::MetricsFile;
use wsnad::gradcheck::GradCheckOptions;
use wsnad::model::Model;
use wsnad::pipeline::{self, Scheme, SCHEMES};
use wsnad::train::check::{joint_loss_gradcheck, toy_model_config};
use wsnad::train::{self, FinetuneMode};
use wsnad::Error;

use crate::artifacts::*;
use crate::Common;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("gradient check failed: max relative error {max_rel_error:.3e} exceeds {tol:.0e} (worst: {worst})")]
    GradCheck {
        max_rel_error: f64,
        tol: f64,
        worst: String,
    },
}

impl Failure {
    pub fn category(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.category(),
            Failure::GradCheck { .. } => "check",
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?.with_overrides(&c.overrides)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &c.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let out = OutputDir::open(&cfg)?;
    let d = &cfg.data;
    let corpus = Corpus::synthetic(d.n_nodes, d.n_modalities, d.n_steps, d.knn, cfg.seed, &d.synth)?;
    corpus.write(&out.path(CORPUS))?;
    log::info!(
        "wrote {} nodes x {} steps to {}",
        d.n_nodes,
        d.n_steps,
        out.path(CORPUS).display()
    );
    Ok(out.summarize("synth", &cfg, &[("corpus", CORPUS)])?)
}

pub fn inject(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    if cfg.data.anomalies.is_empty() {
        return Err(Error::Config("inject: no [[data.anomalies]] entries configured".into()).into());
    }
    let out = OutputDir::open(&cfg)?;
    let corpus = pipeline::base_corpus(&cfg.data, cfg.seed)?.with_anomalies(&cfg.data.anomalies)?;
    corpus.write(&out.path(CORPUS))?;
    let cells: usize = corpus.injections.iter().map(|i| i.len()).sum();
    log::info!("injected {} events covering {cells} cells", corpus.injections.len());
    Ok(out.summarize("inject", &cfg, &[("corpus", CORPUS)])?)
}

pub fn ingest(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    if cfg.data.source != DataSource::Ibrl {
        return Err(
            Error::Config("ingest: set data.source = \"ibrl\" with data.path and data.coordinates".into()).into(),
        );
    }
    let out = OutputDir::open(&cfg)?;
    let (corpus, stats) = pipeline::ingest_corpus(&cfg.data)?;
    corpus.write(&out.path(CORPUS))?;
    write_json(&out.path(INGEST_STATS), &stats)?;
    Ok(out.summarize("ingest", &cfg, &[("corpus", CORPUS), ("ingest_stats", INGEST_STATS)])?)
}

pub fn pretrain(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let out = OutputDir::open(&cfg)?;
    let corpus = pipeline::load_corpus(&cfg.data, cfg.seed)?;
    let data = pipeline::split_windows(&corpus, &cfg)?;
    let mut model = Model::new(cfg.model.clone(), corpus.series.n_modalities(), cfg.seed)?;
    let (ckpt, trace) = if cfg.pipeline.pretrain {
        let report = train::pretrain(&mut model, &data.train, &corpus.graph, &cfg.train, cfg.seed)?;
        (
            Checkpoint::backbone(&model, Some(&report.optimizer), None),
            report.trace,
        )
    } else {
        log::info!("pretraining disabled; saving the initialized backbone");
        (Checkpoint::backbone(&model, None, None), Vec::new())
    };
    ckpt.save(&out.path(BACKBONE))?;
    pipeline::write_jsonl(&out.path(PRETRAIN_LOG), &trace)?;
    Ok(out.summarize(
        "pretrain",
        &cfg,
        &[("backbone", BACKBONE), ("pretrain_log", PRETRAIN_LOG)],
    )?)
}

fn load_backbone(out: &OutputDir) -> Result<Model> {
    let ck = Checkpoint::load(&out.path(BACKBONE), "backbone checkpoint; run `wsnad pretrain` first")?;
    Ok(ck.restore()?)
}

pub fn finetune(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let out = OutputDir::open(&cfg)?;
    let mut model = load_backbone(&out)?;
    let corpus = pipeline::load_corpus(&cfg.data, cfg.seed)?;
    let data = pipeline::split_windows(&corpus, &cfg)?;
    let report = pipeline::finetune_stage(&mut model, &corpus, &data, &cfg)?;
    log::info!("fine-tuned {} parameters", report.trainable);
    let saved = if pipeline::finetune_mode(&cfg) == FinetuneMode::Prompt {
        Checkpoint::prompt(&model)?.save(&out.path(PROMPT))?;
        ("prompt", PROMPT)
    } else {
        Checkpoint::backbone(&model, None, None).save(&out.path(FINETUNED))?;
        ("finetuned", FINETUNED)
    };
    pipeline::write_jsonl(&out.path(FINETUNE_LOG), &report.trace)?;
    Ok(out.summarize("finetune", &cfg, &[saved, ("finetune_log", FINETUNE_LOG)])?)
}

/// The fine-tuned model the configuration calls for, plus the prompt to
/// install once the corpus node count is known.
fn load_finetuned(out: &OutputDir, cfg: &RunConfig) -> Result<(Model, Option<Checkpoint>)> {
    if pipeline::finetune_mode(cfg) == FinetuneMode::Prompt {
        let model = load_backbone(out)?;
        let prompt = Checkpoint::load(&out.path(PROMPT), "prompt checkpoint; run `wsnad finetune` first")?;
        Ok((model, Some(prompt)))
    } else {
        let ck = Checkpoint::load(
            &out.path(FINETUNED),
            "fine-tuned checkpoint; run `wsnad finetune` first",
        )?;
        Ok((ck.restore()?, None))
    }
}

fn detect_into(out: &OutputDir, cfg: &RunConfig) -> Result<(Corpus, pipeline::SplitWindows, MetricsFile)> {
    let (mut model, prompt) = load_finetuned(out, cfg)?;
    let corpus = pipeline::load_corpus(&cfg.data, cfg.seed)?;
    if let Some(p) = prompt {
        p.install_prompt(&mut model, corpus.series.n_nodes())?;
    }
    let data = pipeline::split_windows(&corpus, cfg)?;
    let report = pipeline::detect_stage(&model, &corpus, &data, cfg)?;
    report.write(&out.path(DETECT))?;
    let metrics = report.metrics_file();
    match &metrics.metrics {
        Some(m) => log::info!(
            "tau={:.4} Pre={:.4} Rec={:.4} F1={:.4}",
            metrics.tau,
            m.pre,
            m.rec,
            m.f1
        ),
        None => log::info!("tau={:.4}; corpus has no labels, metrics skipped", metrics.tau),
    }
    Ok((corpus, data, metrics))
}

pub fn detect(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let out = OutputDir::open(&cfg)?;
    detect_into(&out, &cfg)?;
    Ok(out.summarize("detect", &cfg, &[("detect", DETECT)])?)
}

#[derive(Serialize)]
struct Evaluation {
    model: MetricsFile,
    baseline: MetricsFile,
}

pub fn eval(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let out = OutputDir::open(&cfg)?;
    let (corpus, data, model) = detect_into(&out, &cfg)?;
    let baseline = pipeline::baseline_stage(&corpus, &data, &cfg)?;
    baseline.write(&out.path(BASELINE))?;
    let eval = Evaluation {
        model,
        baseline: baseline.metrics_file(),
    };
    if let (Some(m), Some(b)) = (&eval.model.metrics, &eval.baseline.metrics) {
        println!("model F1 {:.4}  persistence baseline F1 {:.4}", m.f1, b.f1);
    }
    write_json(&out.path(EVAL), &eval)?;
    Ok(out.summarize(
        "eval",
        &cfg,
        &[("detect", DETECT), ("baseline", BASELINE), ("eval", EVAL)],
    )?)
}

pub fn ablate(c: &Common, ids: &[u8]) -> Result<()> {
    let cfg = resolve(c)?;
    let schemes: Vec<Scheme> = if ids.is_empty() {
        SCHEMES.to_vec()
    } else {
        ids.iter()
            .map(|&id| Scheme::by_id(id).ok_or_else(|| Error::Config(format!("no ablation scheme {id} (valid: 1-7)"))))
            .collect::<std::result::Result<_, _>>()?
    };
    let out = OutputDir::open(&cfg)?;
    let corpus = pipeline::load_corpus(&cfg.data, cfg.seed)?;
    let rows = pipeline::ablate(&corpus, &cfg, &schemes)?;
    let table = pipeline::ablation_table(&rows);
    print!("{table}");
    pipeline::write_jsonl(&out.path(ABLATION), &rows)?;
    write_text(&out.path(ABLATION_TABLE), &table)?;
    Ok(out.summarize(
        "ablate",
        &cfg,
        &[("ablation", ABLATION), ("ablation_table", ABLATION_TABLE)],
    )?)
}

pub fn gradcheck(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let out = OutputDir::open(&cfg)?;
    let report = joint_loss_gradcheck(&toy_model_config(), cfg.seed, GradCheckOptions::default())?;
    write_json(&out.path(GRADCHECK), &report)?;
    out.summarize("gradcheck", &cfg, &[("gradcheck", GRADCHECK)])?;
    println!(
        "{} coordinates, max relative error {:.3e}",
        report.coords_checked, report.max_rel_error
    );
    if !report.passed {
        let worst = report.worst.map(|(name, i)| format!("{name}[{i}]")).unwrap_or_default();
        return Err(Failure::GradCheck {
            max_rel_error: report.max_rel_error,
            tol: report.tol,
            worst,
        });
    }
    Ok(())
}
