use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ata_core::augment::RegKind;
use ata_core::models::Network;
use ata_core::params::{checkpoint_paths, ModelParams};
use ata_core::seed;
use ata_core::tasks::{sample_episode, DatasetHandle};
use ata_core::train::{
    adapt_meta_finetune, evaluate, finetune_baseline, meta_train_with, pretrain_encoder, EvalReport, MetaLearner,
};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::manifest::{digest_file, Manifest};
use crate::results::{self, Row};

/// A command failure, split by exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or configuration.
    Usage(anyhow::Error),
    /// The work itself failed.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

pub trait RuntimeContext<T> {
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> RuntimeContext<T> for Result<T, E> {
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

pub struct Run {
    pub command: &'static str,
    pub cfg: ExperimentConfig,
    pub resolved: Value,
    pub config_path: PathBuf,
    pub out: PathBuf,
}

impl Run {
    fn network(&self) -> Result<Network, Failure> {
        self.cfg.train.network().map_err(|e| Failure::Usage(e.into()))
    }

    fn write_manifest(&self, extra_inputs: &[&Path]) -> Result<(), Failure> {
        let mut inputs = vec![digest_file(&self.config_path).runtime()?];
        for p in extra_inputs {
            inputs.push(digest_file(p).runtime()?);
        }
        let m = Manifest::new(self.command, self.cfg.train.seed, self.resolved.clone(), inputs).runtime()?;
        let path = m.write(&self.out).runtime()?;
        log::info!("manifest written to {}", path.display());
        Ok(())
    }

    fn load_source(&self) -> Result<DatasetHandle, Failure> {
        self.cfg.source.load().runtime()
    }

    fn load_targets(&self) -> Result<Vec<DatasetHandle>, Failure> {
        if self.cfg.targets.is_empty() {
            return Ok(vec![self.load_source()?]);
        }
        self.cfg.targets.iter().map(|t| t.load().runtime()).collect()
    }

    fn checkpoint(&self, stem: &Option<PathBuf>, field: &str) -> Result<(ModelParams, Vec<PathBuf>), Failure> {
        let stem = stem
            .as_ref()
            .ok_or_else(|| Failure::Usage(anyhow!("invalid config field `{field}`: a checkpoint is required")))?;
        let params = ModelParams::load(stem)
            .with_context(|| format!("cannot load checkpoint `{}`", stem.display()))
            .runtime()?;
        let (json, bin) = checkpoint_paths(stem);
        Ok((params, vec![json, bin]))
    }

    /// Initial parameters for meta-training: the encoder checkpoint when one
    /// is configured, fresh parameters otherwise.
    fn initial_params(&self, net: &Network) -> Result<(ModelParams, Vec<PathBuf>), Failure> {
        match &self.cfg.encoder_checkpoint {
            Some(_) => {
                let (encoder, files) = self.checkpoint(&self.cfg.encoder_checkpoint, "encoder_checkpoint")?;
                Ok((net.init_from_encoder(&encoder, self.cfg.train.seed).runtime()?, files))
            }
            None => Ok((net.init_params(self.cfg.train.seed), Vec::new())),
        }
    }

    fn eval_report(&self, net: &Network, params: &ModelParams, data: &DatasetHandle) -> Result<EvalReport, Failure> {
        let t = &self.cfg.train;
        evaluate(
            &MetaLearner { net, params },
            data,
            t.eval_episodes,
            t.way,
            t.shot,
            t.eval_queries_per_class,
            t.seed,
        )
        .runtime()
    }

    fn row(&self, model: &str, domain: &str, report: &EvalReport) -> Row {
        Row {
            model: model.into(),
            domain: domain.into(),
            way: self.cfg.train.way,
            shot: self.cfg.train.shot,
            mean: 100.0 * report.mean_accuracy,
            ci: 100.0 * report.ci95_halfwidth,
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).runtime()?;
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display())).runtime()
}

fn paths(files: &[PathBuf]) -> Vec<&Path> {
    files.iter().map(PathBuf::as_path).collect()
}

pub fn pretrain(run: &Run) -> Result<(), Failure> {
    let source = run.load_source()?;
    let outcome = pretrain_encoder(&source, &run.cfg.train).runtime()?;
    let stem = run.out.join("encoder");
    outcome.encoder.save(&stem).runtime()?;
    write_json(
        &run.out.join("pretrain.json"),
        &json!({"epoch_losses": outcome.epoch_losses, "train_accuracy": outcome.train_accuracy}),
    )?;
    println!(
        "encoder saved to {} (train accuracy {:.2}%)",
        stem.display(),
        100.0 * outcome.train_accuracy
    );
    run.write_manifest(&[])
}

pub fn meta_train(run: &Run) -> Result<(), Failure> {
    let net = run.network()?;
    let (init, inputs) = run.initial_params(&net)?;
    let source = run.load_source()?;
    let validation = run.cfg.validation.as_ref().map(|v| v.load()).transpose().runtime()?;
    let log_path = run.out.join("train_log.jsonl");
    let mut log = BufWriter::new(
        File::create(&log_path)
            .with_context(|| format!("cannot create {}", log_path.display()))
            .runtime()?,
    );
    let every = run.cfg.train.checkpoint_every;
    let out = run.out.clone();
    let outcome = meta_train_with(&source, validation.as_ref(), &init, &run.cfg.train, &mut |record, params| {
        let line = serde_json::to_string(record).map_err(ata_core::Error::from)?;
        writeln!(log, "{line}").map_err(|e| ata_core::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        if every > 0 && (record.iteration + 1) % every == 0 {
            params.save(out.join(format!("checkpoint-{}", record.iteration + 1)))?;
        }
        Ok(())
    })
    .runtime()?;
    log.flush().runtime()?;
    let stem = run.out.join("model");
    outcome.params.save(&stem).runtime()?;
    write_json(
        &run.out.join("meta_train.json"),
        &json!({
            "iterations": outcome.records.len(),
            "best_iteration": outcome.best_iteration,
            "best_validation_accuracy": outcome.best_validation_accuracy,
        }),
    )?;
    println!("model saved to {}", stem.display());
    run.write_manifest(&paths(&inputs))
}

pub fn eval(run: &Run) -> Result<(), Failure> {
    let net = run.network()?;
    let (params, inputs) = run.checkpoint(&run.cfg.checkpoint, "checkpoint")?;
    net.check_params(&params)
        .context("checkpoint does not fit the configured network")
        .runtime()?;
    let mut rows = Vec::new();
    for data in run.load_targets()? {
        let report = run.eval_report(&net, &params, &data)?;
        write_json(&run.out.join(format!("eval-{}.json", data.name)), &report)?;
        let row = run.row(&run.cfg.model_name, &data.name, &report);
        println!("{}  {}  {:.2} ± {:.2}", row.model, row.domain, row.mean, row.ci);
        rows.push(row);
    }
    results::append(&run.out.join("results.csv"), &rows).runtime()?;
    run.write_manifest(&paths(&inputs))
}

pub fn finetune(run: &Run) -> Result<(), Failure> {
    let net = run.network()?;
    let mut inputs = Vec::new();
    let model = match &run.cfg.checkpoint {
        Some(_) => {
            let (params, files) = run.checkpoint(&run.cfg.checkpoint, "checkpoint")?;
            net.check_params(&params).runtime()?;
            inputs.extend(files);
            Some(params)
        }
        None => None,
    };
    let encoder = match (&run.cfg.encoder_checkpoint, &model) {
        (Some(_), _) => {
            let (params, files) = run.checkpoint(&run.cfg.encoder_checkpoint, "encoder_checkpoint")?;
            inputs.extend(files);
            params
        }
        (None, Some(m)) => m.subset("encoder."),
        (None, None) => {
            return Err(Failure::Usage(anyhow!(
                "invalid config: `finetune` needs `encoder_checkpoint` or `checkpoint`"
            )))
        }
    };
    let t = &run.cfg.train;
    let mut rows = Vec::new();
    for data in run.load_targets()? {
        let mut baseline = Vec::with_capacity(run.cfg.finetune_episodes);
        let mut adapted = Vec::new();
        for i in 0..run.cfg.finetune_episodes {
            let task = sample_episode(&data, t.way, t.shot, t.eval_queries_per_class, seed::derive(t.seed, seed::EPISODE, i as u64))
                .runtime()?;
            let mut ft = run.cfg.finetune.clone();
            ft.seed = seed::derive(run.cfg.finetune.seed, seed::PSEUDO, i as u64);
            baseline.push(finetune_baseline(&net, &encoder, &task, &ft).runtime()?.accuracy);
            if let Some(params) = &model {
                adapted.push(adapt_meta_finetune(&net, params, &task, &ft).runtime()?.accuracy);
            }
        }
        let report = EvalReport::from_accuracies(baseline).runtime()?;
        rows.push(run.row("finetune", &data.name, &report));
        if !adapted.is_empty() {
            let report = EvalReport::from_accuracies(adapted).runtime()?;
            rows.push(run.row(&format!("{}+adapt", run.cfg.model_name), &data.name, &report));
        }
    }
    for row in &rows {
        println!("{}  {}  {:.2} ± {:.2}", row.model, row.domain, row.mean, row.ci);
    }
    results::append(&run.out.join("finetune.csv"), &rows).runtime()?;
    run.write_manifest(&paths(&inputs))
}

/// Meta-trains once per regulariser (none, euclid, mmd) with `gamma = 1`
/// and pools the accuracies over all target domains into one row each.
pub fn ablate_reg(run: &Run) -> Result<(), Failure> {
    let net = run.network()?;
    let (init, inputs) = run.initial_params(&net)?;
    let source = run.load_source()?;
    let validation = run.cfg.validation.as_ref().map(|v| v.load()).transpose().runtime()?;
    let targets = run.load_targets()?;
    let domain = targets.iter().map(|d| d.name.as_str()).collect::<Vec<_>>().join("+");
    let mut rows = Vec::new();
    for reg in [RegKind::None, RegKind::Euclid, RegKind::Mmd] {
        let mut cfg = run.cfg.train.clone();
        cfg.augment.reg_kind = reg;
        cfg.augment.gamma = 1.0;
        let outcome = ata_core::train::meta_train(&source, validation.as_ref(), &init, &cfg).runtime()?;
        let mut pooled = Vec::new();
        for data in &targets {
            pooled.extend(run.eval_report(&net, &outcome.params, data)?.per_episode_accuracies);
        }
        let report = EvalReport::from_accuracies(pooled).runtime()?;
        let row = run.row(&format!("{}/{}", run.cfg.model_name, reg.name()), &domain, &report);
        println!("{}  {}  {:.2} ± {:.2}", row.model, row.domain, row.mean, row.ci);
        rows.push(row);
    }
    results::append(&run.out.join("ablate_reg.csv"), &rows).runtime()?;
    run.write_manifest(&paths(&inputs))
}
