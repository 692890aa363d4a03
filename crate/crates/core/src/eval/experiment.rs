use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{average_forgetting, average_performance, performance, EvalMatrix, PerformanceMode};
use crate::backbone::{pretrain, MultimodalBackbone, PretrainReport};
use crate::bench::{build_stream, load_corpus, synth_generate, CmmlStream, Corpus, Sample, SessionSpec};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::pipeline::{build_variant, prepare_all, train_task, ModelConfig, PreparedSample, RebQModel};
use crate::reconstruct::{collect_query_records, reconstruction_quality, QueryRecord, ReconstructionQuality};
use crate::seed::{derive_seed, fnv1a};

pub const EXPERIMENT_KIND: &str = "rebq-experiment";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One read of session data, recorded while the stream is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    /// Session being trained (or just trained) when the read happened.
    pub phase: usize,
    pub session: usize,
    pub split: Split,
}

/// Hands out session data on demand and logs every read.
///
/// Queries are computed lazily: a session's training set is prepared only
/// when that session is trained, and test sets once on first use.
pub struct DataProvider<'b> {
    backbone: &'b MultimodalBackbone,
    stream: CmmlStream,
    with_counterparts: bool,
    tests: Vec<OnceLock<Vec<PreparedSample>>>,
    log: Mutex<Vec<Access>>,
}

impl<'b> DataProvider<'b> {
    pub fn new(backbone: &'b MultimodalBackbone, stream: CmmlStream, with_counterparts: bool) -> Self {
        let tests = (0..stream.sessions.len()).map(|_| OnceLock::new()).collect();
        Self {
            backbone,
            stream,
            with_counterparts,
            tests,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn num_sessions(&self) -> usize {
        self.stream.sessions.len()
    }

    pub fn spec(&self, j: usize) -> &SessionSpec {
        &self.stream.sessions[j].spec
    }

    fn record(&self, phase: usize, session: usize, split: Split) {
        self.log.lock().expect("access log").push(Access { phase, session, split });
    }

    pub fn train(&self, phase: usize, session: usize) -> Result<Vec<PreparedSample>> {
        self.record(phase, session, Split::Train);
        prepare_all(self.backbone, &self.stream.sessions[session].train, self.with_counterparts)
    }

    pub fn test(&self, phase: usize, session: usize) -> Result<&[PreparedSample]> {
        self.record(phase, session, Split::Test);
        if let Some(t) = self.tests[session].get() {
            return Ok(t);
        }
        let prepared = prepare_all(self.backbone, &self.stream.sessions[session].test, false)?;
        Ok(self.tests[session].get_or_init(|| prepared))
    }

    /// Raw test samples, for post-hoc analysis after the stream has ended.
    pub fn raw_tests(&self) -> impl Iterator<Item = &Sample> {
        self.stream.sessions.iter().flat_map(|s| s.test.iter())
    }

    pub fn access_log(&self) -> Vec<Access> {
        self.log.lock().expect("access log").clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: usize,
    pub classes: Vec<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    /// Mean performance over sessions seen so far, right after this one.
    pub seen_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneInfo {
    pub fingerprint: String,
    pub unchanged: bool,
    pub pretrain: Option<PretrainReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSummary {
    pub trained: ReconstructionQuality,
    pub untrained: ReconstructionQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub artifact_version: String,
    pub config: RunConfig,
    pub mode: PerformanceMode,
    pub matrix: EvalMatrix,
    pub ap: f64,
    /// Absent for single-session runs.
    pub fg: Option<f64>,
    pub sessions: Vec<SessionSummary>,
    pub trainable_parameters: usize,
    pub reconstruction: Option<ReconstructionSummary>,
    pub backbone: BackboneInfo,
    pub access_log: Vec<Access>,
    pub wall_clock_seconds: f64,
}

impl Report {
    /// JSON with the wall-clock zeroed; equal configs give equal bytes.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_clock_seconds = 0.0;
        Ok(serde_json::to_string_pretty(&r)?)
    }
}

/// Extra inputs of a run that are not part of its configuration.
#[derive(Default, Clone)]
pub struct RunOptions {
    /// Use this frozen backbone instead of loading or pretraining one.
    pub backbone: Option<Arc<MultimodalBackbone>>,
    /// Resolved output directory for session checkpoints.
    pub output_dir: Option<PathBuf>,
    /// Continue from an experiment checkpoint.
    pub resume_from: Option<PathBuf>,
    /// Keep the held-out query embeddings for export.
    pub collect_queries: bool,
}

/// A finished run plus artifacts that do not belong in the report JSON.
pub struct RunOutcome {
    pub report: Report,
    pub model: RebQModel,
    pub queries: Option<Vec<QueryRecord>>,
}

pub fn backbone_fingerprint(b: &MultimodalBackbone) -> Result<String> {
    Ok(format!("{:016x}", fnv1a(&b.to_container(serde_json::Value::Null).to_bytes()?)))
}

/// Loads the configured checkpoint, or pretrains (and saves, if a path is
/// configured) a fresh backbone.
pub fn obtain_backbone(config: &RunConfig) -> Result<(MultimodalBackbone, Option<PretrainReport>)> {
    let setup = &config.backbone;
    if let Some(path) = setup.checkpoint.as_deref().filter(|p| p.exists()) {
        let b = MultimodalBackbone::load(path)?;
        if b.config != setup.config {
            return Err(Error::Checkpoint(format!(
                "{} holds a backbone with a different configuration",
                path.display()
            )));
        }
        return Ok((b, None));
    }
    let synth = crate::bench::SynthConfig {
        shape: setup.config.input_shape(),
        ..config.data.synth
    };
    let corpus = synth_generate(
        setup.config.pretrain_classes,
        setup.pretrain_samples_per_class,
        &synth,
        derive_seed(config.seeds.backbone, "pretrain-corpus", 0),
    )?;
    let (b, report) = pretrain(setup.config, &corpus.samples, &setup.pretrain, config.seeds.backbone)?;
    if let Some(path) = &setup.checkpoint {
        b.save(path, serde_json::to_value(&report)?)?;
    }
    Ok((b, Some(report)))
}

pub fn build_corpus(config: &RunConfig) -> Result<Corpus> {
    let corpus = match &config.data.corpus_path {
        Some(p) => load_corpus(p)?,
        None => synth_generate(
            config.data.num_classes,
            config.data.samples_per_class,
            &config.data.synth,
            config.seeds.corpus,
        )?
        .into_corpus(),
    };
    let want = config.backbone.config.input_shape();
    let have = corpus.input_shape();
    if have.max_text_len > want.max_text_len || have.num_patches != want.num_patches || have.patch_dim != want.patch_dim {
        return Err(Error::Config(format!(
            "corpus geometry {have:?} does not fit the backbone input {want:?}"
        )));
    }
    Ok(corpus)
}

pub fn run_experiment(config: &RunConfig) -> Result<Report> {
    Ok(run_experiment_with(config, RunOptions::default())?.report)
}

struct Progress {
    matrix: EvalMatrix,
    sessions: Vec<SessionSummary>,
    next: usize,
}

pub fn run_experiment_with(config: &RunConfig, opts: RunOptions) -> Result<RunOutcome> {
    let started = Instant::now();
    config.validate().map_err(|e| e.at_stage("config"))?;

    let (backbone, pretrain_report) = match opts.backbone.clone() {
        Some(b) => (b, None),
        None => {
            let (b, r) = obtain_backbone(config).map_err(|e| e.at_stage("backbone"))?;
            (Arc::new(b), r)
        }
    };
    if !backbone.is_frozen() || backbone.config != config.backbone.config {
        return Err(Error::Config("backbone must be frozen and match the configured architecture".into()).at_stage("backbone"));
    }
    let fingerprint = backbone_fingerprint(&backbone)?;

    let corpus = build_corpus(config).map_err(|e| e.at_stage("bench"))?;
    let multi_label = corpus.header.multi_label;
    let stream = build_stream(&corpus, &config.stream, config.seeds.split, config.seeds.mask).map_err(|e| e.at_stage("bench"))?;
    let t = stream.sessions.len();

    let model_config = ModelConfig {
        num_classes: corpus.num_classes(),
        multi_label,
        prompt: config.prompt,
        lambda: config.lambda,
    };
    let mut model =
        build_variant(config.variant, backbone.clone(), &model_config, config.seeds.model).map_err(|e| e.at_stage("model"))?;
    let untrained_memory = model.memory.clone();
    let mode = PerformanceMode::for_labels(multi_label);
    let provider = DataProvider::new(&backbone, stream, model.memory.is_some());

    let mut progress = Progress {
        matrix: EvalMatrix::new(t),
        sessions: Vec::new(),
        next: 0,
    };
    if let Some(path) = &opts.resume_from {
        progress = resume(path, config, &fingerprint, &mut model).map_err(|e| e.at_stage("resume"))?;
    }

    for j in progress.next..t {
        let train = provider.train(j, j).map_err(|e| e.at_stage(format!("session {} queries", j + 1)))?;
        let classes = provider.spec(j).classes.clone();
        let log = train_task(&mut model, &train, &classes, &config.train, derive_seed(config.seeds.train, "session", j as u64))
            .map_err(|e| e.at_stage(format!("session {} training", j + 1)))?;
        if backbone_fingerprint(&backbone)? != fingerprint {
            return Err(Error::Checkpoint("backbone changed during training".into()).at_stage(format!("session {} training", j + 1)));
        }
        for i in 0..=j {
            let test = provider.test(j, i).map_err(|e| e.at_stage("evaluation"))?;
            let preds = model.predict_all(test).map_err(|e| e.at_stage("evaluation"))?;
            let truth: Vec<Vec<usize>> = test.iter().map(|p| p.sample.label.classes().to_vec()).collect();
            let perf = performance(&preds, &truth, mode).map_err(|e| e.at_stage("evaluation"))?;
            progress.matrix.set(i, j, perf)?;
        }
        let seen_mean = progress.matrix.column_mean(j)?;
        log::info!("session {}/{t}: seen-session mean {:.4}, mean loss {:.4}", j + 1, seen_mean, log.mean_total());
        progress.sessions.push(SessionSummary {
            session: j,
            classes,
            train_samples: train.len(),
            test_samples: provider.stream.sessions[j].test.len(),
            steps: log.steps.len(),
            epoch_losses: log.epoch_means(),
            final_loss: log.steps.last().map_or(0.0, |s| s.total),
            seen_mean,
        });
        progress.next = j + 1;
        if config.checkpoint_sessions {
            if let Some(dir) = &opts.output_dir {
                let path = dir.join("checkpoints").join(format!("session-{}.json", j + 1));
                save_checkpoint(&path, config, &fingerprint, &model, &progress).map_err(|e| e.at_stage("checkpoint"))?;
            }
        }
    }

    let (reconstruction, queries) = match (&model.memory, &untrained_memory) {
        (Some(trained), Some(untrained)) => {
            let held_out: Vec<Sample> = provider.raw_tests().filter(|s| s.is_complete()).cloned().collect();
            if held_out.is_empty() {
                (None, None)
            } else {
                let q = |m| reconstruction_quality(&backbone, m, &held_out).map_err(|e| e.at_stage("reconstruction analysis"));
                let summary = ReconstructionSummary {
                    trained: q(trained)?,
                    untrained: q(untrained)?,
                };
                let records = if opts.collect_queries {
                    Some(collect_query_records(&backbone, trained, &held_out)?)
                } else {
                    None
                };
                (Some(summary), records)
            }
        }
        _ => (None, None),
    };

    let ap = average_performance(&progress.matrix)?;
    let fg = if t >= 2 { Some(average_forgetting(&progress.matrix)?) } else { None };
    let unchanged = backbone_fingerprint(&backbone)? == fingerprint;
    let report = Report {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        mode,
        matrix: progress.matrix,
        ap,
        fg,
        sessions: progress.sessions,
        trainable_parameters: model.param_count(),
        reconstruction,
        backbone: BackboneInfo {
            fingerprint,
            unchanged,
            pretrain: pretrain_report,
        },
        access_log: provider.access_log(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { report, model, queries })
}

fn save_checkpoint(path: &Path, config: &RunConfig, fingerprint: &str, model: &RebQModel, p: &Progress) -> Result<()> {
    let mut c = Container::new(
        EXPERIMENT_KIND,
        serde_json::json!({
            "config": config,
            "backbone_fingerprint": fingerprint,
            "completed_sessions": p.next,
            "matrix": p.matrix,
            "sessions": p.sessions,
        }),
    );
    c.insert_all("", model.named_params());
    c.write(path)
}

fn resume(path: &Path, config: &RunConfig, fingerprint: &str, model: &mut RebQModel) -> Result<Progress> {
    let mut c = Container::read(path, EXPERIMENT_KIND)?;
    let saved: RunConfig = serde_json::from_value(c.meta["config"].clone())?;
    if &saved != config {
        return Err(Error::Checkpoint("checkpoint was written by a different configuration".into()));
    }
    if c.meta["backbone_fingerprint"].as_str() != Some(fingerprint) {
        return Err(Error::Checkpoint("checkpoint was written against a different backbone".into()));
    }
    c.restore_into("", model.named_params_mut())?;
    Ok(Progress {
        matrix: serde_json::from_value(c.meta["matrix"].clone())?,
        sessions: serde_json::from_value(c.meta["sessions"].clone())?,
        next: c.meta["completed_sessions"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing completed_sessions".into()))? as usize,
    })
}
