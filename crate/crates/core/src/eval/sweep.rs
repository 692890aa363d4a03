use std::collections::btree_map::{BTreeMap, Entry};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::experiment::{obtain_backbone, run_experiment_with, RunOptions};
use super::report::emit_report;
use crate::error::{config_err, Result};
use crate::pipeline::VariantSpec;

/// A grid over the main hyperparameter axes. Empty axes keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    #[serde(default)]
    pub eta: Vec<f64>,
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub pool_size: Vec<usize>,
    #[serde(default)]
    pub prompt_len: Vec<usize>,
    #[serde(default)]
    pub prompted_layers: Vec<usize>,
    /// Variant preset names.
    #[serde(default)]
    pub variants: Vec<String>,
    #[serde(default)]
    pub root_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eta: f64,
    pub lambda: f64,
    pub pool_size: usize,
    pub prompt_len: usize,
    pub prompted_layers: usize,
    pub variant: String,
    pub root_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub point: SweepPoint,
    pub ap: f64,
    pub fg: Option<f64>,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SweepConfig {
    pub fn points(&self) -> Vec<SweepPoint> {
        let b = &self.base;
        let mut out = Vec::new();
        let seeds: Vec<Option<u64>> = if self.root_seeds.is_empty() {
            vec![None]
        } else {
            self.root_seeds.iter().map(|&s| Some(s)).collect()
        };
        for variant in axis(&self.variants, "config".to_string()) {
            for &eta in &axis(&self.eta, b.stream.eta) {
                for &lambda in &axis(&self.lambda, b.lambda) {
                    for &pool_size in &axis(&self.pool_size, b.prompt.pool_size) {
                        for &prompt_len in &axis(&self.prompt_len, b.prompt.prompt_len) {
                            for &prompted_layers in &axis(&self.prompted_layers, b.prompt.prompted_layers) {
                                for &root_seed in &seeds {
                                    out.push(SweepPoint {
                                        eta,
                                        lambda,
                                        pool_size,
                                        prompt_len,
                                        prompted_layers,
                                        variant: variant.clone(),
                                        root_seed,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn config_for(&self, p: &SweepPoint) -> Result<RunConfig> {
        let mut c = self.base.clone();
        c.stream.eta = p.eta;
        c.lambda = p.lambda;
        c.prompt.pool_size = p.pool_size;
        c.prompt.memory_pool_size = p.pool_size;
        c.prompt.prompt_len = p.prompt_len;
        c.prompt.prompted_layers = p.prompted_layers;
        if p.variant != "config" {
            c.variant = VariantSpec::preset(&p.variant)?;
        }
        if let Some(s) = p.root_seed {
            c = c.with_root_seed(s);
        }
        c.name = format!("{}-{}", self.base.name, p.variant);
        c.validate()?;
        Ok(c)
    }
}

/// Runs every grid point into its own subdirectory of `out` and writes a
/// summary `sweep.csv`. Backbones are built once per distinct seed.
pub fn run_sweep(sweep: &SweepConfig, out: &Path, parallel: bool) -> Result<Vec<SweepRow>> {
    let points = sweep.points();
    if points.is_empty() {
        return Err(config_err("empty sweep"));
    }
    let configs = points.iter().map(|p| sweep.config_for(p)).collect::<Result<Vec<_>>>()?;
    let mut backbones = BTreeMap::new();
    for c in &configs {
        if let Entry::Vacant(slot) = backbones.entry(c.seeds.backbone) {
            let (b, _) = obtain_backbone(c).map_err(|e| e.at_stage("backbone"))?;
            slot.insert(Arc::new(b));
        }
    }
    let run_one = |(i, (p, c)): (usize, (&SweepPoint, &RunConfig))| -> Result<SweepRow> {
        let name = format!("run-{i:03}");
        let dir = out.join(&name);
        let outcome = run_experiment_with(
            c,
            RunOptions {
                backbone: Some(backbones[&c.seeds.backbone].clone()),
                output_dir: Some(dir.clone()),
                ..RunOptions::default()
            },
        )?;
        emit_report(&outcome.report, &dir, outcome.queries.as_deref())?;
        Ok(SweepRow {
            run: name,
            point: p.clone(),
            ap: outcome.report.ap,
            fg: outcome.report.fg,
        })
    };
    let jobs: Vec<_> = points.iter().zip(&configs).enumerate().collect();
    let rows: Vec<SweepRow> = if parallel {
        jobs.into_par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        jobs.into_iter().map(run_one).collect::<Result<_>>()?
    };
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record([
        "run", "variant", "eta", "lambda", "pool_size", "prompt_len", "prompted_layers", "root_seed", "ap", "fg",
    ])?;
    for r in &rows {
        let p = &r.point;
        w.write_record([
            r.run.clone(),
            p.variant.clone(),
            p.eta.to_string(),
            p.lambda.to_string(),
            p.pool_size.to_string(),
            p.prompt_len.to_string(),
            p.prompted_layers.to_string(),
            p.root_seed.map_or(String::new(), |s| s.to_string()),
            r.ap.to_string(),
            r.fg.map_or(String::new(), |f| f.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
