//! Experiment configs, the treatment registry, multi-seed runs with CSV
//! logs, and aggregation into JSON and SVG reports.

mod aggregate;
mod svg;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{ArchKind, ArchitectureSpec};
use crate::autodiff::checkpoint;
use crate::envs::{resolve_tasks, TaskContext};
use crate::error::{Error, Result};
use crate::plasticity::{RedoConfig, ResetConfig};
use crate::ppo::{EpochRecord, HookConfig, MetricsConfig, PpoConfig, Trainer, TrainerConfig};
use crate::sparsity::{GmpConfig, SetConfig};

pub use aggregate::{
    aggregate_dir, read_run_log, Aggregate, MetricSeries, RunLog, SeriesPoint, TreatmentAggregate, METRIC_COLUMNS,
};

/// Relative `output_dir`s are resolved against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "MTSPARSE_OUTPUT_ROOT";

pub const CSV_SCHEMA: &str = "# mtsparse run log schema v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Treatment {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "gmp")]
    Gmp,
    #[serde(rename = "set")]
    Set,
    #[serde(rename = "redo")]
    Redo,
    #[serde(rename = "reset")]
    Reset,
    #[serde(rename = "weight_decay")]
    WeightDecay,
    #[serde(rename = "layernorm")]
    LayerNorm,
    #[serde(rename = "gmp+wd")]
    GmpWd,
    #[serde(rename = "gmp+pcgrad")]
    GmpPcgrad,
    #[serde(rename = "pcgrad")]
    Pcgrad,
}

impl Treatment {
    pub const ALL: [Treatment; 10] = [
        Treatment::Dense,
        Treatment::Gmp,
        Treatment::Set,
        Treatment::Redo,
        Treatment::Reset,
        Treatment::WeightDecay,
        Treatment::LayerNorm,
        Treatment::GmpWd,
        Treatment::GmpPcgrad,
        Treatment::Pcgrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Treatment::Dense => "dense",
            Treatment::Gmp => "gmp",
            Treatment::Set => "set",
            Treatment::Redo => "redo",
            Treatment::Reset => "reset",
            Treatment::WeightDecay => "weight_decay",
            Treatment::LayerNorm => "layernorm",
            Treatment::GmpWd => "gmp+wd",
            Treatment::GmpPcgrad => "gmp+pcgrad",
            Treatment::Pcgrad => "pcgrad",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Treatment::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Treatment::ALL.iter().map(|t| t.name()).collect();
            Error::config(format!("treatment: unknown treatment `{s}`, expected one of {}", names.join(", ")))
        })
    }

    fn uses_gmp(self) -> bool {
        matches!(self, Treatment::Gmp | Treatment::GmpWd | Treatment::GmpPcgrad)
    }

    fn uses_wd(self) -> bool {
        matches!(self, Treatment::WeightDecay | Treatment::GmpWd)
    }

    fn uses_pcgrad(self) -> bool {
        matches!(self, Treatment::Pcgrad | Treatment::GmpPcgrad)
    }
}

impl fmt::Display for Treatment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_arch() -> ArchitectureSpec {
    ArchitectureSpec::new(ArchKind::Mtppo)
}

fn default_wd() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// `MT2`, `MT3`, `MT5` or a single task name.
    pub benchmark: String,
    #[serde(default = "default_arch")]
    pub arch: ArchitectureSpec,
    pub treatment: Treatment,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub gmp: GmpConfig,
    #[serde(default)]
    pub set: SetConfig,
    #[serde(default)]
    pub redo: RedoConfig,
    #[serde(default)]
    pub reset: ResetConfig,
    /// Used only by the weight-decay treatments.
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub seeds: Vec<u64>,
    /// Overrides `ppo.epochs`; must be a multiple of `ppo.steps_per_epoch`.
    #[serde(default)]
    pub total_timesteps: Option<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parse JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.normalize()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn normalize(&mut self) -> Result<()> {
        if let Some(t) = self.total_timesteps {
            let spe = self.ppo.steps_per_epoch as u64;
            if spe == 0 || t == 0 || t % spe != 0 {
                return Err(Error::config(format!(
                    "total_timesteps: {t} is not a positive multiple of ppo.steps_per_epoch ({spe})"
                )));
            }
            self.ppo.epochs = (t / spe) as usize;
        }
        if self.treatment == Treatment::LayerNorm {
            self.arch.layer_norm = true;
        }
        Ok(())
    }

    /// Everything a run needs is checked here, before any compute.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::Config(m) => Error::config(format!("{name}: {m}")),
            other => other,
        };
        resolve_tasks(&self.benchmark).map_err(|e| field("benchmark", e))?;
        self.arch.validate().map_err(|e| field("arch", e))?;
        self.ppo.validate().map_err(|e| field("ppo", e))?;
        self.metrics.validate().map_err(|e| field("metrics", e))?;
        if self.treatment.uses_gmp() {
            self.gmp.validate().map_err(|e| field("gmp", e))?;
        }
        if self.treatment == Treatment::Set {
            self.set.validate().map_err(|e| field("set", e))?;
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay: must be non-negative"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds: at least one seed is required"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds: seeds must be distinct"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir: must not be empty"));
        }
        Ok(())
    }

    pub fn tasks(&self) -> Result<Vec<TaskContext>> {
        resolve_tasks(&self.benchmark)
    }

    pub fn hooks(&self) -> HookConfig {
        let t = self.treatment;
        HookConfig {
            gmp: t.uses_gmp().then(|| self.gmp.clone()),
            set: (t == Treatment::Set).then(|| self.set.clone()),
            redo: (t == Treatment::Redo).then(|| self.redo.clone()),
            reset: (t == Treatment::Reset).then(|| self.reset.clone()),
            pcgrad: t.uses_pcgrad(),
        }
    }

    pub fn trainer_config(&self, seed: u64) -> Result<TrainerConfig> {
        Ok(TrainerConfig {
            arch: self.arch.clone(),
            tasks: self.tasks()?,
            ppo: self.ppo.clone(),
            weight_decay: if self.treatment.uses_wd() { self.weight_decay } else { 0.0 },
            hooks: self.hooks(),
            metrics: self.metrics.clone(),
            seed,
        })
    }

    pub fn run_id(&self, seed: u64) -> String {
        let arch = match self.arch.kind {
            ArchKind::Mtppo => "mtppo",
            ArchKind::Moe => "moe",
            ArchKind::Moore => "moore",
        };
        let treatment = self.treatment.name().replace('+', "-");
        format!("{treatment}_{}_{arch}_s{seed}", self.benchmark)
    }

    /// `output_dir`, joined onto the output root when relative.
    pub fn resolved_output(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// CSV column names for the given tasks.
pub fn csv_columns(tasks: &[TaskContext]) -> Vec<String> {
    let mut cols: Vec<String> = ["run_id", "seed", "treatment", "epoch", "timestep"].map(String::from).to_vec();
    cols.extend(tasks.iter().map(|t| format!("eval_{}", t.name)));
    cols.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
    cols
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_row(run_id: &str, seed: u64, treatment: Treatment, rec: &EpochRecord, num_tasks: usize) -> Vec<String> {
    let mut row = vec![
        run_id.to_string(),
        seed.to_string(),
        treatment.name().to_string(),
        rec.epoch.to_string(),
        rec.timestep.to_string(),
    ];
    match &rec.eval {
        Some(e) => row.extend(e.iter().map(f64::to_string)),
        None => row.extend(std::iter::repeat_n(String::new(), num_tasks)),
    }
    row.extend([
        rec.sparsity_global.to_string(),
        rec.sparsity_actor.to_string(),
        rec.sparsity_critic.to_string(),
        rec.sparsity_trunk.to_string(),
        opt(rec.fisher_trace),
        opt(rec.effective_rank),
        opt(rec.dormant_actor.map(|d| d * 100.0)),
        opt(rec.dormant_critic.map(|d| d * 100.0)),
    ]);
    row
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub run_id: String,
    pub seed: u64,
    pub status: RunStatus,
    pub epochs_completed: usize,
    pub csv: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub treatment: Treatment,
    pub benchmark: String,
    pub runs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn all_completed(&self) -> bool {
        self.runs.iter().all(|r| r.status == RunStatus::Completed)
    }
}

/// Train one seed to completion, writing and flushing a CSV row per epoch.
/// On failure the rows written so far stay on disk.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, out: &Path) -> ManifestEntry {
    let run_id = cfg.run_id(seed);
    let csv_path = out.join(format!("{run_id}.csv"));
    let mut entry = ManifestEntry {
        run_id: run_id.clone(),
        seed,
        status: RunStatus::Failed,
        epochs_completed: 0,
        csv: csv_path.clone(),
        checkpoint: None,
        error: None,
    };
    let res = (|| -> Result<PathBuf> {
        let tc = cfg.trainer_config(seed)?;
        let num_tasks = tc.tasks.len();
        let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut sink = BufWriter::new(file);
        writeln!(sink, "{CSV_SCHEMA}").map_err(|e| Error::io(&csv_path, e))?;
        let mut w = csv::Writer::from_writer(sink);
        let csv_err = |e: csv::Error| Error::Data(format!("writing {}: {e}", csv_path.display()));
        w.write_record(csv_columns(&tc.tasks)).map_err(csv_err)?;
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let mut tr = Trainer::new(tc)?;
        while !tr.is_finished() {
            let rec = tr.train_epoch()?;
            w.write_record(csv_row(&run_id, seed, cfg.treatment, &rec, num_tasks)).map_err(csv_err)?;
            w.flush().map_err(|e| Error::io(&csv_path, e))?;
            entry.epochs_completed = rec.epoch;
            log::info!("{run_id}: epoch {} eval {:?}", rec.epoch, rec.eval);
        }
        let stem = out.join(format!("{run_id}-final"));
        checkpoint::save(&tr.net.store, &stem)?;
        Ok(stem)
    })();
    match res {
        Ok(stem) => {
            entry.status = RunStatus::Completed;
            entry.checkpoint = Some(stem.with_extension("bin"));
        }
        Err(e) => {
            log::error!("{run_id} failed: {e}");
            entry.error = Some(e.to_string());
        }
    }
    entry
}

/// Run every seed (shifted by `seed_offset`) on up to `jobs` threads and
/// write `manifest.json` plus the resolved config into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize, seed_offset: u64) -> Result<Manifest> {
    cfg.validate()?;
    let seeds: Vec<u64> = cfg
        .seeds
        .iter()
        .map(|&s| {
            s.checked_add(seed_offset)
                .ok_or_else(|| Error::config(format!("seeds: {s} + offset {seed_offset} overflows")))
        })
        .collect::<Result<_>>()?;
    let out = cfg.resolved_output();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let resolved = out.join("config.json");
    fs::write(&resolved, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&resolved, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let runs: Vec<ManifestEntry> = pool.install(|| {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| run_seed(cfg, s, &out)).collect()
    });
    let manifest = Manifest {
        treatment: cfg.treatment,
        benchmark: cfg.benchmark.clone(),
        runs,
    };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> &'static str {
        r#"{"benchmark": "MT2", "treatment": "gmp", "seeds": [0, 1], "output_dir": "x"}"#
    }

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::from_json(base()).unwrap();
        assert_eq!(c.treatment, Treatment::Gmp);
        assert!(c.hooks().gmp.is_some());
        assert_eq!(c.trainer_config(0).unwrap().weight_decay, 0.0);
    }

    #[test]
    fn unknown_treatment_names_field() {
        let err = ExperimentConfig::from_json(&base().replace("\"gmp\"", "\"prune\"")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("treatment"), "{err}");
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let err = ExperimentConfig::from_json(&base().replace("[0, 1]", "[3, 3]")).unwrap_err();
        assert!(err.to_string().contains("seeds"));
    }

    #[test]
    fn total_timesteps_sets_epochs() {
        let c = ExperimentConfig::from_json(&base().replace("\"x\"", "\"x\", \"total_timesteps\": 120000")).unwrap();
        assert_eq!(c.ppo.epochs, 60);
        assert!(ExperimentConfig::from_json(&base().replace("\"x\"", "\"x\", \"total_timesteps\": 1234")).is_err());
    }

    #[test]
    fn treatment_registry_round_trips() {
        for t in Treatment::ALL {
            assert_eq!(Treatment::parse(t.name()).unwrap(), t);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(json, format!("\"{}\"", t.name()));
        }
        let c = ExperimentConfig::from_json(&base().replace("\"gmp\"", "\"layernorm\"")).unwrap();
        assert!(c.arch.layer_norm);
        let c = ExperimentConfig::from_json(&base().replace("\"gmp\"", "\"gmp+wd\"")).unwrap();
        assert_eq!(c.trainer_config(0).unwrap().weight_decay, 1e-6);
    }
}
