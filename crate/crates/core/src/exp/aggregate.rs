use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::svg;
use super::{Treatment, CSV_SCHEMA};
use crate::error::{Error, Result};
use crate::evalstats::{iqm, stratified_bootstrap_ci, ScoreMatrix};

pub const METRIC_COLUMNS: [&str; 8] = [
    "sparsity_global",
    "sparsity_actor",
    "sparsity_critic",
    "sparsity_trunk",
    "fisher_trace",
    "effective_rank",
    "dormant_actor_pct",
    "dormant_critic_pct",
];

const KEY_COLUMNS: [&str; 5] = ["run_id", "seed", "treatment", "epoch", "timestep"];

pub const BOOTSTRAP_REPLICATES: usize = 2000;
pub const CI_LEVEL: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub timestep: u64,
    pub eval: Option<Vec<f64>>,
    pub metrics: [Option<f64>; 8],
}

/// One parsed run CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub path: PathBuf,
    pub run_id: String,
    pub seed: u64,
    pub treatment: Treatment,
    pub tasks: Vec<String>,
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn metric(&self, name: &str) -> Option<Vec<(usize, Option<f64>)>> {
        let i = METRIC_COLUMNS.iter().position(|&c| c == name)?;
        Some(self.rows.iter().map(|r| (r.epoch, r.metrics[i])).collect())
    }
}

fn schema_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

fn parse_opt(path: &Path, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| schema_err(path, format!("`{s}` is not a number")))
}

pub fn read_run_log(path: &Path) -> Result<RunLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    if first.trim_end() != CSV_SCHEMA {
        return Err(schema_err(path, format!("expected schema line `{CSV_SCHEMA}`")));
    }
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| schema_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let n = header.len();
    let m = n.checked_sub(KEY_COLUMNS.len() + METRIC_COLUMNS.len()).unwrap_or(0);
    let ok = n >= KEY_COLUMNS.len() + METRIC_COLUMNS.len() + 1
        && header[..5] == KEY_COLUMNS
        && header[5..5 + m].iter().all(|c| c.starts_with("eval_"))
        && header[5 + m..] == METRIC_COLUMNS;
    if !ok {
        return Err(schema_err(path, "column header does not match schema v1"));
    }
    let tasks: Vec<String> = header[5..5 + m].iter().map(|c| c["eval_".len()..].to_string()).collect();
    let mut rows = Vec::new();
    let mut ident: Option<(String, u64, Treatment)> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| schema_err(path, e))?;
        if rec.len() != n {
            return Err(schema_err(path, "row length differs from header"));
        }
        let seed = rec[1].parse::<u64>().map_err(|_| schema_err(path, "bad seed"))?;
        let treatment = Treatment::parse(&rec[2]).map_err(|e| schema_err(path, e))?;
        let id = (rec[0].to_string(), seed, treatment);
        match &ident {
            None => ident = Some(id),
            Some(prev) if *prev != id => return Err(schema_err(path, "rows mix several runs")),
            _ => {}
        }
        let epoch = rec[3].parse().map_err(|_| schema_err(path, "bad epoch"))?;
        let timestep = rec[4].parse().map_err(|_| schema_err(path, "bad timestep"))?;
        let evals: Vec<Option<f64>> = (0..m).map(|j| parse_opt(path, &rec[5 + j])).collect::<Result<_>>()?;
        let eval = if evals.iter().all(Option::is_some) {
            Some(evals.into_iter().flatten().collect())
        } else if evals.iter().all(Option::is_none) {
            None
        } else {
            return Err(schema_err(path, format!("epoch {epoch} has a partial eval row")));
        };
        let mut metrics = [None; 8];
        for (k, slot) in metrics.iter_mut().enumerate() {
            *slot = parse_opt(path, &rec[5 + m + k])?;
        }
        rows.push(LogRow { epoch, timestep, eval, metrics });
    }
    let Some((run_id, seed, treatment)) = ident else {
        return Err(schema_err(path, "no epoch rows"));
    };
    Ok(RunLog { path: path.to_path_buf(), run_id, seed, treatment, tasks, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub epoch: usize,
    pub timestep: u64,
    pub point: f64,
    pub low: f64,
    pub high: f64,
}

pub type MetricSeries = Vec<SeriesPoint>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentAggregate {
    pub label: String,
    pub treatment: Treatment,
    pub tasks: Vec<String>,
    pub run_ids: Vec<String>,
    /// Normalized eval IQM over runs × tasks per evaluated epoch.
    pub eval: MetricSeries,
    pub metrics: BTreeMap<String, MetricSeries>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub schema: u32,
    pub replicates: usize,
    pub level: f64,
    pub treatments: Vec<TreatmentAggregate>,
}

fn interval(scores: Vec<Vec<f64>>) -> Result<(f64, f64, f64)> {
    let sm = ScoreMatrix::new(scores)?;
    if sm.runs() == 1 {
        let p = iqm(&sm.pooled())?;
        return Ok((p, p, p));
    }
    let r = stratified_bootstrap_ci(&sm, BOOTSTRAP_REPLICATES, CI_LEVEL, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok((r.point, r.low, r.high))
}

/// Epochs where every run has a value, with `scores[run]` per epoch.
fn aligned<F>(runs: &[RunLog], pick: F) -> Vec<(usize, u64, Vec<Vec<f64>>)>
where
    F: Fn(&LogRow) -> Option<Vec<f64>>,
{
    let mut out = Vec::new();
    for row in &runs[0].rows {
        let mut scores = Vec::with_capacity(runs.len());
        for run in runs {
            match run.rows.iter().find(|r| r.epoch == row.epoch).and_then(&pick) {
                Some(v) => scores.push(v),
                None => break,
            }
        }
        if scores.len() == runs.len() {
            out.push((row.epoch, row.timestep, scores));
        }
    }
    out
}

fn series(points: Vec<(usize, u64, Vec<Vec<f64>>)>) -> Result<MetricSeries> {
    points
        .into_iter()
        .map(|(epoch, timestep, s)| {
            let (point, low, high) = interval(s)?;
            Ok(SeriesPoint { epoch, timestep, point, low, high })
        })
        .collect()
}

pub fn aggregate_runs(mut runs: Vec<RunLog>) -> Result<Aggregate> {
    if runs.is_empty() {
        return Err(Error::Data("no run logs to aggregate".into()));
    }
    runs.sort_by(|a, b| (a.treatment, &a.tasks, a.seed, &a.run_id).cmp(&(b.treatment, &b.tasks, b.seed, &b.run_id)));
    let mut groups: BTreeMap<(Treatment, Vec<String>), Vec<RunLog>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.treatment, r.tasks.clone())).or_default().push(r);
    }
    let several_task_sets = groups.keys().map(|k| &k.1).collect::<std::collections::BTreeSet<_>>().len() > 1;
    let mut treatments = Vec::new();
    for ((treatment, tasks), runs) in groups {
        let label = if several_task_sets {
            format!("{treatment} [{}]", tasks.join(","))
        } else {
            treatment.to_string()
        };
        if runs.len() == 1 {
            log::warn!("{label}: a single run, intervals collapse to the point estimate");
        }
        let eval = series(aligned(&runs, |r| r.eval.clone()))?;
        let mut metrics = BTreeMap::new();
        for (k, name) in METRIC_COLUMNS.iter().enumerate() {
            metrics.insert(name.to_string(), series(aligned(&runs, |r| r.metrics[k].map(|v| vec![v])))?);
        }
        treatments.push(TreatmentAggregate {
            label,
            treatment,
            tasks,
            run_ids: runs.iter().map(|r| r.run_id.clone()).collect(),
            eval,
            metrics,
        });
    }
    Ok(Aggregate { schema: 1, replicates: BOOTSTRAP_REPLICATES, level: CI_LEVEL, treatments })
}

fn collect_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_csvs(&path, out)?;
        } else if path.extension().is_some_and(|x| x == "csv") {
            out.push(path);
        }
    }
    Ok(())
}

/// Read every run CSV under `dir`, write `aggregate.json`,
/// `learning_curve.svg` and `plasticity.svg` into `out`.
pub fn aggregate_dir(dir: &Path, out: &Path) -> Result<Aggregate> {
    let mut files = Vec::new();
    collect_csvs(dir, &mut files)?;
    files.sort();
    let runs = files.iter().map(|p| read_run_log(p)).collect::<Result<Vec<_>>>()?;
    let agg = aggregate_runs(runs)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, body: String| {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("aggregate.json", serde_json::to_string_pretty(&agg)?)?;
    write("learning_curve.svg", svg::learning_curve(&agg))?;
    write("plasticity.svg", svg::plasticity_panels(&agg))?;
    Ok(agg)
}
