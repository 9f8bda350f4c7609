use crate::config::{RunConfig, SNAPSHOT_FILE};
use crate::plot;
use crate::staging::Staging;
use anyhow::{bail, Context, Result};
use duda_core::checkpoint::file_sha256;
use duda_core::evaluator::{compare, evaluate, EvalReport};
use duda_core::scenegen::{build_dataset, write_atomic, Dataset, Domain, Manifest, Split, MANIFEST_FILE};
use duda_core::trainer::{self, MetricsRow, Mode, METRICS_FILE};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Summary written next to a run's checkpoints.
pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub steps: u64,
    /// Relative to the run directory.
    pub final_checkpoint: String,
    pub final_checkpoint_sha256: String,
    pub best_checkpoint: Option<String>,
    pub best_val_map: Option<f64>,
    pub manifest_sha256: String,
}

impl RunRecord {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(&dir.join(SNAPSHOT_FILE), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

pub fn manifest_summary(m: &Manifest) -> String {
    let mut counts: BTreeMap<(Split, &str), usize> = BTreeMap::new();
    for e in &m.images {
        let domain = match e.domain {
            Domain::SourceClear => "source_clear",
            Domain::TargetAdverse => "target_adverse",
        };
        *counts.entry((e.split, domain)).or_default() += 1;
    }
    let mut s = format!("{} images, master seed {}\n", m.images.len(), m.master_seed);
    for ((split, domain), n) in counts {
        let _ = writeln!(s, "  {:<13} {:<15} {n}", split.name(), domain);
    }
    s
}

/// Build the dataset described by `cfg` into `out` and return the manifest path.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let staging = Staging::new(out)?;
    let manifest = build_dataset(
        &cfg.generation,
        &cfg.corruption,
        &cfg.data.sizes,
        staging.path(),
        cfg.data.seed,
    )?;
    let dest = staging.path().to_path_buf();
    let mut snapshot = cfg.clone();
    snapshot.data.dir = out.to_path_buf();
    write_snapshot(&dest, &snapshot)?;
    let out = staging.commit()?;
    print!("{}", manifest_summary(&manifest));
    Ok(out.join(MANIFEST_FILE))
}

/// Train one model on the dataset in `data_dir`, leaving metrics,
/// checkpoints, the resolved config and a run record in `out`.
pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<RunRecord> {
    let dataset = Dataset::open(data_dir).with_context(|| format!("opening dataset {}", data_dir.display()))?;
    let manifest_sha256 = file_sha256(&data_dir.join(MANIFEST_FILE))?;
    let staging = Staging::new(out)?;
    let summary = trainer::train(&cfg.train, &cfg.model, &dataset, staging.path(), None)?;
    let rel = |p: &Path| -> Result<String> {
        Ok(p.strip_prefix(staging.path())
            .context("checkpoint outside the run directory")?
            .to_string_lossy()
            .into_owned())
    };
    let record = RunRecord {
        mode: cfg.train.mode,
        seed: cfg.train.seed,
        steps: cfg.train.steps,
        final_checkpoint: rel(&summary.final_checkpoint)?,
        final_checkpoint_sha256: file_sha256(&summary.final_checkpoint)?,
        best_checkpoint: summary.best_checkpoint.as_deref().map(rel).transpose()?,
        best_val_map: summary.state.best_val_map,
        manifest_sha256,
    };
    let mut snapshot = cfg.clone();
    snapshot.data.dir = absolute(data_dir);
    snapshot.data.seed = dataset.manifest().master_seed;
    write_snapshot(staging.path(), &snapshot)?;
    write_atomic(
        &staging.path().join(RUN_FILE),
        (serde_json::to_string_pretty(&record)? + "\n").as_bytes(),
    )?;
    staging.commit()?;
    if let Some(last) = summary.rows.last() {
        println!(
            "{} seed {}: {} steps, L_det {:.4}, total {:.4}, final checkpoint {}",
            record.mode, record.seed, last.step, last.l_det, last.total, record.final_checkpoint
        );
    }
    Ok(record)
}

/// A checkpoint file or a run directory, resolved to the checkpoint to
/// score, the default report path and the data directory the run used.
pub struct EvalTarget {
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub run_data_dir: Option<PathBuf>,
}

pub fn resolve_target(path: &Path, split: Split) -> Result<EvalTarget> {
    if path.is_dir() {
        let record = RunRecord::load(path)?;
        let snapshot = RunConfig::load(Some(&path.join(SNAPSHOT_FILE)))?;
        Ok(EvalTarget {
            checkpoint: path.join(&record.final_checkpoint),
            report: path.join(format!("eval_{}.json", split.name())),
            run_data_dir: Some(snapshot.data.dir),
        })
    } else if path.is_file() {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        Ok(EvalTarget {
            checkpoint: path.to_path_buf(),
            report: path.with_file_name(format!("{stem}.eval_{}.json", split.name())),
            run_data_dir: None,
        })
    } else {
        bail!("{} is neither a checkpoint nor a run directory", path.display())
    }
}

pub struct EvalRequest<'a> {
    pub targets: &'a [PathBuf],
    /// Overrides the data directory recorded by each run.
    pub data: Option<&'a Path>,
    pub fallback_data: &'a Path,
    pub split: Split,
    pub out: Option<&'a Path>,
    pub compare: Option<&'a Path>,
}

pub fn eval(req: &EvalRequest) -> Result<Vec<EvalReport>> {
    if req.targets.is_empty() {
        bail!("nothing to evaluate");
    }
    if req.out.is_some() && req.targets.len() > 1 {
        bail!("--out names a single report; drop it when evaluating several targets");
    }
    if !req.split.is_labeled() {
        bail!("split {} has no labels and cannot be evaluated", req.split);
    }
    let mut reports = Vec::new();
    for t in req.targets {
        let target = resolve_target(t, req.split)?;
        let data_dir = req
            .data
            .map(Path::to_path_buf)
            .or(target.run_data_dir)
            .unwrap_or_else(|| req.fallback_data.to_path_buf());
        let dataset = Dataset::open(&data_dir).with_context(|| format!("opening dataset {}", data_dir.display()))?;
        let report = evaluate(&target.checkpoint, &dataset, req.split)?;
        let path = req.out.map(Path::to_path_buf).unwrap_or(target.report);
        write_atomic(&path, report.to_json()?.as_bytes())?;
        print!("{}", report.table());
        println!("  report {}", path.display());
        reports.push(report);
    }
    if let Some(path) = req.compare {
        let cmp = compare(&reports)?;
        write_atomic(path, cmp.to_csv()?.as_bytes())?;
        print!("{}", cmp.to_text());
    }
    Ok(reports)
}

/// Label, mode and seed of a run directory, falling back to its name.
fn describe_run(dir: &Path) -> (String, String, String) {
    let name = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string());
    match RunRecord::load(dir) {
        Ok(r) => (name, r.mode.to_string(), r.seed.to_string()),
        Err(_) => (name, String::new(), String::new()),
    }
}

fn unique(name: String, used: &mut BTreeMap<String, usize>) -> String {
    let n = used.entry(name.clone()).or_default();
    *n += 1;
    if *n == 1 {
        name
    } else {
        format!("{name}_{n}")
    }
}

/// One loss-curve plot per run, a positive-cosine plot per run that
/// measured it, and one mAP bar chart per evaluated split. Every image has a
/// CSV beside it holding exactly the plotted values.
pub fn plot(runs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        bail!("no run directories given");
    }
    let staging = Staging::new(out)?;
    let mut written = Vec::new();
    let mut used = BTreeMap::new();
    let mut bars: BTreeMap<String, Vec<plot::Bar>> = BTreeMap::new();
    for dir in runs {
        let metrics = dir.join(METRICS_FILE);
        let rows: Vec<MetricsRow> =
            trainer::read_metrics(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
        if rows.is_empty() {
            bail!("{} has no rows to plot", metrics.display());
        }
        let (name, mode, seed) = describe_run(dir);
        let name = unique(name, &mut used);
        written.extend(plot::loss_curves(staging.path(), &name, &rows)?);
        written.extend(plot::cosine_curve(staging.path(), &name, &rows)?);
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            if !(file.starts_with("eval_") && file.ends_with(".json")) {
                continue;
            }
            let report: EvalReport = serde_json::from_str(&fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            bars.entry(report.split.clone()).or_default().push(plot::Bar {
                run: name.clone(),
                mode: mode.clone(),
                seed: seed.clone(),
                map50: report.map50,
            });
        }
    }
    for (split, bars) in &bars {
        written.extend(plot::map_bars(staging.path(), split, bars)?);
    }
    let dest = staging.commit()?;
    let written = written
        .into_iter()
        .map(|p| dest.join(p.file_name().unwrap_or_default()))
        .collect::<Vec<_>>();
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}
