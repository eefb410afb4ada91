//! The five subcommands. Each writes its outputs under the configured output
//! directory together with `manifest.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gradlibra::data::{save_csv, DatasetManifest, Group, SyntheticDataset};
use gradlibra::experiment::{run, RunOutcome};
use gradlibra::loss::{LossConfig, LossKind};
use gradlibra::metrics::{evaluate, format_row, EvalReport, TABLE_COLUMNS};
use gradlibra::telemetry::{
    coefficient_of_variation, LedgerSnapshot, TelemetryRecorder, WeightNorms,
};
use gradlibra::train::{OptimSpec, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::{
    materialize, DatasetSource, ExperimentConfig, DATASET_MANIFEST, TEST_CSV, TRAIN_CSV,
};
use crate::error::{CliError, Result};
use crate::pool::{par_map, thread_cap};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub optim: OptimSpec,
    pub loss: LossConfig,
    pub state: TrainState,
}

/// One (loss, seed) run of `compare` or `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub loss: LossConfig,
    pub seed: u64,
    pub report: EvalReport,
    pub active_loss: LedgerSnapshot,
    pub raw_ce: LedgerSnapshot,
    /// `|ln r|` per class from the active-loss ledger; `None` when r is 0
    /// or infinite.
    pub abs_log_r: Vec<Option<f64>>,
    pub final_weight_norms: WeightNorms,
    pub weight_norm_cv: f64,
    pub rare_classes: Vec<usize>,
}

impl RunSummary {
    fn new(loss: &LossConfig, seed: u64, data: &SyntheticDataset, out: RunOutcome) -> Self {
        let active_loss = out.active.snapshot();
        let abs_log_r = out
            .active
            .ratio()
            .into_iter()
            .map(|r| {
                let v = r.ln().abs();
                v.is_finite().then_some(v)
            })
            .collect();
        RunSummary {
            loss: loss.clone(),
            seed,
            report: out.report,
            raw_ce: out.raw.snapshot(),
            active_loss,
            abs_log_r,
            weight_norm_cv: coefficient_of_variation(&out.final_weight_norms.normalized),
            final_weight_norms: out.final_weight_norms,
            rare_classes: data.groups.classes_in(Group::Rare),
        }
    }

    /// Mean `|ln r|` over the rare classes; `None` if any is undefined.
    pub fn rare_abs_log_r(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self
            .rare_classes
            .iter()
            .map(|&i| self.abs_log_r[i])
            .collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Output {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Output {
            path: path.to_path_buf(),
            source,
        })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|source| CliError::Output {
            path: path.to_path_buf(),
            source,
        })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(gradlibra::Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_manifest(cfg: &ExperimentConfig, command: &str, checkpoint: Option<&Path>) -> Result<()> {
    write_json(
        &cfg.output_dir.join("manifest.json"),
        &Manifest {
            tool: "gradlibra".into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            config: cfg.clone(),
            checkpoint: checkpoint.map(Path::to_path_buf),
        },
    )
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed-{seed}"))
}

/// Runs `f` per item on the worker pool and returns the first error in
/// input order.
fn par_try<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    par_map(items, thread_cap()?, f).into_iter().collect()
}

/// Writes `seed-<s>/{train.csv, test.csv, dataset.json}` per seed.
pub fn generate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    par_try(&cfg.seeds, |&seed| {
        let source = cfg.dataset_for_seed(seed);
        let data = materialize(&source)?;
        let dir = seed_dir(cfg, seed);
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Output {
            path: dir.clone(),
            source,
        })?;
        save_csv(&data.train, &dir.join(TRAIN_CSV))?;
        save_csv(&data.test, &dir.join(TEST_CSV))?;
        let spec = match &source {
            DatasetSource::Spec(spec) => spec.clone(),
            DatasetSource::Dir(d) => {
                let text = std::fs::read_to_string(d.join(DATASET_MANIFEST))
                    .map_err(|e| CliError::Data(e.to_string()))?;
                serde_json::from_str::<DatasetManifest>(&text)
                    .map_err(|e| CliError::Data(e.to_string()))?
                    .spec
            }
        };
        write_json(
            &dir.join(DATASET_MANIFEST),
            &DatasetManifest::new(&spec, &data),
        )
    })?;
    write_manifest(cfg, "generate", None)
}

/// Trains `cfg.loss` per seed into `seed-<s>/{checkpoint.json, telemetry.jsonl}`.
pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    par_try(&cfg.seeds, |&seed| {
        let source = cfg.dataset_for_seed(seed);
        let data = materialize(&source)?;
        let model = cfg.model_spec(&data, seed);
        let dir = seed_dir(cfg, seed);
        let telemetry_path = dir.join("telemetry.jsonl");
        let mut sink = create(&telemetry_path)?;
        let recorder = TelemetryRecorder::new(model.num_classes, cfg.telemetry_mode)
            .with_stride(cfg.telemetry_stride)
            .with_sink(&mut sink);
        let outcome = run(&data, &model, &cfg.optim, &cfg.loss, recorder)?;
        log::info!(
            "trained seed {seed} for {} iterations",
            outcome.state.iteration
        );
        sink.flush().map_err(|source| CliError::Output {
            path: telemetry_path,
            source,
        })?;
        write_json(
            &dir.join("checkpoint.json"),
            &Checkpoint {
                format_version: CHECKPOINT_FORMAT_VERSION,
                tool_version: TOOL_VERSION.into(),
                seed,
                dataset: source,
                optim: cfg.optim.clone(),
                loss: cfg.loss.clone(),
                state: outcome.state,
            },
        )
    })?;
    write_manifest(cfg, "train", None)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if ck.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CliError::Data(format!(
            "{}: checkpoint format {} is not supported",
            path.display(),
            ck.format_version
        )));
    }
    Ok(ck)
}

fn eval_checkpoint(path: &Path, out_dir: &Path) -> Result<EvalReport> {
    let ck = load_checkpoint(path)?;
    let data = materialize(&ck.dataset)?;
    let report = evaluate(&ck.state.model, &data.test, &data.groups)?;
    write_json(&out_dir.join("report.json"), &report)?;
    write_text(
        &out_dir.join("report.csv"),
        &format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row()),
    )?;
    Ok(report)
}

/// Evaluates `checkpoint`, or every seed's checkpoint under the output
/// directory, writing `report.json` and `report.csv`.
pub fn eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<EvalReport>> {
    let reports = match checkpoint {
        Some(path) => vec![eval_checkpoint(path, &cfg.output_dir)?],
        None => {
            cfg.validate()?;
            par_try(&cfg.seeds, |&seed| {
                let dir = seed_dir(cfg, seed);
                eval_checkpoint(&dir.join("checkpoint.json"), &dir)
            })?
        }
    };
    write_manifest(cfg, "eval", checkpoint)?;
    Ok(reports)
}

fn loss_label(loss: &LossConfig) -> String {
    match loss.kind {
        LossKind::GradLibra => {
            format!("{}-{}-{}", loss.kind.name(), loss.alpha_pos, loss.alpha_neg)
        }
        _ => loss.kind.name().to_string(),
    }
}

/// Runs every (seed, loss) pair. Pairs sharing a seed share the dataset and
/// the initialization.
fn run_grid(
    cfg: &ExperimentConfig,
    losses: &[LossConfig],
    telemetry_dir: &str,
) -> Result<Vec<RunSummary>> {
    let datasets: Vec<SyntheticDataset> =
        par_try(&cfg.seeds, |&seed| materialize(&cfg.dataset_for_seed(seed)))?;
    let jobs: Vec<(usize, &LossConfig)> = (0..cfg.seeds.len())
        .flat_map(|s| losses.iter().map(move |l| (s, l)))
        .collect();
    par_try(&jobs, |&(s, loss)| {
        let (seed, data) = (cfg.seeds[s], &datasets[s]);
        let model = cfg.model_spec(data, seed);
        let path = cfg
            .output_dir
            .join(telemetry_dir)
            .join(format!("{}-seed-{seed}.jsonl", loss_label(loss)));
        let mut sink = create(&path)?;
        let recorder = TelemetryRecorder::new(model.num_classes, cfg.telemetry_mode)
            .with_stride(cfg.telemetry_stride)
            .with_sink(&mut sink);
        let outcome = run(data, &model, &cfg.optim, loss, recorder)?;
        log::info!(
            "{} seed {seed}: mAP {:?}",
            loss_label(loss),
            outcome.report.map
        );
        sink.flush()
            .map_err(|source| CliError::Output { path, source })?;
        Ok(RunSummary::new(loss, seed, data, outcome))
    })
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    let v = v?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn alpha_cells(loss: &LossConfig) -> String {
    if loss.kind == LossKind::GradLibra {
        format!("{},{}", loss.alpha_pos, loss.alpha_neg)
    } else {
        ",".into()
    }
}

/// Per-seed rows plus one mean row per loss.
pub fn comparison_csv(losses: &[LossConfig], runs: &[RunSummary]) -> String {
    let mut out = format!(
        "loss,alpha_pos,alpha_neg,seed,{},rare_abs_log_r,weight_norm_cv\n",
        TABLE_COLUMNS.join(",")
    );
    let row = |label: &str,
               loss: &LossConfig,
               seed: &str,
               cells: &[Option<f64>],
               extra: [Option<f64>; 2]| {
        format!(
            "{label},{},{seed},{},{},{}\n",
            alpha_cells(loss),
            format_row(cells),
            opt_cell(extra[0]),
            opt_cell(extra[1])
        )
    };
    for r in runs {
        out += &row(
            r.loss.kind.name(),
            &r.loss,
            &r.seed.to_string(),
            &r.report.table_row(),
            [r.rare_abs_log_r(), Some(r.weight_norm_cv)],
        );
    }
    for loss in losses {
        let mine: Vec<&RunSummary> = runs.iter().filter(|r| &r.loss == loss).collect();
        let cells: Vec<Option<f64>> = (0..TABLE_COLUMNS.len())
            .map(|j| mean_of(mine.iter().map(|r| r.report.table_row()[j])))
            .collect();
        let extra = [
            mean_of(mine.iter().map(|r| r.rare_abs_log_r())),
            mean_of(mine.iter().map(|r| Some(r.weight_norm_cv))),
        ];
        out += &row(loss.kind.name(), loss, "mean", &cells, extra);
    }
    out
}

/// Trains every loss in `cfg.compare` on every seed; writes
/// `comparison.csv`, `comparison.json` and per-run telemetry.
pub fn compare(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let runs = run_grid(cfg, &cfg.compare, "compare")?;
    write_text(
        &cfg.output_dir.join("comparison.csv"),
        &comparison_csv(&cfg.compare, &runs),
    )?;
    write_json(&cfg.output_dir.join("comparison.json"), &runs)?;
    write_manifest(cfg, "compare", None)?;
    Ok(runs)
}

/// The Grad-Libra configurations of the sweep grid, on top of `cfg.loss`.
pub fn sweep_losses(cfg: &ExperimentConfig) -> Vec<LossConfig> {
    let base = match cfg.loss.kind {
        LossKind::GradLibra => cfg.loss.clone(),
        _ => LossConfig::default(),
    };
    let mut out = Vec::new();
    for &ap in &cfg.sweep.alpha_pos {
        for &an in &cfg.sweep.alpha_neg {
            out.push(LossConfig {
                alpha_pos: ap,
                alpha_neg: an,
                alpha_unified: None,
                ..base.clone()
            });
        }
    }
    out
}

/// One row per grid point per seed in `sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let losses = sweep_losses(cfg);
    let runs = run_grid(cfg, &losses, "sweep")?;
    let mut csv = format!("alpha_pos,alpha_neg,seed,{}\n", TABLE_COLUMNS.join(","));
    for r in &runs {
        csv += &format!(
            "{},{},{},{}\n",
            r.loss.alpha_pos,
            r.loss.alpha_neg,
            r.seed,
            r.report.csv_row()
        );
    }
    write_text(&cfg.output_dir.join("sweep.csv"), &csv)?;
    write_manifest(cfg, "sweep", None)?;
    Ok(runs)
}
