//! A single seeded train-and-evaluate run.
//!
//! Runs sharing a seed share the dataset, the model initialization and the
//! shuffle order, so comparing losses at one seed is a paired comparison.

use crate::data::SyntheticDataset;
use crate::error::Result;
use crate::loss::LossConfig;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Arch, ModelSpec};
use crate::telemetry::{weight_norms, GradientLedger, TelemetryRecorder, WeightNorms};
use crate::train::{train, OptimSpec, TrainState};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub report: EvalReport,
    pub active: GradientLedger,
    pub raw: GradientLedger,
    pub final_weight_norms: WeightNorms,
    pub weight_norm_trace: Vec<WeightNorms>,
}

/// Model spec for `data` with the initialization seed set to `seed`.
pub fn model_for(data: &SyntheticDataset, arch: Arch, hidden_dim: usize, seed: u64) -> ModelSpec {
    ModelSpec {
        arch,
        hidden_dim,
        feature_dim: data.train.feature_dim(),
        num_classes: data.train.num_classes(),
        init_seed: seed,
        bias_prior: None,
    }
}

/// Starting probability of the benchmark head's output biases, as in
/// dense detectors whose classifiers begin from a small foreground prior.
pub const BENCHMARK_BIAS_PRIOR: f64 = 0.01;

/// The linear head used by the benchmark comparison.
pub fn benchmark_model(data: &SyntheticDataset, seed: u64) -> ModelSpec {
    model_for(data, Arch::Linear, 0, seed).with_bias_prior(BENCHMARK_BIAS_PRIOR)
}

/// Trains on `data.train` with `recorder` attached and evaluates on
/// `data.test`. The shuffle seed is the model's `init_seed`.
pub fn run(
    data: &SyntheticDataset,
    model: &ModelSpec,
    optim: &OptimSpec,
    loss: &LossConfig,
    mut recorder: TelemetryRecorder<'_>,
) -> Result<RunOutcome> {
    let state = train(
        &data.train,
        model,
        optim,
        loss,
        model.init_seed,
        &mut recorder,
    )?;
    let report = evaluate(&state.model, &data.test, &data.groups)?;
    let final_weight_norms = weight_norms(&state.model)?;
    Ok(RunOutcome {
        report,
        active: recorder.active,
        raw: recorder.raw,
        final_weight_norms,
        weight_norm_trace: recorder.weight_norm_trace,
        state,
    })
}
