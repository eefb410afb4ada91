//! Gradient-balance telemetry.
//!
//! [`GradientLedger`] keeps, per class, the running sums over iterations of
//! the absolute batch-mean gradient on the logit from positives and from
//! negatives. Their ratio `r = pos_sum / neg_sum` sits near 1 for a class
//! trained in balance and near 0 for a class whose positives are swamped.
//!
//! Two readings of "gradient" are supported:
//!
//! * [`LedgerMode::RawCe`] uses the cross-entropy gradient `p - y`
//!   regardless of the loss being trained, so it depends only on `p` and `y`.
//! * [`LedgerMode::ActiveLoss`] uses the logit gradient of the loss actually
//!   being optimized.
//!
//! Under cross-entropy training the two coincide.

use std::io::Write;

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{Labels, Probs};
use crate::model::Model;
use crate::train::{EpochEvent, IterationEvent, TrainObserver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LedgerMode {
    RawCe,
    ActiveLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientLedger {
    pub pos_sum: Vec<f64>,
    pub neg_sum: Vec<f64>,
    pub iteration: u64,
    pub mode: LedgerMode,
}

impl GradientLedger {
    pub fn new(num_classes: usize, mode: LedgerMode) -> Self {
        GradientLedger {
            pos_sum: vec![0.0; num_classes],
            neg_sum: vec![0.0; num_classes],
            iteration: 0,
            mode,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.pos_sum.len()
    }

    /// Adds one batch. `grad_logits` is the gradient of the batch-mean loss
    /// (already carrying `1/N`); it is only read in `ActiveLoss` mode.
    pub fn accumulate(
        &mut self,
        p: &Probs,
        y: &Labels,
        grad_logits: ArrayView2<'_, f64>,
    ) -> Result<()> {
        let c = self.num_classes();
        if p.dim() != y.dim() || p.dim().1 != c {
            return Err(Error::Dimension(format!(
                "ledger has {c} classes, got probabilities {:?} and labels {:?}",
                p.dim(),
                y.dim()
            )));
        }
        if self.mode == LedgerMode::ActiveLoss && grad_logits.dim() != p.dim() {
            return Err(Error::Dimension(format!(
                "logit gradient {:?} vs probabilities {:?}",
                grad_logits.dim(),
                p.dim()
            )));
        }
        let n = p.dim().0;
        let mut pos = vec![0.0; c];
        let mut neg = vec![0.0; c];
        match self.mode {
            LedgerMode::RawCe => {
                Zip::indexed(p.view())
                    .and(y.view())
                    .for_each(|(_, i), &p, &y| {
                        if y == 1.0 {
                            pos[i] += p - 1.0;
                        } else {
                            neg[i] += p;
                        }
                    });
                if n > 0 {
                    let inv = 1.0 / n as f64;
                    pos.iter_mut().chain(neg.iter_mut()).for_each(|v| *v *= inv);
                }
            }
            LedgerMode::ActiveLoss => {
                Zip::indexed(grad_logits)
                    .and(y.view())
                    .for_each(|(_, i), &g, &y| {
                        if y == 1.0 {
                            pos[i] += g;
                        } else {
                            neg[i] += g;
                        }
                    });
            }
        }
        for i in 0..c {
            self.pos_sum[i] += pos[i].abs();
            self.neg_sum[i] += neg[i].abs();
        }
        self.iteration += 1;
        Ok(())
    }

    /// `pos_sum / neg_sum` per class; `+inf` where nothing negative has
    /// accumulated.
    pub fn ratio(&self) -> Vec<f64> {
        self.pos_sum
            .iter()
            .zip(&self.neg_sum)
            .map(|(&p, &n)| if n == 0.0 { f64::INFINITY } else { p / n })
            .collect()
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let r = self.ratio();
        LedgerSnapshot {
            pos_sum: self.pos_sum.clone(),
            neg_sum: self.neg_sum.clone(),
            r_infinite: r.iter().map(|v| v.is_infinite()).collect(),
            r: r.into_iter().map(|v| v.is_finite().then_some(v)).collect(),
        }
    }
}

/// Serializable ledger state. Infinite ratios are written as `null` with
/// `r_infinite` set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub pos_sum: Vec<f64>,
    pub neg_sum: Vec<f64>,
    pub r: Vec<Option<f64>>,
    pub r_infinite: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNorms {
    /// Row norms divided by their mean.
    pub normalized: Vec<f64>,
    /// Every row was zero; `normalized` is all ones.
    pub degenerate: bool,
}

/// L2 norm of each class row of the last layer, divided by the mean norm.
pub fn weight_norms(model: &Model) -> Result<WeightNorms> {
    let w = model.classifier_weights();
    if w.nrows() != model.spec.num_classes {
        return Err(Error::UnsupportedArch(format!(
            "last layer has {} rows for {} classes",
            w.nrows(),
            model.spec.num_classes
        )));
    }
    let norms: Vec<f64> = w
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    if mean == 0.0 {
        return Ok(WeightNorms {
            normalized: vec![1.0; norms.len()],
            degenerate: true,
        });
    }
    Ok(WeightNorms {
        normalized: norms.into_iter().map(|n| n / mean).collect(),
        degenerate: false,
    })
}

/// Population standard deviation over mean.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TelemetryMode {
    RawCe,
    ActiveLoss,
    Both,
}

impl TelemetryMode {
    fn includes(self, mode: LedgerMode) -> bool {
        matches!(
            (self, mode),
            (TelemetryMode::Both, _)
                | (TelemetryMode::RawCe, LedgerMode::RawCe)
                | (TelemetryMode::ActiveLoss, LedgerMode::ActiveLoss)
        )
    }
}

impl std::str::FromStr for TelemetryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw-ce" => Ok(TelemetryMode::RawCe),
            "active-loss" => Ok(TelemetryMode::ActiveLoss),
            "both" => Ok(TelemetryMode::Both),
            other => Err(Error::Config(format!("unknown telemetry mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TelemetryRecord {
    Iteration {
        iteration: u64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        active_loss: Option<LedgerSnapshot>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        raw_ce: Option<LedgerSnapshot>,
    },
    Epoch {
        epoch: usize,
        weight_norms: Vec<f64>,
        degenerate: bool,
    },
}

/// Training observer that maintains both ledgers and the weight-norm trace,
/// optionally streaming JSONL records.
pub struct TelemetryRecorder<'w> {
    pub active: GradientLedger,
    pub raw: GradientLedger,
    /// One entry per finished epoch.
    pub weight_norm_trace: Vec<WeightNorms>,
    mode: TelemetryMode,
    sink: Option<&'w mut dyn Write>,
    stride: u64,
    last_iteration: u64,
    last_written: u64,
}

impl<'w> TelemetryRecorder<'w> {
    pub fn new(num_classes: usize, mode: TelemetryMode) -> Self {
        TelemetryRecorder {
            active: GradientLedger::new(num_classes, LedgerMode::ActiveLoss),
            raw: GradientLedger::new(num_classes, LedgerMode::RawCe),
            weight_norm_trace: Vec::new(),
            mode,
            sink: None,
            stride: 1,
            last_iteration: 0,
            last_written: 0,
        }
    }

    /// Writes an iteration record every `stride` iterations and at the end
    /// of each epoch. The ledgers still accumulate every iteration.
    pub fn with_stride(mut self, stride: u64) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn with_sink(mut self, sink: &'w mut dyn Write) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn ledger(&self, mode: LedgerMode) -> &GradientLedger {
        match mode {
            LedgerMode::RawCe => &self.raw,
            LedgerMode::ActiveLoss => &self.active,
        }
    }

    fn emit_ledgers(&mut self) -> Result<()> {
        if self.sink.is_none() {
            return Ok(());
        }
        self.last_written = self.last_iteration;
        let record = TelemetryRecord::Iteration {
            iteration: self.last_iteration,
            active_loss: self
                .mode
                .includes(LedgerMode::ActiveLoss)
                .then(|| self.active.snapshot()),
            raw_ce: self
                .mode
                .includes(LedgerMode::RawCe)
                .then(|| self.raw.snapshot()),
        };
        self.emit(&record)
    }

    fn emit(&mut self, record: &TelemetryRecord) -> Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            serde_json::to_writer(&mut **sink, record)?;
            sink.write_all(b"\n")
                .map_err(|e| Error::io("<telemetry>", e))?;
        }
        Ok(())
    }
}

impl TrainObserver for TelemetryRecorder<'_> {
    fn on_iteration(&mut self, event: &IterationEvent<'_>) -> Result<()> {
        let grad = event.loss.grad_logits.view();
        self.active.accumulate(event.probs, event.labels, grad)?;
        self.raw.accumulate(event.probs, event.labels, grad)?;
        self.last_iteration = event.iteration;
        if event.iteration.is_multiple_of(self.stride) {
            self.emit_ledgers()?;
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, event: &EpochEvent<'_>) -> Result<()> {
        if self.last_written != self.last_iteration {
            self.emit_ledgers()?;
        }
        let norms = weight_norms(event.model)?;
        let record = TelemetryRecord::Epoch {
            epoch: event.epoch,
            weight_norms: norms.normalized.clone(),
            degenerate: norms.degenerate,
        };
        self.weight_norm_trace.push(norms);
        self.emit(&record)
    }
}
