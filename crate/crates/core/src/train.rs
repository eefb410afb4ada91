//! SGD with momentum, weight decay, linear warmup and step decay.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleBatch;
use crate::error::{Error, Result};
use crate::loss::{compute_loss, sigmoid, Labels, LossConfig, LossOutput, Probs};
use crate::model::{Model, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSpec {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch indices at which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Learning rate at iteration 0, as a fraction of `lr`.
    pub warmup_ratio: f64,
    pub warmup_iters: u64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 12,
            batch_size: 32,
            lr_decay_epochs: vec![8, 11],
            lr_decay_factor: 0.1,
            warmup_ratio: 0.001,
            warmup_iters: 500,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "lr_decay_epochs must be strictly increasing, got {:?}",
                self.lr_decay_epochs
            )));
        }
        if self.epochs > 0 && self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::Config(format!(
                "lr_decay_epochs {:?} must all be below epochs = {}",
                self.lr_decay_epochs, self.epochs
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be positive, got {}",
                self.lr_decay_factor
            )));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "warmup_ratio must lie in (0, 1], got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }

    /// Step-schedule rate for `epoch`, before warmup.
    pub fn scheduled_lr(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    /// Learning rate used for the update at `iteration` (0-based) in `epoch`.
    /// Warmup ramps linearly from `warmup_ratio * base` to `base`.
    pub fn lr_at(&self, iteration: u64, epoch: usize) -> f64 {
        let base = self.scheduled_lr(epoch);
        if iteration >= self.warmup_iters {
            return base;
        }
        let progress = iteration as f64 / self.warmup_iters as f64;
        base * (self.warmup_ratio + (1.0 - self.warmup_ratio) * progress)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model,
    pub momentum_buffers: Vec<f64>,
    /// Completed update steps.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Seed from which each epoch's shuffle is derived.
    pub shuffle_seed: u64,
}

impl TrainState {
    pub fn new(model: Model, shuffle_seed: u64) -> Self {
        let momentum_buffers = vec![0.0; model.params.len()];
        TrainState {
            model,
            momentum_buffers,
            iteration: 0,
            epoch: 0,
            shuffle_seed,
        }
    }

    pub fn init(spec: &ModelSpec, shuffle_seed: u64) -> Result<Self> {
        Ok(Self::new(Model::init(spec)?, shuffle_seed))
    }
}

/// What one update step saw and produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: LossOutput,
    pub probs: Probs,
    pub lr: f64,
}

/// One SGD update on a minibatch:
/// `v <- momentum * v + grad + weight_decay * theta` (weights only), then
/// `theta <- theta - lr * v`.
pub fn backward_step(
    state: &mut TrainState,
    features: ArrayView2<'_, f64>,
    labels: &Labels,
    loss_cfg: &LossConfig,
    optim: &OptimSpec,
) -> Result<StepOutput> {
    let logits = state.model.forward(features)?;
    let non_finite = |detail: String| Error::NonFinite {
        iteration: state.iteration,
        detail,
        snapshot: Box::new(state.clone()),
    };
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(non_finite(format!("logit = {v}")));
    }
    let loss = compute_loss(logits.view(), labels, loss_cfg)?;
    if !loss.total.is_finite() {
        return Err(non_finite(format!("loss = {}", loss.total)));
    }
    let grad = state.model.backward(features, loss.grad_logits.view())?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(non_finite(format!("parameter gradient {i} = {}", grad[i])));
    }
    let probs = sigmoid(logits.view(), loss_cfg.prob_clamp_eps)?;

    let lr = optim.lr_at(state.iteration, state.epoch);
    let mask = state.model.spec.layout().decay_mask();
    let params = &mut state.model.params;
    for (((theta, v), g), &decay) in params
        .iter_mut()
        .zip(state.momentum_buffers.iter_mut())
        .zip(&grad)
        .zip(&mask)
    {
        let mut d = *g;
        if decay {
            d += optim.weight_decay * *theta;
        }
        *v = optim.momentum * *v + d;
        *theta -= lr * *v;
    }
    state.iteration += 1;
    Ok(StepOutput { loss, probs, lr })
}

pub struct IterationEvent<'a> {
    /// Iteration count after this step.
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub labels: &'a Labels,
    pub probs: &'a Probs,
    pub loss: &'a LossOutput,
}

pub struct EpochEvent<'a> {
    /// Index of the epoch that just finished.
    pub epoch: usize,
    pub model: &'a Model,
}

/// Callbacks fed by [`train`].
pub trait TrainObserver {
    fn on_iteration(&mut self, _event: &IterationEvent<'_>) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _event: &EpochEvent<'_>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Permutation of `0..n` for `epoch`, from its own ChaCha8 stream.
pub fn epoch_order(shuffle_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs the remaining epochs of `optim` on `state`.
pub fn train_from(
    mut state: TrainState,
    data: &SampleBatch,
    optim: &OptimSpec,
    loss_cfg: &LossConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    optim.validate()?;
    loss_cfg.validate()?;
    if data.feature_dim() != state.model.spec.feature_dim
        || data.num_classes() != state.model.spec.num_classes
    {
        return Err(Error::Dimension(format!(
            "dataset is {} features x {} classes, model is {} x {}",
            data.feature_dim(),
            data.num_classes(),
            state.model.spec.feature_dim,
            state.model.spec.num_classes
        )));
    }
    while state.epoch < optim.epochs {
        let epoch = state.epoch;
        let order = epoch_order(state.shuffle_seed, epoch, data.len());
        for chunk in order.chunks(optim.batch_size) {
            let batch = data.select(chunk);
            let step = backward_step(
                &mut state,
                batch.features.view(),
                &batch.labels,
                loss_cfg,
                optim,
            )?;
            observer.on_iteration(&IterationEvent {
                iteration: state.iteration,
                epoch,
                lr: step.lr,
                labels: &batch.labels,
                probs: &step.probs,
                loss: &step.loss,
            })?;
        }
        state.epoch += 1;
        observer.on_epoch_end(&EpochEvent {
            epoch,
            model: &state.model,
        })?;
    }
    Ok(state)
}

/// Initializes a model from `model_spec` and trains it for `optim.epochs`.
pub fn train(
    data: &SampleBatch,
    model_spec: &ModelSpec,
    optim: &OptimSpec,
    loss_cfg: &LossConfig,
    shuffle_seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    let state = TrainState::init(model_spec, shuffle_seed)?;
    train_from(state, data, optim, loss_cfg, observer)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn step_schedule_matches_decay_epochs() {
        let optim = OptimSpec::default();
        let lrs: Vec<f64> = (0..12).map(|e| optim.scheduled_lr(e)).collect();
        assert_eq!(lrs[0], 0.002);
        assert_eq!(lrs[7], 0.002);
        assert!((lrs[8] - 0.0002).abs() < 1e-18);
        assert!((lrs[10] - 0.0002).abs() < 1e-18);
        assert!((lrs[11] - 0.00002).abs() < 1e-18);
    }

    #[test]
    fn warmup_ramps_and_lands_on_base() {
        let optim = OptimSpec::default();
        assert_eq!(optim.lr_at(0, 0), 0.002 * 0.001);
        assert!(optim.lr_at(250, 0) < 0.002);
        assert!(optim.lr_at(249, 0) < optim.lr_at(250, 0));
        assert_eq!(optim.lr_at(optim.warmup_iters, 0), optim.scheduled_lr(0));
        assert_eq!(optim.lr_at(10_000, 9), optim.scheduled_lr(9));
    }

    #[test]
    fn plain_sgd_step() {
        let spec = ModelSpec::linear(2, 2, 5);
        let mut state = TrainState::init(&spec, 0).unwrap();
        let before = state.model.clone();
        let x = array![[0.5, -1.0], [1.5, 0.25]];
        let y = Labels::from_classes(2, &[Some(0), None]).unwrap();
        let cfg = LossConfig::cross_entropy();
        let optim = OptimSpec {
            momentum: 0.0,
            weight_decay: 0.0,
            warmup_iters: 0,
            ..Default::default()
        };
        let logits = before.forward(x.view()).unwrap();
        let grad_z = compute_loss(logits.view(), &y, &cfg).unwrap().grad_logits;
        let grad = before.backward(x.view(), grad_z.view()).unwrap();

        backward_step(&mut state, x.view(), &y, &cfg, &optim).unwrap();
        for ((after, b), g) in state.model.params.iter().zip(&before.params).zip(&grad) {
            assert_eq!(*after, b - 0.002 * g);
        }
        assert_eq!(state.iteration, 1);
        assert_eq!(state.model.params.len(), before.params.len());
    }

    #[test]
    fn biases_are_not_decayed() {
        let spec = ModelSpec::linear(1, 1, 0);
        let model = Model::from_params(&spec, vec![1.0, 1.0]).unwrap();
        let mut state = TrainState::new(model, 0);
        // A background sample at x = 0 and z = 0 has gradient only on the bias.
        let x = array![[0.0]];
        let y = Labels::from_classes(1, &[None]).unwrap();
        let optim = OptimSpec {
            momentum: 0.0,
            weight_decay: 0.5,
            warmup_iters: 0,
            lr: 1.0,
            ..Default::default()
        };
        let step = backward_step(
            &mut state,
            x.view(),
            &y,
            &LossConfig::cross_entropy(),
            &optim,
        )
        .unwrap();
        let p = step.probs.view()[[0, 0]];
        assert_eq!(state.model.params[0], 1.0 - 0.5);
        assert_eq!(state.model.params[1], 1.0 - p);
    }

    #[test]
    fn non_finite_loss_aborts_with_snapshot() {
        let spec = ModelSpec::linear(1, 1, 0);
        let model = Model::from_params(&spec, vec![f64::INFINITY, 0.0]).unwrap();
        let mut state = TrainState::new(model, 0);
        let y = Labels::from_classes(1, &[Some(0)]).unwrap();
        let err = backward_step(
            &mut state,
            array![[1.0]].view(),
            &y,
            &LossConfig::cross_entropy(),
            &OptimSpec::default(),
        )
        .unwrap_err();
        match err {
            Error::NonFinite { snapshot, .. } => assert_eq!(*snapshot, state),
            other => panic!("unexpected error {other}"),
        }
        assert_eq!(state.iteration, 0);
    }

    #[test]
    fn optim_validation() {
        assert!(OptimSpec::default().validate().is_ok());
        let bad = [
            OptimSpec {
                lr: 0.0,
                ..Default::default()
            },
            OptimSpec {
                momentum: 1.0,
                ..Default::default()
            },
            OptimSpec {
                lr_decay_epochs: vec![11, 8],
                ..Default::default()
            },
            OptimSpec {
                lr_decay_epochs: vec![8, 12],
                ..Default::default()
            },
            OptimSpec {
                batch_size: 0,
                ..Default::default()
            },
        ];
        for spec in bad {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let a = epoch_order(9, 0, 50);
        let b = epoch_order(9, 1, 50);
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(9, 0, 50));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
