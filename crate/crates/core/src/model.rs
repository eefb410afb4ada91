//! Multi-binary classifier heads over dense features.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// `z = W x + b`
    Linear,
    /// `z = W2 relu(W1 x + b1) + b2`
    Mlp1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    #[serde(default)]
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub init_seed: u64,
    /// When set, [`Model::init`] starts the output biases at
    /// `-ln((1 - pi) / pi)` so every class begins with probability `pi`.
    #[serde(default)]
    pub bias_prior: Option<f64>,
}

impl ModelSpec {
    pub fn linear(feature_dim: usize, num_classes: usize, init_seed: u64) -> Self {
        ModelSpec {
            arch: Arch::Linear,
            hidden_dim: 0,
            feature_dim,
            num_classes,
            init_seed,
            bias_prior: None,
        }
    }

    pub fn mlp1(feature_dim: usize, hidden_dim: usize, num_classes: usize, init_seed: u64) -> Self {
        ModelSpec {
            arch: Arch::Mlp1,
            hidden_dim,
            feature_dim,
            num_classes,
            init_seed,
            bias_prior: None,
        }
    }

    pub fn with_bias_prior(mut self, prior: f64) -> Self {
        self.bias_prior = Some(prior);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(pi) = self.bias_prior {
            if !(pi > 0.0 && pi < 1.0) {
                return Err(Error::Config(format!(
                    "bias_prior must be in (0, 1), got {pi}"
                )));
            }
        }
        if self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "model dims must be positive, got {} features and {} classes",
                self.feature_dim, self.num_classes
            )));
        }
        if self.arch == Arch::Mlp1 && self.hidden_dim == 0 {
            return Err(Error::Config("mlp1 needs hidden_dim >= 1".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |name: &'static str, rows: usize, cols: usize, is_weight: bool| {
            segments.push(Segment {
                name,
                offset,
                rows,
                cols,
                is_weight,
            });
            offset += rows * cols;
        };
        match self.arch {
            Arch::Linear => {
                push("weight", self.num_classes, self.feature_dim, true);
                push("bias", 1, self.num_classes, false);
            }
            Arch::Mlp1 => {
                push("hidden.weight", self.hidden_dim, self.feature_dim, true);
                push("hidden.bias", 1, self.hidden_dim, false);
                push("weight", self.num_classes, self.hidden_dim, true);
                push("bias", 1, self.num_classes, false);
            }
        }
        Layout { segments }
    }
}

/// One contiguous block of the flat parameter vector, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Weights are decayed, biases are not.
    pub is_weight: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn num_params(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    /// Per-parameter weight-decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_params()];
        for s in &self.segments {
            mask[s.range()].fill(s.is_weight);
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

impl Model {
    /// Weights uniform in `±1/sqrt(fan_in)` from the spec's seed. Biases are
    /// 0 unless the spec sets a `bias_prior`.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut params = vec![0.0; layout.num_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        for s in layout.segments.iter().filter(|s| s.is_weight) {
            let bound = 1.0 / (s.cols as f64).sqrt();
            for p in &mut params[s.range()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        if let Some(pi) = spec.bias_prior {
            let b0 = -((1.0 - pi) / pi).ln();
            let out = layout
                .segments
                .iter()
                .rfind(|s| s.name == "bias")
                .expect("output bias");
            params[out.range()].fill(b0);
        }
        Ok(Model {
            spec: spec.clone(),
            params,
        })
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Model {
            spec: spec.clone(),
            params: vec![0.0; spec.layout().num_params()],
        })
    }

    pub fn from_params(spec: &ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.layout().num_params();
        if params.len() != expected {
            return Err(Error::Dimension(format!(
                "{} parameters for a model with {expected}",
                params.len()
            )));
        }
        Ok(Model {
            spec: spec.clone(),
            params,
        })
    }

    fn matrix(&self, s: &Segment) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.rows, s.cols), &self.params[s.range()])
            .expect("segment shape matches layout")
    }

    fn vector(&self, s: &Segment) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[s.range()])
    }

    /// The last layer's weights, one row per class.
    pub fn classifier_weights(&self) -> ArrayView2<'_, f64> {
        let layout = self.spec.layout();
        let s = layout
            .segments
            .iter()
            .find(|s| s.name == "weight")
            .expect("every architecture ends in a per-class weight matrix");
        self.matrix(s)
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.spec.feature_dim {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.spec.feature_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let layout = self.spec.layout();
        let seg = &layout.segments;
        Ok(match self.spec.arch {
            Arch::Linear => affine(x, self.matrix(&seg[0]), self.vector(&seg[1])),
            Arch::Mlp1 => {
                let h = affine(x, self.matrix(&seg[0]), self.vector(&seg[1])).mapv(relu);
                affine(h.view(), self.matrix(&seg[2]), self.vector(&seg[3]))
            }
        })
    }

    /// Gradient of the loss with respect to the flat parameters, given the
    /// gradient with respect to the logits.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        grad_logits: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if grad_logits.dim() != (x.nrows(), self.spec.num_classes) {
            return Err(Error::Dimension(format!(
                "logit gradient is {:?}, expected ({}, {})",
                grad_logits.dim(),
                x.nrows(),
                self.spec.num_classes
            )));
        }
        let layout = self.spec.layout();
        let seg = &layout.segments;
        let mut grad = vec![0.0; layout.num_params()];
        match self.spec.arch {
            Arch::Linear => {
                write_affine_grad(&mut grad, &seg[0], &seg[1], x, grad_logits);
            }
            Arch::Mlp1 => {
                let pre = affine(x, self.matrix(&seg[0]), self.vector(&seg[1]));
                let h = pre.mapv(relu);
                write_affine_grad(&mut grad, &seg[2], &seg[3], h.view(), grad_logits);
                let mut grad_h = grad_logits.dot(&self.matrix(&seg[2]));
                grad_h.zip_mut_with(&pre, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                write_affine_grad(&mut grad, &seg[0], &seg[1], x, grad_h.view());
            }
        }
        Ok(grad)
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn affine(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    out += &b;
    out
}

fn write_affine_grad(
    grad: &mut [f64],
    weight: &Segment,
    bias: &Segment,
    input: ArrayView2<'_, f64>,
    upstream: ArrayView2<'_, f64>,
) {
    let dw = upstream.t().dot(&input);
    for (dst, src) in grad[weight.range()].iter_mut().zip(dw.iter()) {
        *dst = *src;
    }
    let db = upstream.sum_axis(Axis(0));
    for (dst, src) in grad[bias.range()].iter_mut().zip(db.iter()) {
        *dst = *src;
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn zero_model_gives_zero_logits() {
        let spec = ModelSpec::linear(3, 4, 0);
        let model = Model::zeros(&spec).unwrap();
        let z = model
            .forward(array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]].view())
            .unwrap();
        assert_eq!(z, Array2::<f64>::zeros((2, 4)));
    }

    #[test]
    fn identity_weights_select_features() {
        let spec = ModelSpec::linear(3, 3, 0);
        let mut params = vec![0.0; 12];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let model = Model::from_params(&spec, params).unwrap();
        let x = array![[0.0, 7.5, 0.0], [-2.0, 0.0, 0.0]];
        let z = model.forward(x.view()).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn output_shape_and_dim_check() {
        let spec = ModelSpec::mlp1(5, 8, 3, 11);
        let model = Model::init(&spec).unwrap();
        let x = Array2::from_elem((7, 5), 0.3);
        assert_eq!(model.forward(x.view()).unwrap().dim(), (7, 3));
        let bad = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            model.forward(bad.view()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = ModelSpec::linear(16, 10, 3);
        let a = Model::init(&spec).unwrap();
        assert_eq!(a, Model::init(&spec).unwrap());
        let bound = 0.25;
        let layout = spec.layout();
        assert!(a.params[layout.segments[0].range()]
            .iter()
            .all(|p| p.abs() < bound));
        assert!(a.params[layout.segments[1].range()]
            .iter()
            .all(|&p| p == 0.0));
        assert_ne!(a, Model::init(&ModelSpec::linear(16, 10, 4)).unwrap());
    }

    #[test]
    fn bias_prior_sets_output_bias_only() {
        let spec = ModelSpec::mlp1(3, 4, 2, 0).with_bias_prior(0.01);
        let m = Model::init(&spec).unwrap();
        let layout = spec.layout();
        assert!(m.params[layout.segments[1].range()]
            .iter()
            .all(|&p| p == 0.0));
        for &b in &m.params[layout.segments[3].range()] {
            assert!((1.0 / (1.0 + (-b).exp()) - 0.01).abs() < 1e-15);
        }
        assert!(Model::init(&ModelSpec::linear(2, 2, 0).with_bias_prior(1.0)).is_err());
    }

    #[test]
    fn layout_and_decay_mask() {
        let spec = ModelSpec::mlp1(3, 4, 2, 0);
        let layout = spec.layout();
        assert_eq!(layout.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
        let mask = layout.decay_mask();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 12 + 8);
        assert!(!mask[12]);
        assert_eq!(
            Model::init(&spec).unwrap().classifier_weights().dim(),
            (2, 4)
        );
    }

    #[test]
    fn invalid_specs() {
        assert!(Model::init(&ModelSpec::linear(0, 2, 0)).is_err());
        assert!(Model::init(&ModelSpec::mlp1(2, 0, 2, 0)).is_err());
        assert!(Model::from_params(&ModelSpec::linear(2, 2, 0), vec![0.0; 5]).is_err());
    }
}
