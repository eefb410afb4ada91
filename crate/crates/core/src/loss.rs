//! Loss evaluation: Grad-Libra and the baseline binary losses.
//!
//! Every loss here treats a C-class problem as C independent binary
//! classifiers on sigmoid probabilities. For class `i` a sample is a
//! positive when its label row has a 1 in column `i`, otherwise a negative;
//! all-zero label rows are background samples, negative for every class.
//!
//! Per-element losses are summed over classes and averaged over the batch,
//! so `grad_logits` is the gradient of that batch mean. `per_class_pos` and
//! `per_class_neg` carry the same `1/N` factor and add up to `total`.
//!
//! The hardness of an element is the magnitude of the cross-entropy gradient
//! with respect to its logit, `g = |p - y|`. Grad-Libra maps it through
//! `F(g) = g - alpha * sin(g)` and uses the result as the weight of the
//! cross-entropy term, with separate factors for the positive and negative
//! branches:
//!
//! ```text
//! positive:  G+ = (1 - p) - alpha_pos * sin(1 - p),   loss = G+ * -ln(p)
//! negative:  G- = p - alpha_neg * sin(p),             loss = G- * -ln(1 - p)
//! ```

use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PROB_CLAMP_EPS: f64 = 1e-12;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;
pub const DEFAULT_FOCAL_ALPHA: f64 = 0.25;

/// Multi-hot label matrix restricted to the single-label regime: every row is
/// one-hot or all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels(Array2<f64>);

impl Labels {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for (n, row) in values.rows().into_iter().enumerate() {
            let mut ones = 0;
            for &v in row {
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "label row {n} contains {v}, expected 0 or 1"
                    )));
                }
            }
            if ones > 1 {
                return Err(Error::InvalidInput(format!(
                    "label row {n} has {ones} positive classes, at most one allowed"
                )));
            }
        }
        Ok(Labels(values))
    }

    /// Builds labels from per-sample class indices; `None` is background.
    pub fn from_classes(num_classes: usize, classes: &[Option<usize>]) -> Result<Self> {
        let mut values = Array2::zeros((classes.len(), num_classes));
        for (n, class) in classes.iter().enumerate() {
            if let Some(k) = *class {
                if k >= num_classes {
                    return Err(Error::InvalidInput(format!(
                        "class index {k} out of range for {num_classes} classes"
                    )));
                }
                values[[n, k]] = 1.0;
            }
        }
        Ok(Labels(values))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Class index of row `n`, or `None` for background.
    pub fn class_of(&self, n: usize) -> Option<usize> {
        self.0.row(n).iter().position(|&v| v == 1.0)
    }

    /// Rows selected by `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Labels {
        Labels(self.0.select(ndarray::Axis(0), indices))
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Sigmoid probabilities clamped to `[eps, 1 - eps]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Probs(Array2<f64>);

impl Probs {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    GradLibra,
    #[serde(rename = "ce", alias = "cross-entropy")]
    CrossEntropy,
    Focal,
    FocalStar,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::GradLibra => "grad-libra",
            LossKind::CrossEntropy => "ce",
            LossKind::Focal => "focal",
            LossKind::FocalStar => "focal-star",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grad-libra" | "gradlibra" | "gl" => Ok(LossKind::GradLibra),
            "ce" | "cross-entropy" | "crossentropy" | "bce" => Ok(LossKind::CrossEntropy),
            "focal" => Ok(LossKind::Focal),
            "focal-star" | "focal*" | "focalstar" => Ok(LossKind::FocalStar),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    /// Single modulating factor shared by both branches. When set it must
    /// agree with `alpha_pos` and `alpha_neg`.
    pub alpha_unified: Option<f64>,
    /// Backpropagate through the hardness weights instead of treating them
    /// as constants at the current probabilities.
    pub differentiate_weight: bool,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub prob_clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::GradLibra,
            alpha_pos: 0.8,
            alpha_neg: 0.8,
            alpha_unified: None,
            differentiate_weight: false,
            focal_gamma: DEFAULT_FOCAL_GAMMA,
            focal_alpha: DEFAULT_FOCAL_ALPHA,
            prob_clamp_eps: DEFAULT_PROB_CLAMP_EPS,
        }
    }
}

impl LossConfig {
    pub fn grad_libra(alpha_pos: f64, alpha_neg: f64) -> Self {
        LossConfig {
            alpha_pos,
            alpha_neg,
            ..Default::default()
        }
    }

    pub fn grad_libra_unified(alpha: f64) -> Self {
        LossConfig {
            alpha_pos: alpha,
            alpha_neg: alpha,
            alpha_unified: Some(alpha),
            ..Default::default()
        }
    }

    pub fn cross_entropy() -> Self {
        LossConfig {
            kind: LossKind::CrossEntropy,
            ..Default::default()
        }
    }

    pub fn focal(gamma: f64) -> Self {
        LossConfig {
            kind: LossKind::Focal,
            focal_gamma: gamma,
            ..Default::default()
        }
    }

    pub fn focal_star(gamma: f64, alpha: f64) -> Self {
        LossConfig {
            kind: LossKind::FocalStar,
            focal_gamma: gamma,
            focal_alpha: alpha,
            ..Default::default()
        }
    }

    pub fn with_kind(mut self, kind: LossKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_differentiate_weight(mut self, on: bool) -> Self {
        self.differentiate_weight = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha("alpha_pos", self.alpha_pos)?;
        check_alpha("alpha_neg", self.alpha_neg)?;
        if let Some(a) = self.alpha_unified {
            check_alpha("alpha_unified", a)?;
            if a != self.alpha_pos || a != self.alpha_neg {
                return Err(Error::Config(format!(
                    "alpha_unified = {a} requires alpha_pos = alpha_neg = {a}, got {} and {}",
                    self.alpha_pos, self.alpha_neg
                )));
            }
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::Config(format!(
                "focal_gamma must be finite and >= 0, got {}",
                self.focal_gamma
            )));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::Config(format!(
                "focal_alpha must lie in (0, 1), got {}",
                self.focal_alpha
            )));
        }
        check_eps(self.prob_clamp_eps)?;
        Ok(())
    }
}

fn check_alpha(name: &str, alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} must lie in (0, 1], got {alpha}"
        )))
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 0.5 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "probability clamp eps must lie in (0, 0.5), got {eps}"
        )))
    }
}

fn check_shapes(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )))
    }
}

/// Gradient norms and the hardness weights derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessWeights {
    /// `|p - y|` per element.
    pub g: Array2<f64>,
    /// `F(g)` with the branch-specific modulating factor.
    pub weights: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub per_class_pos: Array1<f64>,
    pub per_class_neg: Array1<f64>,
    pub grad_logits: Array2<f64>,
}

/// The hardness map `F(g) = g - alpha * sin(g)` for a single value.
#[inline]
pub fn hardness(g: f64, alpha: f64) -> f64 {
    g - alpha * g.sin()
}

/// `dF/dg = 1 - alpha * cos(g)`.
#[inline]
fn hardness_slope(g: f64, alpha: f64) -> f64 {
    1.0 - alpha * g.cos()
}

pub fn sigmoid(z: ArrayView2<'_, f64>, eps: f64) -> Result<Probs> {
    check_eps(eps)?;
    if let Some(((n, i), v)) = z.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite logit {v} at ({n}, {i})"
        )));
    }
    Ok(Probs(z.mapv(|v| sigmoid_scalar(v).clamp(eps, 1.0 - eps))))
}

#[inline]
fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Magnitude of the cross-entropy gradient with respect to each logit.
pub fn grad_norm(p: &Probs, y: &Labels) -> Result<Array2<f64>> {
    check_shapes("probabilities vs labels", p.dim(), y.dim())?;
    let mut g = Array2::zeros(p.dim());
    Zip::from(&mut g)
        .and(&p.0)
        .and(y.view())
        .for_each(|g, &p, &y| *g = if y == 1.0 { 1.0 - p } else { p });
    Ok(g)
}

/// Applies `F(g) = g - alpha * sin(g)` elementwise.
pub fn hardness_weight(g: ArrayView2<'_, f64>, alpha: f64) -> Result<Array2<f64>> {
    check_alpha("alpha", alpha)?;
    if let Some(v) = g.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!(
            "gradient norm {v} outside [0, 1]"
        )));
    }
    Ok(g.mapv(|g| hardness(g, alpha)))
}

/// Gradient norms plus weights using `alpha_pos` on positives and
/// `alpha_neg` on negatives.
pub fn hardness_weights(
    p: &Probs,
    y: &Labels,
    alpha_pos: f64,
    alpha_neg: f64,
) -> Result<HardnessWeights> {
    check_alpha("alpha_pos", alpha_pos)?;
    check_alpha("alpha_neg", alpha_neg)?;
    let g = grad_norm(p, y)?;
    let mut weights = Array2::zeros(g.dim());
    Zip::from(&mut weights)
        .and(&g)
        .and(y.view())
        .for_each(|w, &g, &y| {
            let alpha = if y == 1.0 { alpha_pos } else { alpha_neg };
            *w = hardness(g, alpha);
        });
    Ok(HardnessWeights { g, weights })
}

/// How the per-element cross-entropy terms are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightScheme {
    /// Every weight is 1: plain binary cross-entropy.
    Unit,
    /// Grad-Libra hardness weights.
    Hardness {
        alpha_pos: f64,
        alpha_neg: f64,
        differentiate: bool,
    },
}

/// Weighted binary cross-entropy over a logit matrix. This is the shared
/// machinery behind both Grad-Libra and plain cross-entropy.
pub fn weighted_bce(
    z: ArrayView2<'_, f64>,
    y: &Labels,
    scheme: WeightScheme,
    eps: f64,
) -> Result<LossOutput> {
    check_shapes("logits vs labels", z.dim(), y.dim())?;
    if let WeightScheme::Hardness {
        alpha_pos,
        alpha_neg,
        ..
    } = scheme
    {
        check_alpha("alpha_pos", alpha_pos)?;
        check_alpha("alpha_neg", alpha_neg)?;
    }
    let p = sigmoid(z, eps)?;
    let (n, c) = z.dim();
    let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };

    let mut out = LossOutput {
        total: 0.0,
        per_class_pos: Array1::zeros(c),
        per_class_neg: Array1::zeros(c),
        grad_logits: Array2::zeros((n, c)),
    };
    for row in 0..n {
        for i in 0..c {
            let pr = p.0[[row, i]];
            let positive = y.0[[row, i]] == 1.0;
            let (loss, grad) = match scheme {
                WeightScheme::Unit => bce_element(pr, positive),
                WeightScheme::Hardness {
                    alpha_pos,
                    alpha_neg,
                    differentiate,
                } => {
                    let alpha = if positive { alpha_pos } else { alpha_neg };
                    grad_libra_element(pr, positive, alpha, differentiate)
                }
            };
            let loss = loss * scale;
            if positive {
                out.per_class_pos[i] += loss;
            } else {
                out.per_class_neg[i] += loss;
            }
            out.grad_logits[[row, i]] = grad * scale;
        }
    }
    out.total = out.per_class_pos.sum() + out.per_class_neg.sum();
    Ok(out)
}

#[inline]
fn bce_element(p: f64, positive: bool) -> (f64, f64) {
    if positive {
        (-p.ln(), p - 1.0)
    } else {
        (-(1.0 - p).ln(), p)
    }
}

/// Loss and `d loss / dz` for one element.
#[inline]
fn grad_libra_element(p: f64, positive: bool, alpha: f64, differentiate: bool) -> (f64, f64) {
    // dp/dz = p(1 - p); g = 1 - p on positives and p on negatives.
    let (g, ce, ce_grad, dg_dz) = if positive {
        (1.0 - p, -p.ln(), p - 1.0, -p * (1.0 - p))
    } else {
        (p, -(1.0 - p).ln(), p, p * (1.0 - p))
    };
    let weight = hardness(g, alpha);
    let mut grad = weight * ce_grad;
    if differentiate {
        grad += hardness_slope(g, alpha) * dg_dz * ce;
    }
    (weight * ce, grad)
}

/// Decoupled Grad-Libra loss with its gradient with respect to the logits.
pub fn grad_libra_forward(
    z: ArrayView2<'_, f64>,
    y: &Labels,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if cfg.kind != LossKind::GradLibra {
        return Err(Error::Config(format!(
            "grad_libra_forward called with loss kind {}",
            cfg.kind.name()
        )));
    }
    cfg.validate()?;
    weighted_bce(
        z,
        y,
        WeightScheme::Hardness {
            alpha_pos: cfg.alpha_pos,
            alpha_neg: cfg.alpha_neg,
            differentiate: cfg.differentiate_weight,
        },
        cfg.prob_clamp_eps,
    )
}

pub fn grad_libra_backward(
    z: ArrayView2<'_, f64>,
    y: &Labels,
    cfg: &LossConfig,
) -> Result<Array2<f64>> {
    grad_libra_forward(z, y, cfg).map(|out| out.grad_logits)
}

/// Single-factor Grad-Libra loss value, `-sum_i F(g_i) ln(p_hat_i)` with
/// `p_hat = p` on the ground-truth class and `1 - p` elsewhere, averaged over
/// the batch. Evaluated through [`grad_norm`] and [`hardness_weight`] rather
/// than the per-branch path used by [`grad_libra_forward`].
pub fn grad_libra_unified_loss(
    z: ArrayView2<'_, f64>,
    y: &Labels,
    alpha: f64,
    eps: f64,
) -> Result<f64> {
    check_shapes("logits vs labels", z.dim(), y.dim())?;
    let p = sigmoid(z, eps)?;
    let g = grad_norm(&p, y)?;
    let weights = hardness_weight(g.view(), alpha)?;
    let n = z.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((idx, &w), &pr) in weights.indexed_iter().zip(p.0.iter()) {
        let p_hat = if y.0[idx] == 1.0 { pr } else { 1.0 - pr };
        total += -w * p_hat.ln();
    }
    Ok(total / n as f64)
}

/// Plain binary cross-entropy, the hardness weights replaced by 1.
pub fn ce_forward_backward(
    z: ArrayView2<'_, f64>,
    y: &Labels,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if cfg.kind != LossKind::CrossEntropy {
        return Err(Error::Config(format!(
            "ce_forward_backward called with loss kind {}",
            cfg.kind.name()
        )));
    }
    check_eps(cfg.prob_clamp_eps)?;
    weighted_bce(z, y, WeightScheme::Unit, cfg.prob_clamp_eps)
}

/// Focal loss, optionally alpha-balanced (`FocalStar`). The modulating
/// factor is differentiated.
pub fn focal_forward_backward(
    z: ArrayView2<'_, f64>,
    y: &Labels,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let balanced = match cfg.kind {
        LossKind::Focal => false,
        LossKind::FocalStar => true,
        other => {
            return Err(Error::Config(format!(
                "focal_forward_backward called with loss kind {}",
                other.name()
            )))
        }
    };
    cfg.validate()?;
    check_shapes("logits vs labels", z.dim(), y.dim())?;
    let p = sigmoid(z, cfg.prob_clamp_eps)?;
    let gamma = cfg.focal_gamma;
    let (n, c) = z.dim();
    let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };

    let mut out = LossOutput {
        total: 0.0,
        per_class_pos: Array1::zeros(c),
        per_class_neg: Array1::zeros(c),
        grad_logits: Array2::zeros((n, c)),
    };
    for row in 0..n {
        for i in 0..c {
            let pr = p.0[[row, i]];
            let positive = y.0[[row, i]] == 1.0;
            let (pt, sign) = if positive {
                (pr, 1.0)
            } else {
                (1.0 - pr, -1.0)
            };
            let w = match (balanced, positive) {
                (false, _) => 1.0,
                (true, true) => cfg.focal_alpha,
                (true, false) => 1.0 - cfg.focal_alpha,
            };
            let q = if positive { 1.0 - pr } else { pr };
            let modulator = q.powf(gamma);
            let log_pt = pt.ln();
            let loss = -w * modulator * log_pt;
            // d/dz [-(1-pt)^gamma ln pt] with dpt/dz = sign * pt (1 - pt)
            let grad = sign * w * modulator * (gamma * pt * log_pt - q);
            if positive {
                out.per_class_pos[i] += loss * scale;
            } else {
                out.per_class_neg[i] += loss * scale;
            }
            out.grad_logits[[row, i]] = grad * scale;
        }
    }
    out.total = out.per_class_pos.sum() + out.per_class_neg.sum();
    Ok(out)
}

/// Dispatches on `cfg.kind`.
pub fn compute_loss(z: ArrayView2<'_, f64>, y: &Labels, cfg: &LossConfig) -> Result<LossOutput> {
    match cfg.kind {
        LossKind::GradLibra => grad_libra_forward(z, y, cfg),
        LossKind::CrossEntropy => ce_forward_backward(z, y, cfg),
        LossKind::Focal | LossKind::FocalStar => focal_forward_backward(z, y, cfg),
    }
}

#[cfg(test)]
// Oracle values are quoted at the precision they were computed to.
#[allow(clippy::excessive_precision)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use super::*;

    fn labels(rows: &[Option<usize>], c: usize) -> Labels {
        Labels::from_classes(c, rows).unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn sigmoid_reference_points() {
        let z = array![[0.0, 3.0f64.ln(), 40.0]];
        let p = sigmoid(z.view(), 1e-12).unwrap().into_inner();
        assert_eq!(p[[0, 0]], 0.5);
        assert_abs_diff_eq!(p[[0, 1]], 0.75, epsilon = 1e-15);
        assert_eq!(p[[0, 2]], 1.0 - 1e-12);
    }

    #[test]
    fn sigmoid_rejects_non_finite_and_bad_eps() {
        let z = array![[0.0, f64::NAN]];
        assert!(matches!(
            sigmoid(z.view(), 1e-12),
            Err(Error::InvalidInput(_))
        ));
        let z = array![[f64::INFINITY]];
        assert!(sigmoid(z.view(), 1e-12).is_err());
        assert!(matches!(
            sigmoid(array![[0.0]].view(), 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grad_norm_cases() {
        let eps = 1e-12;
        let z = array![[logit(0.19), 0.0], [40.0, 0.0]];
        let y = labels(&[Some(0), Some(0)], 2);
        let p = sigmoid(z.view(), eps).unwrap();
        let g = grad_norm(&p, &y).unwrap();
        assert_abs_diff_eq!(g[[0, 0]], 0.81, epsilon = 1e-12);
        assert_eq!(g[[0, 1]], 0.5);
        assert_abs_diff_eq!(g[[1, 0]], eps, epsilon = 1e-16);
    }

    #[test]
    fn grad_norm_shape_mismatch() {
        let p = sigmoid(array![[0.0, 0.0]].view(), 1e-12).unwrap();
        let y = labels(&[Some(0)], 3);
        assert!(matches!(grad_norm(&p, &y), Err(Error::Dimension(_))));
    }

    #[test]
    fn background_rows_are_negative_everywhere() {
        let z = array![[0.3, -1.2, 2.0]];
        let y = labels(&[None], 3);
        let p = sigmoid(z.view(), 1e-12).unwrap();
        let g = grad_norm(&p, &y).unwrap();
        assert_eq!(g, p.into_inner());
    }

    #[test]
    fn hardness_weight_values() {
        let g = array![[0.0, 0.81, 0.5]];
        let w = hardness_weight(g.view(), 0.8).unwrap();
        assert_eq!(w[[0, 0]], 0.0);
        // 0.81 - 0.8 sin(0.81) and 0.5 - 0.8 sin(0.5), evaluated with mpmath at 30 digits.
        assert_abs_diff_eq!(w[[0, 1]], 0.230_570_260_503_885_99, epsilon = 1e-12);
        assert_abs_diff_eq!(w[[0, 2]], 0.116_459_569_116_637_60, epsilon = 1e-12);
    }

    #[test]
    fn hardness_weight_rejects_alpha_out_of_range() {
        let g = array![[0.5]];
        for alpha in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(
                hardness_weight(g.view(), alpha),
                Err(Error::Config(_))
            ));
        }
        assert!(hardness_weight(g.view(), 1.0).is_ok());
    }

    #[test]
    fn grad_libra_single_positive() {
        let z = array![[0.0]];
        let y = labels(&[Some(0)], 1);
        let cfg = LossConfig::grad_libra(0.8, 0.8);
        let out = grad_libra_forward(z.view(), &y, &cfg).unwrap();
        let w = 0.116_459_569_116_637_60;
        assert_abs_diff_eq!(out.total, w * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out.total, 0.080_723_621_982_423_43, epsilon = 1e-12);
        assert_abs_diff_eq!(
            out.grad_logits[[0, 0]],
            -0.058_229_784_558_318_80,
            epsilon = 1e-12
        );
        assert_eq!(out.per_class_neg[0], 0.0);
        assert_eq!(out.per_class_pos[0], out.total);
    }

    #[test]
    fn easy_negative_vanishes() {
        let y = labels(&[None], 1);
        let cfg = LossConfig::grad_libra(0.8, 0.8);
        let mut last = f64::INFINITY;
        for z in [-5.0, -10.0, -20.0, -40.0] {
            let out = grad_libra_forward(array![[z]].view(), &y, &cfg).unwrap();
            assert!(out.total < last);
            last = out.total;
        }
        // At the clamp p = 1e-12: G- ~ 0.2 p and -ln(1 - p) ~ p.
        assert!(last < 1e-24, "{last}");
    }

    #[test]
    fn clamped_samples_have_vanishing_gradient() {
        let eps = 1e-12;
        let z = array![[40.0, -40.0]];
        let y = labels(&[Some(0)], 2);
        for differentiate in [false, true] {
            let cfg = LossConfig::grad_libra(0.5, 0.5).with_differentiate_weight(differentiate);
            let grad = grad_libra_backward(z.view(), &y, &cfg).unwrap();
            assert!(grad.iter().all(|g| g.abs() <= eps), "{grad:?}");
        }
    }

    #[test]
    fn ce_reference_values() {
        let cfg = LossConfig::cross_entropy();
        let y = labels(&[Some(0)], 1);
        let out = ce_forward_backward(array![[0.0]].view(), &y, &cfg).unwrap();
        assert_abs_diff_eq!(out.total, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(out.grad_logits[[0, 0]], -0.5);

        let out = ce_forward_backward(array![[logit(0.19)]].view(), &y, &cfg).unwrap();
        assert_abs_diff_eq!(out.grad_logits[[0, 0]], -0.81, epsilon = 1e-12);
    }

    #[test]
    fn focal_reference_values() {
        let y = labels(&[Some(0)], 1);
        let z = array![[0.0]];
        let out = focal_forward_backward(z.view(), &y, &LossConfig::focal(2.0)).unwrap();
        assert_abs_diff_eq!(out.total, 0.25 * 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(out.total, 0.173_287, epsilon = 1e-6);
        let out = focal_forward_backward(z.view(), &y, &LossConfig::focal_star(2.0, 0.25)).unwrap();
        assert_abs_diff_eq!(out.total, 0.043_322, epsilon = 1e-6);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let y = labels(&[Some(0)], 1);
        let z = array![[0.0]];
        assert!(grad_libra_forward(z.view(), &y, &LossConfig::cross_entropy()).is_err());
        assert!(ce_forward_backward(z.view(), &y, &LossConfig::default()).is_err());
        assert!(focal_forward_backward(z.view(), &y, &LossConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig::grad_libra(0.0, 0.5).validate().is_err());
        assert!(LossConfig::grad_libra(0.5, 1.5).validate().is_err());
        let mut cfg = LossConfig::grad_libra_unified(0.6);
        assert!(cfg.validate().is_ok());
        cfg.alpha_neg = 0.7;
        assert!(cfg.validate().is_err());
        assert!(LossConfig::focal(-1.0).validate().is_err());
        assert!(LossConfig::focal_star(2.0, 1.0).validate().is_err());
    }

    #[test]
    fn labels_validation() {
        assert!(Labels::new(array![[1.0, 1.0]]).is_err());
        assert!(Labels::new(array![[0.5, 0.0]]).is_err());
        let y = Labels::new(array![[0.0, 1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(y.class_of(0), Some(1));
        assert_eq!(y.class_of(1), None);
        assert!(Labels::from_classes(2, &[Some(2)]).is_err());
    }

    #[test]
    fn empty_batch_is_zero() {
        let z = Array2::<f64>::zeros((0, 3));
        let y = Labels::from_classes(3, &[]).unwrap();
        let out = compute_loss(z.view(), &y, &LossConfig::default()).unwrap();
        assert_eq!(out.total, 0.0);
        assert_eq!(out.grad_logits.dim(), (0, 3));
    }
}
