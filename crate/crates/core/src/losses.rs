//! Local objectives for one decoupled module: variance, invariance and
//! covariance regularizers on the projected embeddings, the classifier's
//! cross-entropy, and the per-module weighted sum.
//!
//! Every loss is expressed as a graph so gradients come from the autodiff
//! engine rather than hand-written adjoints.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, NORM_EPS, VAR_EPS};

/// Whether the variance hinge is averaged over dimensions only, or also
/// divided by the batch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceDivisor {
    /// `mean_j max(0, gamma - s_j)`.
    Eq4,
    /// `mean_j max(0, gamma - s_j) / N`.
    Algorithm1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvarianceDivisor {
    /// Squared Frobenius distance over `N`.
    Eq5,
    /// Mean over all `N^2` entries.
    MseAllEntries,
}

/// Which regularizers enter the local loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTerms {
    pub variance: bool,
    pub invariance: bool,
    pub covariance: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms::ALL
    }
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        variance: true,
        invariance: true,
        covariance: true,
    };

    /// The seven non-empty subsets, singletons first.
    pub fn ablation_grid() -> [(&'static str, LossTerms); 7] {
        let t = |variance, invariance, covariance| LossTerms {
            variance,
            invariance,
            covariance,
        };
        [
            ("variance", t(true, false, false)),
            ("invariance", t(false, true, false)),
            ("covariance", t(false, false, true)),
            ("variance+invariance", t(true, true, false)),
            ("variance+covariance", t(true, false, true)),
            ("invariance+covariance", t(false, true, true)),
            ("all", t(true, true, true)),
        ]
    }

    pub fn any(&self) -> bool {
        self.variance || self.invariance || self.covariance
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Target per-dimension standard deviation. Zero switches the variance
    /// hinge off without removing it from the graph.
    pub gamma: f64,
    pub eps_norm: f64,
    /// Cross-entropy weight in the module total.
    pub alpha: f64,
    pub variance_divisor: VarianceDivisor,
    pub invariance_divisor: InvarianceDivisor,
    /// Row-center embeddings before normalizing them for the similarity matrix.
    pub center_before_sim: bool,
    pub terms: LossTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 1.0,
            eps_norm: NORM_EPS,
            alpha: 0.001,
            variance_divisor: VarianceDivisor::Algorithm1,
            invariance_divisor: InvarianceDivisor::MseAllEntries,
            center_before_sim: false,
            terms: LossTerms::ALL,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.eps_norm > 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "loss needs gamma >= 0, eps_norm > 0, alpha >= 0; got gamma={} eps_norm={} alpha={}",
                self.gamma, self.eps_norm, self.alpha
            )));
        }
        if !self.terms.any() {
            return Err(Error::Config("at least one local loss term must be enabled".into()));
        }
        Ok(())
    }
}

/// Scalar values of one module's losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub variance: f64,
    pub invariance: f64,
    pub covariance: f64,
    pub local_total: f64,
    pub cross_entropy: f64,
    pub module_total: f64,
}

/// Graph handles for the local loss terms. Disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LocalLossNodes {
    pub normalized: Var,
    pub variance: Option<Var>,
    pub invariance: Option<Var>,
    pub covariance: Option<Var>,
    pub total: Var,
}

fn check_one_hot(labels: &Matrix, n: usize) -> Result<()> {
    if labels.rows() != n {
        return Err(Error::shape(
            "invariance_loss",
            format!("{} label rows for {n} embeddings", labels.rows()),
        ));
    }
    for r in 0..labels.rows() {
        let row = labels.row(r);
        let ok = row.iter().all(|&v| v == 0.0 || v == 1.0) && row.iter().sum::<f64>() == 1.0;
        if !ok {
            return Err(Error::domain(
                "invariance_loss",
                format!("label row {r} is not one-hot"),
            ));
        }
    }
    Ok(())
}

fn center_columns(g: &mut Graph, e: Var) -> Result<Var> {
    let mu = g.mean_columns(e)?;
    g.sub(e, mu)
}

/// Hinge on per-column standard deviation.
pub fn variance_loss(g: &mut Graph, embeddings: Var, cfg: &LossConfig) -> Result<Var> {
    let (n, c) = g.value(embeddings).shape();
    if n == 0 || c == 0 {
        return Err(Error::domain("variance_loss", "empty embedding batch"));
    }
    let centered = center_columns(g, embeddings)?;
    let sq = g.square(centered)?;
    let var = g.mean_columns(sq)?;
    let shifted = g.offset(var, VAR_EPS)?;
    let std = g.sqrt(shifted)?;
    let hinge = g.hinge(std, cfg.gamma)?;
    let total = g.sum_all(hinge)?;
    let divisor = match cfg.variance_divisor {
        VarianceDivisor::Eq4 => c as f64,
        VarianceDivisor::Algorithm1 => (c * n) as f64,
    };
    g.scale(total, 1.0 / divisor)
}

/// Distance between the label similarity `Y Y^T` and the cosine similarity
/// of the embeddings. Normalizes its input itself.
pub fn invariance_loss(g: &mut Graph, embeddings: Var, labels: &Matrix, cfg: &LossConfig) -> Result<Var> {
    let xn = g.row_l2_normalize(embeddings, cfg.eps_norm)?;
    invariance_from_normalized(g, xn, labels, cfg)
}

fn invariance_from_normalized(g: &mut Graph, normalized: Var, labels: &Matrix, cfg: &LossConfig) -> Result<Var> {
    let n = g.value(normalized).rows();
    if n == 0 {
        return Err(Error::domain("invariance_loss", "empty embedding batch"));
    }
    check_one_hot(labels, n)?;
    let x = if cfg.center_before_sim {
        let row_mean = g.mean_rows(normalized)?;
        let centered = g.sub(normalized, row_mean)?;
        g.row_l2_normalize(centered, cfg.eps_norm)?
    } else {
        normalized
    };
    let xt = g.transpose(x)?;
    let sim = g.matmul(x, xt)?;
    let target = g.constant(labels.matmul(&labels.transpose())?);
    let diff = g.sub(target, sim)?;
    let sq = g.square(diff)?;
    let total = g.sum_all(sq)?;
    let divisor = match cfg.invariance_divisor {
        InvarianceDivisor::Eq5 => n as f64,
        InvarianceDivisor::MseAllEntries => (n * n) as f64,
    };
    g.scale(total, 1.0 / divisor)
}

/// Mean squared off-diagonal covariance, `(1/C) sum_{i != j} Cov_ij^2`.
pub fn covariance_loss(g: &mut Graph, embeddings: Var) -> Result<Var> {
    let (n, c) = g.value(embeddings).shape();
    if n < 2 {
        return Err(Error::domain(
            "covariance_loss",
            format!("covariance needs at least 2 rows, got {n}"),
        ));
    }
    let centered = center_columns(g, embeddings)?;
    let ct = g.transpose(centered)?;
    let gram = g.matmul(ct, centered)?;
    let cov = g.scale(gram, 1.0 / n as f64)?;
    let off = g.select_off_diagonal(cov)?;
    let sq = g.square(off)?;
    let total = g.sum_all(sq)?;
    g.scale(total, 1.0 / c as f64)
}

pub fn cross_entropy_loss(g: &mut Graph, logits: Var, labels: &Matrix) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

/// Normalizes `projected` once and sums the enabled regularizers on it.
/// Variance and covariance see the column-centered normalized embeddings.
pub fn local_loss(g: &mut Graph, projected: Var, labels: &Matrix, cfg: &LossConfig) -> Result<LocalLossNodes> {
    let normalized = g.row_l2_normalize(projected, cfg.eps_norm)?;
    let terms = cfg.terms;
    let centered = if terms.variance || terms.covariance {
        Some(center_columns(g, normalized)?)
    } else {
        None
    };
    let variance = match (terms.variance, centered) {
        (true, Some(c)) => Some(variance_loss(g, c, cfg)?),
        _ => None,
    };
    let invariance = if terms.invariance {
        Some(invariance_from_normalized(g, normalized, labels, cfg)?)
    } else {
        None
    };
    let covariance = match (terms.covariance, centered) {
        (true, Some(c)) => Some(covariance_loss(g, c)?),
        _ => None,
    };
    let mut total: Option<Var> = None;
    for term in [variance, invariance, covariance].into_iter().flatten() {
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no local loss term enabled".into()))?;
    Ok(LocalLossNodes {
        normalized,
        variance,
        invariance,
        covariance,
        total,
    })
}

/// `local + alpha * ce`.
pub fn module_total(g: &mut Graph, local: Var, ce: Var, cfg: &LossConfig) -> Result<Var> {
    let weighted = g.scale(ce, cfg.alpha)?;
    g.add(local, weighted)
}

impl LocalLossNodes {
    pub fn breakdown(&self, g: &Graph, ce: Var, total: Var) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossBreakdown {
            variance: v(self.variance),
            invariance: v(self.invariance),
            covariance: v(self.covariance),
            local_total: g.value(self.total).item(),
            cross_entropy: g.value(ce).item(),
            module_total: g.value(total).item(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_check;
    use crate::tensor::RngState;

    fn eval(f: impl FnOnce(&mut Graph, Var) -> Result<Var>, x: &Matrix) -> f64 {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = f(&mut g, v).unwrap();
        g.value(out).item()
    }

    #[test]
    fn variance_hinge_inactive_when_spread() {
        // +-2 per column: std 2 >= gamma 1.
        let x = Matrix::from_rows(&[[2.0, -2.0], [-2.0, 2.0]]);
        let cfg = LossConfig {
            variance_divisor: VarianceDivisor::Eq4,
            ..Default::default()
        };
        assert_eq!(eval(|g, v| variance_loss(g, v, &cfg), &x), 0.0);
    }

    #[test]
    fn variance_collapse_value() {
        let x = Matrix::from_rows(&[[0.3, 0.4, 0.5]; 4]);
        let cfg = LossConfig {
            variance_divisor: VarianceDivisor::Eq4,
            ..Default::default()
        };
        let v = eval(|g, v| variance_loss(g, v, &cfg), &x);
        assert!((v - (1.0 - 1e-7f64.sqrt())).abs() < 1e-12);
        assert!((v - 0.99968).abs() < 1e-5);
        let cfg = LossConfig::default();
        let v4 = eval(|g, v| variance_loss(g, v, &cfg), &x);
        assert!((v4 - v / 4.0).abs() < 1e-15);
    }

    #[test]
    fn invariance_perfect_alignment_cases() {
        let cfg = LossConfig::default();
        let same = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let y = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let v = eval(|g, v| invariance_loss(g, v, &y, &cfg), &same);
        assert!(v.abs() < 1e-15);

        let orth = Matrix::from_rows(&[[3.0, 0.0], [0.0, 2.0]]);
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let v = eval(|g, v| invariance_loss(g, v, &y, &cfg), &orth);
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn invariance_rejects_soft_labels() {
        let mut g = Graph::new();
        let x = g.param(Matrix::ones(2, 2));
        let y = Matrix::from_rows(&[[0.5, 0.5], [1.0, 0.0]]);
        assert!(matches!(
            invariance_loss(&mut g, x, &y, &LossConfig::default()),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn covariance_cases() {
        assert_eq!(eval(covariance_loss, &Matrix::from_rows(&[[1.0], [4.0], [2.0]])), 0.0);
        let eq = Matrix::from_rows(&[[-1.0, -1.0], [1.0, 1.0]]);
        assert!((eval(covariance_loss, &eq) - 1.0).abs() < 1e-15);
        let orth = Matrix::from_rows(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]);
        assert!(eval(covariance_loss, &orth) <= 1e-12);

        let mut g = Graph::new();
        let one = g.param(Matrix::ones(1, 3));
        assert!(matches!(covariance_loss(&mut g, one), Err(Error::Domain { .. })));
    }

    #[test]
    fn cross_entropy_limits() {
        let y = Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        let sat = Matrix::from_rows(&[[0.0, 25.0, 0.0], [30.0, 0.0, 1.0]]);
        assert!(eval(|g, v| cross_entropy_loss(g, v, &y), &sat) < 1e-6);
        let zero = Matrix::zeros(2, 3);
        assert!((eval(|g, v| cross_entropy_loss(g, v, &y), &zero) - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_identity() {
        let mut rng = RngState::new(12);
        let logits = rng.normal(6, 4, 0.0, 1.0);
        let mut y = Matrix::zeros(6, 4);
        for r in 0..6 {
            y.set(r, rng.below(4), 1.0);
        }
        let mut g = Graph::new();
        let z = g.param(logits.clone());
        let ce = cross_entropy_loss(&mut g, z, &y).unwrap();
        let grad = g.backward(ce).unwrap().get(z).unwrap().clone();
        let mut expected = logits.clone();
        for r in 0..6 {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..4 {
                expected.set(r, j, (((row[j] - m).exp() / z) - y.get(r, j)) / 6.0);
            }
        }
        assert!(grad.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn local_total_is_exact_sum_and_zero_when_engineered() {
        // Distinct classes, orthogonal unit rows, one sample per class.
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let y = Matrix::identity(2);
        // Column std of the centered rows is 0.5, so gamma at 0.5 leaves the
        // hinge inactive; covariance off-diagonal is -0.25, not zero, so drop it.
        let cfg = LossConfig {
            gamma: 0.4,
            terms: LossTerms {
                covariance: false,
                ..LossTerms::ALL
            },
            ..Default::default()
        };
        let mut g = Graph::new();
        let v = g.param(x);
        let nodes = local_loss(&mut g, v, &y, &cfg).unwrap();
        assert!(g.value(nodes.total).item().abs() < 1e-15);

        let mut rng = RngState::new(13);
        let mut g = Graph::new();
        let v = g.param(rng.normal(6, 4, 0.0, 1.0));
        let y = Matrix::from_rows(&[
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ]);
        let nodes = local_loss(&mut g, v, &y, &LossConfig::default()).unwrap();
        let val = |x: Option<Var>| g.value(x.unwrap()).item();
        let sum = val(nodes.variance) + val(nodes.invariance) + val(nodes.covariance);
        assert_eq!(g.value(nodes.total).item(), sum);
        assert!(fd_check(&g, nodes.total, v, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn module_total_weights_ce() {
        let mut g = Graph::new();
        let local = g.param(Matrix::scalar(1.0));
        let ce = g.param(Matrix::scalar(2.0));
        let t = module_total(&mut g, local, ce, &LossConfig::default()).unwrap();
        assert!((g.value(t).item() - 1.002).abs() < 1e-15);
        let zero = LossConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let t0 = module_total(&mut g, local, ce, &zero).unwrap();
        assert_eq!(g.value(t0).item(), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { eps_norm: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        let none = LossTerms {
            variance: false,
            invariance: false,
            covariance: false,
        };
        assert!(LossConfig { terms: none, ..Default::default() }.validate().is_err());
        assert_eq!(LossTerms::ablation_grid().len(), 7);
    }
}
