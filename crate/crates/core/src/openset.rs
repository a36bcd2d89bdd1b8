//! Unknown-sample rejection in the fused feature space.
//!
//! Every known class gets a Gaussian (mean, regularized covariance, prior)
//! fitted on training features. A test feature is assigned to the class with
//! the largest quadratic discriminant; it is rejected as unknown when its
//! softmax share over the discriminants falls below the share it would have
//! on the winning class's Hotelling control-limit boundary.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Role, Sample};
use crate::nnet::ForwardTrace;
use crate::special::f_upper_quantile;
use crate::{par, Error, Result};

/// Which dense-layer outputs make up the fused feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    /// Every dense layer, logits included.
    All,
    /// Only the logits layer.
    Last,
    /// Explicit zero-based dense-layer indices.
    Layers(Vec<usize>),
}

impl LayerSelection {
    /// Sorted, de-duplicated layer indices for a network with `n` dense
    /// layers.
    pub fn resolve(&self, n: usize) -> Result<Vec<usize>> {
        let mut idx = match self {
            LayerSelection::All => (0..n).collect(),
            LayerSelection::Last => n.checked_sub(1).into_iter().collect(),
            LayerSelection::Layers(v) => v.clone(),
        };
        idx.sort_unstable();
        idx.dedup();
        if idx.is_empty() {
            return Err(Error::Config("empty fused layer selection".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Config(format!("fused layer {bad} does not exist ({n} dense layers)")));
        }
        Ok(idx)
    }
}

/// Concatenated dense-layer outputs of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub z: Vec<f64>,
    pub widths: Vec<usize>,
}

impl FusedFeature {
    /// Concatenates parts in the given order.
    pub fn concat(parts: &[&[f64]]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Config("nothing to fuse".into()));
        }
        Ok(Self {
            z: parts.iter().flat_map(|p| p.iter().copied()).collect(),
            widths: parts.iter().map(|p| p.len()).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// Fused features for every sample of a trace, layers in depth order.
pub fn fuse(trace: &ForwardTrace, selection: &LayerSelection) -> Result<Vec<FusedFeature>> {
    let layers = selection.resolve(trace.fc_outputs.len())?;
    let widths: Vec<usize> = layers.iter().map(|&l| trace.fc_outputs[l].ncols()).collect();
    Ok((0..trace.batch_size())
        .map(|r| {
            let z = layers
                .iter()
                .flat_map(|&l| trace.fc_outputs[l].row(r).iter().copied().collect::<Vec<_>>())
                .collect();
            FusedFeature { z, widths: widths.clone() }
        })
        .collect())
}

/// Degrees of freedom of the F quantile in the control limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DofConvention {
    /// F(d, n - d), the Hotelling prediction limit.
    Hotelling,
    /// F(n, n - d).
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RejectionConfig {
    pub alpha: f64,
    /// Covariance ridge, scaled by trace(Σ)/d.
    pub reg_lambda: f64,
    pub layers: LayerSelection,
    /// Class priors; uniform when absent.
    pub priors: Option<Vec<f64>>,
    pub dof: DofConvention,
    /// Use `g ≥ ½L + τ` as the acceptance boundary instead of `g ≥ -½L + τ`.
    pub literal_boundary: bool,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            reg_lambda: 1e-6,
            layers: LayerSelection::All,
            priors: None,
            dof: DofConvention::Hotelling,
            literal_boundary: false,
        }
    }
}

impl RejectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.reg_lambda >= 0.0 && self.reg_lambda.is_finite()) {
            return Err(Error::Config("reg_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Gaussian model of one known class with its rejection parameters.
#[derive(Debug, Clone)]
pub struct ClassGaussian {
    pub class: usize,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub covariance_inverse: DMatrix<f64>,
    pub log_det: f64,
    pub prior: f64,
    pub count: usize,
    /// `ln P - ½ ln|Σ|`.
    pub tau: f64,
    pub control_limit: f64,
    chol: Cholesky<f64, Dyn>,
}

impl ClassGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Squared Mahalanobis distance of `z` to the class mean.
    pub fn mahalanobis2(&self, z: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(z) - &self.mean;
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    /// Discriminant value on the acceptance boundary.
    pub fn boundary(&self, literal: bool) -> f64 {
        if literal {
            0.5 * self.control_limit + self.tau
        } else {
            -0.5 * self.control_limit + self.tau
        }
    }
}

/// Hotelling-style control limit `d(n²-1)/(n(n-d)) · F_α`.
pub fn control_limit(d: usize, n: usize, alpha: f64, dof: DofConvention) -> Result<f64> {
    if d == 0 || n <= d {
        return Err(Error::Precondition(format!(
            "control limit needs n > d >= 1, got d = {d}, n = {n}"
        )));
    }
    let (df, nf) = (d as f64, n as f64);
    let multiplier = df * (nf * nf - 1.0) / (nf * (nf - df));
    let numerator_dof = match dof {
        DofConvention::Hotelling => df,
        DofConvention::Literal => nf,
    };
    Ok(multiplier * f_upper_quantile(alpha, numerator_dof, nf - df)?)
}

/// Fits one Gaussian per class `0..class_count` from labeled features.
pub fn fit_class_gaussians(
    features: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    cfg: &RejectionConfig,
) -> Result<Vec<ClassGaussian>> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(Error::Shape("features and labels differ in length".into()));
    }
    let d = features.first().map(|f| f.len()).ok_or_else(|| Error::Empty("no features to fit".into()))?;
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("features must share a positive dimension".into()));
    }
    let priors = match &cfg.priors {
        Some(p) => {
            if p.len() != class_count || p.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                return Err(Error::Config("priors must be one value in (0, 1] per class".into()));
            }
            let sum: f64 = p.iter().sum();
            p.iter().map(|v| v / sum).collect()
        }
        None => vec![1.0 / class_count as f64; class_count],
    };
    (0..class_count)
        .map(|class| {
            let rows: Vec<&Vec<f64>> = features
                .iter()
                .zip(labels)
                .filter(|(_, &y)| y == class)
                .map(|(f, _)| f)
                .collect();
            let n = rows.len();
            if n < 2 {
                return Err(Error::Precondition(format!("class {class} has {n} samples, at least 2 required")));
            }
            let mut mean = DVector::zeros(d);
            for r in &rows {
                for (m, v) in mean.iter_mut().zip(r.iter()) {
                    *m += v;
                }
            }
            mean /= n as f64;
            let mut centered = DMatrix::zeros(n, d);
            for (i, r) in rows.iter().enumerate() {
                for j in 0..d {
                    centered[(i, j)] = r[j] - mean[j];
                }
            }
            let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
            // exact symmetry
            cov = (&cov + cov.transpose()) * 0.5;
            if cfg.reg_lambda > 0.0 {
                let scale = cov.trace() / d as f64;
                let ridge = cfg.reg_lambda * if scale > 0.0 { scale } else { 1.0 };
                for i in 0..d {
                    cov[(i, i)] += ridge;
                }
            }
            let chol = Cholesky::new(cov.clone()).ok_or(Error::Singular { class })?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            if !log_det.is_finite() {
                return Err(Error::Singular { class });
            }
            let covariance_inverse = chol.inverse();
            let prior = priors[class];
            let tau = prior.ln() - 0.5 * log_det;
            let limit = control_limit(d, n, cfg.alpha, cfg.dof)?;
            Ok(ClassGaussian {
                class,
                mean,
                covariance: cov,
                covariance_inverse,
                log_det,
                prior,
                count: n,
                tau,
                control_limit: limit,
                chol,
            })
        })
        .collect()
}

/// Quadratic discriminant `-½(z-μ)ᵀΣ⁻¹(z-μ) + ln P - ½ ln|Σ|`.
pub fn discriminant_g(z: &[f64], class: &ClassGaussian) -> f64 {
    -0.5 * class.mahalanobis2(z) + class.tau
}

/// Winner and softmax share of the discriminants.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub g: Vec<f64>,
    pub winner: usize,
    pub score: f64,
}

/// Arg-max discriminant (lowest class on ties) and its share
/// `1 / Σ_j exp(g_j - g_winner)`.
pub fn classify_g(g: Vec<f64>) -> Classification {
    let winner = crate::nnet::argmax(g.iter().copied());
    let score = share(&g, g[winner]);
    Classification { g, winner, score }
}

pub fn classify(z: &[f64], classes: &[ClassGaussian]) -> Classification {
    classify_g(classes.iter().map(|c| discriminant_g(z, c)).collect())
}

fn share(g: &[f64], reference: f64) -> f64 {
    1.0 / g.iter().map(|gj| (gj - reference).exp()).sum::<f64>()
}

/// Share the winner would have if its discriminant sat exactly on its
/// statistical boundary: `1 / Σ_j exp(g_j - g_boundary)`.
pub fn rejection_threshold(g: &[f64], winner: &ClassGaussian, literal: bool) -> f64 {
    share(g, winner.boundary(literal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminantResult {
    pub g: Vec<f64>,
    pub winner: usize,
    pub score: f64,
    pub threshold: f64,
    pub excluded: bool,
}

pub fn score(z: &[f64], classes: &[ClassGaussian], literal: bool) -> DiscriminantResult {
    let c = classify(z, classes);
    let threshold = rejection_threshold(&c.g, &classes[c.winner], literal);
    DiscriminantResult {
        excluded: c.score < threshold,
        g: c.g,
        winner: c.winner,
        score: c.score,
        threshold,
    }
}

/// Scores every unlabeled sample and collects the rejected ones, labeled
/// with the unknown class `K`.
pub fn build_pseudo_set(
    unlabeled: &Dataset,
    features: &[Vec<f64>],
    classes: &[ClassGaussian],
    literal: bool,
) -> Result<(Dataset, Vec<DiscriminantResult>)> {
    if features.len() != unlabeled.len() {
        return Err(Error::Shape("one fused feature per unlabeled sample required".into()));
    }
    if classes.is_empty() {
        return Err(Error::Precondition("no fitted classes".into()));
    }
    let d = classes[0].dim();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape(format!("features must have dimension {d}")));
    }
    let results = par::map(features, |z| score(z, classes, literal));
    let k = unlabeled.class_count;
    let samples: Vec<Sample> = unlabeled
        .samples
        .iter()
        .zip(&results)
        .filter(|(_, r)| r.excluded)
        .map(|(s, _)| Sample { label: Some(k), ..s.clone() })
        .collect();
    Ok((Dataset::new(samples, Role::Pseudo, k), results))
}
