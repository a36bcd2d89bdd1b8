//! Sensor graph construction, normalized Laplacian and Chebyshev filtering.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Weighted sensor graph built once from the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGraph {
    pub weights: DMatrix<f64>,
    pub adjacency: DMatrix<bool>,
    pub sigma2: f64,
    pub epsilon: f64,
    pub distances: DMatrix<f64>,
}

impl SensorGraph {
    pub fn node_count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn edge_count(&self) -> usize {
        let m = self.node_count();
        (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[(i, j)])
            .count()
    }

    /// Edge list text: an `m <count>` line, then `i j w` for each edge with
    /// i < j (zero-based node indices).
    pub fn to_edge_list(&self) -> String {
        let m = self.node_count();
        let mut out = format!("m {m}\n");
        for i in 0..m {
            for j in i + 1..m {
                if self.adjacency[(i, j)] {
                    let _ = writeln!(out, "{i} {j} {:?}", self.weights[(i, j)]);
                }
            }
        }
        out
    }

    /// Parses [`SensorGraph::to_edge_list`] output back into a weight matrix.
    pub fn weights_from_edge_list(text: &str) -> Result<DMatrix<f64>> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| Error::Schema("empty edge list".into()))?;
        let m: usize = head
            .strip_prefix("m ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Schema(format!("bad edge list header '{head}'")))?;
        let mut w = DMatrix::zeros(m, m);
        for (n, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Schema(format!("bad edge line {}: '{line}'", n + 2));
            if parts.len() != 3 {
                return Err(bad());
            }
            let i: usize = parts[0].parse().map_err(|_| bad())?;
            let j: usize = parts[1].parse().map_err(|_| bad())?;
            let v: f64 = parts[2].parse().map_err(|_| bad())?;
            if i >= m || j >= m || i == j {
                return Err(bad());
            }
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
        Ok(w)
    }
}

/// Euclidean distance between every pair of columns of an n×m matrix.
pub fn pairwise_distances(train: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if train.nrows() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 training rows to compare sensors, got {}",
            train.nrows()
        )));
    }
    let m = train.ncols();
    let mut d = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let dist = (train.column(i) - train.column(j)).norm();
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    Ok(d)
}

/// Gaussian kernel weights `exp(-d²/σ²)`, kept only when at least `epsilon`.
pub fn gaussian_weights(distances: &DMatrix<f64>, sigma2: f64, epsilon: f64) -> Result<SensorGraph> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Precondition(format!("sigma2 must be positive, got {sigma2}")));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Precondition(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    if !distances.is_square() {
        return Err(Error::Shape("distance matrix must be square".into()));
    }
    let m = distances.nrows();
    let mut weights = DMatrix::zeros(m, m);
    let mut adjacency = DMatrix::from_element(m, m, false);
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let d = 0.5 * (distances[(i, j)] + distances[(j, i)]);
            let w = (-(d * d) / sigma2).exp();
            if w >= epsilon && w > 0.0 {
                weights[(i, j)] = w;
                adjacency[(i, j)] = true;
            }
        }
    }
    Ok(SensorGraph {
        weights,
        adjacency,
        sigma2,
        epsilon,
        distances: distances.clone(),
    })
}

/// `I - D^{-1/2} S D^{-1/2}` with S the weight matrix (or the boolean
/// adjacency). Zero-degree nodes keep an identity row and column.
pub fn normalized_laplacian(graph: &SensorGraph, use_weights: bool) -> DMatrix<f64> {
    let s = if use_weights {
        graph.weights.clone()
    } else {
        graph.adjacency.map(|a| if a { 1.0 } else { 0.0 })
    };
    laplacian_of(&s)
}

pub fn laplacian_of(s: &DMatrix<f64>) -> DMatrix<f64> {
    let m = s.nrows();
    let inv_sqrt: Vec<f64> = (0..m)
        .map(|i| {
            let deg: f64 = s.row(i).sum();
            if deg > 0.0 { 1.0 / deg.sqrt() } else { 0.0 }
        })
        .collect();
    DMatrix::from_fn(m, m, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * s[(i, j)] * inv_sqrt[j]
    })
}

pub const POWER_ITERATION_CAP: usize = 10_000;
pub const POWER_ITERATION_TOL: f64 = 1e-10;

/// Largest eigenvalue of a symmetric matrix by power iteration on a
/// Gershgorin-shifted copy, started from a fixed vector.
pub fn max_eigenvalue(l: &DMatrix<f64>) -> Result<f64> {
    if !l.is_square() || l.nrows() == 0 {
        return Err(Error::Shape("max_eigenvalue needs a non-empty square matrix".into()));
    }
    let m = l.nrows();
    // shift so the spectrum is non-negative and the top eigenvalue dominates
    let shift = (0..m)
        .map(|i| {
            let off: f64 = (0..m).filter(|&j| j != i).map(|j| l[(i, j)].abs()).sum();
            (off - l[(i, i)]).max(0.0)
        })
        .fold(0.0, f64::max);
    let mut shifted = l.clone();
    for i in 0..m {
        shifted[(i, i)] += shift;
    }
    let mut v = nalgebra::DVector::from_fn(m, |i, _| 1.0 + (i as f64 + 1.0).sqrt() / m as f64);
    v /= v.norm();
    let mut lambda = v.dot(&(&shifted * &v));
    for _ in 0..POWER_ITERATION_CAP {
        let w = &shifted * &v;
        let norm = w.norm();
        if norm == 0.0 {
            // shifted matrix is zero, so l = -shift·I
            return Ok(-shift);
        }
        v = w / norm;
        let next = v.dot(&(&shifted * &v));
        if (next - lambda).abs() <= POWER_ITERATION_TOL * next.abs().max(1.0) {
            return Ok(polish(l, v, next - shift));
        }
        lambda = next;
    }
    Err(Error::NoConvergence { iterations: POWER_ITERATION_CAP })
}

/// A few Rayleigh-quotient steps from the power-iteration estimate. A slowly
/// converging power iteration meets the step tolerance while still about
/// `tol / (1 - λ₂/λ₁)` away; this removes that bias. The refined value is
/// only accepted when it stays next to the estimate.
fn polish(l: &DMatrix<f64>, mut v: nalgebra::DVector<f64>, estimate: f64) -> f64 {
    let m = l.nrows();
    let mut lambda = estimate;
    for _ in 0..3 {
        let shifted = l - DMatrix::identity(m, m) * lambda;
        let Some(w) = shifted.lu().solve(&v) else { break };
        let norm = w.norm();
        if !norm.is_finite() || norm == 0.0 {
            break;
        }
        v = w / norm;
        let next = v.dot(&(l * &v));
        if (next - lambda).abs() <= f64::EPSILON * next.abs().max(1.0) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    if (lambda - estimate).abs() <= 1e-6 * estimate.abs().max(1.0) { lambda } else { estimate }
}

/// `2 L / λ_max - I`.
pub fn rescale_laplacian(l: &DMatrix<f64>, lambda_max: f64) -> Result<DMatrix<f64>> {
    if !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err(Error::Precondition(format!("lambda_max must be positive, got {lambda_max}")));
    }
    let m = l.nrows();
    Ok(l * (2.0 / lambda_max) - DMatrix::identity(m, m))
}

/// Normalized Laplacian with its spectral bound and rescaled form.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianBundle {
    pub laplacian: DMatrix<f64>,
    pub lambda_max: f64,
    pub rescaled: DMatrix<f64>,
}

impl LaplacianBundle {
    pub fn from_graph(graph: &SensorGraph, use_weights: bool) -> Result<Self> {
        Self::from_laplacian(normalized_laplacian(graph, use_weights))
    }

    pub fn from_laplacian(laplacian: DMatrix<f64>) -> Result<Self> {
        let lambda_max = max_eigenvalue(&laplacian)?;
        let rescaled = rescale_laplacian(&laplacian, lambda_max)?;
        Ok(Self { laplacian, lambda_max, rescaled })
    }

    pub fn node_count(&self) -> usize {
        self.laplacian.nrows()
    }

    /// Dense Chebyshev polynomials T_0..T_{order-1} of the rescaled
    /// Laplacian.
    pub fn chebyshev_basis(&self, order: usize) -> Vec<DMatrix<f64>> {
        chebyshev_basis(&self.rescaled, order)
    }
}

pub fn chebyshev_basis(l_tilde: &DMatrix<f64>, order: usize) -> Vec<DMatrix<f64>> {
    let m = l_tilde.nrows();
    let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(order);
    for k in 0..order {
        let t = match k {
            0 => DMatrix::identity(m, m),
            1 => l_tilde.clone(),
            _ => 2.0 * l_tilde * &out[k - 1] - &out[k - 2],
        };
        out.push(t);
    }
    out
}

/// Signals `T_k(L̃) X` for k < order, via the three-term recurrence.
pub fn chebyshev_signals(l_tilde: &DMatrix<f64>, x: &DMatrix<f64>, order: usize) -> Vec<DMatrix<f64>> {
    let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(order);
    for k in 0..order {
        let t = match k {
            0 => x.clone(),
            1 => l_tilde * x,
            _ => 2.0 * l_tilde * &out[k - 1] - &out[k - 2],
        };
        out.push(t);
    }
    out
}

/// Chebyshev graph convolution `Σ_k T_k(L̃) X Θ_k`.
pub fn cheb_conv(l_tilde: &DMatrix<f64>, x: &DMatrix<f64>, thetas: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let Some(first) = thetas.first() else {
        return Err(Error::Shape("Chebyshev order must be at least 1".into()));
    };
    let m = l_tilde.nrows();
    if !l_tilde.is_square() || x.nrows() != m {
        return Err(Error::Shape(format!(
            "graph has {m} nodes, signal has {} rows",
            x.nrows()
        )));
    }
    let (c_in, c_out) = first.shape();
    if x.ncols() != c_in || thetas.iter().any(|t| t.shape() != (c_in, c_out)) {
        return Err(Error::Shape(format!(
            "signal has {} channels; every filter must be {c_in}x{c_out}",
            x.ncols()
        )));
    }
    let signals = chebyshev_signals(l_tilde, x, thetas.len());
    let mut h = DMatrix::zeros(m, c_out);
    for (tx, theta) in signals.iter().zip(thetas) {
        h.gemm(1.0, tx, theta, 1.0);
    }
    Ok(h)
}
