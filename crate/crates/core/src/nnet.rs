//! Chebyshev graph-convolution classifier with hand-written reverse-mode
//! gradients and an Adam optimizer.
//!
//! Each sample is an m×1 graph signal. Convolution layers map m×c_in node
//! features to m×c_out through `Σ_k T_k(L̃) X Θ_k + b`, followed by ReLU.
//! The last convolution output is flattened node-major and fed to a stack of
//! dense layers (ReLU on hidden layers, none on the logits).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Sample};
use crate::graph::{chebyshev_signals, LaplacianBundle};
use crate::{par, Error, Result};

/// Probability floor applied before taking logs in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Samples per gradient chunk. Chunking is fixed so that the summation order
/// does not depend on the number of worker threads.
const GRAD_CHUNK: usize = 8;

/// Layer widths of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub cheb_order: usize,
    /// Output channels of each convolution layer (input has one channel).
    pub conv_widths: Vec<usize>,
    /// Hidden dense widths, excluding the output layer.
    pub hidden_widths: Vec<usize>,
    pub outputs: usize,
}

impl Architecture {
    /// Same layout with a different output width.
    pub fn with_outputs(&self, outputs: usize) -> Self {
        Self { outputs, ..self.clone() }
    }

    /// Widths of every dense layer including the logits.
    pub fn fc_widths(&self) -> Vec<usize> {
        let mut w = self.hidden_widths.clone();
        w.push(self.outputs);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.cheb_order == 0 {
            return Err(Error::Config("Chebyshev order must be at least 1".into()));
        }
        if self.conv_widths.is_empty() {
            return Err(Error::Config("at least one convolution layer is required".into()));
        }
        if self.outputs == 0 || self.conv_widths.iter().chain(&self.hidden_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChebLayer {
    /// One c_in×c_out filter per Chebyshev term.
    pub thetas: Vec<DMatrix<f64>>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out×in.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv: Vec<ChebLayer>,
    pub fc: Vec<DenseLayer>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            conv: self
                .conv
                .iter()
                .map(|l| ChebLayer {
                    thetas: l.thetas.iter().map(|t| DMatrix::zeros(t.nrows(), t.ncols())).collect(),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
            fc: self
                .fc
                .iter()
                .map(|l| DenseLayer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Flat views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.conv {
            out.extend(l.thetas.iter().map(|t| t.as_slice()));
            out.push(l.bias.as_slice());
        }
        for l in &self.fc {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.conv {
            out.extend(l.thetas.iter_mut().map(|t| t.as_mut_slice()));
            out.push(l.bias.as_mut_slice());
        }
        for l in &mut self.fc {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Graph-convolution classifier bound to one sensor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    pub laplacian: LaplacianBundle,
    pub arch: Architecture,
    pub params: Params,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> DMatrix<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    // fill in row-major order so the draw sequence is layout independent
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.random_range(-limit..=limit);
        }
    }
    m
}

impl GcnModel {
    /// Glorot-uniform weights, zero biases, drawn from `seed`.
    pub fn new(laplacian: LaplacianBundle, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let m = laplacian.node_count();
        if m == 0 {
            return Err(Error::Shape("graph has no nodes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = Vec::new();
        let mut c_in = 1;
        for &c_out in &arch.conv_widths {
            let thetas = (0..arch.cheb_order)
                .map(|_| glorot(&mut rng, c_in, c_out, c_in, c_out))
                .collect();
            conv.push(ChebLayer { thetas, bias: DVector::zeros(c_out) });
            c_in = c_out;
        }
        let mut fc = Vec::new();
        let mut width = m * c_in;
        for out in arch.fc_widths() {
            fc.push(DenseLayer {
                weight: glorot(&mut rng, out, width, width, out),
                bias: DVector::zeros(out),
            });
            width = out;
        }
        Ok(Self { laplacian, arch, params: Params { conv, fc } })
    }

    pub fn node_count(&self) -> usize {
        self.laplacian.node_count()
    }

    pub fn outputs(&self) -> usize {
        self.arch.outputs
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.node_count() {
            return Err(Error::Shape(format!(
                "sample has {} variables, graph has {} nodes",
                x.len(),
                self.node_count()
            )));
        }
        Ok(())
    }

    fn forward_one(&self, x: &[f64]) -> SampleCache {
        let m = self.node_count();
        let order = self.arch.cheb_order;
        let l_tilde = &self.laplacian.rescaled;
        let mut input = DMatrix::from_column_slice(m, 1, x);
        let mut conv = Vec::with_capacity(self.params.conv.len());
        for layer in &self.params.conv {
            let signals = chebyshev_signals(l_tilde, &input, order);
            let c_out = layer.bias.len();
            let mut pre = DMatrix::zeros(m, c_out);
            for (s, theta) in signals.iter().zip(&layer.thetas) {
                pre.gemm(1.0, s, theta, 1.0);
            }
            for mut row in pre.row_iter_mut() {
                row += layer.bias.transpose();
            }
            let out = pre.map(relu);
            conv.push(ConvCache { signals, pre });
            input = out;
        }
        // node-major flatten of the last convolution output
        let c = input.ncols();
        let mut a = DVector::from_fn(m * c, |idx, _| input[(idx / c, idx % c)]);
        let n_fc = self.params.fc.len();
        let mut fc_in = Vec::with_capacity(n_fc);
        let mut fc_pre = Vec::with_capacity(n_fc);
        let mut fc_out = Vec::with_capacity(n_fc);
        for (i, layer) in self.params.fc.iter().enumerate() {
            let mut pre = layer.bias.clone();
            pre.gemv(1.0, &layer.weight, &a, 1.0);
            let out = if i + 1 < n_fc { pre.map(relu) } else { pre.clone() };
            fc_in.push(a);
            fc_pre.push(pre);
            fc_out.push(out.clone());
            a = out;
        }
        let probs = softmax(fc_out.last().expect("at least one dense layer").as_slice());
        SampleCache { conv, fc_in, fc_pre, fc_out, probs }
    }

    /// Adds the gradient of `weight · CE(sample)` to `grads`; returns the
    /// sample loss.
    fn backward_one(&self, cache: &SampleCache, label: usize, weight: f64, grads: &mut Params) -> f64 {
        let m = self.node_count();
        let p = &cache.probs;
        let loss = -p[label].max(PROB_FLOOR).ln();

        let mut delta = DVector::from_iterator(p.len(), p.iter().copied());
        delta[label] -= 1.0;
        delta *= weight;

        let n_fc = self.params.fc.len();
        let mut d_input = DVector::zeros(0);
        for i in (0..n_fc).rev() {
            let layer = &self.params.fc[i];
            let g = &mut grads.fc[i];
            g.weight.ger(1.0, &delta, &cache.fc_in[i], 1.0);
            g.bias += &delta;
            let mut da = DVector::zeros(layer.weight.ncols());
            da.gemv_tr(1.0, &layer.weight, &delta, 0.0);
            if i > 0 {
                let pre = &cache.fc_pre[i - 1];
                delta = da.zip_map(pre, |d, z| if z > 0.0 { d } else { 0.0 });
            } else {
                d_input = da;
            }
        }

        let c = self.params.conv.last().map_or(1, |l| l.bias.len());
        let mut d_out = DMatrix::from_fn(m, c, |i, j| d_input[i * c + j]);
        let l_tilde = &self.laplacian.rescaled;
        for j in (0..self.params.conv.len()).rev() {
            let layer = &self.params.conv[j];
            let lc = &cache.conv[j];
            let d_pre = d_out.zip_map(&lc.pre, |d, z| if z > 0.0 { d } else { 0.0 });
            let g = &mut grads.conv[j];
            for col in 0..d_pre.ncols() {
                g.bias[col] += d_pre.column(col).sum();
            }
            for (k, (s, theta)) in lc.signals.iter().zip(&layer.thetas).enumerate() {
                g.thetas[k].gemm_tr(1.0, s, &d_pre, 1.0);
                let _ = theta;
            }
            if j == 0 {
                break;
            }
            // gradient w.r.t. each Chebyshev signal, then back through the
            // recurrence S_k = 2 L̃ S_{k-1} - S_{k-2}
            let mut gs: Vec<DMatrix<f64>> = layer.thetas.iter().map(|theta| &d_pre * theta.transpose()).collect();
            for k in (2..gs.len()).rev() {
                let back = 2.0 * l_tilde * &gs[k];
                gs[k - 1] += back;
                let prev = gs[k].clone();
                gs[k - 2] -= prev;
            }
            let mut dx = gs[0].clone();
            if gs.len() > 1 {
                dx.gemm(1.0, l_tilde, &gs[1], 1.0);
            }
            d_out = dx;
        }
        loss
    }

    /// Full forward pass over a batch, keeping every dense-layer output.
    pub fn forward(&self, batch: &[Sample]) -> Result<ForwardTrace> {
        let xs: Vec<&[f64]> = batch.iter().map(|s| s.x.as_slice()).collect();
        self.forward_rows(&xs)
    }

    pub fn forward_rows(&self, xs: &[&[f64]]) -> Result<ForwardTrace> {
        for x in xs {
            self.check_input(x)?;
        }
        let widths = self.arch.fc_widths();
        let caches = par::map(xs, |x| {
            let c = self.forward_one(x);
            (c.fc_out, c.probs)
        });
        let b = xs.len();
        let mut fc_outputs: Vec<DMatrix<f64>> = widths.iter().map(|&w| DMatrix::zeros(b, w)).collect();
        let mut probabilities = DMatrix::zeros(b, self.outputs());
        for (r, (outs, probs)) in caches.into_iter().enumerate() {
            for (layer, out) in outs.iter().enumerate() {
                fc_outputs[layer].row_mut(r).copy_from(&out.transpose());
            }
            for (k, p) in probs.iter().enumerate() {
                probabilities[(r, k)] = *p;
            }
        }
        let logits = fc_outputs.last().expect("output layer").clone();
        Ok(ForwardTrace { fc_outputs, logits, probabilities })
    }

    /// Mean cross-entropy over `batch` and its exact gradient.
    pub fn loss_and_gradient(&self, batch: &[&Sample], labels: &[usize]) -> Result<(f64, Params)> {
        if batch.len() != labels.len() {
            return Err(Error::Shape("batch and label lengths differ".into()));
        }
        if batch.is_empty() {
            return Err(Error::Empty("gradient of an empty batch".into()));
        }
        for (s, &y) in batch.iter().zip(labels) {
            self.check_input(&s.x)?;
            if y >= self.outputs() {
                return Err(Error::LabelOutOfRange { label: y, classes: self.outputs() });
            }
        }
        let weight = 1.0 / batch.len() as f64;
        let pairs: Vec<(&Sample, usize)> = batch.iter().copied().zip(labels.iter().copied()).collect();
        let partials = par::map_chunks(&pairs, GRAD_CHUNK, |chunk| {
            let mut g = self.params.zeros_like();
            let mut loss = 0.0;
            for (s, y) in chunk {
                let cache = self.forward_one(&s.x);
                loss += self.backward_one(&cache, *y, weight, &mut g);
            }
            (loss, g)
        });
        let mut iter = partials.into_iter();
        let (mut loss, mut grads) = iter.next().expect("non-empty batch");
        for (l, g) in iter {
            loss += l;
            grads.add_assign(&g);
        }
        Ok((loss * weight, grads))
    }

    /// Arg-max labels (lowest index on ties) and class probabilities.
    pub fn predict(&self, samples: &[Sample]) -> Result<(Vec<usize>, DMatrix<f64>)> {
        let trace = self.forward(samples)?;
        let labels = (0..trace.probabilities.nrows())
            .map(|r| argmax(trace.probabilities.row(r).iter().copied()))
            .collect();
        Ok((labels, trace.probabilities))
    }

    /// Writes a text checkpoint: a version line, the architecture, then
    /// every tensor as a `tensor <name> <rows> <cols>` header followed by
    /// its rows.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("sofd-gcn-checkpoint v1\n");
        let _ = writeln!(out, "nodes {}", self.node_count());
        let _ = writeln!(out, "cheb_order {}", self.arch.cheb_order);
        let _ = writeln!(out, "conv_widths {}", join(&self.arch.conv_widths));
        let _ = writeln!(out, "hidden_widths {}", join(&self.arch.hidden_widths));
        let _ = writeln!(out, "outputs {}", self.arch.outputs);
        let _ = writeln!(out, "lambda_max {:?}", self.laplacian.lambda_max);
        write_tensor(&mut out, "laplacian", &self.laplacian.laplacian);
        for (i, l) in self.params.conv.iter().enumerate() {
            for (k, t) in l.thetas.iter().enumerate() {
                write_tensor(&mut out, &format!("conv{i}.theta{k}"), t);
            }
            write_tensor(&mut out, &format!("conv{i}.bias"), &DMatrix::from_column_slice(1, l.bias.len(), l.bias.as_slice()));
        }
        for (i, l) in self.params.fc.iter().enumerate() {
            write_tensor(&mut out, &format!("fc{i}.weight"), &l.weight);
            write_tensor(&mut out, &format!("fc{i}.bias"), &DMatrix::from_column_slice(1, l.bias.len(), l.bias.as_slice()));
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |what: &str| Error::Schema(format!("checkpoint: {what}"));
        if lines.next() != Some("sofd-gcn-checkpoint v1") {
            return Err(bad("unsupported version line"));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing {name}")))?;
            line.strip_prefix(name)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| bad(&format!("expected {name}, got '{line}'")))
        };
        let parse_list = |s: String| -> Result<Vec<usize>> {
            s.split_whitespace().map(|v| v.parse().map_err(|_| bad("bad width"))).collect()
        };
        let nodes: usize = field("nodes")?.parse().map_err(|_| bad("bad nodes"))?;
        let cheb_order = field("cheb_order")?.parse().map_err(|_| bad("bad cheb_order"))?;
        let conv_widths = parse_list(field("conv_widths")?)?;
        let hidden_widths = parse_list(field("hidden_widths")?)?;
        let outputs = field("outputs")?.parse().map_err(|_| bad("bad outputs"))?;
        let lambda_max: f64 = field("lambda_max")?.parse().map_err(|_| bad("bad lambda_max"))?;
        let arch = Architecture { cheb_order, conv_widths, hidden_widths, outputs };
        let rest: Vec<&str> = lines.collect();
        let mut cursor = 0;
        let laplacian = read_tensor(&rest, &mut cursor, "laplacian")?;
        if laplacian.shape() != (nodes, nodes) {
            return Err(bad("laplacian shape"));
        }
        let rescaled = crate::graph::rescale_laplacian(&laplacian, lambda_max)?;
        let bundle = LaplacianBundle { laplacian, lambda_max, rescaled };
        let mut model = GcnModel::new(bundle, arch, 0)?;
        for (i, l) in model.params.conv.iter_mut().enumerate() {
            for (k, t) in l.thetas.iter_mut().enumerate() {
                let v = read_tensor(&rest, &mut cursor, &format!("conv{i}.theta{k}"))?;
                assign(t, v)?;
            }
            let b = read_tensor(&rest, &mut cursor, &format!("conv{i}.bias"))?;
            assign_vec(&mut l.bias, b)?;
        }
        for (i, l) in model.params.fc.iter_mut().enumerate() {
            let w = read_tensor(&rest, &mut cursor, &format!("fc{i}.weight"))?;
            assign(&mut l.weight, w)?;
            let b = read_tensor(&rest, &mut cursor, &format!("fc{i}.bias"))?;
            assign_vec(&mut l.bias, b)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_tensor(out: &mut String, name: &str, t: &DMatrix<f64>) {
    let _ = writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols());
    for r in 0..t.nrows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

fn read_tensor(lines: &[&str], cursor: &mut usize, name: &str) -> Result<DMatrix<f64>> {
    let bad = |what: String| Error::Schema(format!("checkpoint tensor {name}: {what}"));
    let head = lines.get(*cursor).ok_or_else(|| bad("missing".into()))?;
    let parts: Vec<&str> = head.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "tensor" || parts[1] != name {
        return Err(bad(format!("unexpected header '{head}'")));
    }
    let rows: usize = parts[2].parse().map_err(|_| bad("rows".into()))?;
    let cols: usize = parts[3].parse().map_err(|_| bad("cols".into()))?;
    *cursor += 1;
    let mut t = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let line = lines.get(*cursor).ok_or_else(|| bad("truncated".into()))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(format!("bad value '{v}'"))))
            .collect::<Result<_>>()?;
        if vals.len() != cols {
            return Err(bad(format!("row {r} has {} values", vals.len())));
        }
        for (c, v) in vals.into_iter().enumerate() {
            t[(r, c)] = v;
        }
        *cursor += 1;
    }
    Ok(t)
}

fn assign(dst: &mut DMatrix<f64>, src: DMatrix<f64>) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::Shape(format!("checkpoint tensor {:?} vs {:?}", src.shape(), dst.shape())));
    }
    *dst = src;
    Ok(())
}

fn assign_vec(dst: &mut DVector<f64>, src: DMatrix<f64>) -> Result<()> {
    if src.nrows() != 1 || src.ncols() != dst.len() {
        return Err(Error::Shape("checkpoint bias shape".into()));
    }
    dst.copy_from_slice(src.as_slice());
    Ok(())
}

struct ConvCache {
    signals: Vec<DMatrix<f64>>,
    pre: DMatrix<f64>,
}

struct SampleCache {
    conv: Vec<ConvCache>,
    fc_in: Vec<DVector<f64>>,
    fc_pre: Vec<DVector<f64>>,
    fc_out: Vec<DVector<f64>>,
    probs: Vec<f64>,
}

fn relu(v: f64) -> f64 {
    if v > 0.0 { v } else { 0.0 }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Batch activations from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Output of every dense layer (batch × width), in depth order. Hidden
    /// layers are post-ReLU; the last entry is the logits.
    pub fc_outputs: Vec<DMatrix<f64>>,
    pub logits: DMatrix<f64>,
    pub probabilities: DMatrix<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.probabilities.nrows()
    }
}

/// Mean cross-entropy of probability rows against integer labels.
pub fn ce_loss(probabilities: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if probabilities.nrows() != labels.len() {
        return Err(Error::Shape("probability rows and labels differ in length".into()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("loss of an empty batch".into()));
    }
    let k = probabilities.ncols();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        total -= probabilities[(r, y)].clamp(PROB_FLOOR, 1.0).ln();
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 64,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.epochs >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { first: zeros.clone(), second: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let grads = grads.tensors();
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len()
        || state.first.len() != tensors.len()
        || tensors.iter().zip(&grads).any(|(p, g)| p.len() != g.len())
    {
        return Err(Error::Shape("parameter, gradient and optimizer shapes disagree".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in tensors.iter_mut().zip(&grads).zip(&mut state.first).zip(&mut state.second) {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Mini-batch Adam training for a fixed number of epochs. Returns the mean
/// training loss of each epoch.
pub fn train(model: &mut GcnModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let labels: Vec<usize> = data
        .samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Precondition(format!("sample {} has no label", s.id))))
        .collect::<Result<_>>()?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.outputs()) {
        return Err(Error::LabelOutOfRange { label: bad, classes: model.outputs() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = model.loss_and_gradient(&batch, &ys)?;
            total += loss * idx.len() as f64;
            adam_step(&mut model.params, &grads, &mut state, cfg)?;
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {} loss {mean:.6}", epoch + 1);
        history.push(mean);
    }
    Ok(history)
}

/// Loss history as `epoch,mean_loss` CSV.
pub fn loss_history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{},{l:?}", i + 1);
    }
    out
}
