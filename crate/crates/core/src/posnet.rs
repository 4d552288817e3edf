//! Probability-map positioning network.
//!
//! Five dense layers: batch norm after the first two, ReLU after the first
//! four, softmax over `K` grid points at the output. The position estimate
//! is the probability-weighted centroid of the grid, so it always lies in
//! the grid's convex hull.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attacks;
use crate::channel::{dist, Area, Dataset, Point};
use crate::diffgraph::{BatchNormMode, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::features::{csi_batch, FeatureExtractor, FeatureKind};
use crate::ofdm::{self, CsiMatrix, OfdmConfig, PerturbationSequence};
use crate::util;

pub const BCE_EPS: f64 = 1e-7;
pub const BN_EPS: f64 = 1e-5;
/// Layers followed by batch normalization.
pub const BN_LAYERS: usize = 2;
const INFER_CHUNK: usize = 256;

const TAG_INIT: u64 = 10;
const TAG_SHUFFLE: u64 = 11;
const TAG_ADV: u64 = 12;

/// `n x n` lattice of grid points covering an area, corners included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub side: usize,
    pub area: Area,
    pub points: Vec<Point>,
}

impl Grid {
    pub fn lattice(area: Area, side: usize) -> Result<Self> {
        if side < 2 {
            return invalid("grid needs at least 2 points per side");
        }
        let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (side - 1) as f64;
        let points = (0..side)
            .flat_map(|iy| {
                (0..side).map(move |ix| {
                    [
                        step(area.min[0], area.max[0], ix),
                        step(area.min[1], area.max[1], iy),
                    ]
                })
            })
            .collect();
        Ok(Self { side, area, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Larger of the two lattice steps.
    pub fn spacing(&self) -> f64 {
        let dx = (self.area.max[0] - self.area.min[0]) / (self.side - 1) as f64;
        let dy = (self.area.max[1] - self.area.min[1]) / (self.side - 1) as f64;
        dx.max(dy)
    }

    /// `(K, 2)` matrix of grid coordinates.
    pub fn matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 2), |(k, d)| self.points[k][d])
    }

    pub fn contains(&self, p: Point) -> bool {
        let tol = 1e-9;
        p[0] >= self.area.min[0] - tol
            && p[0] <= self.area.max[0] + tol
            && p[1] >= self.area.min[1] - tol
            && p[1] <= self.area.max[1] + tol
    }
}

/// Nonnegative weights over the grid summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Vec<f64>);

impl ProbabilityMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|&v| !(v >= 0.0)) {
            return invalid("probability map entries must be nonnegative");
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return invalid(format!("probability map sums to {total}"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `sum_k g_k m_k`.
pub fn decode_position(m: &ProbabilityMap, grid: &Grid) -> Result<Point> {
    if m.len() != grid.len() {
        return invalid("map size does not match grid");
    }
    let mut x = [0.0; 2];
    for (w, g) in m.values().iter().zip(&grid.points) {
        x[0] += w * g[0];
        x[1] += w * g[1];
    }
    Ok(x)
}

/// Gaussian target map `m_k ∝ exp(-||g_k - x||^2 / (2 sigma^2))`.
pub fn reference_map(x: Point, grid: &Grid, sigma: f64) -> Result<ProbabilityMap> {
    if !(sigma > 0.0) {
        return invalid("reference map width must be positive");
    }
    let d2: Vec<f64> = grid.points.iter().map(|g| dist(*g, x).powi(2)).collect();
    let min = d2.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = d2
        .iter()
        .map(|d| (-(d - min) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    ProbabilityMap::new(w.into_iter().map(|v| v / total).collect())
}

/// Mean binary cross entropy over the `K` entries, with `m` clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(m: &ProbabilityMap, target: &ProbabilityMap) -> Result<f64> {
    if m.len() != target.len() {
        return invalid("map sizes differ");
    }
    let k = m.len() as f64;
    let total: f64 = m
        .values()
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / k)
}

/// Tape form of [`bce_loss`], averaged over rows as well.
pub fn bce_graph(tape: &mut Tape, probs: Var, targets: &Array2<f64>) -> Result<Var> {
    let (n, k) = tape.shape(probs);
    if targets.dim() != (n, k) {
        return invalid("target shape does not match network output");
    }
    let p = tape.clamp(probs, BCE_EPS, 1.0 - BCE_EPS)?;
    let log_p = tape.log(p)?;
    let neg = tape.scale(p, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let t = tape.constant(targets.clone());
    let t_rest = tape.constant(targets.mapv(|v| 1.0 - v));
    let a = tape.mul(t, log_p)?;
    let b = tape.mul(t_rest, log_q)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s)?;
    tape.scale(total, -1.0 / (n * k) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `(in, out)`.
    pub weight: Array2<f64>,
    /// `(1, out)`.
    pub bias: Array2<f64>,
    pub bn: Option<BatchNormParams>,
}

/// Network parameters plus everything needed to rebuild its feature
/// pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PositioningModel {
    pub feature: FeatureKind,
    pub antennas: usize,
    pub subcarriers: usize,
    pub delay_taps: usize,
    /// `[d, h1, h2, h3, h4, K]`.
    pub widths: Vec<usize>,
    pub grid: Grid,
    pub layers: Vec<DenseLayer>,
    pub seed: u64,
}

/// Tape handles of one network instantiation.
pub struct NetVars {
    pub output: Var,
    pub params: Vec<Var>,
    pub bn_nodes: Vec<Var>,
}

impl PositioningModel {
    /// Fresh He-initialized network; hidden widths default to
    /// 512-256-256-256.
    pub fn new(
        extractor: &FeatureExtractor,
        hidden: [usize; 4],
        grid: Grid,
        seed: u64,
    ) -> Result<Self> {
        if hidden.contains(&0) {
            return invalid("hidden widths must be positive");
        }
        let mut widths = vec![extractor.dim()];
        widths.extend_from_slice(&hidden);
        widths.push(grid.len());
        let mut rng = util::child_rng(seed, TAG_INIT, 0);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let gain = if i < 4 { 2.0 } else { 1.0 };
                let std = (gain / fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    std * rng.sample::<f64, _>(StandardNormal)
                });
                DenseLayer {
                    weight,
                    bias: Array2::zeros((1, fan_out)),
                    bn: (i < BN_LAYERS).then(|| BatchNormParams {
                        gamma: Array2::ones((1, fan_out)),
                        beta: Array2::zeros((1, fan_out)),
                        running_mean: Array1::zeros(fan_out),
                        running_var: Array1::ones(fan_out),
                    }),
                }
            })
            .collect();
        Ok(Self {
            feature: extractor.kind(),
            antennas: extractor.antennas(),
            subcarriers: extractor.subcarriers(),
            delay_taps: extractor.delay_taps(),
            widths,
            grid,
            layers,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn extractor(&self) -> Result<FeatureExtractor> {
        FeatureExtractor::new(self.feature, self.antennas, self.subcarriers, self.delay_taps)
    }

    /// Parameter arrays in checkpoint order: per layer `W, b`, then for
    /// batch-norm layers `gamma, beta`.
    fn param_arrays(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(bn) = &l.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    fn param_arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Adds the network to `tape` on top of feature rows `x`. Parameters
    /// become leaves when `trainable`, constants otherwise.
    pub fn graph(&self, tape: &mut Tape, x: Var, mode: BatchNormMode, trainable: bool) -> Result<NetVars> {
        if tape.shape(x).1 != self.input_dim() {
            return invalid(format!(
                "feature width {} does not match model input {}",
                tape.shape(x).1,
                self.input_dim()
            ));
        }
        let add = |tape: &mut Tape, a: &Array2<f64>| {
            if trainable {
                tape.leaf(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let mut params = Vec::new();
        let mut bn_nodes = Vec::new();
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = add(tape, &layer.weight);
            let b = add(tape, &layer.bias);
            params.extend([w, b]);
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if let Some(bn) = &layer.bn {
                let g = add(tape, &bn.gamma);
                let be = add(tape, &bn.beta);
                params.extend([g, be]);
                h = tape.batch_norm(
                    h,
                    g,
                    be,
                    mode,
                    Some((&bn.running_mean, &bn.running_var)),
                    BN_EPS,
                )?;
                bn_nodes.push(h);
            }
            h = if i < last {
                tape.relu(h)?
            } else {
                tape.softmax(h)?
            };
        }
        Ok(NetVars {
            output: h,
            params,
            bn_nodes,
        })
    }

    /// Probability maps for rows of features. Infer mode is processed in
    /// fixed-size chunks; train mode uses the whole input as one batch.
    pub fn forward(&self, features: ArrayView2<f64>, mode: BatchNormMode) -> Result<Array2<f64>> {
        if features.ncols() != self.input_dim() {
            return invalid(format!(
                "feature width {} does not match model input {}",
                features.ncols(),
                self.input_dim()
            ));
        }
        let run = |rows: ArrayView2<f64>| -> Result<Array2<f64>> {
            let mut tape = Tape::new();
            let x = tape.constant(rows.to_owned());
            let net = self.graph(&mut tape, x, mode, false)?;
            Ok(tape.value(net.output).clone())
        };
        match mode {
            BatchNormMode::Train => run(features),
            BatchNormMode::Infer => {
                let parts = features
                    .axis_chunks_iter(Axis(0), INFER_CHUNK)
                    .map(run)
                    .collect::<Result<Vec<_>>>()?;
                let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
                ndarray::concatenate(Axis(0), &views)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))
            }
        }
    }

    /// Single-sample inference.
    pub fn forward_one(&self, features: &[f64]) -> Result<ProbabilityMap> {
        let x = ArrayView2::from_shape((1, features.len()), features)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let m = self.forward(x, BatchNormMode::Infer)?;
        ProbabilityMap::new(m.row(0).to_vec())
    }

    /// Decoded positions `(n, 2)` for rows of features (infer mode).
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self
            .forward(features, BatchNormMode::Infer)?
            .dot(&self.grid.matrix()))
    }

    /// Positions for a batch of CSI matrices.
    pub fn locate(&self, extractor: &FeatureExtractor, csi: &[&CsiMatrix]) -> Result<Array2<f64>> {
        let f = extractor.extract_batch(csi)?;
        self.predict(f.view())
    }
}

/// Hyperparameters for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    /// Width of the Gaussian reference maps; `None` = one grid spacing.
    pub sigma: Option<f64>,
    pub adversarial: bool,
    /// Longest random perturbation used by adversarial training; lengths
    /// are drawn uniformly from `1..=max` (capped by the cyclic prefix).
    pub adversarial_max_len: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.9,
            sigma: None,
            adversarial: false,
            adversarial_max_len: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub loss: Vec<f64>,
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &PositioningModel) -> Self {
        let zeros: Vec<_> = model
            .param_arrays()
            .iter()
            .map(|a| Array2::zeros(a.dim()))
            .collect();
        Self {
            v: zeros.clone(),
            m: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut PositioningModel, grads: Vec<Array2<f64>>, p: &TrainParams) {
        self.t += 1;
        let c1 = 1.0 - p.beta1.powi(self.t);
        let c2 = 1.0 - p.beta2.powi(self.t);
        for (((w, g), m), v) in model
            .param_arrays_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(w)
                .and(&g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = p.beta1 * *m + (1.0 - p.beta1) * g;
                    *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
                    *w -= p.learning_rate * (*m / c1) / ((*v / c2).sqrt() + p.adam_eps);
                });
        }
    }
}

/// Gaussian reference maps for a set of positions, `(n, K)`.
pub fn reference_maps(positions: &[Point], grid: &Grid, sigma: f64) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((positions.len(), grid.len()));
    for (mut row, x) in out.rows_mut().into_iter().zip(positions) {
        row.assign(&Array1::from(reference_map(*x, grid, sigma)?.0));
    }
    Ok(out)
}

/// Minibatch training with binary cross entropy and Adam. With
/// `params.adversarial`, every sample of every batch is perturbed by a
/// fresh random-attack sequence before feature extraction.
pub fn train(
    mut model: PositioningModel,
    dataset: &Dataset,
    cfg: &OfdmConfig,
    params: &TrainParams,
) -> Result<(PositioningModel, TrainReport)> {
    if dataset.is_empty() {
        return invalid("training set is empty");
    }
    if params.batch_size < 2 {
        return invalid("batch size must be at least 2 for batch normalization");
    }
    if let Some(s) = dataset.samples.iter().find(|s| !model.grid.contains(s.position)) {
        return invalid(format!(
            "training position {:?} lies outside the grid",
            s.position
        ));
    }
    let extractor = model.extractor()?;
    let sigma = params.sigma.unwrap_or_else(|| model.grid.spacing());
    let positions: Vec<Point> = dataset.samples.iter().map(|s| s.position).collect();
    let targets = reference_maps(&positions, &model.grid, sigma)?;
    let clean = if params.adversarial {
        None
    } else {
        let csi: Vec<&CsiMatrix> = dataset.samples.iter().map(|s| &s.csi).collect();
        Some(extractor.extract_batch(&csi)?)
    };
    let max_len = params.adversarial_max_len.min(cfg.max_perturbation_len()).max(1);

    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(params.epochs);
    let mut batch_counter = 0u64;
    for epoch in 0..params.epochs {
        let mut rng = util::child_rng(params.seed, TAG_SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(params.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let feats = match &clean {
                Some(f) => f.select(Axis(0), idx),
                None => {
                    let mut arng = util::child_rng(params.seed, TAG_ADV, batch_counter);
                    let perturbed = idx
                        .iter()
                        .map(|&i| {
                            let len = arng.random_range(1..=max_len);
                            let p = attacks::random_attack_with(len, &mut arng)?;
                            ofdm::apply_perturbation(&dataset.samples[i].csi, &p, cfg)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<&CsiMatrix> = perturbed.iter().collect();
                    extractor.extract_rows(csi_batch(&refs).view())?
                }
            };
            batch_counter += 1;
            let tgt = targets.select(Axis(0), idx);

            let mut tape = Tape::new();
            let x = tape.constant(feats);
            let net = model.graph(&mut tape, x, BatchNormMode::Train, true)?;
            let loss = bce_graph(&mut tape, net.output, &tgt)?;
            let value = tape.value(loss)[[0, 0]];
            if !value.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    reason: format!("loss became {value}"),
                });
            }
            let mut grads = tape.backward(loss)?;
            let g: Vec<Array2<f64>> = net.params.iter().map(|&v| grads.take(v)).collect();
            // running statistics
            let mut bn_iter = net.bn_nodes.iter();
            for layer in model.layers.iter_mut() {
                if let Some(bn) = &mut layer.bn {
                    let node = bn_iter.next().expect("one node per bn layer");
                    let (mean, var) = tape.batch_stats(*node).expect("train mode");
                    let n = idx.len() as f64;
                    let unbiased = var * (n / (n - 1.0));
                    let mo = params.bn_momentum;
                    bn.running_mean = &bn.running_mean * mo + mean * (1.0 - mo);
                    bn.running_var = &bn.running_var * mo + unbiased * (1.0 - mo);
                }
            }
            adam.step(&mut model, g, params);
            epoch_loss += value;
            batches += 1;
        }
        history.push(epoch_loss / batches.max(1) as f64);
    }
    Ok((model, TrainReport { loss: history }))
}

/// Per-sample results of [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub estimates: Vec<Point>,
    pub errors: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

impl Evaluation {
    pub fn from_estimates(estimates: Vec<Point>, truth: &[Point]) -> Self {
        let errors: Vec<f64> = estimates.iter().zip(truth).map(|(a, b)| dist(*a, *b)).collect();
        let (mean, median) = summarize(&errors);
        Self {
            estimates,
            errors,
            mean,
            median,
        }
    }
}

/// `(mean, median)`; NaN for an empty slice.
pub fn summarize(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    (mean, median)
}

/// Distance errors of `model` on `dataset`, optionally with one
/// perturbation per sample applied to the CSI first.
pub fn evaluate(
    model: &PositioningModel,
    dataset: &Dataset,
    perturbations: Option<&[PerturbationSequence]>,
    cfg: &OfdmConfig,
) -> Result<Evaluation> {
    let extractor = model.extractor()?;
    let csi: Vec<CsiMatrix> = match perturbations {
        None => dataset.samples.iter().map(|s| s.csi.clone()).collect(),
        Some(ps) => {
            if ps.len() != dataset.len() {
                return invalid("one perturbation per sample is required");
            }
            dataset
                .samples
                .iter()
                .zip(ps)
                .map(|(s, p)| ofdm::apply_perturbation(&s.csi, p, cfg))
                .collect::<Result<_>>()?
        }
    };
    let refs: Vec<&CsiMatrix> = csi.iter().collect();
    let est = model.locate(&extractor, &refs)?;
    let estimates: Vec<Point> = est.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let truth: Vec<Point> = dataset.samples.iter().map(|s| s.position).collect();
    Ok(Evaluation::from_estimates(estimates, &truth))
}

/// Sidecar metadata of a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub feature: FeatureKind,
    pub antennas: usize,
    pub subcarriers: usize,
    pub delay_taps: usize,
    pub widths: Vec<usize>,
    pub grid: Grid,
    pub seed: u64,
    pub bn_layers: usize,
    pub bn_eps: f64,
    /// Human-readable description of the blob layout.
    pub ordering: String,
    pub weights_file: String,
    pub weight_count: usize,
}

pub const CHECKPOINT_FORMAT: &str = "csiguard-posnet-v1";
pub const CHECKPOINT_ORDERING: &str = "for each layer i in 0..5: weight (in x out, row-major), bias (out); \
     for i < 2 additionally gamma (out), beta (out), running_mean (out), running_var (out); \
     all little-endian f32";

impl PositioningModel {
    /// Flat weight blob in checkpoint order.
    pub fn to_blob(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().map(|&v| v as f32));
            out.extend(l.bias.iter().map(|&v| v as f32));
            if let Some(bn) = &l.bn {
                out.extend(bn.gamma.iter().map(|&v| v as f32));
                out.extend(bn.beta.iter().map(|&v| v as f32));
                out.extend(bn.running_mean.iter().map(|&v| v as f32));
                out.extend(bn.running_var.iter().map(|&v| v as f32));
            }
        }
        out
    }

    pub fn meta(&self, weights_file: &str) -> CheckpointMeta {
        CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            feature: self.feature,
            antennas: self.antennas,
            subcarriers: self.subcarriers,
            delay_taps: self.delay_taps,
            widths: self.widths.clone(),
            grid: self.grid.clone(),
            seed: self.seed,
            bn_layers: BN_LAYERS,
            bn_eps: BN_EPS,
            ordering: CHECKPOINT_ORDERING.into(),
            weights_file: weights_file.into(),
            weight_count: self.to_blob().len(),
        }
    }

    /// Writes `<base>.json` and `<base>.bin`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let bin = base.with_extension("bin");
        let name = bin
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let mut f = std::io::BufWriter::new(std::fs::File::create(&bin)?);
        for v in self.to_blob() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        std::fs::write(
            base.with_extension("json"),
            serde_json::to_vec_pretty(&self.meta(&name))?,
        )?;
        Ok(())
    }

    pub fn from_blob(meta: &CheckpointMeta, blob: &[f32]) -> Result<Self> {
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {}", meta.format)));
        }
        if meta.widths.len() != 6 || meta.widths.contains(&0) {
            return Err(Error::Format("checkpoint needs six positive widths".into()));
        }
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if pos + n > blob.len() {
                return Err(Error::Format("checkpoint blob too short".into()));
            }
            let out = blob[pos..pos + n].iter().map(|&v| v as f64).collect();
            pos += n;
            Ok(out)
        };
        let mut layers = Vec::new();
        for (i, io) in meta.widths.windows(2).enumerate() {
            let (fi, fo) = (io[0], io[1]);
            let weight = Array2::from_shape_vec((fi, fo), take(fi * fo)?).expect("sized");
            let bias = Array2::from_shape_vec((1, fo), take(fo)?).expect("sized");
            let bn = if i < meta.bn_layers {
                Some(BatchNormParams {
                    gamma: Array2::from_shape_vec((1, fo), take(fo)?).expect("sized"),
                    beta: Array2::from_shape_vec((1, fo), take(fo)?).expect("sized"),
                    running_mean: Array1::from(take(fo)?),
                    running_var: Array1::from(take(fo)?),
                })
            } else {
                None
            };
            layers.push(DenseLayer { weight, bias, bn });
        }
        if pos != blob.len() {
            return Err(Error::Format("checkpoint blob has trailing data".into()));
        }
        if meta.grid.len() != meta.widths[5] {
            return Err(Error::Format("grid size does not match output width".into()));
        }
        let model = Self {
            feature: meta.feature,
            antennas: meta.antennas,
            subcarriers: meta.subcarriers,
            delay_taps: meta.delay_taps,
            widths: meta.widths.clone(),
            grid: meta.grid.clone(),
            layers,
            seed: meta.seed,
        };
        if model.extractor()?.dim() != model.input_dim() {
            return Err(Error::Format("input width does not match feature dimension".into()));
        }
        Ok(model)
    }

    pub fn load(base: &Path) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_slice(&std::fs::read(base.with_extension("json"))?)?;
        let dir = base.parent().unwrap_or_else(|| Path::new("."));
        let bytes = std::fs::read(dir.join(&meta.weights_file))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format("weight blob length is not a multiple of 4".into()));
        }
        let blob: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::from_blob(&meta, &blob)
    }
}

/// Shared grid matrix for decoding inside tapes.
pub fn grid_map(grid: &Grid) -> Arc<Array2<f64>> {
    Arc::new(grid.matrix())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_dataset, Scene, SceneParams, Split};

    fn grid(side: usize) -> Grid {
        Grid::lattice(Area::new([0.0, 0.0], [20.0, 20.0]).unwrap(), side).unwrap()
    }

    fn small_model(kind: FeatureKind, seed: u64) -> PositioningModel {
        let fx = FeatureExtractor::new(kind, 4, 16, 8).unwrap();
        PositioningModel::new(&fx, [16, 12, 12, 12], grid(4), seed).unwrap()
    }

    #[test]
    fn zero_final_layer_gives_uniform_map() {
        let mut m = small_model(FeatureKind::F2, 1);
        m.layers[4].weight.fill(0.0);
        let f = vec![0.125; m.input_dim()];
        let p = m.forward_one(&f).unwrap();
        for v in p.values() {
            assert!((v - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn maps_sum_to_one_and_inference_is_batch_independent() {
        let m = small_model(FeatureKind::F1, 2);
        let mut rng = util::rng(3);
        let x = Array2::from_shape_fn((37, m.input_dim()), |_| rng.random_range(-1.0..1.0));
        let batched = m.forward(x.view(), BatchNormMode::Infer).unwrap();
        for (i, row) in batched.rows().into_iter().enumerate() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            let single = m.forward_one(x.row(i).as_slice().unwrap()).unwrap();
            let diff = row
                .iter()
                .zip(single.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9);
        }
        assert!(m.forward(Array2::zeros((2, 3)).view(), BatchNormMode::Infer).is_err());
    }

    #[test]
    fn decoding() {
        let g = grid(5);
        let mut one_hot = vec![0.0; 25];
        one_hot[7] = 1.0;
        let x = decode_position(&ProbabilityMap::new(one_hot).unwrap(), &g).unwrap();
        assert_eq!(x, g.points[7]);
        let uniform = ProbabilityMap::new(vec![1.0 / 25.0; 25]).unwrap();
        let c = decode_position(&uniform, &g).unwrap();
        assert!((c[0] - 10.0).abs() < 1e-12 && (c[1] - 10.0).abs() < 1e-12);

        let mut rng = util::rng(4);
        for _ in 0..1000 {
            let w: Vec<f64> = (0..25).map(|_| rng.random::<f64>().powi(4)).collect();
            let s: f64 = w.iter().sum();
            let m = ProbabilityMap::new(w.into_iter().map(|v| v / s).collect()).unwrap();
            assert!(g.contains(decode_position(&m, &g).unwrap()));
        }
    }

    #[test]
    fn gaussian_targets() {
        let g = grid(15);
        let sharp = reference_map(g.points[40], &g, 1e-3).unwrap();
        assert!((sharp.values()[40] - 1.0).abs() < 1e-12);
        // midway between two horizontally adjacent points
        let (a, b) = (g.points[40], g.points[41]);
        let mid = [(a[0] + b[0]) / 2.0, a[1]];
        let m = reference_map(mid, &g, 1.0).unwrap();
        assert!((m.values()[40] - m.values()[41]).abs() < 1e-15);
        assert!(reference_map(mid, &g, 0.0).is_err());

        let mut rng = util::rng(5);
        let s = g.spacing();
        for _ in 0..100 {
            let x = [rng.random_range(4.0..16.0), rng.random_range(4.0..16.0)];
            let m = reference_map(x, &g, s).unwrap();
            let d = decode_position(&m, &g).unwrap();
            assert!(dist(d, x) < 0.5 * s);
        }
    }

    #[test]
    fn bce_values_and_gradient() {
        let eps = BCE_EPS;
        let mut oh = vec![0.0; 4];
        oh[1] = 1.0;
        let m = ProbabilityMap::new(oh.clone()).unwrap();
        let loss = bce_loss(&m, &m).unwrap();
        let want = -((1.0 - eps).ln() * 3.0 + (1.0 - eps).ln()) / 4.0;
        assert!((loss - want).abs() < 1e-12 && loss.abs() < 1e-5);
        let half = ProbabilityMap::new(vec![0.5, 0.5]).unwrap();
        let t = ProbabilityMap::new(vec![1.0, 0.0]).unwrap();
        assert!((bce_loss(&half, &t).unwrap() - 2f64.ln()).abs() < 1e-12);

        let mut rng = util::rng(6);
        let logits = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let targets = Array2::from_shape_fn((3, 5), |(_, k)| if k == 2 { 0.6 } else { 0.1 });
        let err = crate::diffgraph::grad_check(
            |t, v| {
                let p = t.softmax(v[0])?;
                bce_graph(t, p, &targets)
            },
            &[logits.clone()],
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        // graph and plain agree on a single row
        let mut tape = Tape::new();
        let l = tape.constant(logits.slice(ndarray::s![0..1, ..]).to_owned());
        let p = tape.softmax(l).unwrap();
        let g = bce_graph(&mut tape, p, &targets.slice(ndarray::s![0..1, ..]).to_owned()).unwrap();
        let pm = ProbabilityMap::new(tape.value(p).row(0).to_vec()).unwrap();
        let plain = bce_loss(&pm, &ProbabilityMap(targets.row(0).to_vec())).unwrap();
        assert!((tape.value(g)[[0, 0]] - plain).abs() < 1e-12);
    }

    #[test]
    fn full_loss_gradient_through_network() {
        let m = small_model(FeatureKind::F2, 7);
        let mut rng = util::rng(8);
        let x = Array2::from_shape_fn((6, m.input_dim()), |_| rng.random_range(0.0..1.0));
        let targets = reference_maps(
            &(0..6).map(|i| [3.0 * i as f64, 17.0 - 2.0 * i as f64]).collect::<Vec<_>>(),
            &m.grid,
            m.grid.spacing(),
        )
        .unwrap();
        let arrays: Vec<Array2<f64>> = m.param_arrays().into_iter().cloned().collect();
        let err = crate::diffgraph::grad_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let net = graph_with_params(&m, t, xv, v)?;
                bce_graph(t, net, &targets)
            },
            &arrays,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    /// Network graph wired to externally supplied parameter vars.
    fn graph_with_params(m: &PositioningModel, t: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
        let mut h = x;
        let mut it = p.iter();
        for (i, layer) in m.layers.iter().enumerate() {
            let w = *it.next().unwrap();
            let b = *it.next().unwrap();
            let z = t.matmul(h, w)?;
            h = t.add(z, b)?;
            if layer.bn.is_some() {
                let g = *it.next().unwrap();
                let be = *it.next().unwrap();
                h = t.batch_norm(h, g, be, BatchNormMode::Train, None, BN_EPS)?;
            }
            h = if i < 4 { t.relu(h)? } else { t.softmax(h)? };
        }
        Ok(h)
    }

    fn tiny_dataset(n: usize, seed: u64) -> (Dataset, OfdmConfig) {
        let params = SceneParams {
            antennas: 4,
            ..SceneParams::desk()
        };
        let scene = Scene::generate(&params, 1).unwrap();
        let cfg = OfdmConfig::new(16, 12, 4).unwrap();
        (build_dataset(&scene, &cfg, n, Some(20.0), seed, Split::Train).unwrap(), cfg)
    }

    #[test]
    fn training_is_deterministic_and_fits_small_set() {
        let (ds, cfg) = tiny_dataset(50, 2);
        let fx = FeatureExtractor::new(FeatureKind::F1, 4, 16, 8).unwrap();
        let model = PositioningModel::new(&fx, [64, 64, 64, 64], grid(8), 3).unwrap();
        let params = TrainParams {
            epochs: 500,
            batch_size: 25,
            learning_rate: 3e-3,
            seed: 4,
            ..TrainParams::default()
        };
        let (a, report) = train(model.clone(), &ds, &cfg, &params).unwrap();
        let ev = evaluate(&a, &ds, None, &cfg).unwrap();
        assert!(
            ev.mean < a.grid.spacing(),
            "train error {} vs spacing {}",
            ev.mean,
            a.grid.spacing()
        );
        assert!(report.loss.last().unwrap() < &report.loss[0]);

        let short = TrainParams {
            epochs: 3,
            ..params.clone()
        };
        let (x, _) = train(model.clone(), &ds, &cfg, &short).unwrap();
        let (y, _) = train(model.clone(), &ds, &cfg, &short).unwrap();
        assert_eq!(x, y);
        let adv = TrainParams {
            adversarial: true,
            ..short
        };
        let (x, _) = train(model.clone(), &ds, &cfg, &adv).unwrap();
        let (y, _) = train(model, &ds, &cfg, &adv).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn scalar_perturbation_leaves_errors_unchanged() {
        let (ds, cfg) = tiny_dataset(20, 5);
        let m = small_model(FeatureKind::F1, 9);
        let base = evaluate(&m, &ds, None, &cfg).unwrap();
        let ps: Vec<_> = (0..20)
            .map(|i| PerturbationSequence::new(vec![ofdm::phasor(i as f64)]).unwrap())
            .collect();
        let pert = evaluate(&m, &ds, Some(&ps), &cfg).unwrap();
        for (a, b) in base.errors.iter().zip(&pert.errors) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_stub_has_small_error() {
        let g = grid(15);
        let mut rng = util::rng(10);
        let truth: Vec<Point> = (0..200)
            .map(|_| [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)])
            .collect();
        let est: Vec<Point> = truth
            .iter()
            .map(|x| decode_position(&reference_map(*x, &g, g.spacing()).unwrap(), &g).unwrap())
            .collect();
        let ev = Evaluation::from_estimates(est, &truth);
        assert!(ev.mean < 0.5 * g.spacing(), "{}", ev.mean);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small_model(FeatureKind::F2, 11);
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        m.save(&base).unwrap();
        let back = PositioningModel::load(&base).unwrap();
        assert_eq!(back.to_blob(), m.to_blob());
        assert_eq!(back.widths, m.widths);
        let bytes = std::fs::read(base.with_extension("bin")).unwrap();
        assert_eq!(bytes.len(), 4 * m.to_blob().len());
        assert!(PositioningModel::from_blob(&m.meta("x"), &m.to_blob()[1..]).is_err());
    }

    #[test]
    fn training_rejects_outside_positions() {
        let (mut ds, cfg) = tiny_dataset(4, 1);
        ds.samples[0].position = [30.0, 1.0];
        let m = small_model(FeatureKind::F2, 1);
        assert!(train(m, &ds, &cfg, &TrainParams::default()).is_err());
    }
}
