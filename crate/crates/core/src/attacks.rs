//! Perturbation-sequence generators: white-box, transfer, pool and random.
//!
//! The optimizing attacks run projected gradient ascent on the unit sphere
//! over the split real/imaginary taps of `p̄`. Every sample is optimized
//! independently; samples are batched on one tape only for speed.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::Dataset;
use crate::diffgraph::{complex_block_matrix, BatchNormMode, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::features::{csi_batch, FeatureExtractor, FeatureKind};
use crate::ofdm::{phasor, CsiMatrix, OfdmConfig, PerturbationSequence, RateParams};
use crate::posnet::PositioningModel;
use crate::util;

const TAG_INIT: u64 = 20;
const TAG_POOL: u64 = 21;
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// `L_p`.
    pub length: usize,
    /// Weight of the rate term.
    pub lambda: f64,
    pub iterations: usize,
    pub step: f64,
    /// Backtracking stops once the step falls below this.
    pub min_step: f64,
    pub restarts: usize,
    /// `T`, the number of pool entries.
    pub pool_size: usize,
    pub rate: RateParams,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(length: usize, rate: RateParams) -> Self {
        Self {
            length,
            lambda: 0.0,
            iterations: 200,
            step: 0.05,
            min_step: 1e-4,
            restarts: 4,
            pool_size: 32,
            rate,
            seed: 0,
        }
    }

    pub fn validate(&self, ofdm: &OfdmConfig) -> Result<()> {
        if self.length == 0 {
            return invalid("perturbation length must be at least 1");
        }
        ofdm.check_prefix(ofdm.channel_taps, self.length)?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid("lambda must be finite and nonnegative");
        }
        if self.restarts == 0 {
            return invalid("at least one restart is required");
        }
        if !(self.step > 0.0 && self.min_step > 0.0) {
            return invalid("step sizes must be positive");
        }
        Ok(())
    }
}

/// Result of one optimized sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub sequence: PerturbationSequence,
    pub objective: f64,
    /// Objective at each restart's starting point.
    pub initial_objectives: Vec<f64>,
    /// Accepted objective values of the winning restart, in order.
    pub trace: Vec<f64>,
}

/// i.i.d. amplitudes `U[0,1]` and phases `U[0, 2π)`, then normalized.
pub fn random_attack_with<R: Rng + ?Sized>(length: usize, rng: &mut R) -> Result<PerturbationSequence> {
    if length == 0 {
        return invalid("perturbation length must be at least 1");
    }
    loop {
        let taps: Vec<_> = (0..length)
            .map(|_| {
                let a: f64 = rng.random();
                let phi = rng.random::<f64>() * std::f64::consts::TAU;
                a * phasor(phi)
            })
            .collect();
        if taps.iter().any(|z| z.norm_sqr() > 0.0) {
            return PerturbationSequence::new(taps);
        }
    }
}

pub fn random_attack(length: usize, seed: u64) -> Result<PerturbationSequence> {
    random_attack_with(length, &mut util::rng(seed))
}

pub fn pool_attack_with<R: Rng + ?Sized>(
    pool: &[PerturbationSequence],
    rng: &mut R,
) -> Result<PerturbationSequence> {
    if pool.is_empty() {
        return invalid("perturbation pool is empty");
    }
    Ok(pool[rng.random_range(0..pool.len())].clone())
}

pub fn pool_attack(pool: &[PerturbationSequence], seed: u64) -> Result<PerturbationSequence> {
    pool_attack_with(pool, &mut util::rng(seed))
}

/// `(2 L_p, 2W)` split-layout map from `p̄` to `p = √W F [p̄; 0]`.
pub fn transfer_matrix(length: usize, subcarriers: usize) -> Array2<f64> {
    let w = subcarriers as f64;
    let angle = |t: usize, k: usize| -std::f64::consts::TAU * ((t * k) % subcarriers) as f64 / w;
    let re = Array2::from_shape_fn((length, subcarriers), |(t, k)| angle(t, k).cos());
    let im = Array2::from_shape_fn((length, subcarriers), |(t, k)| angle(t, k).sin());
    complex_block_matrix(&re, &im)
}

struct Network<'a> {
    model: &'a PositioningModel,
    extractor: FeatureExtractor,
    grid: Arc<Array2<f64>>,
    /// Unperturbed estimates, `(n, 2)`.
    base: Array2<f64>,
}

/// Batched attack objective `||x̂ - x̂(p̄)||^2 + w R(p̄)` for a fixed set
/// of CSI matrices; without a model only the rate term remains.
pub struct AttackObjective<'a> {
    net: Option<Network<'a>>,
    antennas: usize,
    subcarriers: usize,
    /// `(n B, 2W)`.
    csi: Array2<f64>,
    /// `Σ_b |H_bw|^2 · Es/N0`, `(n, W)`.
    gains: Array2<f64>,
    transfer: Arc<Array2<f64>>,
    power: Arc<Array2<f64>>,
    omega: Arc<Array2<f64>>,
    rate_weight: f64,
}

impl<'a> AttackObjective<'a> {
    /// `rate_weight` is `λ` for the attacks and 1 for rate-only ascent.
    pub fn new(
        model: Option<&'a PositioningModel>,
        csi: &[&CsiMatrix],
        cfg: &AttackConfig,
        rate_weight: f64,
    ) -> Result<Self> {
        let first = csi.first().ok_or_else(|| Error::InvalidArgument("no CSI given".into()))?;
        let (b, w) = (first.antennas(), first.subcarriers());
        if csi.iter().any(|h| h.antennas() != b || h.subcarriers() != w) {
            return invalid("CSI matrices differ in shape");
        }
        if model.is_none() && !(rate_weight > 0.0) {
            return invalid("objective without a model needs a positive rate weight");
        }
        if cfg.length > w {
            return invalid("perturbation longer than the symbol");
        }
        if cfg.rate.data_subcarriers.iter().any(|&k| k >= w) {
            return invalid("data subcarrier index out of range");
        }
        let net = match model {
            Some(m) => {
                if m.antennas != b || m.subcarriers != w {
                    return invalid("model was trained for a different CSI shape");
                }
                let extractor = m.extractor()?;
                let base = m.locate(&extractor, csi)?;
                Some(Network {
                    model: m,
                    extractor,
                    grid: Arc::new(m.grid.matrix()),
                    base,
                })
            }
            None => None,
        };
        let n = csi.len();
        let rows = csi_batch(csi)
            .into_shape_with_order((n * b, 2 * w))
            .expect("standard layout");
        let snr = cfg.rate.snr_linear();
        let mut gains = Array2::zeros((n, w));
        for (mut g, h) in gains.rows_mut().into_iter().zip(csi) {
            g.assign(&Array1::from(h.antenna_power()).mapv(|v| v * snr));
        }
        let mut power = Array2::zeros((2 * w, w));
        for k in 0..w {
            power[[k, k]] = 1.0;
            power[[w + k, k]] = 1.0;
        }
        let mut omega = Array2::zeros((w, 1));
        let share = 1.0 / cfg.rate.data_subcarriers.len() as f64;
        for &k in &cfg.rate.data_subcarriers {
            omega[[k, 0]] += share;
        }
        Ok(Self {
            net,
            antennas: b,
            subcarriers: w,
            csi: rows,
            gains,
            transfer: Arc::new(transfer_matrix(cfg.length, w)),
            power: Arc::new(power),
            omega: Arc::new(omega),
            rate_weight,
        })
    }

    pub fn len(&self) -> usize {
        self.gains.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds the objective of samples `idx` to `tape`; `p` holds one split
    /// `p̄` per row of `idx`. Returns the `(len(idx), 1)` objective column.
    pub fn graph(&self, tape: &mut Tape, p: Var, idx: &[usize]) -> Result<Var> {
        let m = idx.len();
        if tape.shape(p) != (m, self.transfer.nrows()) {
            return invalid("iterate shape does not match the objective");
        }
        if idx.iter().any(|&i| i >= self.len()) {
            return invalid("sample index out of range");
        }
        let (b, w) = (self.antennas, self.subcarriers);
        let csi_rows: Vec<usize> = idx.iter().flat_map(|&i| (i * b)..(i * b + b)).collect();
        let pt = tape.linear_map(p, self.transfer.clone())?;
        let mut terms = Vec::new();
        if let Some(net) = &self.net {
            let rep = tape.repeat_rows(pt, b)?;
            let h = tape.constant(self.csi.select(Axis(0), &csi_rows));
            let c = tape.complex_mul(h, rep)?;
            let c = tape.reshape(c, m, 2 * b * w)?;
            let f = net.extractor.graph(tape, c)?;
            let out = net.model.graph(tape, f, BatchNormMode::Infer, false)?;
            let pos = tape.linear_map(out.output, net.grid.clone())?;
            let base = tape.constant(net.base.select(Axis(0), idx));
            let d = tape.sub(pos, base)?;
            let d2 = tape.square(d)?;
            terms.push(tape.sum_rows(d2)?);
        }
        if self.rate_weight > 0.0 {
            let sq = tape.mul(pt, pt)?;
            let pw = tape.linear_map(sq, self.power.clone())?;
            let g = tape.constant(self.gains.select(Axis(0), idx));
            let snr = tape.mul(pw, g)?;
            let one = tape.add_scalar(snr, 1.0)?;
            let bits = tape.log2(one)?;
            let r = tape.linear_map(bits, self.omega.clone())?;
            terms.push(tape.scale(r, self.rate_weight)?);
        }
        let mut obj = terms[0];
        for &t in &terms[1..] {
            obj = tape.add(obj, t)?;
        }
        Ok(obj)
    }

    /// Objective values and gradients for samples `idx` at split iterates
    /// `p`.
    pub fn eval(&self, idx: &[usize], p: Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let mut tape = Tape::new();
        let pv = tape.leaf(p);
        let obj = self.graph(&mut tape, pv, idx)?;
        let total = tape.sum(obj)?;
        let values = tape.value(obj).column(0).to_vec();
        let mut grads = tape.backward(total)?;
        Ok((values, grads.take(pv)))
    }
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn nonfinite(values: &[f64], p: &Array2<f64>) -> Option<Error> {
    values.iter().position(|v| !v.is_finite()).map(|i| Error::NumericFailure {
        message: format!("attack objective became {}", values[i]),
        iterate: p.row(i).to_vec(),
    })
}

/// One restart of projected gradient ascent for every sample.
fn ascend(
    obj: &AttackObjective,
    start: Array2<f64>,
    cfg: &AttackConfig,
) -> Result<(Array2<f64>, Vec<Vec<f64>>)> {
    let n = start.nrows();
    let all: Vec<usize> = (0..n).collect();
    let mut p = start;
    let (mut val, mut grad) = obj.eval(&all, p.clone())?;
    if let Some(e) = nonfinite(&val, &p) {
        return Err(e);
    }
    let mut traces: Vec<Vec<f64>> = val.iter().map(|&v| vec![v]).collect();
    let mut step = vec![cfg.step; n];
    for _ in 0..cfg.iterations {
        let mut idx = Vec::new();
        let mut cand = Vec::new();
        for i in 0..n {
            if step[i] < cfg.min_step {
                continue;
            }
            let pi = p.row(i);
            let mut g = grad.row(i).to_owned();
            // keep only the component tangent to the sphere
            let radial = g.dot(&pi);
            g.scaled_add(-radial, &pi);
            let gn = g.dot(&g).sqrt();
            if !(gn > 1e-12) {
                step[i] = 0.0;
                continue;
            }
            let mut c: Vec<f64> = pi.iter().zip(&g).map(|(a, d)| a + step[i] * d / gn).collect();
            unit(&mut c);
            idx.push(i);
            cand.extend(c);
        }
        if idx.is_empty() {
            break;
        }
        let cand = Array2::from_shape_vec((idx.len(), p.ncols()), cand).expect("sized");
        let (cv, cg) = obj.eval(&idx, cand.clone())?;
        if let Some(e) = nonfinite(&cv, &cand) {
            return Err(e);
        }
        for (j, &i) in idx.iter().enumerate() {
            if cv[j] >= val[i] {
                p.row_mut(i).assign(&cand.row(j));
                grad.row_mut(i).assign(&cg.row(j));
                val[i] = cv[j];
                traces[i].push(cv[j]);
            } else {
                step[i] *= 0.5;
            }
        }
    }
    Ok((p, traces))
}

fn optimize(
    model: Option<&PositioningModel>,
    csi: &[&CsiMatrix],
    ids: &[u64],
    ofdm: &OfdmConfig,
    cfg: &AttackConfig,
    rate_weight: f64,
) -> Result<Vec<AttackOutcome>> {
    cfg.validate(ofdm)?;
    if csi.len() != ids.len() {
        return invalid("one sample id per CSI matrix is required");
    }
    if csi.is_empty() {
        return Ok(Vec::new());
    }
    let chunks: Vec<(usize, usize)> = (0..csi.len())
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(csi.len())))
        .collect();
    let parts = util::par_map(chunks.len(), |c| {
        let (s, e) = chunks[c];
        optimize_chunk(model, &csi[s..e], &ids[s..e], cfg, rate_weight)
    });
    let mut out = Vec::with_capacity(csi.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

fn optimize_chunk(
    model: Option<&PositioningModel>,
    csi: &[&CsiMatrix],
    ids: &[u64],
    cfg: &AttackConfig,
    rate_weight: f64,
) -> Result<Vec<AttackOutcome>> {
    let obj = AttackObjective::new(model, csi, cfg, rate_weight)?;
    let n = csi.len();
    let mut best: Vec<Option<AttackOutcome>> = vec![None; n];
    let mut inits: Vec<Vec<f64>> = vec![Vec::new(); n];
    for r in 0..cfg.restarts {
        let mut start = Array2::zeros((n, 2 * cfg.length));
        for (i, &id) in ids.iter().enumerate() {
            let stream = id
                .wrapping_mul(cfg.restarts as u64)
                .wrapping_add(r as u64);
            let mut rng = util::child_rng(cfg.seed, TAG_INIT, stream);
            let p0 = random_attack_with(cfg.length, &mut rng)?;
            start.row_mut(i).assign(&Array1::from(p0.to_split()));
        }
        let (p, traces) = ascend(&obj, start, cfg)?;
        for (i, trace) in traces.into_iter().enumerate() {
            inits[i].push(trace[0]);
            let value = *trace.last().expect("nonempty trace");
            if best[i].as_ref().is_none_or(|b| value > b.objective) {
                best[i] = Some(AttackOutcome {
                    sequence: PerturbationSequence::from_split(p.row(i).as_slice().expect("standard"))?,
                    objective: value,
                    initial_objectives: Vec::new(),
                    trace,
                });
            }
        }
    }
    Ok(best
        .into_iter()
        .zip(inits)
        .map(|(b, init)| {
            let mut b = b.expect("at least one restart");
            b.initial_objectives = init;
            b
        })
        .collect())
}

fn check_kind(model: &PositioningModel, kind: FeatureKind) -> Result<()> {
    if model.feature != kind {
        return invalid(format!(
            "model uses feature {} but {} was requested",
            model.feature, kind
        ));
    }
    Ok(())
}

/// White-box attacks on a batch; `ids` seed the per-sample restarts so a
/// sample's result does not depend on how it was batched.
pub fn white_box_batch(
    model: &PositioningModel,
    kind: FeatureKind,
    csi: &[&CsiMatrix],
    ids: &[u64],
    ofdm: &OfdmConfig,
    cfg: &AttackConfig,
) -> Result<Vec<AttackOutcome>> {
    check_kind(model, kind)?;
    optimize(Some(model), csi, ids, ofdm, cfg, cfg.lambda)
}

pub fn white_box(
    model: &PositioningModel,
    kind: FeatureKind,
    h: &CsiMatrix,
    ofdm: &OfdmConfig,
    cfg: &AttackConfig,
) -> Result<PerturbationSequence> {
    Ok(white_box_batch(model, kind, &[h], &[0], ofdm, cfg)?
        .remove(0)
        .sequence)
}

/// White-box attack run against a surrogate network.
pub fn transfer_batch(
    alt_model: &PositioningModel,
    kind: FeatureKind,
    csi: &[&CsiMatrix],
    ids: &[u64],
    ofdm: &OfdmConfig,
    cfg: &AttackConfig,
) -> Result<Vec<AttackOutcome>> {
    white_box_batch(alt_model, kind, csi, ids, ofdm, cfg)
}

pub fn transfer(
    alt_model: &PositioningModel,
    kind: FeatureKind,
    h: &CsiMatrix,
    ofdm: &OfdmConfig,
    cfg: &AttackConfig,
) -> Result<PerturbationSequence> {
    white_box(alt_model, kind, h, ofdm, cfg)
}

/// Maximizes the rate alone, with the same ascent schedule.
pub fn optimize_rate(h: &CsiMatrix, ofdm: &OfdmConfig, cfg: &AttackConfig) -> Result<AttackOutcome> {
    Ok(optimize(None, &[h], &[0], ofdm, cfg, 1.0)?.remove(0))
}

/// `T` white-box sequences, each optimized for one randomly drawn sample
/// of `source` (distinct samples when `T <= |source|`).
pub fn build_pool(
    model: &PositioningModel,
    kind: FeatureKind,
    source: &Dataset,
    ofdm: &OfdmConfig,
    cfg: &AttackConfig,
) -> Result<Vec<PerturbationSequence>> {
    if cfg.pool_size == 0 {
        return invalid("pool size must be at least 1");
    }
    if source.is_empty() {
        return invalid("pool source dataset is empty");
    }
    let mut rng = util::child_rng(cfg.seed, TAG_POOL, 0);
    let picks: Vec<usize> = if cfg.pool_size <= source.len() {
        rand::seq::index::sample(&mut rng, source.len(), cfg.pool_size).into_vec()
    } else {
        (0..cfg.pool_size).map(|_| rng.random_range(0..source.len())).collect()
    };
    let csi: Vec<&CsiMatrix> = picks.iter().map(|&i| &source.samples[i].csi).collect();
    let ids: Vec<u64> = (0..picks.len() as u64).collect();
    Ok(white_box_batch(model, kind, &csi, &ids, ofdm, cfg)?
        .into_iter()
        .map(|o| o.sequence)
        .collect())
}
