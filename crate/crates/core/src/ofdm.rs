//! OFDM signal-processing kernel.
//!
//! All transforms use the unitary DFT convention. The `sqrt(W)` factor that
//! turns a zero-padded impulse response into a transfer function lives in
//! [`zero_padded_transfer`] only.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type ComplexVec = Vec<Complex64>;

/// Returns `true` when every entry is finite.
pub fn is_finite(x: &[Complex64]) -> bool {
    x.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// OFDM numerology: subcarrier count `W`, cyclic prefix `C`, channel tap
/// count `L` and the data subcarrier set (0-based indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfdmConfig {
    pub subcarriers: usize,
    pub cyclic_prefix: usize,
    pub channel_taps: usize,
    pub data_subcarriers: Vec<usize>,
}

impl OfdmConfig {
    /// Configuration with every subcarrier carrying data.
    pub fn new(subcarriers: usize, cyclic_prefix: usize, channel_taps: usize) -> Result<Self> {
        let cfg = Self {
            subcarriers,
            cyclic_prefix,
            channel_taps,
            data_subcarriers: (0..subcarriers).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subcarriers == 0 || self.channel_taps == 0 {
            return invalid("subcarrier and tap counts must be positive");
        }
        if self.channel_taps > self.cyclic_prefix + 1 {
            return invalid(format!(
                "channel taps L={} exceed C+1={}",
                self.channel_taps,
                self.cyclic_prefix + 1
            ));
        }
        validate_subcarrier_set(&self.data_subcarriers, self.subcarriers)
    }

    /// Longest perturbation that keeps `L + L_p <= C + 1`.
    pub fn max_perturbation_len(&self) -> usize {
        self.cyclic_prefix + 1 - self.channel_taps
    }

    /// Checks the cyclic-prefix budget for a combined impulse response.
    pub fn check_prefix(&self, channel_len: usize, perturbation_len: usize) -> Result<()> {
        if channel_len + perturbation_len > self.cyclic_prefix + 1 {
            return Err(Error::ConstraintViolation(format!(
                "L + L_p = {} + {} exceeds C + 1 = {}",
                channel_len,
                perturbation_len,
                self.cyclic_prefix + 1
            )));
        }
        Ok(())
    }
}

fn validate_subcarrier_set(set: &[usize], w: usize) -> Result<()> {
    if set.is_empty() {
        return invalid("data subcarrier set is empty");
    }
    if let Some(&bad) = set.iter().find(|&&k| k >= w) {
        return invalid(format!("data subcarrier {bad} out of range for W={w}"));
    }
    Ok(())
}

/// `B x W` matrix of per-antenna transfer functions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiMatrix {
    antennas: usize,
    subcarriers: usize,
    data: Vec<Complex64>,
}

impl CsiMatrix {
    pub fn from_rows(rows: Vec<ComplexVec>) -> Result<Self> {
        let antennas = rows.len();
        if antennas == 0 {
            return invalid("CSI matrix needs at least one antenna");
        }
        let subcarriers = rows[0].len();
        if subcarriers == 0 || rows.iter().any(|r| r.len() != subcarriers) {
            return invalid("CSI rows must be nonempty and of equal length");
        }
        Ok(Self {
            antennas,
            subcarriers,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn from_flat(antennas: usize, subcarriers: usize, data: Vec<Complex64>) -> Result<Self> {
        if antennas == 0 || subcarriers == 0 || data.len() != antennas * subcarriers {
            return invalid(format!(
                "flat CSI of length {} does not match {antennas}x{subcarriers}",
                data.len()
            ));
        }
        Ok(Self {
            antennas,
            subcarriers,
            data,
        })
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    pub fn row(&self, b: usize) -> &[Complex64] {
        &self.data[b * self.subcarriers..(b + 1) * self.subcarriers]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Complex64]> {
        self.data.chunks(self.subcarriers)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, b: usize, w: usize) -> Complex64 {
        self.data[b * self.subcarriers + w]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Multiplies every entry by `s`.
    pub fn scaled(&self, s: Complex64) -> Self {
        Self {
            data: self.data.iter().map(|z| z * s).collect(),
            ..self.clone()
        }
    }

    /// Per-subcarrier antenna power `sum_b |H[b,w]|^2`.
    pub fn antenna_power(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.subcarriers];
        for row in self.rows() {
            for (acc, z) in out.iter_mut().zip(row) {
                *acc += z.norm_sqr();
            }
        }
        out
    }
}

/// Unit-norm time-domain perturbation filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSequence {
    taps: ComplexVec,
}

impl PerturbationSequence {
    /// Normalizes `taps` to unit norm.
    pub fn new(taps: ComplexVec) -> Result<Self> {
        if taps.is_empty() {
            return invalid("perturbation sequence must have at least one tap");
        }
        if !is_finite(&taps) {
            return invalid("perturbation taps must be finite");
        }
        let norm = taps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateInput("all-zero perturbation".into()));
        }
        Ok(Self {
            taps: taps.into_iter().map(|z| z / norm).collect(),
        })
    }

    /// The identity perturbation `[1]`.
    pub fn identity() -> Self {
        Self {
            taps: vec![Complex64::new(1.0, 0.0)],
        }
    }

    /// Builds from split parameters `[re.. | im..]`, normalizing.
    pub fn from_split(params: &[f64]) -> Result<Self> {
        if params.len() % 2 != 0 {
            return invalid("split parameter vector must have even length");
        }
        let n = params.len() / 2;
        Self::new(
            (0..n)
                .map(|i| Complex64::new(params[i], params[n + i]))
                .collect(),
        )
    }

    pub fn to_split(&self) -> Vec<f64> {
        self.taps
            .iter()
            .map(|z| z.re)
            .chain(self.taps.iter().map(|z| z.im))
            .collect()
    }

    pub fn taps(&self) -> &[Complex64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.taps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Symbol power, noise power and data subcarriers for [`rate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub symbol_power: f64,
    pub noise_power: f64,
    pub data_subcarriers: Vec<usize>,
}

impl RateParams {
    pub fn new(symbol_power: f64, noise_power: f64, data_subcarriers: Vec<usize>) -> Result<Self> {
        if !(symbol_power > 0.0 && noise_power > 0.0) {
            return invalid("symbol and noise power must be positive");
        }
        if data_subcarriers.is_empty() {
            return invalid("data subcarrier set is empty");
        }
        Ok(Self {
            symbol_power,
            noise_power,
            data_subcarriers,
        })
    }

    /// Unit symbol power with noise set from an SNR in dB.
    pub fn from_snr_db(snr_db: f64, data_subcarriers: Vec<usize>) -> Result<Self> {
        Self::new(1.0, 10f64.powf(-snr_db / 10.0), data_subcarriers)
    }

    pub fn snr_linear(&self) -> f64 {
        self.symbol_power / self.noise_power
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

fn unitary_fft(x: &[Complex64], inverse: bool) -> Result<ComplexVec> {
    if x.is_empty() {
        return invalid("DFT of an empty vector");
    }
    let mut buf = x.to_vec();
    plan(x.len(), inverse).process(&mut buf);
    let scale = 1.0 / (x.len() as f64).sqrt();
    buf.iter_mut().for_each(|z| *z *= scale);
    Ok(buf)
}

/// Unitary DFT: `X[k] = W^{-1/2} sum_n x[n] e^{-j 2 pi k n / W}`.
pub fn dft(x: &[Complex64]) -> Result<ComplexVec> {
    unitary_fft(x, false)
}

/// Unitary inverse DFT.
pub fn idft(x: &[Complex64]) -> Result<ComplexVec> {
    unitary_fft(x, true)
}

fn zero_pad(x: &[Complex64], len: usize) -> ComplexVec {
    let mut out = x.to_vec();
    out.resize(len, Complex64::new(0.0, 0.0));
    out
}

/// Circular convolution of two length-`W` vectors. The shorter operand is
/// zero-padded to the longer length.
pub fn circ_conv(a: &[Complex64], b: &[Complex64]) -> Result<ComplexVec> {
    if a.is_empty() || b.is_empty() {
        return invalid("circular convolution of an empty vector");
    }
    let w = a.len().max(b.len());
    let (a, b) = (zero_pad(a, w), zero_pad(b, w));
    let mut out = vec![Complex64::new(0.0, 0.0); w];
    for (n, o) in out.iter_mut().enumerate() {
        for (m, am) in a.iter().enumerate() {
            *o += am * b[(n + w - m) % w];
        }
    }
    Ok(out)
}

/// Linear (full) convolution; output length `La + Lb - 1`.
pub fn lin_conv(a: &[Complex64], b: &[Complex64]) -> Result<ComplexVec> {
    if a.is_empty() || b.is_empty() {
        return invalid("linear convolution of an empty vector");
    }
    let mut out = vec![Complex64::new(0.0, 0.0); a.len() + b.len() - 1];
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    Ok(out)
}

/// `sqrt(W) * F * [taps; 0]`, the transfer function of a short impulse
/// response on `W` subcarriers.
pub fn zero_padded_transfer(taps: &[Complex64], w: usize) -> Result<ComplexVec> {
    if taps.is_empty() || taps.len() > w {
        return invalid(format!(
            "impulse response of length {} does not fit W={w}",
            taps.len()
        ));
    }
    let scale = (w as f64).sqrt();
    Ok(dft(&zero_pad(taps, w))?
        .into_iter()
        .map(|z| z * scale)
        .collect())
}

/// Transfer function `p` of a perturbation sequence; `||p||^2 = W`.
pub fn perturbation_transfer(p: &PerturbationSequence, w: usize) -> Result<ComplexVec> {
    zero_padded_transfer(p.taps(), w)
}

/// Pilot-based least-squares estimate `y ⊙ t` for a ±1 pilot.
pub fn estimate_csi(y: &[Complex64], pilot: &[f64]) -> Result<ComplexVec> {
    if y.len() != pilot.len() {
        return invalid("receive vector and pilot differ in length");
    }
    if pilot.iter().any(|&t| t != 1.0 && t != -1.0) {
        return invalid("pilot entries must be +1 or -1");
    }
    Ok(y.iter().zip(pilot).map(|(y, t)| y * *t).collect())
}

/// Deterministic ±1 pilot of length `w` drawn from `seed`.
pub fn pilot_sequence(w: usize, seed: u64) -> Vec<f64> {
    let mut rng = crate::util::rng(seed);
    (0..w)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Applies a perturbation to every antenna row: `H[p] = [h_b ⊙ p]`.
pub fn apply_perturbation(
    h: &CsiMatrix,
    p: &PerturbationSequence,
    cfg: &OfdmConfig,
) -> Result<CsiMatrix> {
    cfg.check_prefix(cfg.channel_taps, p.len())?;
    if h.subcarriers() != cfg.subcarriers {
        return invalid("CSI width does not match the OFDM configuration");
    }
    let pw = perturbation_transfer(p, h.subcarriers())?;
    let data = h
        .rows()
        .flat_map(|row| row.iter().zip(&pw).map(|(a, b)| a * b))
        .collect();
    CsiMatrix::from_flat(h.antennas(), h.subcarriers(), data)
}

/// Circularly-symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Runs one OFDM symbol through the sample-level chain
/// IDFT -> +CP -> perturbation filter -> channel -> -CP -> DFT, adding
/// time-domain noise of variance `noise_var` per sample when `rng` is given.
pub fn transmit<R: Rng + ?Sized>(
    channel: &[Complex64],
    p: &PerturbationSequence,
    symbols: &[Complex64],
    cfg: &OfdmConfig,
    noise_var: f64,
    rng: Option<&mut R>,
) -> Result<ComplexVec> {
    let w = cfg.subcarriers;
    let c = cfg.cyclic_prefix;
    if symbols.len() != w {
        return invalid("symbol vector length must equal W");
    }
    if channel.is_empty() {
        return invalid("empty channel impulse response");
    }
    cfg.check_prefix(channel.len(), p.len())?;
    let time = idft(symbols)?;
    let mut stream: ComplexVec = (0..c)
        .map(|i| time[(i as isize - c as isize).rem_euclid(w as isize) as usize])
        .collect();
    stream.extend_from_slice(&time);
    let pre = lin_conv(&stream, p.taps())?;
    let received = lin_conv(&pre, channel)?;
    let mut window = received[c..c + w].to_vec();
    if let Some(rng) = rng {
        for z in window.iter_mut() {
            *z += complex_gaussian(rng, noise_var);
        }
    }
    dft(&window)
}

/// [`transmit`] with noise set from a target SNR relative to the mean
/// noiseless received per-subcarrier power. `snr_db = inf` is noiseless.
pub fn simulate_packet(
    channel: &[Complex64],
    p: &PerturbationSequence,
    symbols: &[Complex64],
    cfg: &OfdmConfig,
    noise_seed: u64,
    snr_db: f64,
) -> Result<ComplexVec> {
    let clean = transmit::<crate::util::Rng>(channel, p, symbols, cfg, 0.0, None)?;
    if snr_db == f64::INFINITY {
        return Ok(clean);
    }
    let power = clean.iter().map(|z| z.norm_sqr()).sum::<f64>() / clean.len() as f64;
    let noise_var = power / 10f64.powf(snr_db / 10.0);
    let mut rng = crate::util::rng(noise_seed);
    // Unitary DFT keeps the noise white with the same variance.
    let mut out = clean;
    let noise: ComplexVec = (0..out.len())
        .map(|_| complex_gaussian(&mut rng, noise_var))
        .collect();
    let noise = dft(&noise)?;
    out.iter_mut().zip(noise).for_each(|(y, n)| *y += n);
    Ok(out)
}

/// Mean per-subcarrier rate (bits) over the data subcarriers, using the
/// multi-antenna gain `|p_w|^2 sum_b |H[b,w]|^2`. `None` means no
/// perturbation (`p_w = 1`).
pub fn rate(h: &CsiMatrix, p: Option<&PerturbationSequence>, params: &RateParams) -> Result<f64> {
    validate_subcarrier_set(&params.data_subcarriers, h.subcarriers())?;
    let pw = match p {
        Some(p) => perturbation_transfer(p, h.subcarriers())?
            .iter()
            .map(|z| z.norm_sqr())
            .collect(),
        None => vec![1.0; h.subcarriers()],
    };
    let gain = h.antenna_power();
    let snr = params.snr_linear();
    let total: f64 = params
        .data_subcarriers
        .iter()
        .map(|&w| (1.0 + pw[w] * gain[w] * snr).log2())
        .sum();
    Ok(total / params.data_subcarriers.len() as f64)
}

/// `e^{j phi}`.
pub fn phasor(phi: f64) -> Complex64 {
    Complex64::from_polar(1.0, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_vec(rng: &mut crate::util::Rng, n: usize) -> ComplexVec {
        (0..n).map(|_| complex_gaussian(rng, 1.0)).collect()
    }

    fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    /// O(W^2) unitary DFT, independent of rustfft.
    fn direct_dft(x: &[Complex64], sign: f64) -> ComplexVec {
        let w = x.len();
        (0..w)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(n, xn)| {
                        xn * phasor(sign * 2.0 * std::f64::consts::PI * (k * n) as f64 / w as f64)
                    })
                    .sum::<Complex64>()
                    / (w as f64).sqrt()
            })
            .collect()
    }

    fn norm(x: &[Complex64]) -> f64 {
        x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn dft_of_delta_and_constant() {
        let d = dft(&[c(1., 0.), c(0., 0.), c(0., 0.), c(0., 0.)]).unwrap();
        assert!(max_diff(&d, &[c(0.5, 0.); 4]) < 1e-15);
        let d = dft(&[c(1., 0.); 4]).unwrap();
        assert!(max_diff(&d, &[c(2., 0.), c(0., 0.), c(0., 0.), c(0., 0.)]) < 1e-15);
        let back = idft(&[c(2., 0.), c(0., 0.), c(0., 0.), c(0., 0.)]).unwrap();
        assert!(max_diff(&back, &[c(1., 0.); 4]) < 1e-15);
    }

    #[test]
    fn dft_rejects_empty() {
        assert!(matches!(dft(&[]), Err(Error::InvalidArgument(_))));
        assert!(matches!(idft(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dft_matches_direct_oracle_and_parseval() {
        let mut rng = crate::util::Rng::seed_from_u64(1);
        let x = random_vec(&mut rng, 16);
        let fx = dft(&x).unwrap();
        assert!(max_diff(&fx, &direct_dft(&x, -1.0)) < 1e-12);
        assert_abs_diff_eq!(norm(&fx), norm(&x), epsilon = 1e-12);

        let x = random_vec(&mut rng, 64);
        assert!(max_diff(&idft(&dft(&x).unwrap()).unwrap(), &x) < 1e-12);
        assert!(max_diff(&idft(&x).unwrap(), &direct_dft(&x, 1.0)) < 1e-12);
    }

    #[test]
    fn circular_convolution() {
        let mut rng = crate::util::Rng::seed_from_u64(2);
        let a = random_vec(&mut rng, 8);
        let mut delta = vec![c(0., 0.); 8];
        delta[0] = c(1., 0.);
        assert!(max_diff(&circ_conv(&a, &delta).unwrap(), &a) < 1e-15);
        assert_eq!(
            circ_conv(&[c(1., 0.), c(1., 0.)], &[c(1., 0.), c(1., 0.)]).unwrap(),
            vec![c(2., 0.), c(2., 0.)]
        );
        // convolution theorem with the unitary scale
        for w in [7usize, 64, 128] {
            let a = random_vec(&mut rng, w);
            let b = random_vec(&mut rng, w);
            let fa = dft(&a).unwrap();
            let fb = dft(&b).unwrap();
            let prod: ComplexVec = fa
                .iter()
                .zip(&fb)
                .map(|(x, y)| x * y * (w as f64).sqrt())
                .collect();
            let via_dft = idft(&prod).unwrap();
            assert!(max_diff(&circ_conv(&a, &b).unwrap(), &via_dft) < 1e-10);
        }
    }

    #[test]
    fn linear_convolution() {
        let a = vec![c(1., 0.), c(2., 0.)];
        assert_eq!(
            lin_conv(&a, &[c(3., 0.), c(4., 0.)]).unwrap(),
            vec![c(3., 0.), c(10., 0.), c(8., 0.)]
        );
        assert_eq!(lin_conv(&a, &[c(1., 0.)]).unwrap(), a);
        assert!(lin_conv(&a, &[]).is_err());

        let mut rng = crate::util::Rng::seed_from_u64(3);
        let a = random_vec(&mut rng, 7);
        let b = random_vec(&mut rng, 5);
        let got = lin_conv(&a, &b).unwrap();
        for (n, g) in got.iter().enumerate() {
            let mut want = c(0., 0.);
            for k in 0..=n {
                if k < a.len() && n - k < b.len() {
                    want += a[k] * b[n - k];
                }
            }
            assert_eq!(*g, want);
        }
    }

    #[test]
    fn perturbation_transfer_cases() {
        let p = PerturbationSequence::identity();
        let t = perturbation_transfer(&p, 16).unwrap();
        assert!(max_diff(&t, &[c(1., 0.); 16]) < 1e-12);

        let phi = 0.7;
        let p = PerturbationSequence::new(vec![phasor(phi)]).unwrap();
        let t = perturbation_transfer(&p, 16).unwrap();
        assert!(max_diff(&t, &vec![phasor(phi); 16]) < 1e-12);

        let mut rng = crate::util::Rng::seed_from_u64(4);
        let p = PerturbationSequence::new(random_vec(&mut rng, 4)).unwrap();
        let t = perturbation_transfer(&p, 16).unwrap();
        assert_abs_diff_eq!(norm(&t).powi(2), 16.0, epsilon = 1e-9);

        let long = PerturbationSequence::new(random_vec(&mut rng, 17)).unwrap();
        assert!(perturbation_transfer(&long, 16).is_err());
    }

    #[test]
    fn csi_estimation() {
        let mut rng = crate::util::Rng::seed_from_u64(5);
        let h = random_vec(&mut rng, 32);
        let t = pilot_sequence(32, 9);
        let y: ComplexVec = h.iter().zip(&t).map(|(h, t)| h * *t).collect();
        assert_eq!(estimate_csi(&y, &t).unwrap(), h);
        assert_eq!(estimate_csi(&h, &[1.0; 32]).unwrap(), h);
        let mut bad = t.clone();
        bad[3] = 0.5;
        assert!(matches!(
            estimate_csi(&y, &bad),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn csi_estimation_noise_at_40db() {
        let mut rng = crate::util::Rng::seed_from_u64(6);
        let w = 64;
        let t = pilot_sequence(w, 10);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let h = random_vec(&mut rng, w);
            let p = PerturbationSequence::new(random_vec(&mut rng, 4)).unwrap();
            let hp: ComplexVec = h
                .iter()
                .zip(perturbation_transfer(&p, w).unwrap())
                .map(|(a, b)| a * b)
                .collect();
            let power = hp.iter().map(|z| z.norm_sqr()).sum::<f64>() / w as f64;
            let y: ComplexVec = hp
                .iter()
                .zip(&t)
                .map(|(v, t)| v * *t + complex_gaussian(&mut rng, power * 1e-4))
                .collect();
            let est = estimate_csi(&y, &t).unwrap();
            let err: ComplexVec = est.iter().zip(&hp).map(|(a, b)| a - b).collect();
            worst = worst.max(norm(&err) / norm(&hp));
        }
        assert!(worst < 0.03, "worst relative error {worst}");
    }

    fn desk_cfg() -> OfdmConfig {
        OfdmConfig::new(32, 8, 4).unwrap()
    }

    #[test]
    fn apply_perturbation_identity_and_phase() {
        let mut rng = crate::util::Rng::seed_from_u64(7);
        let cfg = desk_cfg();
        let h = CsiMatrix::from_rows(vec![random_vec(&mut rng, 32), random_vec(&mut rng, 32)])
            .unwrap();
        let out = apply_perturbation(&h, &PerturbationSequence::identity(), &cfg).unwrap();
        assert!(max_diff(out.as_slice(), h.as_slice()) < 1e-12);
        let ph = PerturbationSequence::new(vec![phasor(1.1)]).unwrap();
        let out = apply_perturbation(&h, &ph, &cfg).unwrap();
        assert!(max_diff(out.as_slice(), h.scaled(phasor(1.1)).as_slice()) < 1e-12);
        let too_long = PerturbationSequence::new(random_vec(&mut rng, 6)).unwrap();
        assert!(matches!(
            apply_perturbation(&h, &too_long, &cfg),
            Err(Error::ConstraintViolation(_))
        ));
    }

    #[test]
    fn apply_perturbation_matches_time_domain() {
        let mut rng = crate::util::Rng::seed_from_u64(8);
        let cfg = OfdmConfig::new(8, 5, 3).unwrap();
        let taps: Vec<ComplexVec> = (0..2).map(|_| random_vec(&mut rng, 3)).collect();
        let h = CsiMatrix::from_rows(
            taps.iter()
                .map(|t| zero_padded_transfer(t, 8).unwrap())
                .collect(),
        )
        .unwrap();
        let p = PerturbationSequence::new(random_vec(&mut rng, 3)).unwrap();
        let got = apply_perturbation(&h, &p, &cfg).unwrap();
        for (b, t) in taps.iter().enumerate() {
            let combined = lin_conv(t, p.taps()).unwrap();
            let want = zero_padded_transfer(&combined, 8).unwrap();
            assert!(max_diff(got.row(b), &want) < 1e-10);
        }
    }

    #[test]
    fn packet_identity_channel() {
        let mut rng = crate::util::Rng::seed_from_u64(9);
        let cfg = desk_cfg();
        let s = random_vec(&mut rng, 32);
        let y = simulate_packet(
            &[c(1., 0.)],
            &PerturbationSequence::identity(),
            &s,
            &cfg,
            0,
            f64::INFINITY,
        )
        .unwrap();
        assert!(max_diff(&y, &s) < 1e-12);
    }

    #[test]
    fn packet_matches_frequency_model() {
        let mut rng = crate::util::Rng::seed_from_u64(10);
        let cfg = OfdmConfig::new(32, 8, 4).unwrap();
        let h = random_vec(&mut rng, 4);
        let p = PerturbationSequence::new(random_vec(&mut rng, 3)).unwrap();
        let s = random_vec(&mut rng, 32);
        let y = simulate_packet(&h, &p, &s, &cfg, 0, f64::INFINITY).unwrap();
        let hw = zero_padded_transfer(&h, 32).unwrap();
        let pw = perturbation_transfer(&p, 32).unwrap();
        let want: ComplexVec = (0..32).map(|k| hw[k] * pw[k] * s[k]).collect();
        assert!(max_diff(&y, &want) < 1e-9);

        let long = PerturbationSequence::new(random_vec(&mut rng, 6)).unwrap();
        assert!(matches!(
            simulate_packet(&h, &long, &s, &cfg, 0, f64::INFINITY),
            Err(Error::ConstraintViolation(_))
        ));
    }

    #[test]
    fn packet_snr_calibration() {
        let mut rng = crate::util::Rng::seed_from_u64(11);
        let cfg = OfdmConfig::new(32, 8, 4).unwrap();
        let (mut sig, mut noise) = (0.0, 0.0);
        for i in 0..1000 {
            let h = random_vec(&mut rng, 4);
            let p = PerturbationSequence::new(random_vec(&mut rng, 2)).unwrap();
            let s = random_vec(&mut rng, 32);
            let clean = simulate_packet(&h, &p, &s, &cfg, 0, f64::INFINITY).unwrap();
            let noisy = simulate_packet(&h, &p, &s, &cfg, i, 10.0).unwrap();
            sig += clean.iter().map(|z| z.norm_sqr()).sum::<f64>();
            noise += noisy
                .iter()
                .zip(&clean)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>();
        }
        let snr = 10.0 * (sig / noise).log10();
        assert!((snr - 10.0).abs() < 0.5, "empirical SNR {snr}");
    }

    #[test]
    fn rate_cases() {
        // |h_w|^2 Es/N0 = 1 everywhere -> log2(2) = 1
        let h = CsiMatrix::from_rows(vec![vec![c(1., 0.); 16]]).unwrap();
        let params = RateParams::new(1.0, 1.0, (0..16).collect()).unwrap();
        assert_abs_diff_eq!(rate(&h, None, &params).unwrap(), 1.0, epsilon = 1e-15);

        let mut rng = crate::util::Rng::seed_from_u64(12);
        let h = CsiMatrix::from_rows((0..3).map(|_| random_vec(&mut rng, 16)).collect()).unwrap();
        let params = RateParams::from_snr_db(10.0, (0..16).collect()).unwrap();
        let base = rate(&h, None, &params).unwrap();
        let ph = PerturbationSequence::new(vec![phasor(2.3)]).unwrap();
        assert_abs_diff_eq!(rate(&h, Some(&ph), &params).unwrap(), base, epsilon = 1e-12);

        let louder = RateParams::from_snr_db(11.0, (0..16).collect()).unwrap();
        assert!(rate(&h, None, &louder).unwrap() > base);
        assert!(RateParams::new(0.0, 1.0, vec![0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OfdmConfig::new(64, 16, 18).is_err());
        assert!(OfdmConfig::new(0, 16, 8).is_err());
        let mut cfg = OfdmConfig::new(64, 24, 8).unwrap();
        assert_eq!(cfg.max_perturbation_len(), 17);
        cfg.data_subcarriers = vec![64];
        assert!(cfg.validate().is_err());
        cfg.data_subcarriers.clear();
        assert!(cfg.validate().is_err());
    }
}
