//! CSI feature extraction.
//!
//! Both features start from the delay-domain CSI `H F^H`, truncated to the
//! first `T_d` taps:
//!
//! * **F1** is the full 2-D self cross-correlation of the truncated
//!   delay-domain matrix, real parts stacked over imaginary parts, then
//!   unit-normalized. Dimension `2 (2B-1)(2T_d-1)`.
//! * **F2** is the entry-wise magnitude of the truncated delay-domain
//!   matrix, unit-normalized. Dimension `B T_d`.
//!
//! The tape versions ([`FeatureExtractor::graph`]) run the same forward
//! kernels as the plain versions, so for a single sample both produce
//! identical bits.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffgraph::{self, complex_block_matrix, Tape, Var, NORM_GUARD};
use crate::error::{invalid, Error, Result};
use crate::ofdm::CsiMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    F1,
    F2,
}

impl FeatureKind {
    pub fn dim(self, antennas: usize, delay_taps: usize) -> usize {
        match self {
            FeatureKind::F1 => 2 * (2 * antennas - 1) * (2 * delay_taps - 1),
            FeatureKind::F2 => antennas * delay_taps,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::F1 => "f1",
            FeatureKind::F2 => "f2",
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(FeatureKind::F1),
            "f2" => Ok(FeatureKind::F2),
            _ => invalid(format!("unknown feature '{s}'")),
        }
    }
}

/// Unit-norm feature vector tagged with its kind.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub kind: FeatureKind,
}

/// Flattens CSI into one row: per antenna, `W` real parts then `W`
/// imaginary parts.
pub fn csi_to_split(h: &CsiMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * h.as_slice().len());
    for row in h.rows() {
        out.extend(row.iter().map(|z| z.re));
        out.extend(row.iter().map(|z| z.im));
    }
    out
}

/// Stacks several CSI matrices into a `(n, 2BW)` array.
pub fn csi_batch(hs: &[&CsiMatrix]) -> Array2<f64> {
    let width = hs.first().map_or(0, |h| 2 * h.as_slice().len());
    let mut out = Array2::zeros((hs.len(), width));
    for (mut row, h) in out.rows_mut().into_iter().zip(hs) {
        row.assign(&ndarray::Array1::from(csi_to_split(h)));
    }
    out
}

/// Split-layout block matrix of `x -> x F^H` restricted to the first
/// `taps` delay bins: `(2W, 2T)`.
pub fn delay_map(subcarriers: usize, taps: usize) -> Array2<f64> {
    let w = subcarriers as f64;
    let scale = 1.0 / w.sqrt();
    let re = Array2::from_shape_fn((subcarriers, taps), |(k, t)| {
        scale * (2.0 * PI * ((k * t) % subcarriers) as f64 / w).cos()
    });
    let im = Array2::from_shape_fn((subcarriers, taps), |(k, t)| {
        scale * (2.0 * PI * ((k * t) % subcarriers) as f64 / w).sin()
    });
    complex_block_matrix(&re, &im)
}

/// Feature pipeline for fixed `(B, W, T_d)`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    kind: FeatureKind,
    antennas: usize,
    subcarriers: usize,
    delay_taps: usize,
    delay: Arc<Array2<f64>>,
}

impl FeatureExtractor {
    pub fn new(kind: FeatureKind, antennas: usize, subcarriers: usize, delay_taps: usize) -> Result<Self> {
        if antennas == 0 || subcarriers == 0 {
            return invalid("feature extractor needs B, W >= 1");
        }
        if delay_taps == 0 || delay_taps > subcarriers {
            return invalid(format!(
                "delay truncation T_d={delay_taps} must lie in 1..={subcarriers}"
            ));
        }
        Ok(Self {
            kind,
            antennas,
            subcarriers,
            delay_taps,
            delay: Arc::new(delay_map(subcarriers, delay_taps)),
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    pub fn delay_taps(&self) -> usize {
        self.delay_taps
    }

    pub fn dim(&self) -> usize {
        self.kind.dim(self.antennas, self.delay_taps)
    }

    fn check_csi(&self, h: &CsiMatrix) -> Result<()> {
        if h.antennas() != self.antennas || h.subcarriers() != self.subcarriers {
            return invalid(format!(
                "CSI is {}x{}, extractor expects {}x{}",
                h.antennas(),
                h.subcarriers(),
                self.antennas,
                self.subcarriers
            ));
        }
        Ok(())
    }

    /// Truncated delay-domain CSI, `(n, 2 B T_d)` in split-per-antenna
    /// layout.
    fn delay_domain(&self, csi: ArrayView2<f64>) -> Array2<f64> {
        let n = csi.nrows();
        let per_antenna = csi
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * self.antennas, 2 * self.subcarriers))
            .expect("row width checked");
        diffgraph::linear_map_forward(per_antenna.view(), &self.delay)
            .into_shape_with_order((n, 2 * self.antennas * self.delay_taps))
            .expect("standard layout")
    }

    /// Plain batched extraction over rows of split-layout CSI.
    pub fn extract_rows(&self, csi: ArrayView2<f64>) -> Result<Array2<f64>> {
        if csi.ncols() != 2 * self.antennas * self.subcarriers {
            return invalid("CSI row width does not match the extractor");
        }
        let n = csi.nrows();
        let delay = self.delay_domain(csi);
        let raw = match self.kind {
            FeatureKind::F1 => diffgraph::autocorr_forward(delay.view(), self.antennas, self.delay_taps),
            FeatureKind::F2 => {
                let per_antenna = delay
                    .into_shape_with_order((n * self.antennas, 2 * self.delay_taps))
                    .expect("standard layout");
                diffgraph::complex_abs_forward(per_antenna.view())
                    .into_shape_with_order((n, self.antennas * self.delay_taps))
                    .expect("standard layout")
            }
        };
        if let Some(i) = raw
            .rows()
            .into_iter()
            .position(|r| r.dot(&r).sqrt() <= NORM_GUARD)
        {
            return Err(Error::DegenerateInput(format!(
                "sample {i}: delay-domain CSI vanishes within the first {} taps",
                self.delay_taps
            )));
        }
        Ok(diffgraph::normalize_forward(raw.view()))
    }

    pub fn extract(&self, h: &CsiMatrix) -> Result<FeatureVector> {
        self.check_csi(h)?;
        let row = Array2::from_shape_vec((1, 2 * h.as_slice().len()), csi_to_split(h))
            .expect("length matches");
        let f = self.extract_rows(row.view())?;
        Ok(FeatureVector {
            values: f.into_raw_vec_and_offset().0,
            kind: self.kind,
        })
    }

    pub fn extract_batch(&self, hs: &[&CsiMatrix]) -> Result<Array2<f64>> {
        for h in hs {
            self.check_csi(h)?;
        }
        self.extract_rows(csi_batch(hs).view())
    }

    /// Tape version of [`Self::extract_rows`]; `csi` is `(n, 2BW)`.
    pub fn graph(&self, tape: &mut Tape, csi: Var) -> Result<Var> {
        let (n, width) = tape.shape(csi);
        if width != 2 * self.antennas * self.subcarriers {
            return invalid("CSI row width does not match the extractor");
        }
        let per_antenna = tape.reshape(csi, n * self.antennas, 2 * self.subcarriers)?;
        let delay = tape.linear_map(per_antenna, self.delay.clone())?;
        let raw = match self.kind {
            FeatureKind::F1 => {
                let rows = tape.reshape(delay, n, 2 * self.antennas * self.delay_taps)?;
                tape.autocorr2d(rows, self.antennas, self.delay_taps)?
            }
            FeatureKind::F2 => {
                let mag = tape.complex_abs(delay)?;
                tape.reshape(mag, n, self.antennas * self.delay_taps)?
            }
        };
        tape.normalize(raw)
    }
}

/// F1 of a single CSI matrix.
pub fn extract_f1(h: &CsiMatrix, delay_taps: usize) -> Result<FeatureVector> {
    FeatureExtractor::new(FeatureKind::F1, h.antennas(), h.subcarriers(), delay_taps)?.extract(h)
}

/// F2 of a single CSI matrix.
pub fn extract_f2(h: &CsiMatrix, delay_taps: usize) -> Result<FeatureVector> {
    FeatureExtractor::new(FeatureKind::F2, h.antennas(), h.subcarriers(), delay_taps)?.extract(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ofdm::{self, complex_gaussian, phasor, ComplexVec};
    use num_complex::Complex64;

    fn random_csi(seed: u64, b: usize, w: usize) -> CsiMatrix {
        let mut rng = crate::util::rng(seed);
        CsiMatrix::from_rows(
            (0..b)
                .map(|_| (0..w).map(|_| complex_gaussian(&mut rng, 1.0)).collect())
                .collect(),
        )
        .unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Delay-domain matrix via the O(W^2) inverse DFT, independent of the
    /// block-matrix path.
    fn delay_oracle(h: &CsiMatrix, taps: usize) -> Vec<ComplexVec> {
        let w = h.subcarriers();
        h.rows()
            .map(|row| {
                (0..taps)
                    .map(|t| {
                        row.iter()
                            .enumerate()
                            .map(|(k, z)| z * phasor(2.0 * PI * (k * t) as f64 / w as f64))
                            .sum::<Complex64>()
                            / (w as f64).sqrt()
                    })
                    .collect()
            })
            .collect()
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn f1_matches_direct_autocorrelation() {
        let (b, w, t) = (2, 8, 3);
        let h = random_csi(1, b, w);
        let d = delay_oracle(&h, t);
        let mut re = Vec::new();
        let mut im = Vec::new();
        for u in -(b as isize - 1)..=(b as isize - 1) {
            for v in -(t as isize - 1)..=(t as isize - 1) {
                let mut acc = Complex64::new(0.0, 0.0);
                for b1 in 0..b as isize {
                    for t1 in 0..t as isize {
                        let (b2, t2) = (b1 - u, t1 - v);
                        if (0..b as isize).contains(&b2) && (0..t as isize).contains(&t2) {
                            acc += d[b1 as usize][t1 as usize] * d[b2 as usize][t2 as usize].conj();
                        }
                    }
                }
                re.push(acc.re);
                im.push(acc.im);
            }
        }
        re.extend(im);
        let want = unit(re);
        let got = extract_f1(&h, t).unwrap();
        assert_eq!(got.values.len(), FeatureKind::F1.dim(b, t));
        assert!(max_diff(&got.values, &want) < 1e-10);
    }

    #[test]
    fn f2_matches_magnitude_oracle() {
        let (b, w, t) = (4, 16, 8);
        let h = random_csi(2, b, w);
        let want = unit(
            delay_oracle(&h, t)
                .into_iter()
                .flatten()
                .map(|z| z.norm())
                .collect(),
        );
        let got = extract_f2(&h, t).unwrap();
        assert_eq!(got.values.len(), b * t);
        assert!(max_diff(&got.values, &want) < 1e-12);
    }

    #[test]
    fn invariant_to_global_phase_and_gain() {
        let h = random_csi(3, 4, 16);
        for kind in [FeatureKind::F1, FeatureKind::F2] {
            let fx = FeatureExtractor::new(kind, 4, 16, 8).unwrap();
            let base = fx.extract(&h).unwrap();
            let rotated = fx.extract(&h.scaled(phasor(0.9))).unwrap();
            let gained = fx.extract(&h.scaled(Complex64::new(3.7, 0.0))).unwrap();
            assert!(max_diff(&base.values, &rotated.values) < 1e-9);
            assert!(max_diff(&base.values, &gained.values) < 1e-9);
        }
    }

    #[test]
    fn single_tap_per_antenna_gives_sparse_f2() {
        let (b, w) = (3, 16);
        let rows = (0..b)
            .map(|k| {
                let mut taps = vec![Complex64::new(0.0, 0.0); 4];
                taps[k] = phasor(k as f64);
                ofdm::zero_padded_transfer(&taps, w).unwrap()
            })
            .collect();
        let h = CsiMatrix::from_rows(rows).unwrap();
        let f = extract_f2(&h, 8).unwrap();
        assert_eq!(f.values.iter().filter(|v| v.abs() > 1e-9).count(), b);
    }

    #[test]
    fn errors() {
        let h = random_csi(4, 2, 8);
        assert!(matches!(extract_f1(&h, 9), Err(Error::InvalidArgument(_))));
        let zero = CsiMatrix::from_rows(vec![vec![Complex64::new(0.0, 0.0); 8]; 2]).unwrap();
        assert!(matches!(extract_f2(&zero, 4), Err(Error::DegenerateInput(_))));
        let fx = FeatureExtractor::new(FeatureKind::F1, 3, 8, 4).unwrap();
        assert!(fx.extract(&h).is_err());
    }

    #[test]
    fn graph_forward_is_bit_identical() {
        let h = random_csi(5, 8, 64);
        for kind in [FeatureKind::F1, FeatureKind::F2] {
            let fx = FeatureExtractor::new(kind, 8, 64, 16).unwrap();
            let plain = fx.extract(&h).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(csi_batch(&[&h]));
            let f = fx.graph(&mut tape, x).unwrap();
            assert_eq!(tape.value(f).as_slice().unwrap(), plain.values.as_slice());
            let n: f64 = plain.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        let h = random_csi(6, 2, 8);
        for kind in [FeatureKind::F1, FeatureKind::F2] {
            let fx = FeatureExtractor::new(kind, 2, 8, 4).unwrap();
            let mut rng = crate::util::rng(7);
            let weights = Array2::from_shape_fn((1, fx.dim()), |_| {
                rand::Rng::random_range(&mut rng, -1.0..1.0)
            });
            let err = diffgraph::grad_check(
                |t, v| {
                    let f = fx.graph(t, v[0])?;
                    let w = t.constant(weights.clone());
                    let p = t.mul(f, w)?;
                    t.sum(p)
                },
                &[csi_batch(&[&h])],
            )
            .unwrap();
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }
}
