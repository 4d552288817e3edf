//! Geometric multipath scenes and position-labelled CSI datasets.
//!
//! A scene has one base station with a uniform linear array, an optional
//! line-of-sight path and a set of point scatterers (single bounce only).
//! Each path contributes `rho / d * e^{-j 2 pi d / lambda}` times the array
//! steering phase to the tap nearest to its propagation delay.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ofdm::{self, ComplexVec, CsiMatrix, OfdmConfig, PerturbationSequence};
use crate::util;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub type Point = [f64; 2];

const TAG_SCATTERERS: u64 = 1;
const TAG_PILOT: u64 = 2;
const TAG_SAMPLE: u64 = 3;

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub min: Point,
    pub max: Point,
}

impl Area {
    pub fn new(min: Point, max: Point) -> Result<Self> {
        if !(min[0] < max[0] && min[1] < max[1]) {
            return invalid("area must have positive extent");
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: Point) -> bool {
        (self.min[0]..=self.max[0]).contains(&p[0]) && (self.min[1]..=self.max[1]).contains(&p[1])
    }

    pub fn diagonal(&self) -> f64 {
        dist(self.min, self.max)
    }

    pub fn center(&self) -> Point {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        [
            rng.random_range(self.min[0]..=self.max[0]),
            rng.random_range(self.min[1]..=self.max[1]),
        ]
    }
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Point,
    pub reflection: Complex64,
}

/// Base-station geometry plus propagation environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bs_position: Point,
    /// Unit vector along the array axis; broadside is perpendicular to it.
    pub array_axis: Point,
    pub antennas: usize,
    /// Element spacing in meters.
    pub antenna_spacing: f64,
    pub wavelength: f64,
    /// Sampling bandwidth in Hz; one tap spans `1 / bandwidth` seconds.
    pub bandwidth: f64,
    pub line_of_sight: bool,
    pub scatterers: Vec<Scatterer>,
    pub area: Area,
    pub seed: u64,
}

/// Knobs for [`Scene::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub area: Area,
    pub bs_position: Point,
    pub antennas: usize,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub scatterers: usize,
    /// Scatterers are placed in the area grown by this margin (m).
    pub scatterer_margin: f64,
    /// Reflection magnitudes are drawn from `U[lo, hi]`.
    pub reflection_range: (f64, f64),
    pub line_of_sight: bool,
}

impl SceneParams {
    /// 20 m x 20 m area, 8 antennas, 12 scatterers, 5 GHz carrier, 20 MHz
    /// bandwidth; base station just outside the lower-left corner.
    pub fn desk() -> Self {
        Self {
            area: Area {
                min: [0.0, 0.0],
                max: [20.0, 20.0],
            },
            bs_position: [-2.0, -2.0],
            antennas: 8,
            carrier_hz: 5e9,
            bandwidth_hz: 20e6,
            scatterers: 12,
            scatterer_margin: 5.0,
            reflection_range: (0.2, 0.8),
            line_of_sight: true,
        }
    }

    /// Same area with the base station at the opposite corner.
    pub fn desk_alt() -> Self {
        Self {
            bs_position: [22.0, 22.0],
            ..Self::desk()
        }
    }
}

impl Scene {
    /// Builds a scene whose array broadside points at the area center and
    /// whose scatterers are drawn from `seed`.
    pub fn generate(params: &SceneParams, seed: u64) -> Result<Self> {
        if params.antennas == 0 {
            return invalid("scene needs at least one antenna");
        }
        if params.scatterers == 0 && !params.line_of_sight {
            return invalid("scene needs a scatterer or a line-of-sight path");
        }
        if !(params.carrier_hz > 0.0 && params.bandwidth_hz > 0.0) {
            return invalid("carrier and bandwidth must be positive");
        }
        let area = Area::new(params.area.min, params.area.max)?;
        let wavelength = SPEED_OF_LIGHT / params.carrier_hz;
        let c = area.center();
        let (dx, dy) = (c[0] - params.bs_position[0], c[1] - params.bs_position[1]);
        let n = dx.hypot(dy).max(f64::MIN_POSITIVE);
        let array_axis = [-dy / n, dx / n];

        let mut rng = util::child_rng(seed, TAG_SCATTERERS, 0);
        let m = params.scatterer_margin;
        let grown = Area::new(
            [area.min[0] - m, area.min[1] - m],
            [area.max[0] + m, area.max[1] + m],
        )?;
        let (lo, hi) = params.reflection_range;
        let scatterers = (0..params.scatterers)
            .map(|_| {
                let position = grown.sample(&mut rng);
                let mag = rng.random_range(lo..=hi);
                let phase = rng.random_range(0.0..2.0 * PI);
                Scatterer {
                    position,
                    reflection: Complex64::from_polar(mag, phase),
                }
            })
            .collect();
        Ok(Self {
            bs_position: params.bs_position,
            array_axis,
            antennas: params.antennas,
            antenna_spacing: wavelength / 2.0,
            wavelength,
            bandwidth: params.bandwidth_hz,
            line_of_sight: params.line_of_sight,
            scatterers,
            area,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 {
            return invalid("scene needs at least one antenna");
        }
        if self.scatterers.is_empty() && !self.line_of_sight {
            return invalid("scene needs a scatterer or a line-of-sight path");
        }
        Area::new(self.area.min, self.area.max)?;
        Ok(())
    }

    /// `(total length, arrival point, reflection)` for every path to `x`.
    fn paths(&self, x: Point) -> Vec<(f64, Point, Complex64)> {
        let mut out = Vec::with_capacity(self.scatterers.len() + 1);
        if self.line_of_sight {
            out.push((dist(x, self.bs_position), x, Complex64::new(1.0, 0.0)));
        }
        for s in &self.scatterers {
            let d = dist(x, s.position) + dist(s.position, self.bs_position);
            out.push((d, s.position, s.reflection));
        }
        out
    }

    /// Sine of the arrival angle from `from`, measured off broadside.
    fn sin_arrival(&self, from: Point) -> f64 {
        let (dx, dy) = (from[0] - self.bs_position[0], from[1] - self.bs_position[1]);
        let n = dx.hypot(dy);
        if n == 0.0 {
            return 0.0;
        }
        (dx * self.array_axis[0] + dy * self.array_axis[1]) / n
    }

    /// Impulse response (`taps` entries) from `x` to antenna `b` (0-based).
    pub fn impulse_response(&self, x: Point, b: usize, taps: usize) -> Result<ComplexVec> {
        if !self.area.contains(x) {
            return invalid(format!("position {x:?} lies outside the scene area"));
        }
        if b >= self.antennas {
            return invalid(format!("antenna {b} out of range"));
        }
        if taps == 0 {
            return invalid("tap count must be positive");
        }
        let mut h = vec![Complex64::new(0.0, 0.0); taps];
        let k = 2.0 * PI / self.wavelength;
        for (d, from, rho) in self.paths(x) {
            let d = d.max(f64::MIN_POSITIVE);
            let tap = ((d * self.bandwidth / SPEED_OF_LIGHT).round() as usize).min(taps - 1);
            let steer = -PI * b as f64 * self.sin_arrival(from) * (2.0 * self.antenna_spacing / self.wavelength);
            h[tap] += rho / d * Complex64::from_polar(1.0, -k * d + steer);
        }
        Ok(h)
    }

    /// Pilot shared by transmitter and receiver for this scene.
    pub fn pilot(&self, subcarriers: usize) -> Vec<f64> {
        ofdm::pilot_sequence(subcarriers, util::derive_seed(self.seed, TAG_PILOT, 0))
    }
}

/// Free-function form of [`Scene::impulse_response`].
pub fn generate_impulse_response(
    scene: &Scene,
    x: Point,
    antenna: usize,
    taps: usize,
) -> Result<ComplexVec> {
    scene.impulse_response(x, antenna, taps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub csi: CsiMatrix,
    pub position: Point,
}

/// Metadata stored in the JSON sidecar of a CSID file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub scene: Scene,
    pub config: OfdmConfig,
    pub split: Split,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

/// CSI of one position with per-sample power normalization
/// (`||H||_F^2 = B W`) and pilot-based estimation at `snr_db`
/// (`None` = noiseless).
pub fn simulate_csi<R: Rng + ?Sized>(
    scene: &Scene,
    cfg: &OfdmConfig,
    x: Point,
    pilot: &[f64],
    snr_db: Option<f64>,
    rng: &mut R,
) -> Result<CsiMatrix> {
    let taps: Vec<ComplexVec> = (0..scene.antennas)
        .map(|b| scene.impulse_response(x, b, cfg.channel_taps))
        .collect::<Result<_>>()?;
    let energy: f64 = taps.iter().flatten().map(|z| z.norm_sqr()).sum();
    if energy == 0.0 {
        return Err(Error::DegenerateInput(format!("no energy reaches {x:?}")));
    }
    let scale = (scene.antennas as f64 / energy).sqrt();
    // Mean received power per subcarrier is 1 after normalization.
    let noise_var = snr_db.map(|s| 10f64.powf(-s / 10.0)).unwrap_or(0.0);
    let symbols: ComplexVec = pilot.iter().map(|&t| Complex64::new(t, 0.0)).collect();
    let identity = PerturbationSequence::identity();
    let rows = taps
        .into_iter()
        .map(|h| {
            let h: ComplexVec = h.into_iter().map(|z| z * scale).collect();
            let y = match snr_db {
                Some(_) => ofdm::transmit(&h, &identity, &symbols, cfg, noise_var, Some(&mut *rng))?,
                None => ofdm::transmit::<util::Rng>(&h, &identity, &symbols, cfg, 0.0, None)?,
            };
            ofdm::estimate_csi(&y, pilot)
        })
        .collect::<Result<Vec<_>>>()?;
    CsiMatrix::from_rows(rows)
}

/// Draws `n` uniformly placed samples. Every sample has its own RNG stream
/// derived from `(seed, index)`, so the result does not depend on thread
/// scheduling.
pub fn build_dataset(
    scene: &Scene,
    cfg: &OfdmConfig,
    n: usize,
    snr_db: Option<f64>,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if n == 0 {
        return invalid("dataset needs at least one sample");
    }
    scene.validate()?;
    cfg.validate()?;
    let pilot = scene.pilot(cfg.subcarriers);
    let samples = util::par_map(n, |i| {
        let mut rng = util::child_rng(seed, TAG_SAMPLE, i as u64);
        let position = scene.area.sample(&mut rng);
        let csi = simulate_csi(scene, cfg, position, &pilot, snr_db, &mut rng)?;
        Ok(Sample { csi, position })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        meta: DatasetMeta {
            scene: scene.clone(),
            config: cfg.clone(),
            split,
            snr_db,
            seed,
            samples: n,
        },
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn antennas(&self) -> usize {
        self.samples.first().map_or(0, |s| s.csi.antennas())
    }

    pub fn subcarriers(&self) -> usize {
        self.samples.first().map_or(0, |s| s.csi.subcarriers())
    }

    /// Subset by index, keeping the metadata.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let samples: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self {
            meta: DatasetMeta {
                samples: samples.len(),
                ..self.meta.clone()
            },
            samples,
        }
    }

    /// Writes `<base>.csid` and `<base>.json`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(base.with_extension("csid"))?);
        write_csid(&mut f, &self.samples)?;
        f.flush()?;
        std::fs::write(
            base.with_extension("json"),
            serde_json::to_vec_pretty(&self.meta)?,
        )?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let meta: DatasetMeta =
            serde_json::from_slice(&std::fs::read(base.with_extension("json"))?)?;
        let mut f = std::io::BufReader::new(std::fs::File::open(base.with_extension("csid"))?);
        let samples = read_csid(&mut f)?;
        if samples.len() != meta.samples {
            return Err(Error::Format(format!(
                "sidecar lists {} samples, CSID holds {}",
                meta.samples,
                samples.len()
            )));
        }
        Ok(Self { samples, meta })
    }
}

pub const CSID_MAGIC: &[u8; 4] = b"CSID";
pub const CSID_VERSION: u32 = 1;

/// Little-endian CSID stream: magic, version, N, B, W, D=2, then per sample
/// `B*W` interleaved f32 `(re, im)` pairs row-major followed by `D` f32
/// coordinates.
pub fn write_csid<W: Write>(w: &mut W, samples: &[Sample]) -> Result<()> {
    let (b, wc) = samples
        .first()
        .map_or((0, 0), |s| (s.csi.antennas(), s.csi.subcarriers()));
    if samples
        .iter()
        .any(|s| s.csi.antennas() != b || s.csi.subcarriers() != wc)
    {
        return invalid("all samples must share B and W");
    }
    w.write_all(CSID_MAGIC)?;
    for v in [CSID_VERSION, samples.len() as u32, b as u32, wc as u32, 2] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in samples {
        for z in s.csi.as_slice() {
            w.write_all(&(z.re as f32).to_le_bytes())?;
            w.write_all(&(z.im as f32).to_le_bytes())?;
        }
        for c in s.position {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_csid<R: Read>(r: &mut R) -> Result<Vec<Sample>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CSID_MAGIC {
        return Err(Error::Format("bad CSID magic".into()));
    }
    let mut u32s = [0u32; 5];
    for v in u32s.iter_mut() {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        *v = u32::from_le_bytes(buf);
    }
    let [version, n, b, w, d] = u32s.map(|v| v as usize);
    if version != CSID_VERSION as usize {
        return Err(Error::Format(format!("unsupported CSID version {version}")));
    }
    if d != 2 {
        return Err(Error::Format(format!("CSID dimension {d}, expected 2")));
    }
    if n > 0 && (b == 0 || w == 0) {
        return Err(Error::Format("CSID with zero B or W".into()));
    }
    let f32_at = |r: &mut R| -> Result<f64> {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        Ok(f32::from_le_bytes(buf) as f64)
    };
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut data = Vec::with_capacity(b * w);
        for _ in 0..b * w {
            let re = f32_at(r)?;
            let im = f32_at(r)?;
            data.push(Complex64::new(re, im));
        }
        let position = [f32_at(r)?, f32_at(r)?];
        samples.push(Sample {
            csi: CsiMatrix::from_flat(b, w, data)?,
            position,
        });
    }
    Ok(samples)
}
