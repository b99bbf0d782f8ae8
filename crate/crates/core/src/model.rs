//! Synthetic data for the deformable perturbation model
//! `Y_j = e^{a_j} (f + zeta_j) R_{alpha_j} + 1_k (x) b_j`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShapeError};
use crate::geometry::{act, preshape, Configuration, Similarity};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveVariant {
    /// The formula exactly as printed: the constant `cos(10 pi) = 1`.
    #[default]
    Printed,
    /// Substitutes `cos(10 pi t)` for the constant term.
    Cos10pit,
}

/// The benchmark mean-pattern curve on `[0, 1]`.
pub fn paper_curve(t: f64) -> [f64; 2] {
    paper_curve_variant(t, CurveVariant::Printed)
}

pub fn paper_curve_variant(t: f64, variant: CurveVariant) -> [f64; 2] {
    let s = (PI * t).sin();
    let s2 = s * s;
    let cos_term = match variant {
        CurveVariant::Printed => (10.0 * PI).cos(),
        CurveVariant::Cos10pit => (10.0 * PI * t).cos(),
    };
    [
        10.0 * s2 + cos_term + 20.0,
        2.0 * (6.0 * PI * t).sin() - 11.0 * s2 + 12.0 * (-25.0 * (t - 0.4).powi(2)).exp() + 1.0,
    ]
}

/// A mean configuration `f = (f(l/k))_{l=1..k}` with odd `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPattern {
    pub config: Configuration,
    pub curve_id: String,
}

impl MeanPattern {
    pub fn from_curve(k: usize, variant: CurveVariant) -> Result<Self> {
        let rows: Vec<[f64; 2]> = (1..=k)
            .map(|l| paper_curve_variant(l as f64 / k as f64, variant))
            .collect();
        let id = match variant {
            CurveVariant::Printed => "benchmark-curve",
            CurveVariant::Cos10pit => "benchmark-curve-cos10pit",
        };
        Self::from_configuration(Configuration::from_rows(&rows)?, id)
    }

    /// Wraps an arbitrary configuration; it must have odd `k` and at least two
    /// distinct landmarks.
    pub fn from_configuration(config: Configuration, curve_id: impl Into<String>) -> Result<Self> {
        if config.k() % 2 == 0 {
            return Err(ShapeError::EvenK(config.k()));
        }
        preshape(&config)?;
        Ok(Self {
            config,
            curve_id: curve_id.into(),
        })
    }

    pub fn k(&self) -> usize {
        self.config.k()
    }
}

/// Half-widths of the uniform law of the true deformations:
/// `a in [-scale, scale]`, `alpha in [-angle, angle]`, `b in [-translation, translation]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationBounds {
    pub scale: f64,
    pub angle: f64,
    pub translation: f64,
}

impl DeformationBounds {
    /// `[-1/4, 1/4] x [-1/2, 1/2] x [-1, 1]^2`.
    pub fn reference() -> Self {
        Self {
            scale: 0.25,
            angle: 0.5,
            translation: 1.0,
        }
    }

    pub fn zero() -> Self {
        Self {
            scale: 0.0,
            angle: 0.0,
            translation: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = [self.scale, self.angle, self.translation]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !ok || self.angle >= PI {
            return Err(ShapeError::Config(format!("invalid deformation bounds {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationSet {
    pub params: Vec<Similarity>,
}

impl DeformationSet {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

fn symmetric_uniform(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

pub fn sample_deformation(bounds: &DeformationBounds, rng: &mut impl Rng) -> Similarity {
    let a = symmetric_uniform(rng, bounds.scale);
    let alpha = symmetric_uniform(rng, bounds.angle);
    let b1 = symmetric_uniform(rng, bounds.translation);
    let b2 = symmetric_uniform(rng, bounds.translation);
    Similarity::new(a, alpha, [b1, b2])
}

pub fn sample_deformations(j: usize, bounds: &DeformationBounds, rng: &mut impl Rng) -> Result<DeformationSet> {
    bounds.validate()?;
    Ok(DeformationSet {
        params: (0..j).map(|_| sample_deformation(bounds, rng)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// No perturbation; useful for exact-recovery checks.
    None,
    White,
    Stationary,
    Correlated,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::White => "white",
            NoiseKind::Stationary => "stationary",
            NoiseKind::Correlated => "correlated",
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "white" => Ok(NoiseKind::White),
            "stationary" => Ok(NoiseKind::Stationary),
            "correlated" => Ok(NoiseKind::Correlated),
            other => Err(ShapeError::Config(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Gaussian noise with covariance `Id_2 (x) C` for a `k x k` column covariance
/// `C = L L'`. Each column of a draw is `L z` with `z` standard normal.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    kind: NoiseKind,
    k: usize,
    seed: u64,
    factor: Option<DMatrix<f64>>,
}

/// Serializable description of a noise model; the factor is rebuilt from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub k: usize,
    pub seed: u64,
}

/// Toeplitz square root `T_{l l'} = exp(-(|l - l'| / 100)^2) / 2` of the
/// stationary covariance.
pub fn stationary_root(k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |l, lp| {
        let d = (l as f64 - lp as f64).abs() / 100.0;
        0.5 * (-d * d).exp()
    })
}

/// A seed-deterministic rotation in `SO(k)`: the sign-normalized `Q` factor of
/// a Gaussian matrix, with the first column flipped if needed so `det = +1`.
pub fn random_rotation(k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::stream(seed, &[0x5043]);
    let g = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for c in 0..k {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(ShapeError::InvalidConfiguration(format!("k = {k} < 2")));
        }
        let factor = match kind {
            NoiseKind::None | NoiseKind::White => None,
            NoiseKind::Stationary => Some(stationary_root(k)),
            NoiseKind::Correlated => {
                let p = random_rotation(k, seed);
                let scales = DVector::from_fn(k, |l, _| (l + 1) as f64 / (2.0 * k as f64).sqrt());
                Some(p * DMatrix::from_diagonal(&scales))
            }
        };
        Ok(Self { kind, k, seed, factor })
    }

    pub fn from_spec(spec: &NoiseSpec) -> Result<Self> {
        Self::new(spec.kind, spec.k, spec.seed)
    }

    pub fn spec(&self) -> NoiseSpec {
        NoiseSpec {
            kind: self.kind,
            k: self.k,
            seed: self.seed,
        }
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The `k x k` covariance shared by both coordinate columns.
    pub fn column_covariance(&self) -> DMatrix<f64> {
        match (&self.kind, &self.factor) {
            (NoiseKind::None, _) => DMatrix::zeros(self.k, self.k),
            (NoiseKind::White, _) => DMatrix::identity(self.k, self.k) * 4.0,
            (_, Some(l)) => l * l.transpose(),
            (_, None) => unreachable!("structured noise always carries a factor"),
        }
    }

    /// Largest eigenvalue of the full `2k x 2k` covariance.
    pub fn gamma_max(&self) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            NoiseKind::White => 4.0,
            _ => SymmetricEigen::new(self.column_covariance())
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Configuration {
        let k = self.k;
        match (&self.kind, &self.factor) {
            (NoiseKind::None, _) => Configuration::zeros(k),
            (NoiseKind::White, _) => Configuration::from_matrix_unchecked(DMatrix::from_fn(k, 2, |_, _| {
                2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })),
            (_, Some(l)) => {
                let z = DMatrix::from_fn(k, 2, |_, _| StandardNormal.sample(rng));
                Configuration::from_matrix_unchecked(l * z)
            }
            (_, None) => unreachable!("structured noise always carries a factor"),
        }
    }
}

pub fn sample_noise(model: &NoiseModel, rng: &mut impl Rng) -> Configuration {
    model.sample(rng)
}

/// A simulated sample together with everything needed to score it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub observations: Vec<Configuration>,
    pub pattern: MeanPattern,
    pub truth: DeformationSet,
    pub noise: NoiseSpec,
    pub noises: Vec<Configuration>,
    pub bounds: DeformationBounds,
    pub seed: u64,
}

impl Dataset {
    pub fn j(&self) -> usize {
        self.observations.len()
    }

    pub fn k(&self) -> usize {
        self.pattern.k()
    }
}

/// Builds `J` observations. Observation `j` draws its deformation and its
/// noise from its own stream derived from `(seed, j)`.
pub fn generate_dataset(
    pattern: &MeanPattern,
    j: usize,
    bounds: &DeformationBounds,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Dataset> {
    if pattern.k() != noise.k() {
        return Err(ShapeError::DimensionMismatch(format!(
            "pattern has k = {}, noise model k = {}",
            pattern.k(),
            noise.k()
        )));
    }
    bounds.validate()?;
    let mut params = Vec::with_capacity(j);
    let mut noises = Vec::with_capacity(j);
    let mut observations = Vec::with_capacity(j);
    for idx in 0..j {
        let mut rng = rng::stream(seed, &[idx as u64]);
        let g = sample_deformation(bounds, &mut rng);
        let zeta = noise.sample(&mut rng);
        observations.push(act(&g, &pattern.config.add(&zeta)));
        params.push(g);
        noises.push(zeta);
    }
    Ok(Dataset {
        observations,
        pattern: pattern.clone(),
        truth: DeformationSet { params },
        noise: noise.spec(),
        noises,
        bounds: *bounds,
        seed,
    })
}

/// Sidecar written next to the observation and truth tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub dataset_id: String,
    pub k: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub curve_id: String,
    pub noise: NoiseSpec,
    pub bounds: DeformationBounds,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRecord {
    dataset_id: String,
    j: usize,
    ell: usize,
    x1: f64,
    x2: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRecord {
    j: usize,
    a: f64,
    alpha: f64,
    b1: f64,
    b2: f64,
}

pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const META_FILE: &str = "dataset.json";

/// Writes `observations.csv`, `truth.csv` and `dataset.json` into `dir`.
/// Indices `j` and `ell` are 1-based.
pub fn write_dataset(dataset: &Dataset, dataset_id: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut obs = csv::Writer::from_path(dir.join(OBSERVATIONS_FILE))?;
    for (j, y) in dataset.observations.iter().enumerate() {
        for (l, row) in y.rows().enumerate() {
            obs.serialize(ObservationRecord {
                dataset_id: dataset_id.to_string(),
                j: j + 1,
                ell: l + 1,
                x1: row[0],
                x2: row[1],
            })?;
        }
    }
    obs.flush()?;
    let mut truth = csv::Writer::from_path(dir.join(TRUTH_FILE))?;
    for (j, g) in dataset.truth.params.iter().enumerate() {
        truth.serialize(TruthRecord {
            j: j + 1,
            a: g.a,
            alpha: g.alpha,
            b1: g.b[0],
            b2: g.b[1],
        })?;
    }
    truth.flush()?;
    let meta = DatasetMeta {
        dataset_id: dataset_id.to_string(),
        k: dataset.k(),
        j: dataset.j(),
        curve_id: dataset.pattern.curve_id.clone(),
        noise: dataset.noise,
        bounds: dataset.bounds,
        seed: dataset.seed,
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads an observation table; returns the dataset id and the observations
/// ordered by `j`.
pub fn read_observations(path: &Path) -> Result<(String, Vec<Configuration>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut id: Option<String> = None;
    let mut rows: Vec<Vec<(usize, [f64; 2])>> = Vec::new();
    for rec in reader.deserialize() {
        let rec: ObservationRecord = rec?;
        match &id {
            None => id = Some(rec.dataset_id.clone()),
            Some(existing) if *existing != rec.dataset_id => {
                return Err(ShapeError::DimensionMismatch(format!(
                    "mixed dataset ids {existing:?} and {:?} in one table",
                    rec.dataset_id
                )))
            }
            _ => {}
        }
        if rec.j == 0 || rec.ell == 0 {
            return Err(ShapeError::InvalidConfiguration("indices are 1-based".into()));
        }
        if rows.len() < rec.j {
            rows.resize_with(rec.j, Vec::new);
        }
        rows[rec.j - 1].push((rec.ell, [rec.x1, rec.x2]));
    }
    let id = id.ok_or(ShapeError::EmptyResult)?;
    let mut observations = Vec::with_capacity(rows.len());
    for (j, mut pts) in rows.into_iter().enumerate() {
        pts.sort_by_key(|(l, _)| *l);
        let contiguous = pts.iter().enumerate().all(|(i, (l, _))| *l == i + 1);
        if !contiguous {
            return Err(ShapeError::InvalidConfiguration(format!(
                "observation {} has missing or duplicate landmarks",
                j + 1
            )));
        }
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(_, p)| p).collect();
        observations.push(Configuration::from_rows(&pts)?);
    }
    if let Some(first) = observations.first() {
        if observations.iter().any(|o| o.k() != first.k()) {
            return Err(ShapeError::DimensionMismatch(
                "observations have different landmark counts".into(),
            ));
        }
    }
    Ok((id, observations))
}

pub fn read_truth(path: &Path) -> Result<DeformationSet> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut recs: Vec<TruthRecord> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    recs.sort_by_key(|r| r.j);
    Ok(DeformationSet {
        params: recs
            .into_iter()
            .map(|r| Similarity::new(r.a, r.alpha, [r.b1, r.b2]))
            .collect(),
    })
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
