//! Embedding datasets: the `TDEM` file format, synthetic two-family
//! generators, embedding-space view augmentation and epoch batching.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::io_util::{self, ByteReader};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const DATASET_MAGIC: &[u8; 4] = b"TDEM";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic {0:?}, expected \"TDEM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("file truncated: header promises {expected} records of dim {dim}, body holds {available} bytes")]
    Truncated {
        expected: usize,
        dim: usize,
        available: usize,
    },
    #[error("{0} unexpected bytes after the last record")]
    TrailingBytes(usize),
    #[error("record {record}: non-finite value at index {index}")]
    NonFinite { record: usize, index: usize },
    #[error("record {record}: invalid label byte {value}")]
    BadLabel { record: usize, value: u8 },
    #[error("record {record}: invalid family byte {value}")]
    BadFamily { record: usize, value: u8 },
    #[error("record {record}: real samples cannot carry a generator family")]
    RealWithFamily { record: usize },
    #[error("embedding has {actual} values, dataset dim is {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("paired views do not match: {0}")]
    PairedMismatch(String),
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("batch size must be at least 2, got {0}")]
    BadBatchSize(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }
}

/// Generator family of a fake sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    GanLike,
    DiffusionLike,
    Unknown,
}

impl Family {
    pub fn to_byte(self) -> u8 {
        match self {
            Family::GanLike => 0,
            Family::DiffusionLike => 1,
            Family::Unknown => 255,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Family::GanLike),
            1 => Some(Family::DiffusionLike),
            255 => Some(Family::Unknown),
            _ => None,
        }
    }

    pub fn is_known(self) -> bool {
        self != Family::Unknown
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub embedding: Vec<f32>,
    pub label: Label,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    records: Vec<Record>,
}

impl EmbeddingDataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) -> Result<(), DataError> {
        validate_record(self.dim, self.records.len(), &record)?;
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn families(&self) -> Vec<Family> {
        self.records.iter().map(|r| r.family).collect()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// True when any record carries a known family.
    pub fn has_families(&self) -> bool {
        self.records.iter().any(|r| r.family.is_known())
    }

    /// Embeddings of `indices`, promoted to the engine scalar.
    pub fn matrix_of<F: Scalar>(&self, indices: &[usize]) -> Matrix<F> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend(self.records[i].embedding.iter().map(|&v| F::lit(v as f64)));
        }
        Matrix::from_vec(indices.len(), self.dim, data).expect("records have dataset dim")
    }

    pub fn to_matrix<F: Scalar>(&self) -> Matrix<F> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.matrix_of(&all)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            dim: self.dim,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Label-stratified split; returns `(train, held_out)` with roughly
    /// `held_out_fraction` of each label in the second part.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> (Self, Self) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for label in [Label::Real, Label::Fake] {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.records[i].label == label)
                .collect();
            idx.shuffle(&mut rng);
            let n_test = (idx.len() as f64 * held_out_fraction).round() as usize;
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        (self.subset(&train), self.subset(&test))
    }

    /// Checks that `views` can serve as second views of `self`.
    pub fn check_paired(&self, views: &Self) -> Result<(), DataError> {
        if views.len() != self.len() {
            return Err(DataError::PairedMismatch(format!(
                "{} records vs {}",
                views.len(),
                self.len()
            )));
        }
        if views.dim != self.dim {
            return Err(DataError::PairedMismatch(format!("dim {} vs {}", views.dim, self.dim)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (2 + 4 * self.dim));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for r in &self.records {
            out.push(r.label.to_byte());
            out.push(r.family.to_byte());
            for v in &r.embedding {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = ByteReader::new(bytes);
        let header_truncated = || DataError::Truncated {
            expected: 0,
            dim: 0,
            available: bytes.len(),
        };
        let magic: [u8; 4] = r.array().ok_or_else(header_truncated)?;
        if &magic != DATASET_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let version = r.u32().ok_or_else(header_truncated)?;
        if version != DATASET_VERSION {
            return Err(DataError::Version(version));
        }
        let count = r.u32().ok_or_else(header_truncated)? as usize;
        let dim = r.u32().ok_or_else(header_truncated)? as usize;
        let record_bytes = 2 + 4 * dim;
        let needed = count.checked_mul(record_bytes);
        if needed.is_none_or(|n| n > r.remaining()) {
            return Err(DataError::Truncated {
                expected: count,
                dim,
                available: r.remaining(),
            });
        }
        let mut ds = EmbeddingDataset::new(dim);
        ds.records.reserve(count);
        for i in 0..count {
            let lb = r.u8().expect("length checked");
            let fb = r.u8().expect("length checked");
            let label = Label::from_byte(lb).ok_or(DataError::BadLabel { record: i, value: lb })?;
            let family = Family::from_byte(fb).ok_or(DataError::BadFamily { record: i, value: fb })?;
            let embedding: Vec<f32> = (0..dim).map(|_| r.f32().expect("length checked")).collect();
            ds.push(Record {
                embedding,
                label,
                family,
            })?;
        }
        if r.remaining() != 0 {
            return Err(DataError::TrailingBytes(r.remaining()));
        }
        Ok(ds)
    }
}

fn validate_record(dim: usize, index: usize, record: &Record) -> Result<(), DataError> {
    if record.embedding.len() != dim {
        return Err(DataError::DimMismatch {
            expected: dim,
            actual: record.embedding.len(),
        });
    }
    if let Some(j) = record.embedding.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFinite { record: index, index: j });
    }
    if record.label == Label::Real && record.family.is_known() {
        return Err(DataError::RealWithFamily { record: index });
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<EmbeddingDataset, DataError> {
    EmbeddingDataset::from_bytes(&fs::read(path)?)
}

pub fn write_dataset(ds: &EmbeddingDataset, path: &Path) -> Result<(), DataError> {
    io_util::write_bytes_atomic(path, &ds.to_bytes())?;
    Ok(())
}

/// Parameters of the synthetic two-family generator.
///
/// Real samples come from `modes` Gaussian blobs on a circle inside a 2-D
/// plane of the embedding space. GAN-like fakes use only a
/// `coverage_fraction` subset of the modes with a tighter spread, redrawn
/// whenever the in-plane displacement would leave the mode's cell; DM-like
/// fakes use every mode with a wider spread. Each family is shifted off the
/// plane by an offset of norm `separation`; the two offsets are 120° apart.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub n_real: usize,
    pub n_fake_gan: usize,
    pub n_fake_dm: usize,
    /// Family offset norm, in units of the real in-plane component std.
    pub separation: f64,
    pub coverage_fraction: f64,
    pub seed: u64,
    pub modes: usize,
    pub mode_radius: f64,
    pub gan_spread: f64,
    pub dm_spread: f64,
    /// Off-plane noise std relative to each family's in-plane spread.
    pub ambient_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            n_real: 2000,
            n_fake_gan: 1000,
            n_fake_dm: 1000,
            separation: 6.0,
            coverage_fraction: 0.5,
            seed: 0,
            modes: 8,
            mode_radius: 3.0,
            gan_spread: 0.25,
            dm_spread: 1.5,
            ambient_std: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::BadSpec(m.to_string()));
        if self.dim < 4 {
            return bad("dim must be at least 4 (latent plane plus two family axes)");
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return bad("separation must be finite and nonnegative");
        }
        if !(self.coverage_fraction > 0.0 && self.coverage_fraction <= 1.0) {
            return bad("coverage_fraction must lie in (0, 1]");
        }
        if self.modes == 0 {
            return bad("need at least one mode");
        }
        for (name, v) in [
            ("mode_radius", self.mode_radius),
            ("gan_spread", self.gan_spread),
            ("dm_spread", self.dm_spread),
            ("ambient_std", self.ambient_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Number of modes the GAN-like family draws from.
    pub fn covered_modes(&self) -> usize {
        ((self.coverage_fraction * self.modes as f64).round() as usize).clamp(1, self.modes)
    }
}

/// Geometry behind a synthetic dataset, for audits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLayout {
    pub mode_centers: Vec<Vec<f64>>,
    /// Indices of the modes the GAN-like family covers, ascending.
    pub gan_modes: Vec<usize>,
    pub gan_offset: Vec<f64>,
    pub dm_offset: Vec<f64>,
    pub plane: [Vec<f64>; 2],
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gram-Schmidt against `basis`, then unit length.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Vec<f64> {
    for b in basis {
        let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in v.iter_mut().zip(b) {
            *x -= d * y;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Angle between the two family offsets.
const FAMILY_ANGLE: f64 = 2.0 * std::f64::consts::FRAC_PI_3;

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingDataset, DataError> {
    make_synthetic_with_layout(spec).map(|(ds, _)| ds)
}

pub fn make_synthetic_with_layout(
    spec: &SyntheticSpec,
) -> Result<(EmbeddingDataset, SyntheticLayout), DataError> {
    spec.validate()?;
    let dim = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let u1 = orthonormalize(gaussian_vec(&mut rng, dim), &[]);
    let u2 = orthonormalize(gaussian_vec(&mut rng, dim), std::slice::from_ref(&u1));
    let gan_axis = orthonormalize(gaussian_vec(&mut rng, dim), &[u1.clone(), u2.clone()]);
    let dm_axis = orthonormalize(
        gaussian_vec(&mut rng, dim),
        &[u1.clone(), u2.clone(), gan_axis.clone()],
    );

    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mode_centers: Vec<Vec<f64>> = (0..spec.modes)
        .map(|m| {
            let a = phase + std::f64::consts::TAU * m as f64 / spec.modes as f64;
            let (c, s) = (spec.mode_radius * a.cos(), spec.mode_radius * a.sin());
            u1.iter().zip(&u2).map(|(x, y)| c * x + s * y).collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..spec.modes).collect();
    order.shuffle(&mut rng);
    let mut gan_modes = order[..spec.covered_modes()].to_vec();
    gan_modes.sort_unstable();

    let gan_offset: Vec<f64> = gan_axis.iter().map(|a| spec.separation * a).collect();
    let (c, s) = (FAMILY_ANGLE.cos(), FAMILY_ANGLE.sin());
    let dm_offset: Vec<f64> = gan_axis
        .iter()
        .zip(&dm_axis)
        .map(|(g, a)| spec.separation * (c * g + s * a))
        .collect();
    let zero = vec![0.0; dim];

    let mut ds = EmbeddingDataset::new(dim);
    let groups: [(usize, Label, Family, f64, &[usize], &[f64]); 3] = [
        (spec.n_real, Label::Real, Family::Unknown, 1.0, &order, &zero),
        (spec.n_fake_gan, Label::Fake, Family::GanLike, spec.gan_spread, &gan_modes, &gan_offset),
        (spec.n_fake_dm, Label::Fake, Family::DiffusionLike, spec.dm_spread, &order, &dm_offset),
    ];
    // GAN-like samples stay strictly inside their mode's in-plane cell.
    let cell_radius = if spec.modes > 1 && spec.mode_radius > 0.0 {
        0.9 * spec.mode_radius * (std::f64::consts::PI / spec.modes as f64).sin()
    } else {
        f64::INFINITY
    };
    for (count, label, family, spread, modes, offset) in groups {
        for _ in 0..count {
            let m = modes[rng.random_range(0..modes.len())];
            let embedding = loop {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let noise: Vec<f64> = (0..dim)
                    .map(|d| {
                        let ambient: f64 = StandardNormal.sample(&mut rng);
                        spread * (a * u1[d] + b * u2[d]) + spread * spec.ambient_std * ambient
                    })
                    .collect();
                if family == Family::GanLike {
                    let along = |u: &[f64]| noise.iter().zip(u).map(|(n, u)| n * u).sum::<f64>();
                    if along(&u1).hypot(along(&u2)) >= cell_radius {
                        continue;
                    }
                }
                break (0..dim)
                    .map(|d| (mode_centers[m][d] + noise[d] + offset[d]) as f32)
                    .collect();
            };
            ds.push(Record {
                embedding,
                label,
                family,
            })?;
        }
    }
    let layout = SyntheticLayout {
        mode_centers,
        gan_modes,
        gan_offset,
        dm_offset,
        plane: [u1, u2],
    };
    Ok((ds, layout))
}

/// Second view of a batch: `x + strength·σ̂·g`, with `σ̂` the per-dimension
/// batch standard deviation and `g` unit Gaussian noise.
pub fn augment_view<F: Scalar>(x: &Matrix<F>, strength: F, seed: u64) -> Matrix<F> {
    if strength == F::zero() || x.rows() == 0 {
        return x.clone();
    }
    let n = F::from_usize_lossy(x.rows());
    let mut mean = vec![F::zero(); x.cols()];
    for r in x.row_iter() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![F::zero(); x.cols()];
    for r in x.row_iter() {
        for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<F> = var.into_iter().map(|s| strength * (s / n).sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, &s) in out.row_mut(i).iter_mut().zip(&scale) {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v += s * F::lit(g);
        }
    }
    out
}

/// Shuffled index batches for one epoch; the final short batch is kept.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size < 2 {
        return Err(DataError::BadBatchSize(batch_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
