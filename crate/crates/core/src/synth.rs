//! Sampling from the generative model `φ_ij = μ + V y_i + ε_ij`.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, SpeakerPartition};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ModelParams;

/// SplitMix64 stream with Box-Muller normals.
///
/// Output `k` is a pure function of `seed + k·0x9E3779B97F4A7C15`, so the
/// sequence is identical on every platform.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    spare: Option<f64>,
}

impl SplitMix64 {
    pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(Self::GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on the open interval (0, 1).
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = std::f64::consts::TAU * u2;
        self.spare = Some(r * t.sin());
        r * t.cos()
    }

    pub fn normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.next_normal())
    }
}

#[derive(Debug, Clone)]
pub struct GenSpec {
    pub params: ModelParams,
    pub counts: Vec<usize>,
    pub seed: u64,
}

impl GenSpec {
    pub fn uniform(params: ModelParams, speakers: usize, per_speaker: usize, seed: u64) -> Self {
        GenSpec {
            params,
            counts: vec![per_speaker; speakers],
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub dataset: Dataset,
    pub partition: SpeakerPartition,
    pub latent: Vec<DVector<f64>>,
}

impl Sample {
    /// Speaker label of every row, in row order.
    pub fn labels(&self) -> Vec<String> {
        self.partition.assignment().iter().map(|s| format!("spk{s:05}")).collect()
    }
}

/// Speaker by speaker: draw `y_i`, then each of its `ε_ij`.
pub fn sample(spec: &GenSpec) -> Result<Sample> {
    if spec.counts.is_empty() || spec.counts.contains(&0) {
        return Err(Error::invalid("every speaker needs at least one observation"));
    }
    let p = &spec.params;
    let (d, ny) = (p.dim(), p.ny());
    let cov = linalg::inverse_spd(&p.w, "within-class precision")?;
    let noise = linalg::cholesky(&cov, "within-class covariance")?.l();
    let n: usize = spec.counts.iter().sum();
    let mut rng = SplitMix64::new(spec.seed);
    let mut vectors = DMatrix::zeros(n, d);
    let mut assignment = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(spec.counts.len());
    let mut row = 0;
    for (i, &c) in spec.counts.iter().enumerate() {
        let y = rng.normal_vector(ny);
        let centre = &p.mu + &p.v * &y;
        for _ in 0..c {
            let x = &centre + &noise * rng.normal_vector(d);
            vectors.set_row(row, &x.transpose());
            assignment.push(i);
            row += 1;
        }
        latent.push(y);
    }
    let ids = (0..n).map(|j| format!("rec{j:07}")).collect();
    Ok(Sample {
        dataset: Dataset::new(vectors, ids)?,
        partition: SpeakerPartition::new(assignment, spec.counts.len())?,
        latent,
    })
}
