//! Datasets, speaker partitions and their sufficient statistics.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// `N × d` matrix of observations, one row per vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    vectors: DMatrix<f64>,
    ids: Vec<String>,
}

impl Dataset {
    pub fn new(vectors: DMatrix<f64>, ids: Vec<String>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::invalid("dataset must have at least one row and one column"));
        }
        check_dim("dataset ids", vectors.nrows(), ids.len())?;
        if let Some(pos) = vectors.iter().position(|x| !x.is_finite()) {
            let row = pos % vectors.nrows();
            return Err(Error::invalid(format!("dataset row {row} has a non-finite entry")));
        }
        Ok(Dataset { vectors, ids })
    }

    /// Dataset with generated ids `"0"`, `"1"`, ...
    pub fn from_rows(vectors: DMatrix<f64>) -> Result<Self> {
        let ids = (0..vectors.nrows()).map(|i| i.to_string()).collect();
        Self::new(vectors, ids)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.vectors.row(i).transpose()
    }
}

/// Assignment of every dataset row to one of `M` speakers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerPartition {
    assignment: Vec<usize>,
    num_speakers: usize,
}

impl SpeakerPartition {
    pub fn new(assignment: Vec<usize>, num_speakers: usize) -> Result<Self> {
        let mut counts = vec![0usize; num_speakers];
        for (row, &s) in assignment.iter().enumerate() {
            if s >= num_speakers {
                return Err(Error::invalid(format!(
                    "row {row} assigned to speaker {s}, but only {num_speakers} speakers exist"
                )));
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("speaker {empty} has no vectors")));
        }
        Ok(SpeakerPartition {
            assignment,
            num_speakers,
        })
    }

    /// Builds the partition from arbitrary labels; speakers are numbered in
    /// order of first appearance.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> (Self, Vec<String>) {
        let mut names: Vec<String> = Vec::new();
        let mut index = std::collections::HashMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                *index.entry(l.as_ref().to_string()).or_insert_with(|| {
                    names.push(l.as_ref().to_string());
                    names.len() - 1
                })
            })
            .collect();
        let partition = SpeakerPartition {
            assignment,
            num_speakers: names.len(),
        };
        (partition, names)
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn num_speakers(&self) -> usize {
        self.num_speakers
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Row indices of each speaker, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_speakers];
        for (row, &s) in self.assignment.iter().enumerate() {
            out[s].push(row);
        }
        out
    }
}

/// Zero-, first- and second-order statistics of one speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerStats {
    pub count: f64,
    pub first: DVector<f64>,
    pub second: DMatrix<f64>,
}

impl SpeakerStats {
    pub fn zeros(d: usize) -> Self {
        SpeakerStats {
            count: 0.0,
            first: DVector::zeros(d),
            second: DMatrix::zeros(d, d),
        }
    }

    pub fn push(&mut self, x: &DVector<f64>) {
        self.count += 1.0;
        self.first += x;
        self.second.ger(1.0, x, x, 1.0);
    }
}

/// Per-speaker and global sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub speakers: Vec<SpeakerStats>,
    pub count: f64,
    pub first: DVector<f64>,
    pub second: DMatrix<f64>,
}

impl SuffStats {
    /// Statistics of an empty dataset of dimension `d`.
    pub fn empty(d: usize) -> Self {
        SuffStats {
            speakers: Vec::new(),
            count: 0.0,
            first: DVector::zeros(d),
            second: DMatrix::zeros(d, d),
        }
    }

    pub fn from_speakers(speakers: Vec<SpeakerStats>, d: usize) -> Self {
        let mut out = SuffStats::empty(d);
        for s in &speakers {
            out.count += s.count;
            out.first += &s.first;
            out.second += &s.second;
        }
        out.speakers = speakers;
        out
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn mean(&self) -> DVector<f64> {
        &self.first / self.count
    }

    /// Scatter around the per-speaker means, `S − Σ_i F_i F_iᵀ / N_i`.
    pub fn within_scatter(&self) -> DMatrix<f64> {
        let mut sw = self.second.clone();
        for s in &self.speakers {
            sw.ger(-1.0 / s.count, &s.first, &s.first, 1.0);
        }
        crate::linalg::symmetrize(&sw)
    }

    /// Applies `x ↦ Rᵀ x` to every underlying vector.
    pub fn rotate(&self, rotation: &DMatrix<f64>) -> SuffStats {
        let rt = rotation.transpose();
        let speakers = self
            .speakers
            .iter()
            .map(|s| SpeakerStats {
                count: s.count,
                first: &rt * &s.first,
                second: crate::linalg::symmetrize(&(&rt * &s.second * rotation)),
            })
            .collect();
        SuffStats::from_speakers(speakers, self.dim())
    }
}

/// Statistics centered around a mean `μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredStats {
    pub mu: DVector<f64>,
    pub first: Vec<DVector<f64>>,
    pub second: Vec<DMatrix<f64>>,
    pub global_first: DVector<f64>,
    pub global_second: DMatrix<f64>,
}

/// One pass over the data, ascending row index within ascending speaker.
pub fn accumulate(dataset: &Dataset, partition: &SpeakerPartition) -> Result<SuffStats> {
    check_dim("partition length", dataset.len(), partition.len())?;
    let stats = accumulate_rows(dataset.vectors(), partition.assignment(), partition.num_speakers())?;
    if stats.speakers.iter().any(|s| s.count == 0.0) {
        return Err(Error::invalid("empty speaker class"));
    }
    Ok(stats)
}

/// Accumulates a chunk of rows; speakers without rows in the chunk get
/// zero statistics so that chunks can be [`merge`]d.
pub fn accumulate_rows(
    vectors: &DMatrix<f64>,
    assignment: &[usize],
    num_speakers: usize,
) -> Result<SuffStats> {
    check_dim("assignment length", vectors.nrows(), assignment.len())?;
    let d = vectors.ncols();
    let mut speakers = vec![SpeakerStats::zeros(d); num_speakers];
    for (row, &s) in assignment.iter().enumerate() {
        let target = speakers
            .get_mut(s)
            .ok_or_else(|| Error::invalid(format!("row {row} has speaker {s} out of range")))?;
        target.push(&vectors.row(row).transpose());
    }
    Ok(SuffStats::from_speakers(speakers, d))
}

/// Merges statistics of disjoint chunks whose speakers are listed in the
/// same order.
pub fn merge(parts: &[SuffStats]) -> Result<SuffStats> {
    let first = parts.first().ok_or_else(|| Error::invalid("nothing to merge"))?;
    let d = first.dim();
    let m = first.num_speakers();
    let mut speakers = vec![SpeakerStats::zeros(d); m];
    for p in parts {
        check_dim("merged stats dimension", d, p.dim())?;
        check_dim("merged stats speakers", m, p.num_speakers())?;
        for (acc, s) in speakers.iter_mut().zip(&p.speakers) {
            acc.count += s.count;
            acc.first += &s.first;
            acc.second += &s.second;
        }
    }
    Ok(SuffStats::from_speakers(speakers, d))
}

pub fn center(stats: &SuffStats, mu: &DVector<f64>) -> Result<CenteredStats> {
    check_dim("centering mean", stats.dim(), mu.len())?;
    let mut first = Vec::with_capacity(stats.num_speakers());
    let mut second = Vec::with_capacity(stats.num_speakers());
    for s in &stats.speakers {
        first.push(&s.first - mu * s.count);
        second.push(center_second(&s.second, &s.first, s.count, mu));
    }
    Ok(CenteredStats {
        mu: mu.clone(),
        first,
        second,
        global_first: &stats.first - mu * stats.count,
        global_second: center_second(&stats.second, &stats.first, stats.count, mu),
    })
}

/// `S − μFᵀ − Fμᵀ + N μμᵀ`
fn center_second(s: &DMatrix<f64>, f: &DVector<f64>, n: f64, mu: &DVector<f64>) -> DMatrix<f64> {
    let mut out = s.clone();
    out.ger(-1.0, mu, f, 1.0);
    out.ger(-1.0, f, mu, 1.0);
    out.ger(n, mu, mu, 1.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_points() -> (Dataset, SpeakerPartition) {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        (
            Dataset::from_rows(x).unwrap(),
            SpeakerPartition::new(vec![0, 0], 1).unwrap(),
        )
    }

    #[test]
    fn identity_outer_products() {
        let (ds, p) = two_points();
        let st = accumulate(&ds, &p).unwrap();
        assert_eq!(st.speakers[0].count, 2.0);
        assert_eq!(st.speakers[0].first, DVector::from_vec(vec![1.0, 1.0]));
        assert_eq!(st.speakers[0].second, DMatrix::identity(2, 2));
    }

    #[test]
    fn repeated_vector_two_speakers() {
        let v = [0.3, -1.2, 2.0];
        let x = DMatrix::from_row_slice(2, 3, &[v, v].concat());
        let ds = Dataset::from_rows(x).unwrap();
        let st = accumulate(&ds, &SpeakerPartition::new(vec![0, 1], 2).unwrap()).unwrap();
        let vv = DVector::from_row_slice(&v);
        assert_eq!(st.count, 2.0);
        assert_eq!(st.first, &vv * 2.0);
        assert!((st.second.clone() - &vv * vv.transpose() * 2.0).amax() < 1e-15);
    }

    #[test]
    fn centering_examples() {
        let (ds, p) = two_points();
        let st = accumulate(&ds, &p).unwrap();
        let c = center(&st, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(c.first[0], DVector::from_vec(vec![-1.0, -1.0]));
        assert!((c.global_second.clone() - DMatrix::identity(2, 2)).amax() < 1e-15);

        let z = center(&st, &DVector::zeros(2)).unwrap();
        assert_eq!(z.first[0], st.speakers[0].first);
        assert_eq!(z.global_second, st.second);

        let mean = st.mean();
        let m = center(&st, &mean).unwrap();
        assert!(m.global_first.amax() < 1e-15);
    }

    #[test]
    fn validation_errors() {
        assert!(SpeakerPartition::new(vec![0, 2], 3).is_err());
        assert!(SpeakerPartition::new(vec![0, 3], 2).is_err());
        let (ds, _) = two_points();
        let p3 = SpeakerPartition::new(vec![0, 1, 1], 2).unwrap();
        assert!(matches!(accumulate(&ds, &p3), Err(Error::DimensionMismatch { .. })));
        assert!(center(&SuffStats::empty(2), &DVector::zeros(3)).is_err());
        let bad = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(Dataset::from_rows(bad).is_err());
    }

    #[test]
    fn labels_number_by_first_appearance() {
        let (p, names) = SpeakerPartition::from_labels(&["b", "a", "b", "c"]);
        assert_eq!(p.assignment(), &[0, 1, 0, 2]);
        assert_eq!(names, vec!["b", "a", "c"]);
    }
}
