//! Binary data and model files, and the labels text format.
//!
//! Every real is a 64-bit little-endian IEEE-754 value and matrices are
//! stored row-major, so a save/load round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::{accumulate, Dataset, SpeakerPartition, SuffStats};
use crate::engine::FitOutput;
use crate::error::{Error, Result};
use crate::model::{ModelParams, PriorConfig, RowPrior, VPrior, Variant, WPrior};
use crate::posterior::{QAlpha, QVtilde, QW};

pub const DATA_MAGIC: &[u8; 12] = b"BSPLDA-DATA\0";
pub const MODEL_MAGIC: &[u8; 13] = b"BSPLDA-MODEL\0";
pub const FORMAT_VERSION: u16 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        Ok(self.0.write_all(b)?)
    }
    fn u8(&mut self, x: u8) -> Result<()> {
        self.bytes(&[x])
    }
    fn u16(&mut self, x: u16) -> Result<()> {
        self.bytes(&x.to_le_bytes())
    }
    fn u32(&mut self, x: u32) -> Result<()> {
        self.bytes(&x.to_le_bytes())
    }
    fn u64(&mut self, x: u64) -> Result<()> {
        self.bytes(&x.to_le_bytes())
    }
    fn f64(&mut self, x: f64) -> Result<()> {
        self.bytes(&x.to_le_bytes())
    }
    fn vector(&mut self, v: &DVector<f64>) -> Result<()> {
        v.iter().try_for_each(|&x| self.f64(x))
    }
    fn matrix(&mut self, m: &DMatrix<f64>) -> Result<()> {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)])?;
            }
        }
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("file is truncated".into()),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn vector(&mut self, n: usize) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(n);
        for x in v.iter_mut() {
            *x = self.f64()?;
        }
        Ok(v)
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            t => Err(Error::Format(format!("bad flag byte {t}"))),
        }
    }
    fn finish(mut self) -> Result<()> {
        let mut rest = Vec::new();
        self.0.read_to_end(&mut rest)?;
        if rest.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", rest.len())))
        }
    }
    fn header(&mut self, magic: &[u8]) -> Result<()> {
        let mut b = vec![0u8; magic.len()];
        self.0
            .read_exact(&mut b)
            .map_err(|_| Error::Format("file too short for header".into()))?;
        if b != magic {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {v}")));
        }
        Ok(())
    }
}

pub fn write_data<W: Write>(out: W, vectors: &DMatrix<f64>) -> Result<()> {
    let mut w = Writer(out);
    w.bytes(DATA_MAGIC)?;
    w.u16(FORMAT_VERSION)?;
    let d = u32::try_from(vectors.ncols()).map_err(|_| Error::invalid("dimension too large"))?;
    w.u32(d)?;
    w.u64(vectors.nrows() as u64)?;
    w.matrix(vectors)?;
    Ok(w.0.flush()?)
}

pub fn read_data<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut r = Reader(input);
    r.header(DATA_MAGIC)?;
    let d = r.u32()? as usize;
    let n = usize::try_from(r.u64()?).map_err(|_| Error::Format("row count too large".into()))?;
    if d == 0 {
        return Err(Error::Format("dimension is zero".into()));
    }
    n.checked_mul(d)
        .and_then(|x| x.checked_mul(8))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let m = r.matrix(n, d)?;
    r.finish()?;
    Ok(m)
}

/// `(record_id, speaker_id)` per line; blank lines are skipped.
pub fn read_labels<R: Read>(input: R) -> Result<Vec<(String, String)>> {
    let mut text = String::new();
    BufReader::new(input).read_to_string(&mut text)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut parts = l.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(rec), Some(spk), None) => Ok((rec.to_string(), spk.to_string())),
                _ => Err(Error::Format(format!(
                    "labels line {} must be `<record_id> <speaker_id>`",
                    i + 1
                ))),
            }
        })
        .collect()
}

pub fn write_labels<W: Write>(out: W, ids: &[String], speakers: &[String]) -> Result<()> {
    if ids.len() != speakers.len() {
        return Err(Error::invalid("record and speaker lists differ in length"));
    }
    let mut w = BufWriter::new(out);
    for (r, s) in ids.iter().zip(speakers) {
        writeln!(w, "{r} {s}")?;
    }
    Ok(w.flush()?)
}

/// Loads a data file and its labels; speakers are numbered by first
/// appearance. Returns the speaker names alongside.
pub fn load_dataset(data: &Path, labels: &Path) -> Result<(Dataset, SpeakerPartition, Vec<String>)> {
    let vectors = read_data(BufReader::new(File::open(data)?))?;
    let labels = read_labels(File::open(labels)?)?;
    if labels.len() != vectors.nrows() {
        return Err(Error::invalid(format!(
            "labels file has {} rows but data file has {}",
            labels.len(),
            vectors.nrows()
        )));
    }
    let (ids, spk): (Vec<String>, Vec<String>) = labels.into_iter().unzip();
    let (partition, names) = SpeakerPartition::from_labels(&spk);
    Ok((Dataset::new(vectors, ids)?, partition, names))
}

/// Sufficient statistics of a data file and its labels. Unlike
/// [`load_dataset`], an empty file yields empty statistics.
pub fn load_stats(data: &Path, labels: &Path) -> Result<SuffStats> {
    let vectors = read_data(BufReader::new(File::open(data)?))?;
    let labels = read_labels(File::open(labels)?)?;
    if labels.len() != vectors.nrows() {
        return Err(Error::invalid(format!(
            "labels file has {} rows but data file has {}",
            labels.len(),
            vectors.nrows()
        )));
    }
    if vectors.nrows() == 0 {
        return Ok(SuffStats::empty(vectors.ncols()));
    }
    let (ids, spk): (Vec<String>, Vec<String>) = labels.into_iter().unzip();
    let (partition, _) = SpeakerPartition::from_labels(&spk);
    accumulate(&Dataset::new(vectors, ids)?, &partition)
}

/// A trained model: point estimates, posterior blocks and the prior used.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub variant: Variant,
    pub params: ModelParams,
    pub qv: QVtilde,
    pub qw: QW,
    pub qalpha: Option<QAlpha>,
    pub prior: PriorConfig,
    pub rotation: Option<DMatrix<f64>>,
    pub elbo: f64,
}

impl TrainedModel {
    pub fn from_fit(fit: &FitOutput) -> Self {
        TrainedModel {
            variant: fit.state.variant,
            params: fit.params.clone(),
            qv: fit.state.qv.clone(),
            qw: fit.state.qw.clone(),
            qalpha: fit.state.qalpha.clone(),
            prior: fit.prior.clone(),
            rotation: fit.rotation.clone(),
            elbo: fit.report.final_elbo().total,
        }
    }

    pub fn dim(&self) -> usize {
        self.qv.dim()
    }

    pub fn ny(&self) -> usize {
        self.qv.ny()
    }

    /// Adaptation prior: stored `q(Ṽ)` rows become row priors and the stored
    /// `q(W)` becomes the precision prior. The arm of `q(W)` fixes the
    /// target variant; `target`, when given, must agree with it.
    pub fn adaptation_prior(&self, target: Option<Variant>) -> Result<PriorConfig> {
        let (variant, w_prior) = match &self.qw {
            QW::Wishart { psi, nu } => (
                Variant::GaussVWishart,
                WPrior::Wishart {
                    psi0: psi.clone(),
                    nu: *nu,
                },
            ),
            QW::GammaDiag { a, b } => (Variant::GaussVGammaDiagonal, WPrior::GammaDiagonal { a: *a, b: b.clone() }),
            QW::GammaIso { a, b } => (Variant::GaussVGammaIsotropic, WPrior::GammaIsotropic { a: *a, b: *b }),
        };
        if let Some(t) = target {
            if t != variant {
                return Err(Error::invalid(format!(
                    "model trained as {} cannot serve as a {t} prior (its precision posterior fits {variant})",
                    self.variant
                )));
            }
        }
        let rows = self
            .qv
            .rows()
            .iter()
            .map(|g| RowPrior {
                mean: g.mean().clone(),
                precision: g.precision().clone(),
            })
            .collect();
        Ok(PriorConfig {
            variant,
            v_prior: VPrior::Rows(rows),
            w_prior,
        })
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer(BufWriter::new(out));
        let (d, ny) = (self.dim(), self.ny());
        w.bytes(MODEL_MAGIC)?;
        w.u16(FORMAT_VERSION)?;
        w.u8(self.variant.tag())?;
        w.u32(d as u32)?;
        w.u32(ny as u32)?;
        w.vector(&self.params.mu)?;
        w.matrix(&self.params.v)?;
        w.matrix(&self.params.w)?;
        for g in self.qv.rows() {
            w.vector(g.mean())?;
            w.matrix(g.precision())?;
        }
        match &self.qw {
            QW::Wishart { psi, nu } => {
                w.u8(0)?;
                w.matrix(psi)?;
                w.f64(*nu)?;
            }
            QW::GammaDiag { a, b } => {
                w.u8(1)?;
                w.f64(*a)?;
                w.vector(b)?;
            }
            QW::GammaIso { a, b } => {
                w.u8(2)?;
                w.f64(*a)?;
                w.f64(*b)?;
            }
        }
        match &self.qalpha {
            Some(qa) => {
                w.u8(1)?;
                w.f64(qa.a)?;
                w.vector(&qa.b)?;
            }
            None => w.u8(0)?,
        }
        match &self.prior.v_prior {
            VPrior::Ard {
                a_alpha,
                b_alpha,
                mu0,
                beta,
                beta_isotropic,
            } => {
                w.u8(0)?;
                w.f64(*a_alpha)?;
                w.f64(*b_alpha)?;
                w.vector(mu0)?;
                w.vector(beta)?;
                w.u8(u8::from(*beta_isotropic))?;
            }
            VPrior::Rows(rows) => {
                w.u8(1)?;
                for r in rows {
                    w.vector(&r.mean)?;
                    w.matrix(&r.precision)?;
                }
            }
        }
        match &self.prior.w_prior {
            WPrior::Wishart { psi0, nu } => {
                w.u8(0)?;
                w.matrix(psi0)?;
                w.f64(*nu)?;
            }
            WPrior::NonInformative => w.u8(1)?,
            WPrior::GammaDiagonal { a, b } => {
                w.u8(2)?;
                w.f64(*a)?;
                w.vector(b)?;
            }
            WPrior::GammaIsotropic { a, b } => {
                w.u8(3)?;
                w.f64(*a)?;
                w.f64(*b)?;
            }
        }
        match &self.rotation {
            Some(u) => {
                w.u8(1)?;
                w.matrix(u)?;
            }
            None => w.u8(0)?,
        }
        w.f64(self.elbo)?;
        Ok(w.0.flush()?)
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader(BufReader::new(input));
        r.header(MODEL_MAGIC)?;
        let variant = Variant::from_tag(r.u8()?)?;
        let d = r.u32()? as usize;
        let ny = r.u32()? as usize;
        if d == 0 || ny == 0 || d > 1 << 16 || ny > 1 << 16 {
            return Err(Error::Format(format!("implausible dimensions d = {d}, ny = {ny}")));
        }
        let k = ny + 1;
        let params = ModelParams::new(r.vector(d)?, r.matrix(d, ny)?, r.matrix(d, d)?)?;
        let mut means = Vec::with_capacity(d);
        let mut precs = Vec::with_capacity(d);
        for _ in 0..d {
            means.push(r.vector(k)?);
            precs.push(r.matrix(k, k)?);
        }
        let qv = QVtilde::new(means, precs)?;
        let qw = match r.u8()? {
            0 => QW::Wishart {
                psi: r.matrix(d, d)?,
                nu: r.f64()?,
            },
            1 => QW::GammaDiag {
                a: r.f64()?,
                b: r.vector(d)?,
            },
            2 => QW::GammaIso {
                a: r.f64()?,
                b: r.f64()?,
            },
            t => return Err(Error::Format(format!("unknown q(W) tag {t}"))),
        };
        let qalpha = if r.flag()? {
            let a = r.f64()?;
            Some(QAlpha::new(a, r.vector(ny)?)?)
        } else {
            None
        };
        let v_prior = match r.u8()? {
            0 => VPrior::Ard {
                a_alpha: r.f64()?,
                b_alpha: r.f64()?,
                mu0: r.vector(d)?,
                beta: r.vector(d)?,
                beta_isotropic: r.flag()?,
            },
            1 => VPrior::Rows(
                (0..d)
                    .map(|_| {
                        Ok(RowPrior {
                            mean: r.vector(k)?,
                            precision: r.matrix(k, k)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            t => return Err(Error::Format(format!("unknown loading prior tag {t}"))),
        };
        let w_prior = match r.u8()? {
            0 => WPrior::Wishart {
                psi0: r.matrix(d, d)?,
                nu: r.f64()?,
            },
            1 => WPrior::NonInformative,
            2 => WPrior::GammaDiagonal {
                a: r.f64()?,
                b: r.vector(d)?,
            },
            3 => WPrior::GammaIsotropic {
                a: r.f64()?,
                b: r.f64()?,
            },
            t => return Err(Error::Format(format!("unknown precision prior tag {t}"))),
        };
        let rotation = if r.flag()? { Some(r.matrix(d, d)?) } else { None };
        let elbo = r.f64()?;
        r.finish()?;
        let prior = PriorConfig {
            variant,
            v_prior,
            w_prior,
        };
        prior.validate(d, Some(ny)).map_err(|e| Error::Format(format!("stored prior: {e}")))?;
        if variant.has_ard() != qalpha.is_some() {
            return Err(Error::Format("q(alpha) block does not match the variant".into()));
        }
        Ok(TrainedModel {
            variant,
            params,
            qv,
            qw,
            qalpha,
            prior,
            rotation,
            elbo,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_round_trip_and_header() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]);
        let mut buf = Vec::new();
        write_data(&mut buf, &m).unwrap();
        assert_eq!(&buf[..12], DATA_MAGIC);
        assert_eq!(buf.len(), 12 + 2 + 4 + 8 + 6 * 8);
        let back = read_data(buf.as_slice()).unwrap();
        assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(read_data(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_data(extra.as_slice()).is_err());
        buf[0] = b'X';
        assert!(read_data(buf.as_slice()).is_err());
    }

    #[test]
    fn labels_parse() {
        let l = read_labels("a s1\nb s2\n\nc s1\n".as_bytes()).unwrap();
        assert_eq!(l.len(), 3);
        assert_eq!(l[2], ("c".into(), "s1".into()));
        assert!(read_labels("a\n".as_bytes()).is_err());
        assert!(read_labels("a b c\n".as_bytes()).is_err());
    }
}
