//! Weight heads, the per-iteration model bundle and its binary file format.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes   "DSHIFTMD"
//! version  u32       1
//! kind     u8        0 = candidate weighting, 1 = direct Gaussian regression
//! bank     u32 n, n x f64
//! schedule f64 eta, u32 n, n x f64 loss weights
//! norm     u32 d, d x f64 mean, d x f64 scale
//! [kind 1] f64 minimum bandwidth
//! heads    u32 count, then per head: u32 layers+1, (layers+1) x u32 dims,
//!          u64 parameter count, parameters as f64
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use super::gaussian::{DirectModel, DirectRegressionHead};
use super::mlp::{softmax_rows, Mlp, MlpCache};
use super::{BandwidthBank, FeatureMatrix, IterationSchedule};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DSHIFTMD";
const VERSION: u32 = 1;

/// MLP followed by a row-wise softmax over the bandwidth candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightHead {
    mlp: Mlp,
}

impl WeightHead {
    pub fn new(mlp: Mlp) -> Self {
        Self { mlp }
    }

    /// `features -> hidden... -> candidates`, He-initialised.
    pub fn init(features: usize, hidden: &[usize], candidates: usize, seed: u64) -> Result<Self> {
        Ok(Self::new(Mlp::init(&layer_dims(features, hidden, candidates), seed)?))
    }

    pub fn zeros(features: usize, hidden: &[usize], candidates: usize) -> Result<Self> {
        Ok(Self::new(Mlp::zeros(&layer_dims(features, hidden, candidates))?))
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn candidates(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn forward(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.mlp.forward(features)?))
    }

    pub(crate) fn forward_cached(&self, features: ArrayView2<'_, f64>) -> Result<(Array2<f64>, MlpCache)> {
        let (logits, cache) = self.mlp.forward_cached(features)?;
        Ok((softmax_rows(&logits), cache))
    }
}

pub(crate) fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

/// Fixed affine standardisation applied to raw features before any head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    /// Per-column mean and standard deviation over all rows of all matrices.
    /// Constant columns keep unit scale.
    pub fn fit<'a>(matrices: impl IntoIterator<Item = &'a FeatureMatrix>, width: usize) -> Self {
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut n = 0usize;
        for m in matrices {
            for row in m.values().rows() {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity(width);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n as f64 - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, features: &FeatureMatrix) -> Result<Array2<f64>> {
        if features.width() != self.width() {
            return Err(Error::shape(format!(
                "model expects {} features, got {}",
                self.width(),
                features.width()
            )));
        }
        let mut out = features.values().clone();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                row[j] = (row[j] - self.mean[j]) / self.scale[j];
            }
        }
        Ok(out)
    }
}

/// Everything needed to run dynamic shifting: candidates, schedule, feature
/// normalisation and one weight head per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftModel {
    pub bank: BandwidthBank,
    pub schedule: IterationSchedule,
    pub norm: FeatureNorm,
    pub heads: Vec<WeightHead>,
}

impl ShiftModel {
    pub fn new(
        bank: BandwidthBank,
        schedule: IterationSchedule,
        norm: FeatureNorm,
        heads: Vec<WeightHead>,
    ) -> Result<Self> {
        let model = Self {
            bank,
            schedule,
            norm,
            heads,
        };
        model.validate()?;
        Ok(model)
    }

    /// Freshly initialised heads; iteration `i` uses seed `seed + i`.
    pub fn init(
        bank: BandwidthBank,
        schedule: IterationSchedule,
        norm: FeatureNorm,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let heads = (0..schedule.iterations())
            .map(|i| WeightHead::init(norm.width(), hidden, bank.len(), seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        Self::new(bank, schedule, norm, heads)
    }

    /// All-zero heads: every seed weights the candidates uniformly.
    pub fn uniform(
        bank: BandwidthBank,
        schedule: IterationSchedule,
        features: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        let heads = (0..schedule.iterations())
            .map(|_| WeightHead::zeros(features, hidden, bank.len()))
            .collect::<Result<_>>()?;
        Self::new(bank, schedule, FeatureNorm::identity(features), heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.len() != self.schedule.iterations() {
            return Err(Error::shape(format!(
                "{} heads for {} iterations",
                self.heads.len(),
                self.schedule.iterations()
            )));
        }
        if self.norm.mean.len() != self.norm.scale.len() {
            return Err(Error::shape("feature normalisation mean/scale lengths differ"));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.candidates() != self.bank.len() {
                return Err(Error::shape(format!(
                    "head {i} emits {} weights for {} candidates",
                    h.candidates(),
                    self.bank.len()
                )));
            }
            if h.mlp().input_width() != self.norm.width() {
                return Err(Error::shape(format!(
                    "head {i} takes {} features, normalisation has {}",
                    h.mlp().input_width(),
                    self.norm.width()
                )));
            }
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        self.norm.width()
    }

    /// Candidate weights of every iteration for the given raw features.
    pub fn weights(&self, features: &FeatureMatrix) -> Result<Vec<Array2<f64>>> {
        let normed = self.norm.apply(features)?;
        self.heads.iter().map(|h| h.forward(normed.view())).collect()
    }
}

/// A serialisable model of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Weighted(ShiftModel),
    Direct(DirectModel),
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        match self {
            ModelFile::Weighted(m) => {
                w.u8(0);
                w.f64s(m.bank.candidates());
                w.schedule(&m.schedule);
                w.norm(&m.norm);
                w.u32(m.heads.len() as u32);
                for h in &m.heads {
                    w.mlp(h.mlp());
                }
            }
            ModelFile::Direct(m) => {
                w.u8(1);
                w.f64s(&[]);
                w.schedule(&m.schedule);
                w.norm(&m.norm);
                w.f64(m.min_bandwidth);
                w.u32(m.heads.len() as u32);
                for h in &m.heads {
                    w.mlp(h.mlp());
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.fail("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported format version {version}")));
        }
        let kind = r.u8()?;
        let bank = r.f64s()?;
        let schedule = r.schedule()?;
        let norm = r.norm()?;
        let model = match kind {
            0 => {
                let n = r.u32()? as usize;
                let heads = (0..n).map(|_| r.mlp().map(WeightHead::new)).collect::<Result<_>>()?;
                ModelFile::Weighted(ShiftModel::new(BandwidthBank::new(bank)?, schedule, norm, heads)?)
            }
            1 => {
                let min_bandwidth = r.f64()?;
                let n = r.u32()? as usize;
                let heads = (0..n)
                    .map(|_| r.mlp().map(|m| DirectRegressionHead::new(m, min_bandwidth)))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .collect::<Result<_>>()?;
                ModelFile::Direct(DirectModel::new(schedule, norm, heads, min_bandwidth)?)
            }
            k => return Err(r.fail(&format!("unknown model kind {k}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes after model"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        for &x in v {
            self.f64(x);
        }
    }
    fn schedule(&mut self, s: &IterationSchedule) {
        self.f64(s.eta());
        self.f64s(s.loss_weights());
    }
    fn norm(&mut self, n: &FeatureNorm) {
        self.u32(n.mean.len() as u32);
        for &x in n.mean.iter().chain(&n.scale) {
            self.f64(x);
        }
    }
    fn mlp(&mut self, m: &Mlp) {
        self.u32(m.dims().len() as u32);
        for &d in m.dims() {
            self.u32(d as u32);
        }
        self.u64(m.params().len() as u64);
        for &p in m.params() {
            self.f64(p);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, reason: &str) -> Error {
        Error::Format {
            path: "<model>".into(),
            reason: format!("{reason} (at byte {})", self.pos),
        }
    }
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn count(&mut self, elem: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(self.fail("length field exceeds file size"));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn schedule(&mut self) -> Result<IterationSchedule> {
        let eta = self.f64()?;
        IterationSchedule::new(eta, self.f64s()?)
    }
    fn norm(&mut self) -> Result<FeatureNorm> {
        let d = self.count(16)?;
        let mean = (0..d).map(|_| self.f64()).collect::<Result<_>>()?;
        let scale = (0..d).map(|_| self.f64()).collect::<Result<_>>()?;
        Ok(FeatureNorm { mean, scale })
    }
    fn mlp(&mut self) -> Result<Mlp> {
        let n = self.count(4)?;
        let dims = (0..n)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = self.u64()? as usize;
        if count.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(self.fail("parameter count exceeds file size"));
        }
        let params = (0..count).map(|_| self.f64()).collect::<Result<_>>()?;
        Mlp::from_parts(dims, params)
    }
}
