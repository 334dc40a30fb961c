use std::io::{Read, Write};

use super::kmeans::{kmeans, nearest, KMeansConfig};
use super::ContentVector;
use crate::binio::{expect_eof, read_array, read_exact, read_f32s, read_u16, read_u32};
use crate::error::{shape_err, Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"UXCB";
const VERSION: u16 = 1;
const WHAT: &str = "codebook file";

/// Discrete codes `(k_1, …, k_M)` of one item.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SidTuple(Vec<u32>);

impl SidTuple {
    pub fn new(codes: Vec<u32>) -> Self {
        Self(codes)
    }

    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The first-level code, used as the target SID.
pub fn first_layer_sid(sid: &SidTuple) -> u32 {
    sid.0[0]
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodebookConfig {
    pub levels: usize,
    pub codewords: usize,
    pub kmeans: KMeansConfig,
}

/// M levels of J codewords each; level m was fit to the residuals left by
/// levels before it.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    levels: Vec<Matrix<f32>>,
    inertia: Vec<f64>,
}

impl Codebook {
    pub fn from_levels(levels: Vec<Matrix<f32>>, inertia: Vec<f64>) -> Result<Self> {
        let Some(first) = levels.first() else {
            return Err(Error::Empty("codebook levels"));
        };
        let shape = first.shape();
        if shape.0 == 0 {
            return Err(Error::InvalidArgument("codebook needs at least one codeword".into()));
        }
        if levels.iter().any(|l| l.shape() != shape) {
            return shape_err("codebook levels differ in shape");
        }
        if inertia.len() != levels.len() {
            return shape_err("one inertia value per level");
        }
        if levels.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("codeword".into()));
        }
        Ok(Self { levels, inertia })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn codewords_per_level(&self) -> usize {
        self.levels[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].cols()
    }

    pub fn level(&self, m: usize) -> &Matrix<f32> {
        &self.levels[m]
    }

    /// Training inertia of each level.
    pub fn inertia(&self) -> &[f64] {
        &self.inertia
    }

    fn check_dim(&self, z: &[f32]) -> Result<()> {
        if z.len() != self.dim() {
            return shape_err(format!("vector has {} dims, codebook expects {}", z.len(), self.dim()));
        }
        Ok(())
    }

    /// Greedy nearest codeword per level on the running residual, returning
    /// the final residual as well.
    pub fn encode_with_residual(&self, z: &[f32]) -> Result<(SidTuple, Vec<f32>)> {
        self.check_dim(z)?;
        let mut r = z.to_vec();
        let mut codes = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let (k, _) = nearest(&r, level);
            for (x, &c) in r.iter_mut().zip(level.row(k)) {
                *x -= c;
            }
            codes.push(k as u32);
        }
        Ok((SidTuple(codes), r))
    }

    pub fn encode(&self, z: &[f32]) -> Result<SidTuple> {
        Ok(self.encode_with_residual(z)?.0)
    }

    fn check_sid(&self, sid: &SidTuple) -> Result<()> {
        if sid.len() != self.levels.len() {
            return shape_err(format!("sid has {} levels, codebook has {}", sid.len(), self.levels.len()));
        }
        let j = self.codewords_per_level();
        if let Some(bad) = sid.0.iter().find(|&&k| k as usize >= j) {
            return Err(Error::InvalidArgument(format!("code {bad} out of range for {j} codewords")));
        }
        Ok(())
    }

    /// Sum of the selected codewords.
    pub fn reconstruct(&self, sid: &SidTuple) -> Result<Vec<f32>> {
        self.check_sid(sid)?;
        let mut out = vec![0f32; self.dim()];
        for (level, &k) in self.levels.iter().zip(&sid.0) {
            for (o, &c) in out.iter_mut().zip(level.row(k as usize)) {
                *o += c;
            }
        }
        Ok(out)
    }

    /// `z` minus the selected codewords, subtracted level by level exactly as
    /// during encoding.
    pub fn residual(&self, z: &[f32], sid: &SidTuple) -> Result<Vec<f32>> {
        self.check_dim(z)?;
        self.check_sid(sid)?;
        let mut r = z.to_vec();
        for (level, &k) in self.levels.iter().zip(&sid.0) {
            for (x, &c) in r.iter_mut().zip(level.row(k as usize)) {
                *x -= c;
            }
        }
        Ok(r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.num_levels() as u16).to_le_bytes())?;
        w.write_all(&(self.codewords_per_level() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for level in &self.levels {
            for &x in level.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for &x in &self.inertia {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, WHAT)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a codebook file (bad magic)".into()));
        }
        let version = read_u16(r, WHAT)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported codebook version {version}")));
        }
        let m = read_u16(r, WHAT)? as usize;
        let j = read_u32(r, WHAT)? as usize;
        let d = read_u32(r, WHAT)? as usize;
        let mut levels = Vec::with_capacity(m);
        for _ in 0..m {
            let data = read_f32s(r, j * d, WHAT)?;
            levels.push(Matrix::from_vec(j, d, data)?);
        }
        let mut inertia = Vec::with_capacity(m);
        for _ in 0..m {
            inertia.push(f64::from_le_bytes(read_array(r, WHAT)?));
        }
        expect_eof(r, "codebook")?;
        Self::from_levels(levels, inertia)
    }
}

/// Fits `cfg.levels` codebooks; level m is trained on the residuals of the
/// training vectors after levels `< m`.
pub fn train_codebooks(vectors: &[ContentVector], cfg: &CodebookConfig) -> Result<Codebook> {
    if vectors.is_empty() {
        return Err(Error::Empty("training vectors"));
    }
    if cfg.levels == 0 {
        return Err(Error::InvalidArgument("at least one level required".into()));
    }
    let dim = vectors[0].z.len();
    let mut residuals = Matrix::zeros(vectors.len(), dim);
    for (i, v) in vectors.iter().enumerate() {
        if v.z.len() != dim {
            return shape_err(format!("item {} has {} dims, expected {dim}", v.item_id, v.z.len()));
        }
        residuals.row_mut(i).copy_from_slice(&v.z);
    }

    let mut levels = Vec::with_capacity(cfg.levels);
    let mut inertia = Vec::with_capacity(cfg.levels);
    for m in 0..cfg.levels {
        let km = KMeansConfig { seed: cfg.kmeans.seed.wrapping_add(m as u64), ..cfg.kmeans };
        let res = kmeans(&residuals, cfg.codewords, &km)?;
        for i in 0..residuals.rows() {
            let k = res.assignments[i];
            for (x, &c) in residuals.row_mut(i).iter_mut().zip(res.centroids.row(k)) {
                *x -= c;
            }
        }
        levels.push(res.centroids);
        inertia.push(res.inertia);
    }
    Codebook::from_levels(levels, inertia)
}
