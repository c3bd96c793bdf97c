//! Empirical second moments of paired `(Y, X)` observations.
//!
//! The `X`-block can be held implicitly through its data matrix when there are
//! fewer samples than features, so that products `M·Σxx` cost `O(p·q·n)` and
//! the `q×q` matrix is never formed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_dot, symmetrize, SymMatrix};

/// `n` paired observations: row `i` of `y` and row `i` of `x` form `Z⁽ⁱ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Array2<f64>,
    x: Array2<f64>,
}

impl Dataset {
    pub fn new(y: Array2<f64>, x: Array2<f64>) -> Result<Self> {
        if y.nrows() != x.nrows() {
            return Err(Error::DimensionMismatch(format!("Y has {} rows but X has {}", y.nrows(), x.nrows())));
        }
        if y.nrows() < 2 {
            return Err(Error::InvalidArgument(format!("need n >= 2 samples, got {}", y.nrows())));
        }
        if y.ncols() == 0 || x.ncols() == 0 {
            return Err(Error::InvalidArgument("need p >= 1 and q >= 1".into()));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Format("dataset contains non-finite values".into()));
        }
        Ok(Self { y: y.as_standard_layout().into_owned(), x: x.as_standard_layout().into_owned() })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    /// Joint data matrix `[Y X]` (n × (p+q)).
    pub fn joint(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.y.view(), self.x.view()]).expect("row counts match")
    }

    /// Copy with every column mean-centered. Only used for real data; the
    /// model itself is zero-mean.
    pub fn centered(&self) -> Self {
        fn center(a: &Array2<f64>) -> Array2<f64> {
            let mean = a.mean_axis(Axis(0)).expect("n >= 2");
            a - &mean
        }
        Self { y: center(&self.y), x: center(&self.x) }
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        if end > self.n() || start >= end {
            return Err(Error::InvalidArgument(format!("bad row range {start}..{end}")));
        }
        Self::new(
            self.y.slice(ndarray::s![start..end, ..]).to_owned(),
            self.x.slice(ndarray::s![start..end, ..]).to_owned(),
        )
    }

    /// Reads a CSV file with one observation per row: the first `p` columns
    /// are `Y`, the rest `X`. A header row is detected (and skipped) when its
    /// first field does not parse as a number.
    pub fn read_csv(path: &Path, p: usize) -> Result<Self> {
        let file = File::open(path)?;
        Self::from_csv_reader(file, p)
    }

    pub fn from_csv_reader<R: Read>(reader: R, p: usize) -> Result<Self> {
        let mut rdr =
            csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut width = None;
        for (idx, record) in rdr.records().enumerate() {
            let record = record?;
            let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
            let values = match parsed {
                Ok(v) => v,
                Err(_) if idx == 0 => continue,
                Err(e) => return Err(Error::Format(format!("row {}: {e}", idx + 1))),
            };
            match width {
                None => width = Some(values.len()),
                Some(w) if w != values.len() => {
                    return Err(Error::Format(format!("row {} has {} fields, expected {w}", idx + 1, values.len())))
                }
                _ => {}
            }
            rows.push(values);
        }
        let width = width.ok_or_else(|| Error::Format("no data rows".into()))?;
        if p == 0 || p >= width {
            return Err(Error::InvalidArgument(format!("p = {p} leaves no X columns in {width}")));
        }
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let z = Array2::from_shape_vec((n, width), flat).expect("rectangular");
        Self::new(z.slice(ndarray::s![.., ..p]).to_owned(), z.slice(ndarray::s![.., p..]).to_owned())
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        write_blocks(path, self.y.view(), self.x.view())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let (y, x) = read_blocks(path)?;
        Self::new(y, x)
    }
}

const MAGIC: &[u8; 4] = b"PGGM";

/// Writes two row-aligned blocks in the `PGGM` container: magic, `u32` n/p/q
/// (little-endian), then the row-major `f64` `n×p` block and `n×q` block.
pub fn write_blocks(path: &Path, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_blocks(&mut w, a, b)?;
    w.flush()?;
    Ok(())
}

pub fn encode_blocks<W: Write>(w: &mut W, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch("blocks must have equal row counts".into()));
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()));
    w.write_all(MAGIC)?;
    for d in [a.nrows(), a.ncols(), b.ncols()] {
        w.write_all(&dim(d)?.to_le_bytes())?;
    }
    for block in [a, b] {
        for row in block.rows() {
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_blocks(path: &Path) -> Result<(Array2<f64>, Array2<f64>)> {
    decode_blocks(&mut BufReader::new(File::open(path)?))
}

pub fn decode_blocks<R: Read>(r: &mut R) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes, expected \"PGGM\"".into()));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf).map_err(|_| Error::Format("truncated header".into()))?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let [n, p, q] = dims;
    let mut read_block = |rows: usize, cols: usize| -> Result<Array2<f64>> {
        let mut bytes = vec![0u8; rows * cols * 8];
        r.read_exact(&mut bytes).map_err(|_| Error::Format("truncated payload".into()))?;
        let vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Array2::from_shape_vec((rows, cols), vals).expect("sized"))
    };
    let a = read_block(n, p)?;
    let b = read_block(n, q)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok((a, b))
}

/// How `Σxx` should be stored by [`CovarianceView::from_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceMode {
    /// Implicit when `n < q`, explicit otherwise.
    #[default]
    Auto,
    ForceExplicit,
    ForceGram,
}

#[derive(Debug, Clone, PartialEq)]
pub enum XxRepr {
    Explicit(SymMatrix),
    /// `Σxx = Fᵀ·F / n` with `F` the `n×q` design.
    Gram(Array2<f64>),
}

/// Empirical covariance blocks `Σyy`, `Σyx`, `Σxx` (no centering).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceView {
    n: usize,
    syy: SymMatrix,
    syx: Array2<f64>,
    xx: XxRepr,
    /// Row-major `Fᵀ` in the Gram form.
    ft: Option<Array2<f64>>,
}

impl CovarianceView {
    fn assemble(n: usize, syy: SymMatrix, syx: Array2<f64>, xx: XxRepr) -> Self {
        let ft = match &xx {
            XxRepr::Gram(f) => Some(f.t().as_standard_layout().into_owned()),
            XxRepr::Explicit(_) => None,
        };
        Self { n, syy, syx, xx, ft }
    }

    pub fn from_dataset(d: &Dataset, mode: CovarianceMode) -> Self {
        let n = d.n();
        let nf = n as f64;
        let syy = SymMatrix(symmetrize(d.y.t().dot(&d.y) / nf));
        let syx = d.y.t().dot(&d.x) / nf;
        let gram = match mode {
            CovarianceMode::Auto => n < d.q(),
            CovarianceMode::ForceExplicit => false,
            CovarianceMode::ForceGram => true,
        };
        let xx = if gram {
            XxRepr::Gram(d.x.clone())
        } else {
            XxRepr::Explicit(SymMatrix(symmetrize(d.x.t().dot(&d.x) / nf)))
        };
        Self::assemble(n, syy, syx, xx)
    }

    /// Assembles a view from explicit blocks. `xx` may be `None` only when
    /// `syx` has zero columns (a marginal model over `Y` alone).
    pub fn from_blocks(n: usize, syy: SymMatrix, syx: Array2<f64>, sxx: Option<SymMatrix>) -> Result<Self> {
        let p = syy.dim();
        if syx.nrows() != p {
            return Err(Error::DimensionMismatch(format!("Σyx has {} rows, expected {p}", syx.nrows())));
        }
        let q = syx.ncols();
        let xx = match sxx {
            Some(s) if s.dim() == q => XxRepr::Explicit(s),
            Some(s) => return Err(Error::DimensionMismatch(format!("Σxx is {0}x{0}, expected {q}", s.dim()))),
            None if q == 0 => XxRepr::Gram(Array2::zeros((n, 0))),
            None => return Err(Error::InvalidArgument("Σxx required when q > 0".into())),
        };
        Ok(Self::assemble(n, syy, syx, xx))
    }

    /// Blocks of a full `(p+q)×(p+q)` covariance split after row `p`.
    pub fn from_joint(n: usize, sigma: &SymMatrix, p: usize) -> Result<Self> {
        let d = sigma.dim();
        if p == 0 || p > d {
            return Err(Error::InvalidArgument(format!("cannot split dim {d} at p = {p}")));
        }
        let a = sigma.view();
        let syy = SymMatrix(a.slice(ndarray::s![..p, ..p]).to_owned());
        let syx = a.slice(ndarray::s![..p, p..]).to_owned();
        let sxx = (p < d).then(|| SymMatrix(a.slice(ndarray::s![p.., p..]).to_owned()));
        Self::from_blocks(n, syy, syx, sxx)
    }

    /// The `Y`-only view (q = 0), used by the marginal baseline.
    pub fn marginal(&self) -> Self {
        Self {
            n: self.n,
            syy: self.syy.clone(),
            syx: Array2::zeros((self.p(), 0)),
            xx: XxRepr::Gram(Array2::zeros((self.n.max(1), 0))),
            ft: None,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.syy.dim()
    }

    pub fn q(&self) -> usize {
        self.syx.ncols()
    }

    pub fn syy(&self) -> &SymMatrix {
        &self.syy
    }

    pub fn syx(&self) -> &Array2<f64> {
        &self.syx
    }

    pub fn xx_repr(&self) -> &XxRepr {
        &self.xx
    }

    pub fn is_gram(&self) -> bool {
        matches!(self.xx, XxRepr::Gram(_))
    }

    /// `Σxx` as a dense matrix (`None` when q = 0).
    pub fn materialize_xx(&self) -> Option<SymMatrix> {
        match &self.xx {
            XxRepr::Explicit(s) => Some(s.clone()),
            XxRepr::Gram(f) if f.ncols() == 0 => None,
            XxRepr::Gram(f) => Some(SymMatrix(symmetrize(f.t().dot(f) / self.n as f64))),
        }
    }

    /// Same blocks with `Σxx` stored explicitly.
    pub fn to_explicit(&self) -> Self {
        match self.materialize_xx() {
            Some(s) => Self { xx: XxRepr::Explicit(s), ft: None, ..self.clone() },
            None => self.clone(),
        }
    }

    /// The full `(p+q)×(p+q)` empirical covariance (requires materializing `Σxx`).
    pub fn joint(&self) -> SymMatrix {
        let (p, q) = (self.p(), self.q());
        let mut s = Array2::<f64>::zeros((p + q, p + q));
        s.slice_mut(ndarray::s![..p, ..p]).assign(self.syy.as_array());
        s.slice_mut(ndarray::s![..p, p..]).assign(&self.syx);
        s.slice_mut(ndarray::s![p.., ..p]).assign(&self.syx.t());
        if let Some(sxx) = self.materialize_xx() {
            s.slice_mut(ndarray::s![p.., p..]).assign(sxx.as_array());
        }
        SymMatrix(symmetrize(s))
    }

    /// `M·Σxx` for a `k×q` matrix `M`.
    pub fn xx_right_multiply(&self, m: ArrayView2<'_, f64>) -> Array2<f64> {
        self.xx_product(None, m)
    }

    /// `L·M·Σxx`, ordered so that the Gram form costs `O(k·q·n)`.
    pub fn xx_sandwich(&self, left: ArrayView2<'_, f64>, m: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(left.ncols(), m.nrows(), "L must have {} columns", m.nrows());
        self.xx_product(Some(left), m)
    }

    fn xx_product(&self, left: Option<ArrayView2<'_, f64>>, m: ArrayView2<'_, f64>) -> Array2<f64> {
        let q = self.q();
        assert_eq!(m.ncols(), q, "M must have q = {q} columns");
        let rows = left.map_or(m.nrows(), |l| l.nrows());
        let nnz = m.iter().filter(|&&v| v != 0.0).count();
        if nnz == 0 {
            return Array2::zeros((rows, q));
        }
        // Penalized iterates are sparse; below this density a row-axpy
        // product beats the blocked dense kernel.
        let sparse = nnz * SPARSE_DENSITY_RECIPROCAL < m.len();
        let apply_left = |a: Array2<f64>| match left {
            Some(l) => l.dot(&a),
            None => a,
        };
        match &self.xx {
            XxRepr::Explicit(s) => {
                let ms = if sparse && s.as_array().is_standard_layout() {
                    sparse_times(m, s.view())
                } else {
                    m.dot(s.as_array())
                };
                apply_left(ms)
            }
            XxRepr::Gram(f) => {
                let t = match (&self.ft, sparse) {
                    (Some(ft), true) => sparse_times(m, ft.view()),
                    _ => m.dot(&f.t()),
                };
                apply_left(t).dot(f) / self.n as f64
            }
        }
    }

    /// `⟨M, L·M·Σxx⟩` for symmetric `L`. The Gram form never forms the `p×q`
    /// sandwich and costs `O(k·n + p²n)`, `k` the nonzeros of a sparse `M`.
    pub fn xx_weighted_trace(&self, left: ArrayView2<'_, f64>, m: ArrayView2<'_, f64>) -> f64 {
        self.xx_weighted_parts(left, m).0
    }

    /// The weighted trace together with the intermediate product from which
    /// [`Self::xx_sandwich_from`] completes `L·M·Σxx`.
    pub(crate) fn xx_weighted_parts(&self, left: ArrayView2<'_, f64>, m: ArrayView2<'_, f64>) -> (f64, XxPartial) {
        let q = self.q();
        assert_eq!(m.ncols(), q, "M must have q = {q} columns");
        assert_eq!(left.dim(), (m.nrows(), m.nrows()), "L must be square with M's row count");
        let nnz = m.iter().filter(|&&v| v != 0.0).count();
        if nnz == 0 {
            return (0.0, XxPartial::Done(Array2::zeros((m.nrows(), q))));
        }
        let sparse = nnz * SPARSE_DENSITY_RECIPROCAL < m.len();
        match &self.xx {
            XxRepr::Explicit(s) => {
                let ms = if sparse && s.as_array().is_standard_layout() {
                    sparse_times(m, s.view())
                } else {
                    m.dot(s.as_array())
                };
                let full = left.dot(&ms);
                (frobenius_dot(m, full.view()), XxPartial::Done(full))
            }
            XxRepr::Gram(f) => {
                let w = match (&self.ft, sparse) {
                    (Some(ft), true) => sparse_times(m, ft.view()),
                    _ => m.dot(&f.t()),
                };
                let lw = left.dot(&w);
                (frobenius_dot(lw.view(), w.view()) / self.n as f64, XxPartial::LeftDone(lw))
            }
        }
    }

    /// `L·M·Σxx` from the intermediate of [`Self::xx_weighted_parts`].
    pub(crate) fn xx_sandwich_from(&self, partial: &XxPartial) -> Array2<f64> {
        match (partial, &self.xx) {
            (XxPartial::Done(full), _) => full.clone(),
            (XxPartial::LeftDone(lw), XxRepr::Gram(f)) => lw.dot(f) / self.n as f64,
            (XxPartial::LeftDone(_), XxRepr::Explicit(_)) => unreachable!("Gram intermediate on an explicit view"),
        }
    }

    /// `tr(Σxx·Aᵀ·B)` = `⟨A, B·Σxx⟩`.
    pub fn xx_quadratic_trace(&self, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
        assert_eq!(a.dim(), b.dim(), "A and B must have equal shapes");
        let bs = self.xx_right_multiply(b);
        frobenius_dot(a, bs.view())
    }
}

const SPARSE_DENSITY_RECIPROCAL: usize = 5;

/// Intermediate product of a weighted trace: `L·M·Fᵀ` (`LeftDone`) or the
/// finished `L·M·Σxx`.
#[derive(Debug, Clone)]
pub(crate) enum XxPartial {
    LeftDone(Array2<f64>),
    Done(Array2<f64>),
}

/// `M·B` accumulated over the nonzeros of `M`, one row of `B` at a time.
/// `B` must be in standard layout.
fn sparse_times(m: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let c = b.ncols();
    let bs = b.as_slice().expect("standard layout");
    let mut out = Array2::zeros((m.nrows(), c));
    let os = out.as_slice_mut().expect("fresh array");
    for (orow, mrow) in os.chunks_exact_mut(c).zip(m.rows()) {
        for (j, &v) in mrow.iter().enumerate() {
            if v != 0.0 {
                for (o, &x) in orow.iter_mut().zip(&bs[j * c..(j + 1) * c]) {
                    *o += v * x;
                }
            }
        }
    }
    out
}

/// Free-function form of [`CovarianceView::from_dataset`].
pub fn empirical_covariance(d: &Dataset, mode: CovarianceMode) -> CovarianceView {
    CovarianceView::from_dataset(d, mode)
}
