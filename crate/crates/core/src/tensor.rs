//! Dense row-major tensors and the small op set the attention blocks need.
//!
//! Every op validates shapes up front and refuses to hand back non-finite
//! values. Accumulation order is fixed (left to right over the contracted
//! index), so identical inputs give bit-identical outputs.

use std::fmt;
use std::sync::atomic::{AtomicU8, Ordering};

use crate::error::{Error, Result};

/// Scalar width used by every op in this module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    /// Results are rounded to the nearest `f32` after each op.
    F32,
}

static PRECISION: AtomicU8 = AtomicU8::new(0);

impl Precision {
    pub const ENV_VAR: &'static str = "DNLLAB_PRECISION";

    /// Reads `DNLLAB_PRECISION`; unset means `F64`.
    pub fn from_env() -> Result<Self> {
        match std::env::var(Self::ENV_VAR) {
            Ok(v) => v.parse(),
            Err(_) => Ok(Precision::F64),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Invalid(format!(
                "precision must be f64 or f32, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}

pub fn set_precision(p: Precision) {
    PRECISION.store(p as u8, Ordering::SeqCst);
}

pub fn precision() -> Precision {
    match PRECISION.load(Ordering::SeqCst) {
        0 => Precision::F64,
        _ => Precision::F32,
    }
}

/// Instrumented multiply-add counter.
///
/// One multiply-add in a contraction (matmul, 1×1 embedding, 3×3 conv) counts
/// as one unit, and so does each output element of an element-wise `add`.
/// Normalisation bookkeeping (means, centring, softmax, broadcasts) is not
/// counted. The counter is thread-local and only active inside [`flops::count`].
pub mod flops {
    use std::cell::Cell;

    thread_local! {
        static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
    }

    pub(crate) fn record(n: u64) {
        COUNTER.with(|c| {
            if let Some(v) = c.get() {
                c.set(Some(v + n));
            }
        });
    }

    /// Runs `f` with counting enabled and returns its result with the count.
    pub fn count<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let saved = COUNTER.with(|c| c.replace(Some(0)));
        let out = f();
        let n = COUNTER.with(|c| c.replace(saved)).unwrap_or(0);
        if let Some(outer) = saved {
            COUNTER.with(|c| c.set(Some(outer + n)));
        }
        (out, n)
    }

    /// Runs `f` with counting suspended.
    pub fn paused<R>(f: impl FnOnce() -> R) -> R {
        let saved = COUNTER.with(|c| c.replace(None));
        let out = f();
        COUNTER.with(|c| c.set(saved));
        out
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, checking `product(shape) == data.len()` and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::finish("construct", shape, data)
    }

    fn finish(op: &'static str, shape: Vec<usize>, mut data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Invalid(format!(
                "{op}: dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(op, &shape, &[data.len()]));
        }
        if !data
            .chunks(64)
            .all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()))
        {
            return Err(Error::Numeric { op });
        }
        if precision() == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Row-major matrix from nested rows. Panics on ragged input; meant for tests
    /// and literals.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(
            rows.iter().all(|row| row.len() == c),
            "ragged matrix literal"
        );
        let data = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as a matrix. Rank-1 tensors are row vectors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[n] => Ok((1, n)),
            &[r, c] => Ok((r, c)),
            other => Err(Error::Invalid(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let c = *self.shape.last().unwrap();
        self.data[i * c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Sets one entry, bypassing the finiteness check. Used by perturbation
    /// oracles that need to probe arbitrary points.
    pub fn set_flat(&mut self, idx: usize, v: f64) {
        self.data[idx] = v;
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        const TILE: usize = 32;
        let mut out = vec![0.0; r * c];
        for i0 in (0..r).step_by(TILE) {
            for j0 in (0..c).step_by(TILE) {
                for i in i0..(i0 + TILE).min(r) {
                    for j in j0..(j0 + TILE).min(c) {
                        out[j * r + i] = self.data[i * c + j];
                    }
                }
            }
        }
        // entries are already finite and rounded
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }
}

/// A `[C, H, W]` feature map; pixel index set is the `H·W` row-major positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape.len() != 3 {
            return Err(Error::Invalid(format!(
                "feature map must be [C, H, W], got {:?}",
                tensor.shape
            )));
        }
        Ok(FeatureMap { tensor })
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(vec![c, h, w], data)?)
    }

    /// Inverse of [`FeatureMap::to_matrix`].
    pub fn from_matrix(m: &Tensor, h: usize, w: usize) -> Result<Self> {
        let (c, hw) = m.dims2()?;
        if hw != h * w {
            return Err(Error::shape("from_matrix", m.shape(), &[c, h, w]));
        }
        Self::new(m.reshape(&[c, h, w])?)
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// `[C, H·W]` view of the same data; column `i` is pixel `i`'s feature.
    pub fn to_matrix(&self) -> Tensor {
        Tensor {
            shape: vec![self.channels(), self.pixels()],
            data: self.tensor.data.clone(),
        }
    }

    pub fn pixel(&self, i: usize) -> Vec<f64> {
        let hw = self.pixels();
        (0..self.channels())
            .map(|c| self.tensor.data[c * hw + i])
            .collect()
    }
}

/// Product of `op(a)` and `op(b)`, where `op` optionally transposes.
///
/// Each output entry accumulates over the contracted index in increasing order
/// starting from zero, whatever the transpose flags.
pub fn matmul_t(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        let sa = if ta { vec![ac, ar] } else { vec![ar, ac] };
        let sb = if tb { vec![bc, br] } else { vec![br, bc] };
        return Err(Error::shape("matmul", &sa, &sb));
    }
    flops::record((m * n * k) as u64);
    let mut out = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) | (true, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = if ta {
                        a.data[p * m + i]
                    } else {
                        a.data[i * k + p]
                    };
                    let brow = &b.data[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += s * bv;
                    }
                }
            }
        }
        (false, true) => {
            // four output rows at a time; each entry still sums left to right
            let mut i0 = 0;
            while i0 < m {
                let rows = (m - i0).min(4);
                for j in 0..n {
                    let brow = &b.data[j * k..(j + 1) * k];
                    if rows == 4 {
                        let a0 = &a.data[i0 * k..(i0 + 1) * k];
                        let a1 = &a.data[(i0 + 1) * k..(i0 + 2) * k];
                        let a2 = &a.data[(i0 + 2) * k..(i0 + 3) * k];
                        let a3 = &a.data[(i0 + 3) * k..(i0 + 4) * k];
                        let mut acc = [0.0; 4];
                        for p in 0..k {
                            let bv = brow[p];
                            acc[0] += a0[p] * bv;
                            acc[1] += a1[p] * bv;
                            acc[2] += a2[p] * bv;
                            acc[3] += a3[p] * bv;
                        }
                        for (t, v) in acc.into_iter().enumerate() {
                            out[(i0 + t) * n + j] = v;
                        }
                    } else {
                        for i in i0..i0 + rows {
                            let arow = &a.data[i * k..(i + 1) * k];
                            let mut acc = 0.0;
                            for (x, y) in arow.iter().zip(brow) {
                                acc += x * y;
                            }
                            out[i * n + j] = acc;
                        }
                    }
                }
                i0 += rows;
            }
        }
        (true, true) => {
            // already counted above
            let at = a.transpose()?;
            return flops::paused(|| matmul_t(&at, false, b, true));
        }
    }
    Tensor::finish("matmul", vec![m, n], out)
}

/// Textbook matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, false, b, false)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (r, c) = logits.dims2()?;
    if logits.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric { op: "softmax_rows" });
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &logits.data[i * c..(i + 1) * c];
        let orow = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &z) in orow.iter_mut().zip(row) {
            *o = (z - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::finish("softmax_rows", logits.shape.clone(), out)
}

/// Per-pixel linear map `w · x_i`, i.e. a bias-free 1×1 convolution.
pub fn embed_1x1(x: &FeatureMap, w: &Tensor) -> Result<FeatureMap> {
    let (_, wc) = w.dims2()?;
    if wc != x.channels() {
        return Err(Error::shape("embed_1x1", w.shape(), x.tensor.shape()));
    }
    let y = matmul(w, &x.to_matrix())?;
    FeatureMap::from_matrix(&y, x.height(), x.width())
}

fn conv_shapes(x: &Tensor, kernel: &Tensor, h: usize, w: usize) -> Result<(usize, usize)> {
    let (cin, hw) = x.dims2()?;
    if hw != h * w {
        return Err(Error::shape("conv3x3", x.shape(), &[cin, h, w]));
    }
    match kernel.shape() {
        &[co, kc, 3, 3] if kc == cin => Ok((cin, co)),
        other => Err(Error::shape("conv3x3", other, &[cin, h, w])),
    }
}

/// 3×3 cross-correlation, stride 1, zero padding 1, on an `[C, H·W]` matrix.
pub fn conv3x3_mat(x: &Tensor, kernel: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (cin, co) = conv_shapes(x, kernel, h, w)?;
    let hw = h * w;
    let mut out = vec![0.0; co * hw];
    let mut macs = 0u64;
    for o in 0..co {
        let orow = &mut out[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let xc = &x.data[c * hw..(c + 1) * hw];
            for dy in 0..3 {
                for dx in 0..3 {
                    let wv = kernel.data[((o * cin + c) * 3 + dy) * 3 + dx];
                    let (y0, y1) = valid_range(h, dy);
                    let (x0, x1) = valid_range(w, dx);
                    for yy in y0..y1 {
                        let sy = yy + dy - 1;
                        for xx in x0..x1 {
                            orow[yy * w + xx] += wv * xc[sy * w + xx + dx - 1];
                        }
                    }
                    macs += ((y1 - y0) * (x1 - x0)) as u64;
                }
            }
        }
    }
    flops::record(macs);
    Tensor::finish("conv3x3", vec![co, hw], out)
}

/// Output rows (or columns) whose tap at offset `d` (0..3) lands inside `[0, n)`.
fn valid_range(n: usize, d: usize) -> (usize, usize) {
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 { n.saturating_sub(1) } else { n };
    (lo.min(hi), hi)
}

pub fn conv3x3(x: &FeatureMap, kernel: &Tensor) -> Result<FeatureMap> {
    let y = conv3x3_mat(&x.to_matrix(), kernel, x.height(), x.width())?;
    FeatureMap::from_matrix(&y, x.height(), x.width())
}

/// Gradient of [`conv3x3_mat`] with respect to its input.
pub(crate) fn conv3x3_grad_input(
    g: &Tensor,
    kernel: &Tensor,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let co = kernel.shape[0];
    let cin = kernel.shape[1];
    let hw = h * w;
    let mut dx = vec![0.0; cin * hw];
    for o in 0..co {
        let grow = &g.data[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let dxc = &mut dx[c * hw..(c + 1) * hw];
            for dy in 0..3 {
                for ddx in 0..3 {
                    let wv = kernel.data[((o * cin + c) * 3 + dy) * 3 + ddx];
                    let (y0, y1) = valid_range(h, dy);
                    let (x0, x1) = valid_range(w, ddx);
                    for yy in y0..y1 {
                        let sy = yy + dy - 1;
                        for xx in x0..x1 {
                            dxc[sy * w + xx + ddx - 1] += wv * grow[yy * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::finish("conv3x3_grad_input", vec![cin, hw], dx)
}

/// Gradient of [`conv3x3_mat`] with respect to its kernel.
pub(crate) fn conv3x3_grad_kernel(
    g: &Tensor,
    x: &Tensor,
    kernel_shape: &[usize],
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let co = kernel_shape[0];
    let cin = kernel_shape[1];
    let hw = h * w;
    let mut dk = vec![0.0; co * cin * 9];
    for o in 0..co {
        let grow = &g.data[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let xc = &x.data[c * hw..(c + 1) * hw];
            for dy in 0..3 {
                for ddx in 0..3 {
                    let (y0, y1) = valid_range(h, dy);
                    let (x0, x1) = valid_range(w, ddx);
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        let sy = yy + dy - 1;
                        for xx in x0..x1 {
                            acc += grow[yy * w + xx] * xc[sy * w + xx + ddx - 1];
                        }
                    }
                    dk[((o * cin + c) * 3 + dy) * 3 + ddx] = acc;
                }
            }
        }
    }
    Tensor::finish("conv3x3_grad_kernel", kernel_shape.to_vec(), dk)
}

/// Per-channel mean over all pixels.
pub fn spatial_mean(x: &FeatureMap) -> Result<Tensor> {
    let m = row_means(&x.to_matrix())?;
    m.reshape(&[x.channels()])
}

/// Mean of each row of a matrix, as a `[r, 1]` column.
pub fn row_means(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let out = (0..r)
        .map(|i| {
            let s: f64 = a.data[i * c..(i + 1) * c].iter().sum();
            s / c as f64
        })
        .collect();
    Tensor::finish("row_means", vec![r, 1], out)
}

fn zip_same(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(op, &a.shape, &b.shape));
    }
    let out = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::finish(op, a.shape.clone(), out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let t = zip_same("add", a, b, |x, y| x + y)?;
    flops::record(t.len() as u64);
    Ok(t)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    Tensor::finish(
        "scale",
        a.shape.clone(),
        a.data.iter().map(|v| v * s).collect(),
    )
}

/// `m[i, j] + sign · v[i]` for a `[r, 1]` column `v`.
pub fn add_col(m: &Tensor, v: &Tensor, sign: f64) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    if v.len() != r {
        return Err(Error::shape("add_col", &m.shape, &v.shape));
    }
    let mut out = m.data.clone();
    for i in 0..r {
        let s = sign * v.data[i];
        for o in &mut out[i * c..(i + 1) * c] {
            *o += s;
        }
    }
    Tensor::finish("add_col", m.shape.clone(), out)
}

/// `m[i, j] + v[j]` for a `[1, c]` row `v`; counted like [`add`] on the
/// full output.
pub fn add_row(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, c) = m.dims2()?;
    if v.shape != [1, c] {
        return Err(Error::shape("add_row", &m.shape, &v.shape));
    }
    let mut out = m.data.clone();
    for row in out.chunks_mut(c) {
        for (o, x) in row.iter_mut().zip(&v.data) {
            *o += x;
        }
    }
    flops::record(out.len() as u64);
    Tensor::finish("add_row", m.shape.clone(), out)
}

/// Stacks `n` copies of a row vector into an `[n, c]` matrix.
pub fn broadcast_rows(v: &Tensor, n: usize) -> Result<Tensor> {
    let (r, c) = v.dims2()?;
    if r != 1 {
        return Err(Error::shape("broadcast_rows", &v.shape, &[1, c]));
    }
    let mut out = Vec::with_capacity(n * c);
    for _ in 0..n {
        out.extend_from_slice(&v.data);
    }
    Tensor::finish("broadcast_rows", vec![n, c], out)
}

/// Column sums of a matrix as a `[1, c]` row.
pub fn col_sums(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(&a.data[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    Tensor::finish("col_sums", vec![1, c], out)
}

/// Row sums of a matrix as a `[r, 1]` column.
pub fn row_sums(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let out = (0..r)
        .map(|i| a.data[i * c..(i + 1) * c].iter().sum())
        .collect();
    Tensor::finish("row_sums", vec![r, 1], out)
}

pub fn relu(a: &Tensor) -> Result<Tensor> {
    Tensor::finish(
        "relu",
        a.shape.clone(),
        a.data.iter().map(|&v| v.max(0.0)).collect(),
    )
}

/// Mean over pixels of `−log softmax(column)[label]` for `[K, P]` logits,
/// together with the column-softmax probabilities.
pub(crate) fn cross_entropy_columns(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (k, p) = logits.dims2()?;
    if labels.len() != p {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[labels.len()],
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let d = &logits.data;
    let mut probs = vec![0.0; k * p];
    let mut total = 0.0;
    for px in 0..p {
        let max = (0..k)
            .map(|c| d[c * p + px])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (d[c * p + px] - max).exp();
            probs[c * p + px] = e;
            sum += e;
        }
        for c in 0..k {
            probs[c * p + px] /= sum;
        }
        total += sum.ln() - (d[labels[px] * p + px] - max);
    }
    let probs = Tensor::finish("cross_entropy", vec![k, p], probs)?;
    let loss = total / p as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            op: "cross_entropy",
        });
    }
    Ok((loss, probs))
}
