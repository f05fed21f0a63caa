use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Rank 1 and rank 2 cover everything this crate needs; the shape is kept as
/// a `Vec` so error messages stay honest and broadcasting rules stay uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// Scalar as a one-element rank-1 tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::contract("from_rows: no rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Contract(format!(
                    "from_rows: row {} has {} columns, expected {}",
                    i,
                    row.len(),
                    cols
                )));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// One-hot encode labels into a `[n, classes]` matrix.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
        if classes == 0 {
            return Err(Error::contract("one_hot: zero classes"));
        }
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Contract(format!(
                    "one_hot: label {} out of range for {} classes",
                    y, classes
                )));
            }
            data[i * classes + y] = 1.0;
        }
        Tensor::new(vec![labels.len(), classes], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item: tensor has shape {:?}, not a scalar",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [r, _] => Ok(*r),
            _ => Err(Error::Contract(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn cols(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [_, c] => Ok(*c),
            _ => Err(Error::Contract(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> Result<&[f64]> {
        let (r, c) = (self.rows()?, self.cols()?);
        if i >= r {
            return Err(Error::Contract(format!("row {} out of range {}", i, r)));
        }
        Ok(&self.data[i * c..(i + 1) * c])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (r, c) = (self.rows()?, self.cols()?);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Stack two rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, ca) = (self.rows()?, self.cols()?);
        let (rb, cb) = (other.rows()?, other.cols()?);
        if ca != cb {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::new(vec![ra + rb, ca], data)
    }

    /// Concatenate two rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, ca) = (self.rows()?, self.cols()?);
        let (rb, cb) = (other.rows()?, other.cols()?);
        if ra != rb {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&self.data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&other.data[i * cb..(i + 1) * cb]);
        }
        Tensor::new(vec![ra, ca + cb], data)
    }

    /// Select rows of a rank-2 tensor by index (repeats allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = (self.rows()?, self.cols()?);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Contract(format!(
                    "gather_rows: index {} out of range {}",
                    i, r
                )));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![indices.len(), c], data)
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = (a.rows()?, a.cols()?);
    let (kb, n) = (b.rows()?, b.cols()?);
    if ka != kb {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.to_vec(),
            rhs: b.shape.to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for k in 0..ka {
            let aik = ad[i * ka + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Shape that `a` and `b` broadcast to under right-aligned (numpy) rules,
/// or an error naming `op` if they are incompatible.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Shape {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Row-major strides for `shape`, with stride 0 on broadcast (size-1) axes
/// once the shape is right-aligned inside `out_rank` axes.
fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; out_rank];
    let mut acc = 1usize;
    for (i, &dim) in shape.iter().enumerate().rev() {
        let pos = out_rank - (shape.len() - i);
        strides[pos] = if dim == 1 { 0 } else { acc };
        acc *= dim;
    }
    strides
}

/// Elementwise combine with broadcasting.
pub fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let numel: usize = shape.iter().product();
    let sa = broadcast_strides(a.shape(), shape.len());
    let sb = broadcast_strides(b.shape(), shape.len());
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        let (mut oa, mut ob) = (0usize, 0usize);
        for (d, &i) in idx.iter().enumerate() {
            oa += i * sa[d];
            ob += i * sb[d];
        }
        data.push(f(a.data[oa], b.data[ob]));
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(shape, data)
}

/// Sum `grad` down to `shape`, undoing the broadcast that produced it.
/// This is the adjoint of broadcasting and is what backward passes need.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    let out_rank = grad.shape().len();
    if shape.len() > out_rank {
        return Err(Error::Shape {
            op: "reduce_to_shape",
            lhs: grad.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let strides = broadcast_strides(shape, out_rank);
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0; numel];
    let mut idx = vec![0usize; out_rank];
    for g in grad.data() {
        let mut off = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            off += i * strides[d];
        }
        data[off] += g;
        for d in (0..out_rank).rev() {
            idx[d] += 1;
            if idx[d] < grad.shape()[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Row-wise softmax. Rank-1 input is treated as a single row.
/// Uses the max-shift form, so it is safe for large logits.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (rows, cols) = match t.shape() {
        [n] => (1usize, *n),
        [r, c] => (*r, *c),
        other => {
            return Err(Error::Contract(format!(
                "softmax: expected rank 1 or 2, got shape {:?}",
                other
            )))
        }
    };
    if cols == 0 {
        return Err(Error::contract("softmax: empty rows"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let row = &t.data()[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::new(t.shape().to_vec(), data)
}

/// Sum a rank-2 tensor along `axis` (0 -> per-column, 1 -> per-row),
/// producing a rank-1 result.
pub fn sum_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (r, c) = (t.rows()?, t.cols()?);
    match axis {
        0 => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += t.data[i * c + j];
                }
            }
            Ok(Tensor::from_vec(out))
        }
        1 => {
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = t.data[i * c..(i + 1) * c].iter().sum();
            }
            Ok(Tensor::from_vec(out))
        }
        _ => Err(Error::Contract(format!(
            "sum_axis: axis {} out of range for rank 2",
            axis
        ))),
    }
}
