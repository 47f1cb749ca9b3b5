//! Binary spike tensors and the multiplication-free kernels that consume them.
//!
//! Storage packs the innermost axis into 64-bit words, one padded run of
//! words per row. Tail bits are always zero, so AND + popcount over whole
//! words never picks up phantom ones.

use crate::error::{Error, Result};

use super::dense::{numel, DenseTensor};

const WORD: usize = 64;

fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTensor {
    shape: Vec<usize>,
    row_words: usize,
    bits: Vec<u64>,
}

impl SpikeTensor {
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let (rows, cols) = row_split(&shape);
        let row_words = words_for(cols);
        Self { shape, row_words, bits: vec![0; rows * row_words] }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        let mut t = Self::zeros(shape);
        for i in 0..t.numel() {
            t.set_flat(i, true);
        }
        t
    }

    /// Packs a slice of 0/1 values. Any other value is a contract violation.
    pub fn from_values(shape: impl Into<Vec<usize>>, values: &[f32]) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != values.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        let mut t = Self::zeros(shape);
        for (i, &v) in values.iter().enumerate() {
            if v == 1.0 {
                t.set_flat(i, true);
            } else if v != 0.0 {
                return Err(Error::Contract(format!(
                    "spike tensor element {i} is {v}, expected 0 or 1"
                )));
            }
        }
        Ok(t)
    }

    pub fn from_dense(t: &DenseTensor) -> Result<Self> {
        Self::from_values(t.shape().to_vec(), t.data())
    }

    pub fn from_bools(shape: impl Into<Vec<usize>>, values: &[bool]) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != values.len() {
            return Err(Error::dim(format!("shape {:?} does not fit {} values", shape, values.len())));
        }
        let mut t = Self::zeros(shape);
        for (i, &v) in values.iter().enumerate() {
            if v {
                t.set_flat(i, true);
            }
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    fn locate(&self, flat: usize) -> (usize, u64) {
        let cols = self.cols().max(1);
        let (row, col) = (flat / cols, flat % cols);
        (row * self.row_words + col / WORD, 1u64 << (col % WORD))
    }

    pub fn get_flat(&self, flat: usize) -> bool {
        let (w, mask) = self.locate(flat);
        self.bits[w] & mask != 0
    }

    pub fn set_flat(&mut self, flat: usize, value: bool) {
        let (w, mask) = self.locate(flat);
        if value {
            self.bits[w] |= mask;
        } else {
            self.bits[w] &= !mask;
        }
    }

    /// Element at a 2-D position of a rank-2 tensor.
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.get_flat(row * self.cols() + col)
    }

    pub fn row_words(&self, row: usize) -> &[u64] {
        &self.bits[row * self.row_words..(row + 1) * self.row_words]
    }

    pub fn to_values(&self) -> Vec<f32> {
        (0..self.numel()).map(|i| if self.get_flat(i) { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_dense(&self) -> DenseTensor {
        DenseTensor::new(self.shape.clone(), self.to_values()).expect("shape matches by construction")
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn firing_rate(&self) -> f64 {
        let n = self.numel();
        if n == 0 {
            0.0
        } else {
            self.count_ones() as f64 / n as f64
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::dim(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        let values = self.to_values();
        Self::from_values(shape, &values)
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let (m, n) = self.matrix_dims()?;
        let mut out = Self::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                if self.get(i, j) {
                    out.set_flat(j * m + i, true);
                }
            }
        }
        Ok(out)
    }

    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::dim(format!("expected a 2-D spike tensor, got shape {s:?}"))),
        }
    }

    /// Elementwise `(NOT self) AND other`.
    pub fn and_not(&self, other: &SpikeTensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| !a & b).collect();
        Ok(Self { shape: self.shape.clone(), row_words: self.row_words, bits })
    }
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&cols, lead)) => (numel(lead), cols),
        None => (1, 1),
    }
}

/// Integer accumulator produced by spike contractions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccumTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
}

impl AccumTensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<i32>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!("shape {:?} does not fit {} values", shape, data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.data[row * self.shape[1] + col]
    }

    pub fn to_dense(&self) -> DenseTensor {
        DenseTensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f32).collect())
            .expect("shape matches by construction")
    }

    fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::dim(format!("expected a 2-D accumulator, got shape {s:?}"))),
        }
    }
}

/// `out[i][j] = popcount(a[i,:] AND b[:,j])`. No float multiply is executed.
pub fn matmul_spike(a: &SpikeTensor, b: &SpikeTensor) -> Result<AccumTensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_spike inner extents differ: {k} vs {k2}")));
    }
    let bt = b.transpose2d()?;
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        let row = a.row_words(i);
        for j in 0..n {
            let col = bt.row_words(j);
            out[i * n + j] = row.iter().zip(col).map(|(x, y)| (x & y).count_ones() as i32).sum();
        }
    }
    AccumTensor::new(vec![m, n], out)
}

/// `out[i][j] = sum_k a[i][k] * b[k][j]` with `b` binary, i.e. addition of
/// `a[i][k]` wherever `b[k][j]` fires.
pub fn matmul_accum_spike(a: &AccumTensor, b: &SpikeTensor) -> Result<AccumTensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_accum_spike inner extents differ: {k} vs {k2}")));
    }
    let mut out = vec![0i32; m * n];
    for kk in 0..k {
        for (w, &word) in b.row_words(kk).iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let j = w * WORD + bits.trailing_zeros() as usize;
                bits &= bits - 1;
                for i in 0..m {
                    out[i * n + j] += a.data[i * k + kk];
                }
            }
        }
    }
    AccumTensor::new(vec![m, n], out)
}

/// `out[i][:] = sum over fired a[i][k] of b[k][:]`.
pub fn matmul_spike_accum(a: &SpikeTensor, b: &AccumTensor) -> Result<AccumTensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_spike_accum inner extents differ: {k} vs {k2}")));
    }
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for (w, &word) in a.row_words(i).iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let kk = w * WORD + bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let src = &b.data[kk * n..(kk + 1) * n];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
    }
    AccumTensor::new(vec![m, n], out)
}

/// Accumulations triggered by the spike operand of `a · X` where `X` has
/// `n_cols` columns: every fired element of `a` adds one row of `X`.
pub fn event_accumulations(a: &SpikeTensor, n_cols: usize) -> u64 {
    a.count_ones() * n_cols as u64
}

/// Nearest-neighbour upsampling of a rank-2 (or rank-3 `[B, h, w]`) mask.
pub fn upsample_nearest(m: &SpikeTensor, factor: usize) -> Result<SpikeTensor> {
    if !matches!(factor, 1 | 2 | 4 | 8 | 16) {
        return Err(Error::dim(format!("upsample factor {factor} not in {{1,2,4,8,16}}")));
    }
    let (lead, h, w) = match m.shape() {
        [h, w] => (Vec::new(), *h, *w),
        [b, h, w] => (vec![*b], *h, *w),
        s => return Err(Error::dim(format!("upsample expects [h,w] or [b,h,w], got {s:?}"))),
    };
    let batches = numel(&lead);
    let (oh, ow) = (h * factor, w * factor);
    let mut shape = lead;
    shape.extend([oh, ow]);
    let mut out = SpikeTensor::zeros(shape);
    for b in 0..batches {
        for y in 0..oh {
            for x in 0..ow {
                if m.get_flat(b * h * w + (y / factor) * w + x / factor) {
                    out.set_flat(b * oh * ow + y * ow + x, true);
                }
            }
        }
    }
    Ok(out)
}

/// Block-any downsampling, the left inverse of [`upsample_nearest`].
pub fn downsample_any(m: &SpikeTensor, factor: usize) -> Result<SpikeTensor> {
    let (h, w) = m.matrix_dims()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::dim(format!("{h}x{w} not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = SpikeTensor::zeros(vec![oh, ow]);
    for y in 0..h {
        for x in 0..w {
            if m.get(y, x) {
                out.set_flat((y / factor) * ow + x / factor, true);
            }
        }
    }
    Ok(out)
}
