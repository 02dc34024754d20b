//! Dense row-major `f64` tensors and their on-disk encodings.
//!
//! Two encodings are supported:
//!
//! * `.ten` binary, little-endian: `u32 ndim`, `u32[ndim] shape`, `f64[n]` data.
//! * CSV: a `# shape: d0,d1,...` header line, then the data in row-major
//!   order with the last dimension laid out along each line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!("shape {shape:?} needs {} elements, got {}", numel(&shape), data.len())));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::new(shape, vec![0.0; n]).expect("zeros shape")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::new(shape, vec![value; n]).expect("full shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, scale: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        Tensor::new(shape, data).expect("randn shape")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape, data).expect("uniform shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn to_ten_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_ten_bytes(bytes: &[u8]) -> std::result::Result<Tensor, String> {
        let read_u32 = |at: usize| -> std::result::Result<u32, String> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| "truncated header".to_string())
        };
        let ndim = read_u32(0)? as usize;
        let shape =
            (0..ndim).map(|i| read_u32(4 + 4 * i).map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let start = 4 + 4 * ndim;
        let n = numel(&shape);
        if bytes.len() != start + 8 * n {
            return Err(format!(
                "expected {} data bytes for shape {shape:?}, found {}",
                8 * n,
                bytes.len().saturating_sub(start)
            ));
        }
        let data = bytes[start..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }

    pub fn save_ten(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ten_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ten(path: &Path) -> Result<Tensor> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_ten_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "# shape: {}", dims.join(","))?;
        let row = *self.shape.last().unwrap_or(&1);
        for chunk in self.data.chunks(row) {
            let cells: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Tensor> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .ok_or_else(|| Error::format(path, "empty file"))?;
        let dims = header.strip_prefix("# shape:").ok_or_else(|| Error::format(path, "missing '# shape:' header"))?;
        let shape = dims
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("bad shape header: {e}")))?;
        let mut data = Vec::with_capacity(numel(&shape));
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            for cell in line.split(',') {
                data.push(
                    cell.trim().parse::<f64>().map_err(|e| Error::format(path, format!("bad value {cell:?}: {e}")))?,
                );
            }
        }
        Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.5, -3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "# shape: 2,2\n1.0,2.5\n-3.0,4.0\n");
    }

    #[test]
    fn ten_header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_ten_bytes();
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 16);
    }

    #[test]
    fn truncated_ten_is_rejected() {
        let bytes = Tensor::scalar(1.0).to_ten_bytes();
        assert!(Tensor::from_ten_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn ten_and_csv_round_trip(dims in prop::collection::vec(1usize..4, 1..4), seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(dims, 3.0, &mut rng);
            prop_assert_eq!(&Tensor::from_ten_bytes(&t.to_ten_bytes()).unwrap(), &t);

            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.csv");
            t.save_csv(&path).unwrap();
            prop_assert_eq!(&Tensor::load_csv(&path).unwrap(), &t);
        }
    }
}
