//! Dense tensors with reverse-mode automatic differentiation, sized for a
//! small transformer trained on a workstation. Values are immutable after
//! construction; gradients live in the [`Graph`] that recorded the ops.

pub mod graph;
pub mod kernels;
pub mod serial;

pub use graph::{Graph, Var};

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Element type of a tensor. f32 is the training default; f64 backs the
/// finite-difference checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Dtype> {
        match t {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Contiguous row-major scalar storage.
#[derive(Clone, Debug)]
pub enum Buf {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buf {
    pub fn zeros(dtype: Dtype, n: usize) -> Buf {
        match dtype {
            Dtype::F32 => Buf::F32(vec![0.0; n]),
            Dtype::F64 => Buf::F64(vec![0.0; n]),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buf::F32(v) => v.len(),
            Buf::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Buf::F32(_) => Dtype::F32,
            Buf::F64(_) => Dtype::F64,
        }
    }

    pub fn as_f32(&self) -> &[f32] {
        match self {
            Buf::F32(v) => v,
            Buf::F64(_) => panic!("buffer is f64, expected f32"),
        }
    }

    pub fn as_f64(&self) -> &[f64] {
        match self {
            Buf::F64(v) => v,
            Buf::F32(_) => panic!("buffer is f32, expected f64"),
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            Buf::F32(v) => f64::from(v[i]),
            Buf::F64(v) => v[i],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Buf::F32(v) => v.iter().map(|x| f64::from(*x)).collect(),
            Buf::F64(v) => v.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Buf::F32(v) => kernels::all_finite(v),
            Buf::F64(v) => kernels::all_finite(v),
        }
    }
}

/// Dense n-dimensional array. Cloning is cheap (shared storage).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Buf>,
    /// Whether binding this tensor as a graph leaf should track gradients.
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Buf) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor-new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if !data.all_finite() {
            return Err(Error::NonFinite { op: "tensor-new" });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    /// Internal constructor for buffers already known finite.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Buf>) -> Tensor {
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        Tensor::new(shape, Buf::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape, Buf::F64(data))
    }

    pub fn zeros(shape: Vec<usize>, dtype: Dtype) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(Buf::zeros(dtype, n)),
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, dtype: Dtype, v: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match dtype {
            Dtype::F32 => Buf::F32(vec![v as f32; n]),
            Dtype::F64 => Buf::F64(vec![v; n]),
        };
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn scalar_value(v: f64, dtype: Dtype) -> Tensor {
        Tensor::full(vec![1], dtype, v)
    }

    /// Gaussian init with the given std.
    pub fn randn(shape: Vec<usize>, dtype: Dtype, std: f64, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match dtype {
            Dtype::F32 => Buf::F32(
                (0..n)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        (z * std) as f32
                    })
                    .collect(),
            ),
            Dtype::F64 => Buf::F64(
                (0..n)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z * std
                    })
                    .collect(),
            ),
        };
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &Buf {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Buf> {
        Arc::clone(&self.data)
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data.get(i)
    }

    /// Value of a 1-element tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.len(), 1, "scalar() on tensor of {} elements", self.len());
        self.data.get(0)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.to_f64_vec()
    }

    pub fn cast(&self, dtype: Dtype) -> Tensor {
        if self.dtype() == dtype {
            return self.clone();
        }
        let data = match (dtype, self.data.as_ref()) {
            (Dtype::F32, Buf::F64(v)) => Buf::F32(v.iter().map(|x| *x as f32).collect()),
            (Dtype::F64, Buf::F32(v)) => Buf::F64(v.iter().map(|x| f64::from(*x)).collect()),
            _ => unreachable!(),
        };
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: self.requires_grad,
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }

    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    /// Bitwise equality of shape, dtype and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape || self.dtype() != other.dtype() {
            return false;
        }
        match (self.data.as_ref(), other.data.as_ref()) {
            (Buf::F32(a), Buf::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Buf::F64(a), Buf::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.to_f64_vec()
            .iter()
            .zip(other.to_f64_vec().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense boolean matrix used for attention masks (true = visible).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMat {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMat {
    pub fn new(rows: usize, cols: usize, v: bool) -> BoolMat {
        BoolMat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Index of the first all-false row, if any.
    pub fn dead_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| !self.row(r).iter().any(|v| *v))
    }

    /// 0/1 tensor for checkpoint embedding.
    pub fn to_tensor(&self, dtype: Dtype) -> Tensor {
        let vals: Vec<f64> = self.data.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        match dtype {
            Dtype::F32 => {
                Tensor::from_f32(vec![self.rows, self.cols], vals.iter().map(|v| *v as f32).collect())
                    .expect("mask tensor")
            }
            Dtype::F64 => {
                Tensor::from_f64(vec![self.rows, self.cols], vals).expect("mask tensor")
            }
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<BoolMat> {
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "mask-from-tensor",
                lhs: t.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let data = t.to_f64_vec().iter().map(|v| *v != 0.0).collect();
        Ok(BoolMat {
            rows: t.shape()[0],
            cols: t.shape()[1],
            data,
        })
    }

    /// Binary PGM (P5) image, visible = white.
    pub fn write_pgm(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut bytes = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        bytes.extend(self.data.iter().map(|b| if *b { 255u8 } else { 0u8 }));
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}
