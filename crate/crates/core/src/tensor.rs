//! Dense row-major tensors of rank at most four.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 4;

/// Extents of a tensor, outermost first.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(dim_err!("rank {} exceeds {}", dims.len(), MAX_RANK));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Interprets the shape as `(n, c, h, w)`.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(dim_err!("expected rank-4 (n,c,h,w), got {:?}", self.0)),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape(d.to_vec())
    }
}

/// A dense tensor value. Gradients live on the [`Tape`](crate::tape::Tape)
/// or on a [`Param`](crate::tape::Param), never on the value itself.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} values, got {}",
                dims,
                shape.numel(),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(dims, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data[..] {
            [v] => Ok(v),
            _ => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Selects samples along the leading axis.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let dims = self.dims();
        if dims.is_empty() {
            return Err(dim_err!("select on a scalar"));
        }
        let stride: usize = dims[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= dims[0] {
                return Err(dim_err!("index {} out of {}", i, dims[0]));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut out = dims.to_vec();
        out[0] = indices.len();
        Self::from_vec(&out, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(dim_err!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        Self::from_vec(&dims, data)
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(dim_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max))
    }

    /// Writes the text fixture format: rank and extents on the first line,
    /// values in row-major order on the second, shortest round-trip decimals.
    pub fn to_dump(&self) -> String {
        let mut out = self.shape.rank().to_string();
        for d in self.dims() {
            out.push(' ');
            out.push_str(&d.to_string());
        }
        out.push('\n');
        let values: Vec<String> = self.data.iter().map(|v| v.to_string()).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
        out
    }
}

impl<T: Scalar + FromStr> Tensor<T> {
    pub fn from_dump(text: &str) -> Result<Self> {
        let mut lines = text.splitn(2, '\n');
        let header = lines.next().unwrap_or("");
        let body = lines.next().unwrap_or("");
        let mut fields = header.split_whitespace().map(str::parse::<usize>);
        let bad = |m: &str| Error::Parse {
            offset: 0,
            message: m.to_string(),
        };
        let rank = fields
            .next()
            .ok_or_else(|| bad("missing rank"))?
            .map_err(|_| bad("rank is not an integer"))?;
        let dims = fields
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("extent is not an integer"))?;
        if dims.len() != rank {
            return Err(bad("extent count differs from rank"));
        }
        let base = header.len() + 1;
        let mut data = Vec::new();
        let mut start = None;
        let end = std::iter::once((body.len(), ' '));
        for (i, ch) in body.char_indices().chain(end) {
            if !ch.is_whitespace() {
                start.get_or_insert(i);
                continue;
            }
            if let Some(s) = start.take() {
                let tok = &body[s..i];
                data.push(tok.parse::<T>().map_err(|_| Error::Parse {
                    offset: base + s,
                    message: format!("invalid value {tok:?}"),
                })?);
            }
        }
        Self::from_vec(&dims, data)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}
