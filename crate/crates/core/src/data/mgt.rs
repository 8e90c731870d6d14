//! The MGT1 tensor container.
//!
//! Layout: `b"MGT1"`, a dtype byte (0 = f32, 1 = f64, 2 = u8), a rank byte
//! (at most 4), `rank` little-endian u32 extents, then the packed
//! little-endian payload in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField, VectorField};

pub const MAGIC: &[u8; 4] = b"MGT1";
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            "u8" => Some(DType::U8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Input(format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        if let Some(&d) = shape.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(Error::Input(format!("extent {d} does not fit in u32")));
        }
        let n = element_count(&shape).ok_or_else(|| Error::Input("extent product overflows".into()))?;
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64], dtype: DType) -> Result<Self> {
        let data = match dtype {
            DType::F32 => TensorData::F32(values.iter().map(|&x| x as f32).collect()),
            DType::F64 => TensorData::F64(values.to_vec()),
            DType::U8 => TensorData::U8(
                values
                    .iter()
                    .map(|&x| x.round().clamp(0.0, 255.0) as u8)
                    .collect(),
            ),
        };
        Tensor::new(shape, data)
    }

    pub fn from_scalar_field(f: &ScalarField, dtype: DType) -> Self {
        Tensor::from_f64(f.grid().dims().to_vec(), f.values(), dtype).expect("grid shape is valid")
    }

    /// Shape `[ndim, dims..]`, component-major like the in-memory layout.
    pub fn from_vector_field(v: &VectorField, dtype: DType) -> Self {
        let mut shape = vec![v.ndim()];
        shape.extend_from_slice(v.grid().dims());
        Tensor::from_f64(shape, v.data(), dtype).expect("grid shape is valid")
    }

    /// Interprets the tensor as an image with unit spacing.
    pub fn to_scalar_field(&self) -> Result<ScalarField> {
        let grid = Grid::new(&self.shape)?;
        ScalarField::new(grid, self.to_f64())
    }

    pub fn to_vector_field(&self) -> Result<VectorField> {
        let (&nd, dims) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::Dimension("scalar tensor is not a vector field".into()))?;
        if nd != dims.len() {
            return Err(Error::Dimension(format!(
                "vector field tensor needs leading extent {} (spatial rank), got {nd}",
                dims.len()
            )));
        }
        VectorField::new(Grid::new(dims)?, self.to_f64())
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + self.len() * dtype.size());
        out.extend_from_slice(MAGIC);
        out.push(dtype.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::format(bytes.len(), format!("header needs 6 bytes, got {}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::format(4, format!("unknown dtype code {}", bytes[4])))?;
        let rank = bytes[5] as usize;
        if rank > MAX_RANK {
            return Err(Error::format(5, format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let header = 6 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::format(
                bytes.len(),
                format!("header needs {header} bytes, got {}", bytes.len()),
            ));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| {
                let o = 6 + 4 * i;
                u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
            })
            .collect();
        let payload = element_count(&shape)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::format(6, format!("extents {shape:?} overflow")))?;
        let actual = bytes.len() - header;
        if actual != payload {
            return Err(Error::format(
                header,
                format!("payload should be {payload} bytes, found {actual}"),
            ));
        }
        let body = &bytes[header..];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(body.to_vec()),
        };
        Ok(Tensor { shape, data })
    }
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn save_mgt(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_mgt(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}
