//! Dense host tensors and their binary file format.
//!
//! Layout: magic `SHTN`, then little-endian `u32` dtype code, `u32` rank,
//! `rank` x `u64` extents, then row-major element data in the declared dtype.

use std::io::{Read, Write};

use half::f16;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::texpr::DType;

const MAGIC: &[u8; 4] = b"SHTN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Row-major values. `f16` tensors are widened to `f32` in memory.
    pub data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(DenseTensor { dtype, shape, data })
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        DenseTensor {
            dtype,
            shape,
            data: vec![0.0; n],
        }
    }

    /// Uniform values in `[-1, 1)`.
    pub fn random(dtype: DType, shape: Vec<usize>, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f32 = rng.gen_range(-1.0..1.0);
                match dtype {
                    DType::F32 => v,
                    DType::F16 => f16::from_f32(v).to_f32(),
                }
            })
            .collect();
        DenseTensor { dtype, shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.dtype.code().to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        match self.dtype {
            DType::F32 => {
                for v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            DType::F16 => {
                for v in &self.data {
                    w.write_all(&f16::from_f32(*v).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Schema("tensor file: bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let dtype = DType::from_code(u32::from_le_bytes(word))
            .ok_or_else(|| Error::Schema("tensor file: unknown dtype code".into()))?;
        r.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut dword = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut dword)?;
            shape.push(u64::from_le_bytes(dword) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            DType::F32 => {
                for _ in 0..n {
                    r.read_exact(&mut word)?;
                    data.push(f32::from_le_bytes(word));
                }
            }
            DType::F16 => {
                let mut hw = [0u8; 2];
                for _ in 0..n {
                    r.read_exact(&mut hw)?;
                    data.push(f16::from_le_bytes(hw).to_f32());
                }
            }
        }
        Ok(DenseTensor { dtype, shape, data })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// Seeded uniform values for every graph input.
pub fn random_inputs(
    graph: &crate::texpr::ModelGraph,
    seed: u64,
) -> std::collections::HashMap<String, DenseTensor> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    graph
        .inputs
        .iter()
        .map(|name| {
            let d = graph.tensor(name).expect("validated graph input");
            (name.clone(), DenseTensor::random(d.dtype, d.shape.clone(), &mut rng))
        })
        .collect()
}

/// Normwise relative error: `max|a - b| / max|reference|`.
pub fn max_relative_error(actual: &DenseTensor, reference: &DenseTensor) -> Result<f64> {
    if actual.shape != reference.shape {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            actual.shape, reference.shape
        )));
    }
    let scale = reference
        .data
        .iter()
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let diff = actual
        .data
        .iter()
        .zip(&reference.data)
        .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs()));
    Ok(if scale == 0.0 { diff } else { diff / scale })
}
