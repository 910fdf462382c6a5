//! Binary checkpoint: little-endian, shape-tagged, bit-exact.
//!
//! ```text
//! "LVNT"  u32 version  u32 obstacle_slots
//! f64 output_scale[2]
//! u32 tensor_count, then per tensor: u32 rows, u32 cols, rows*cols f64 (column-major)
//! ```
//! Tensor order: trunk weight, trunk bias, then per head (reference, obstacle,
//! liveness) hidden weight, hidden bias, output weight, output bias.

use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::encoding::EncodingConfig;
use super::network::{Head, NetworkParams};

const MAGIC: &[u8; 4] = b"LVNT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("inconsistent tensor shapes: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub encoding: EncodingConfig,
}

fn put_u32(w: &mut impl Write, x: u32) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn tensor_shapes(p: &NetworkParams) -> Vec<(usize, usize)> {
    let mut v = vec![(p.w0.nrows(), p.w0.ncols()), (p.b0.len(), 1)];
    for h in &p.heads {
        v.extend([
            (h.w1.nrows(), h.w1.ncols()),
            (h.b1.len(), 1),
            (h.w2.nrows(), h.w2.ncols()),
            (h.b2.len(), 1),
        ]);
    }
    v
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        put_u32(w, self.encoding.obstacle_slots as u32)?;
        for s in self.params.output_scale {
            w.write_all(&s.to_le_bytes())?;
        }
        let shapes = tensor_shapes(&self.params);
        put_u32(w, shapes.len() as u32)?;
        for ((r, c), t) in shapes.iter().zip(self.params.tensors()) {
            put_u32(w, *r as u32)?;
            put_u32(w, *c as u32)?;
            for x in t {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let encoding = EncodingConfig {
            obstacle_slots: get_u32(r)? as usize,
        };
        let output_scale = [get_f64(r)?, get_f64(r)?];
        let n = get_u32(r)? as usize;
        if n != 14 {
            return Err(CheckpointError::Shape(format!("expected 14 tensors, found {n}")));
        }
        let mut mats = Vec::with_capacity(n);
        for _ in 0..n {
            let rows = get_u32(r)? as usize;
            let cols = get_u32(r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(get_f64(r)?);
            }
            mats.push(DMatrix::from_vec(rows, cols, data));
        }
        let vec_of = |m: &DMatrix<f64>| -> Result<DVector<f64>, CheckpointError> {
            if m.ncols() != 1 {
                return Err(CheckpointError::Shape("bias must be a column".into()));
            }
            Ok(DVector::from_column_slice(m.as_slice()))
        };
        let mut it = mats.into_iter();
        let mut next = || it.next().expect("count checked");
        let w0 = next();
        let b0 = vec_of(&next())?;
        let mut heads = Vec::with_capacity(3);
        for _ in 0..3 {
            let w1 = next();
            let b1 = vec_of(&next())?;
            let w2 = next();
            let b2 = vec_of(&next())?;
            heads.push(Head { w1, b1, w2, b2 });
        }
        let heads: [Head; 3] = heads.try_into().expect("three heads");
        let params = NetworkParams {
            w0,
            b0,
            heads,
            output_scale,
        };
        let shape = params.shape();
        if params.b0.len() != shape.trunk
            || shape.input != encoding.input_dim()
            || params.heads.iter().any(|h| {
                h.w1.ncols() != shape.trunk
                    || h.w1.nrows() != shape.head
                    || h.b1.len() != shape.head
                    || h.w2.nrows() != 2
                    || h.w2.ncols() != shape.head
                    || h.b2.len() != 2
            })
        {
            return Err(CheckpointError::Shape(format!(
                "{shape:?} with {} obstacle slots",
                encoding.obstacle_slots
            )));
        }
        Ok(Self { params, encoding })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
