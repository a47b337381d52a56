//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `MLMCKPT1`, then `C, V, D, r` as little-endian
//! `u64` (`r = 0` for a full head), then `H` and `W` (or `A`, `B`) as
//! row-major little-endian `f64`.

use std::io::{Read, Write};

use thiserror::Error;

use super::{HeadWeights, ModelParams};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MLMCKPT1";

/// Any single dimension beyond this is treated as corruption.
const MAX_DIM: u64 = 1 << 24;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 8]),
    #[error("bad checkpoint dimensions: {0}")]
    BadDimensions(String),
    #[error("checkpoint contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> std::io::Result<()> {
    let rank = params.head.factor_rank().unwrap_or(0);
    w.write_all(CHECKPOINT_MAGIC)?;
    for dim in [params.contexts(), params.vocab_size(), params.hidden_dim(), rank] {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    let mut put = |m: &Matrix| -> std::io::Result<()> {
        for x in m.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    };
    put(&params.h)?;
    match &params.head {
        HeadWeights::Full { w } => put(w)?,
        HeadWeights::Factored { a, b } => {
            put(a)?;
            put(b)?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix, CheckpointError> {
    let mut bytes = vec![0u8; rows * cols * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect();
    Matrix::new(rows, cols, data).map_err(|_| CheckpointError::NonFinite)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let c = read_u64(&mut r)?;
    let v = read_u64(&mut r)?;
    let d = read_u64(&mut r)?;
    let rank = read_u64(&mut r)?;
    if [c, v, d].iter().any(|&x| x == 0 || x > MAX_DIM) || rank > d {
        return Err(CheckpointError::BadDimensions(format!("C={c} V={v} D={d} r={rank}")));
    }
    let (c, v, d, rank) = (c as usize, v as usize, d as usize, rank as usize);
    let h = read_matrix(&mut r, c, d)?;
    let head = if rank == 0 {
        HeadWeights::full(read_matrix(&mut r, v, d)?)
    } else {
        let a = read_matrix(&mut r, v, rank)?;
        let b = read_matrix(&mut r, rank, d)?;
        HeadWeights::factored(a, b).map_err(|e| CheckpointError::BadDimensions(e.to_string()))?
    };
    // trailing bytes mean the header lied about the sizes
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::BadDimensions("trailing bytes after parameters".into()));
    }
    ModelParams::new(h, head).map_err(|e| CheckpointError::BadDimensions(e.to_string()))
}
