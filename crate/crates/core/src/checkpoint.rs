//! Binary layer checkpoints.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0  | 4 | magic `MOEL` |
//! | 4  | 4 | version `u32` (= 1) |
//! | 8  | 4 | `num_experts` N `u32` |
//! | 12 | 4 | `model_dim` d `u32` |
//! | 16 | 4 | `hidden_dim` H `u32` |
//! | 20 | 8·N·d | router `W_r`, row-major `f64` |
//! | …  | 8·(H·d + d·H) per expert | `w_in` (H×d) then `w_out` (d×H), row-major `f64`, experts in order |

use std::io::{Read, Write};

use crate::error::{FormatError, Result};
use crate::numeric::Matrix;
use crate::routing::{Expert, ExpertBank};
use crate::wire::{self, Cursor};

pub const LAYER_MAGIC: [u8; 4] = *b"MOEL";
pub const LAYER_VERSION: u32 = 1;
pub const LAYER_HEADER_BYTES: usize = 20;

/// A router plus its expert bank.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheckpoint {
    pub router: Matrix,
    pub bank: ExpertBank,
}

impl LayerCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (n, d, h) = (self.bank.len(), self.bank.model_dim(), self.bank.hidden_dim());
        if self.router.rows() != n || self.router.cols() != d {
            return Err(crate::Error::Shape(format!(
                "router {}x{} does not match {n} experts of width {d}",
                self.router.rows(),
                self.router.cols()
            )));
        }
        let mut out = Vec::with_capacity(LAYER_HEADER_BYTES + 8 * (n * d + 2 * n * d * h));
        out.extend_from_slice(&LAYER_MAGIC);
        wire::put_u32(&mut out, LAYER_VERSION);
        wire::put_u32(&mut out, wire::dim_u32(n, "num_experts")?);
        wire::put_u32(&mut out, wire::dim_u32(d, "model_dim")?);
        wire::put_u32(&mut out, wire::dim_u32(h, "hidden_dim")?);
        wire::put_f64s(&mut out, self.router.data());
        for e in self.bank.experts() {
            wire::put_f64s(&mut out, e.w_in.data());
            wire::put_f64s(&mut out, e.w_out.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        cur.magic(LAYER_MAGIC)?;
        let version = cur.u32()?;
        if version != LAYER_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let n = cur.u32()? as usize;
        let d = cur.u32()? as usize;
        let h = cur.u32()? as usize;
        if n == 0 || d == 0 || h == 0 {
            return Err(FormatError::Invalid(format!("zero dimension in header ({n}, {d}, {h})")).into());
        }
        let nd = n.checked_mul(d).ok_or_else(wire::overflow)?;
        let hd = h.checked_mul(d).ok_or_else(wire::overflow)?;
        let router = Matrix::new(n, d, cur.f64s(nd)?)?;
        let mut experts = Vec::with_capacity(n);
        for _ in 0..n {
            let w_in = Matrix::new(h, d, cur.f64s(hd)?)?;
            let w_out = Matrix::new(d, h, cur.f64s(hd)?)?;
            experts.push(Expert::new(w_in, w_out)?);
        }
        cur.finish()?;
        Ok(Self { router, bank: ExpertBank::new(experts)? })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(FormatError::from)?;
        Self::from_bytes(&buf)
    }
}
