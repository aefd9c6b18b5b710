//! Rollout router replay: record expert selections per (token, layer) during a
//! rollout pass and force them during the training pass.
//!
//! Trace file layout, all little-endian:
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0  | 4 | magic `RTRC` |
//! | 4  | 4 | version `u32` (= 1) |
//! | 8  | 4 | `num_tokens` T `u32` |
//! | 12 | 4 | `num_layers` L `u32` |
//! | 16 | 4 | `k` `u32` |
//! | 20 | 4 | `num_experts` N `u32` |
//! | 24 | 2·T·L·K | expert indices `u16`, token-major, then layer, each entry ascending |

use std::io::{Read, Write};

use crate::error::{Error, FormatError, Result};
use crate::numeric::Matrix;
use crate::routing::{self, MoeLayerSpec, RoutingDecision, RoutingMode};
use crate::wire::{self, Cursor};

pub const TRACE_MAGIC: [u8; 4] = *b"RTRC";
pub const TRACE_VERSION: u32 = 1;
pub const TRACE_HEADER_BYTES: usize = 24;

/// Largest expert count addressable by 16-bit indices.
pub const MAX_TRACE_EXPERTS: usize = 1 << 16;

/// One routed layer: its router and dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterLayer {
    pub router: Matrix,
    pub spec: MoeLayerSpec,
}

/// Selected expert indices for every (token, layer).
///
/// Equality compares the serialized content only; gates captured at record
/// time are ignored.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    num_tokens: usize,
    num_layers: usize,
    k: usize,
    num_experts: usize,
    indices: Vec<u16>,
    /// Gate values seen at record time. Kept in memory only.
    recorded_gates: Option<Vec<GateBits>>,
}

#[derive(Debug, Clone, Copy)]
struct GateBits(u64);

impl PartialEq for RoutingTrace {
    fn eq(&self, other: &Self) -> bool {
        self.num_tokens == other.num_tokens
            && self.num_layers == other.num_layers
            && self.k == other.k
            && self.num_experts == other.num_experts
            && self.indices == other.indices
    }
}

impl Eq for RoutingTrace {}

/// How gate values are produced under replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateReplay {
    /// Renormalize the current router probabilities over the frozen set.
    #[default]
    Recompute,
    /// Reuse the gate values captured at record time.
    Frozen,
}

impl RoutingTrace {
    /// Builds a trace from token-major, layer-minor entries.
    pub fn from_entries(
        num_tokens: usize,
        num_layers: usize,
        k: usize,
        num_experts: usize,
        indices: Vec<u16>,
    ) -> Result<Self> {
        let trace = Self { num_tokens, num_layers, k, num_experts, indices, recorded_gates: None };
        trace.validate().map_err(Error::from)?;
        Ok(trace)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn has_recorded_gates(&self) -> bool {
        self.recorded_gates.is_some()
    }

    /// Recorded selection, ascending.
    pub fn entry(&self, token: usize, layer: usize) -> Result<&[u16]> {
        if token >= self.num_tokens || layer >= self.num_layers {
            return Err(Error::MissingTraceEntry { token, layer });
        }
        let start = (token * self.num_layers + layer) * self.k;
        Ok(&self.indices[start..start + self.k])
    }

    pub fn serialized_len(&self) -> usize {
        TRACE_HEADER_BYTES + 2 * self.indices.len()
    }

    fn validate(&self) -> std::result::Result<(), FormatError> {
        let expected = self
            .num_tokens
            .checked_mul(self.num_layers)
            .and_then(|v| v.checked_mul(self.k))
            .ok_or_else(wire::overflow)?;
        if self.indices.len() != expected {
            return Err(FormatError::Invalid(format!(
                "{} indices for {}x{}x{} trace",
                self.indices.len(),
                self.num_tokens,
                self.num_layers,
                self.k
            )));
        }
        if self.k == 0 || self.k > self.num_experts || self.num_experts > MAX_TRACE_EXPERTS {
            return Err(FormatError::Invalid(format!(
                "k={} with {} experts",
                self.k, self.num_experts
            )));
        }
        for (n, entry) in self.indices.chunks_exact(self.k).enumerate() {
            let ascending = entry.windows(2).all(|w| w[0] < w[1]);
            if !ascending || entry.iter().any(|&e| e as usize >= self.num_experts) {
                return Err(FormatError::Invalid(format!(
                    "entry {n} is not an ascending set of expert indices below {}: {entry:?}",
                    self.num_experts
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&TRACE_MAGIC);
        wire::put_u32(&mut out, TRACE_VERSION);
        wire::put_u32(&mut out, wire::dim_u32(self.num_tokens, "num_tokens")?);
        wire::put_u32(&mut out, wire::dim_u32(self.num_layers, "num_layers")?);
        wire::put_u32(&mut out, wire::dim_u32(self.k, "k")?);
        wire::put_u32(&mut out, wire::dim_u32(self.num_experts, "num_experts")?);
        for &i in &self.indices {
            wire::put_u16(&mut out, i);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        cur.magic(TRACE_MAGIC)?;
        let version = cur.u32()?;
        if version != TRACE_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let num_tokens = cur.u32()? as usize;
        let num_layers = cur.u32()? as usize;
        let k = cur.u32()? as usize;
        let num_experts = cur.u32()? as usize;
        let count = num_tokens
            .checked_mul(num_layers)
            .and_then(|v| v.checked_mul(k))
            .ok_or_else(wire::overflow)?;
        let payload = cur.take(count.checked_mul(2).ok_or_else(wire::overflow)?)?;
        cur.finish()?;
        let indices = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Self::from_entries(num_tokens, num_layers, k, num_experts, indices)
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

/// Routes every token of `batch` through every layer and records the selections.
///
/// Each layer sees the same token vector; all layers must share `N` and `K`.
pub fn record_trace(batch: &Matrix, layers: &[RouterLayer], mode: RoutingMode) -> Result<RoutingTrace> {
    let first = layers.first().ok_or_else(|| Error::InvalidConfig("no layers to record".into()))?;
    let (n, k) = (first.spec.num_experts, first.spec.active_k);
    if n > MAX_TRACE_EXPERTS {
        return Err(Error::InvalidConfig(format!("{n} experts exceed 16-bit trace indices")));
    }
    if layers.iter().any(|l| l.spec.num_experts != n || l.spec.active_k != k) {
        return Err(Error::InvalidConfig("all layers must share N and K".into()));
    }
    let mut indices = Vec::with_capacity(batch.rows() * layers.len() * k);
    let mut gates = Vec::with_capacity(indices.capacity());
    for t in 0..batch.rows() {
        for layer in layers {
            let d = routing::route(batch.row(t), &layer.router, &layer.spec, mode)?;
            indices.extend(d.selected.iter().map(|&e| e as u16));
            gates.extend(d.gates.iter().map(|g| GateBits(g.to_bits())));
        }
    }
    let mut trace = RoutingTrace::from_entries(batch.rows(), layers.len(), k, n, indices)?;
    trace.recorded_gates = Some(gates);
    Ok(trace)
}

/// Decision for `(token, layer)` with the selection forced from the trace and
/// gates renormalized from the current router logits.
pub fn replay_select(trace: &RoutingTrace, token: usize, layer: usize, current_logits: &[f64]) -> Result<RoutingDecision> {
    replay_select_with(trace, token, layer, current_logits, GateReplay::Recompute)
}

pub fn replay_select_with(
    trace: &RoutingTrace,
    token: usize,
    layer: usize,
    current_logits: &[f64],
    gate_mode: GateReplay,
) -> Result<RoutingDecision> {
    let entry = trace.entry(token, layer)?;
    if current_logits.len() != trace.num_experts {
        return Err(Error::Shape(format!(
            "{} logits for a trace over {} experts",
            current_logits.len(),
            trace.num_experts
        )));
    }
    let probs = routing::probs_from_logits(current_logits, 1.0)?;
    let selected: Vec<usize> = entry.iter().map(|&e| e as usize).collect();
    let gates = match gate_mode {
        GateReplay::Recompute => routing::gate_weights(&probs, &selected)?,
        GateReplay::Frozen => {
            let recorded = trace.recorded_gates.as_ref().ok_or_else(|| {
                Error::InvalidConfig("trace carries no recorded gates (loaded from disk?)".into())
            })?;
            let start = (token * trace.num_layers + layer) * trace.k;
            recorded[start..start + trace.k].iter().map(|g| f64::from_bits(g.0)).collect()
        }
    };
    Ok(RoutingDecision { logits: current_logits.to_vec(), probs, selected, gates })
}
