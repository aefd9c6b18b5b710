//! FP8 (E4M3) and BF16 rounding emulation and the mixed-precision forward policy.
//!
//! Values stay in `f64` between rounding points: only representational error is
//! modelled, never accumulator error.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numeric::{self, Matrix};
use crate::routing::{self, ExpertBank, MoeLayerSpec, RoutingMode};

/// 8-bit float layout. Only E4M3 (bias 7, max normal 448, no infinities) is provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fp8Format {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub bias: i32,
    pub max_normal: u32,
    /// Out-of-range magnitudes clamp to `±max_normal` instead of becoming NaN.
    pub saturating: bool,
}

impl Fp8Format {
    pub const E4M3: Fp8Format =
        Fp8Format { exponent_bits: 4, mantissa_bits: 3, bias: 7, max_normal: 448, saturating: true };

    pub fn max_normal(&self) -> f64 {
        self.max_normal as f64
    }
}

impl Default for Fp8Format {
    fn default() -> Self {
        Self::E4M3
    }
}

const E4M3_NAN: u8 = 0x7F;
const E4M3_MAX_CODE: u8 = 0x7E;
const E4M3_MIN_NORMAL: f64 = 1.0 / 64.0; // 2^-6
const E4M3_SUBNORMAL_STEP: f64 = 1.0 / 512.0; // 2^-9

/// Value of an E4M3 code. `0x7F` and `0xFF` are NaN.
pub fn e4m3_decode(code: u8) -> f64 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let bits = code & 0x7F;
    if bits == E4M3_NAN {
        return f64::NAN.copysign(sign);
    }
    let exp = (bits >> 3) as i32;
    let mant = (bits & 0x07) as f64;
    let mag = if exp == 0 {
        mant * E4M3_SUBNORMAL_STEP
    } else {
        (1.0 + mant / 8.0) * 2f64.powi(exp - 7)
    };
    sign * mag
}

/// Nearest E4M3 code, ties to even mantissa. Magnitudes past 448 saturate.
/// NaN maps to the NaN code of the same sign.
pub fn e4m3_encode(v: f64) -> u8 {
    let sign: u8 = if v.is_sign_negative() { 0x80 } else { 0 };
    if v.is_nan() {
        return sign | E4M3_NAN;
    }
    let a = v.abs();
    if a < E4M3_MIN_NORMAL {
        // Subnormal grid k·2^-9; k = 8 rolls into the smallest normal, whose code is also 8.
        return sign | (a / E4M3_SUBNORMAL_STEP).round_ties_even() as u8;
    }
    if a >= 448.0 {
        return sign | E4M3_MAX_CODE;
    }
    let exp = a.log2().floor() as i32;
    // log2 can be off by one ulp near powers of two; fix the binade exactly.
    let exp = if 2f64.powi(exp) > a {
        exp - 1
    } else if 2f64.powi(exp + 1) <= a {
        exp + 1
    } else {
        exp
    };
    let frac = a / 2f64.powi(exp) - 1.0; // exact: power-of-two scaling
    let mut q = (frac * 8.0).round_ties_even() as i32;
    let mut e = exp;
    if q == 8 {
        q = 0;
        e += 1;
    }
    let field = e + 7;
    if field > 15 || (field == 15 && q == 7) {
        return sign | E4M3_MAX_CODE;
    }
    sign | ((field as u8) << 3) | q as u8
}

/// Round `v` onto the E4M3 grid (no scaling).
pub fn e4m3_round(v: f64) -> f64 {
    e4m3_decode(e4m3_encode(v))
}

/// FP8 codes with a per-tensor scale; `value ≈ decode(code) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fp8Tensor {
    pub codes: Vec<u8>,
    pub scale: f64,
}

/// Per-tensor amax scaling onto E4M3: `scale = max_normal / amax(v)`.
/// An all-zero input yields zero codes with scale 1.
pub fn quantize_fp8(v: &[f64], fmt: &Fp8Format) -> Result<Fp8Tensor> {
    check_e4m3(fmt)?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidConfig(format!("cannot quantize non-finite element {i}")));
    }
    let amax = numeric::max_abs(v);
    if amax == 0.0 {
        return Ok(Fp8Tensor { codes: vec![0; v.len()], scale: 1.0 });
    }
    quantize_fp8_with_scale(v, fmt.max_normal() / amax, fmt)
}

/// Quantizes `v · scale` with a caller-chosen scale.
pub fn quantize_fp8_with_scale(v: &[f64], scale: f64, fmt: &Fp8Format) -> Result<Fp8Tensor> {
    check_e4m3(fmt)?;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidConfig(format!("fp8 scale must be positive, got {scale}")));
    }
    let codes = v
        .iter()
        .map(|&x| {
            let scaled = x * scale;
            if !fmt.saturating && scaled.abs() > fmt.max_normal() {
                (if scaled < 0.0 { 0x80 } else { 0 }) | E4M3_NAN
            } else {
                e4m3_encode(scaled)
            }
        })
        .collect();
    Ok(Fp8Tensor { codes, scale })
}

pub fn dequantize_fp8(t: &Fp8Tensor) -> Vec<f64> {
    t.codes.iter().map(|&c| e4m3_decode(c) / t.scale).collect()
}

/// Quantize then dequantize.
pub fn fp8_fake_quant(v: &[f64], fmt: &Fp8Format) -> Result<Vec<f64>> {
    Ok(dequantize_fp8(&quantize_fp8(v, fmt)?))
}

fn check_e4m3(fmt: &Fp8Format) -> Result<()> {
    let e4m3 = Fp8Format { saturating: fmt.saturating, ..Fp8Format::E4M3 };
    if *fmt != e4m3 {
        return Err(Error::InvalidConfig("only the E4M3 layout is emulated".into()));
    }
    Ok(())
}

const BF16_DROPPED_BITS: u32 = 52 - 7;
const BF16_MIN_NORMAL: f64 = 1.1754943508222875e-38; // 2^-126
const BF16_SUBNORMAL_STEP: f64 = 9.183549615799121e-41; // 2^-133
const BF16_MAX: f64 = 3.3895313892515355e38; // (2 - 2^-7) · 2^127

/// Round one value to the nearest bfloat16 (8 significant bits, ties to even),
/// expressed back in `f64`. Overflow goes to ±∞ as in IEEE round-to-nearest.
pub fn bf16_round_scalar(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    if v.abs() < BF16_MIN_NORMAL {
        return (v / BF16_SUBNORMAL_STEP).round_ties_even() * BF16_SUBNORMAL_STEP;
    }
    let bits = v.to_bits();
    let lsb = (bits >> BF16_DROPPED_BITS) & 1;
    let rounded = bits.wrapping_add((1u64 << (BF16_DROPPED_BITS - 1)) - 1 + lsb);
    let out = f64::from_bits(rounded & !((1u64 << BF16_DROPPED_BITS) - 1));
    if out.abs() > BF16_MAX {
        f64::INFINITY.copysign(v)
    } else {
        out
    }
}

pub fn bf16_round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| bf16_round_scalar(x)).collect()
}

/// Numeric format assigned to one class of layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NumericFormat {
    /// Left at reference precision; no rounding point is inserted.
    Fp32,
    Bf16,
    Fp8E4M3,
}

impl NumericFormat {
    fn round_matrix(self, m: &Matrix) -> Result<Matrix> {
        match self {
            NumericFormat::Fp32 => Ok(m.clone()),
            NumericFormat::Bf16 => m.with_data(bf16_round(m.data())),
            NumericFormat::Fp8E4M3 => m.with_data(fp8_fake_quant(m.data(), &Fp8Format::E4M3)?),
        }
    }

    /// Activations only ever pass through FP32 or BF16; FP8 applies to weights.
    fn round_activation(self, v: Vec<f64>) -> Vec<f64> {
        match self {
            NumericFormat::Fp32 | NumericFormat::Fp8E4M3 => v,
            NumericFormat::Bf16 => bf16_round(&v),
        }
    }
}

/// Format per layer class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrecisionPolicy {
    pub expert_weights: NumericFormat,
    pub non_expert: NumericFormat,
    pub lm_head: NumericFormat,
}

impl PrecisionPolicy {
    /// FP8 experts, BF16 elsewhere, FP32 LM head.
    pub const MIXED: Self = Self {
        expert_weights: NumericFormat::Fp8E4M3,
        non_expert: NumericFormat::Bf16,
        lm_head: NumericFormat::Fp32,
    };
    /// As [`Self::MIXED`] but with a BF16 LM head.
    pub const BF16_HEAD: Self = Self { lm_head: NumericFormat::Bf16, ..Self::MIXED };
    pub const ALL_BF16: Self = Self {
        expert_weights: NumericFormat::Bf16,
        non_expert: NumericFormat::Bf16,
        lm_head: NumericFormat::Bf16,
    };
    pub const REFERENCE: Self = Self {
        expert_weights: NumericFormat::Fp32,
        non_expert: NumericFormat::Fp32,
        lm_head: NumericFormat::Fp32,
    };

    pub fn tag(&self) -> &'static str {
        match *self {
            Self::MIXED => "mixed",
            Self::BF16_HEAD => "bf16-head",
            Self::ALL_BF16 => "all-bf16",
            Self::REFERENCE => "fp32",
            _ => "custom",
        }
    }
}

impl std::str::FromStr for PrecisionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Self::MIXED),
            "bf16-head" => Ok(Self::BF16_HEAD),
            "all-bf16" => Ok(Self::ALL_BF16),
            "fp32" | "reference" => Ok(Self::REFERENCE),
            other => Err(Error::InvalidConfig(format!("unknown precision policy `{other}`"))),
        }
    }
}

/// A toy model: one MoE layer followed by an LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub spec: MoeLayerSpec,
    pub mode: RoutingMode,
    pub router: Matrix,
    pub bank: ExpertBank,
    /// `vocab × d`
    pub head: Matrix,
}

impl ToyModel {
    /// Weights rounded once per the policy.
    pub fn quantized(&self, policy: &PrecisionPolicy) -> Result<QuantizedModel> {
        let experts = self
            .bank
            .experts()
            .iter()
            .map(|e| {
                routing::Expert::new(
                    policy.expert_weights.round_matrix(&e.w_in)?,
                    policy.expert_weights.round_matrix(&e.w_out)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuantizedModel {
            policy: *policy,
            spec: self.spec,
            mode: self.mode,
            router: policy.non_expert.round_matrix(&self.router)?,
            bank: ExpertBank::new(experts)?,
            head: policy.lm_head.round_matrix(&self.head)?,
        })
    }
}

/// A [`ToyModel`] whose weights already went through a policy's rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub policy: PrecisionPolicy,
    spec: MoeLayerSpec,
    mode: RoutingMode,
    router: Matrix,
    bank: ExpertBank,
    head: Matrix,
}

impl QuantizedModel {
    /// Pre-softmax logits for one token.
    ///
    /// Input, router softmax and MoE output are rounded to the non-expert
    /// format; the head matmul output to the head format.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let non_expert = self.policy.non_expert;
        let x = non_expert.round_activation(x.to_vec());
        let z = non_expert.round_activation(self.router.matvec(&x)?);
        let probs = non_expert.round_activation(routing::probs_from_logits(&z, 1.0)?);
        let selected = routing::select(&probs, &self.spec, self.mode)?;
        let gates = routing::gate_weights(&probs, &selected)?;
        let decision = routing::RoutingDecision { logits: z, probs, selected, gates };
        let y = non_expert.round_activation(routing::moe_forward(&x, &self.bank, &decision)?);
        Ok(self.policy.lm_head.round_activation(self.head.matvec(&y)?))
    }
}

/// MoE forward plus LM head under `policy`; returns pre-softmax logits.
pub fn mixed_forward(x: &[f64], model: &ToyModel, policy: &PrecisionPolicy) -> Result<Vec<f64>> {
    model.quantized(policy)?.logits(x)
}

/// One CSV row of `precision-sweep`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionRow {
    pub policy: String,
    pub seed: u64,
    pub kl_k1: f64,
    pub max_abs_logit_diff: f64,
}

pub const PRECISION_CSV_HEADER: &str = "policy,seed,kl_k1,max_abs_logit_diff";

impl PrecisionRow {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{},{},{},{}", self.policy, self.seed, self.kl_k1, self.max_abs_logit_diff)
    }
}
