//! Top-K and grouped MoE routing, the gated expert forward pass, and the
//! straight-through routing weight with its backward rule.
//!
//! Selection always runs on `softmax(z)` at unit temperature. The temperature
//! `tau` only shapes the surrogate distribution `softmax(z / tau)` that the
//! straight-through backward pass differentiates.

use crate::error::{Error, Result};
use crate::numeric::{self, Matrix, Rng};

/// How a token's active expert set is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoutingMode {
    /// Global top-K over all experts.
    PlainTopK,
    /// Top-(K/G) inside each of G contiguous expert blocks, then the union.
    Grouped,
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::PlainTopK => "plain_topk",
            RoutingMode::Grouped => "grouped",
        }
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain_topk" | "plain-topk" | "topk" | "plain" => Ok(RoutingMode::PlainTopK),
            "grouped" => Ok(RoutingMode::Grouped),
            other => Err(Error::InvalidConfig(format!("unknown routing mode `{other}`"))),
        }
    }
}

/// Dimensions of one MoE layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoeLayerSpec {
    pub num_experts: usize,
    pub active_k: usize,
    pub num_groups: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub temperature: f64,
}

impl MoeLayerSpec {
    pub fn new(
        num_experts: usize,
        active_k: usize,
        num_groups: usize,
        model_dim: usize,
        hidden_dim: usize,
        temperature: f64,
    ) -> Result<Self> {
        let spec = Self { num_experts, active_k, num_groups, model_dim, hidden_dim, temperature };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { num_experts: n, active_k: k, num_groups: g, .. } = *self;
        if k == 0 || k > n {
            return Err(Error::InvalidConfig(format!("need 1 <= K <= N, got K={k}, N={n}")));
        }
        if g == 0 || n % g != 0 || k % g != 0 {
            return Err(Error::InvalidConfig(format!(
                "group count G={g} must divide both N={n} and K={k}"
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn experts_per_group(&self) -> usize {
        self.num_experts / self.num_groups
    }

    pub fn k_per_group(&self) -> usize {
        self.active_k / self.num_groups
    }
}

/// One expert FFN: `w_out · relu(w_in · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// `hidden × d`
    pub w_in: Matrix,
    /// `d × hidden`
    pub w_out: Matrix,
}

impl Expert {
    pub fn new(w_in: Matrix, w_out: Matrix) -> Result<Self> {
        if w_in.rows() != w_out.cols() || w_in.cols() != w_out.rows() {
            return Err(Error::Shape(format!(
                "expert w_in {}x{} incompatible with w_out {}x{}",
                w_in.rows(),
                w_in.cols(),
                w_out.rows(),
                w_out.cols()
            )));
        }
        Ok(Self { w_in, w_out })
    }

    /// Expert computing `scale · x` exactly, built as
    /// `scale·[I, −I] · relu([I; −I] · x)` with hidden width `2d`.
    pub fn scaled_identity(d: usize, scale: f64) -> Self {
        let w_in = Matrix::from_fn(2 * d, d, |r, c| {
            if r == c {
                1.0
            } else if r == c + d {
                -1.0
            } else {
                0.0
            }
        });
        let w_out = Matrix::from_fn(d, 2 * d, |r, c| {
            if c == r {
                scale
            } else if c == r + d {
                -scale
            } else {
                0.0
            }
        });
        Self { w_in, w_out }
    }

    pub fn model_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w_in.data().len() + self.w_out.data().len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h: Vec<f64> = self.w_in.matvec(x)?.into_iter().map(|v| v.max(0.0)).collect();
        self.w_out.matvec(&h)
    }
}

/// The `N` expert FFNs of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    experts: Vec<Expert>,
}

impl ExpertBank {
    pub fn new(experts: Vec<Expert>) -> Result<Self> {
        let first = experts.first().ok_or_else(|| Error::Shape("expert bank is empty".into()))?;
        let (d, h) = (first.model_dim(), first.hidden_dim());
        if let Some(i) = experts.iter().position(|e| e.model_dim() != d || e.hidden_dim() != h) {
            return Err(Error::Shape(format!("expert {i} differs in shape from expert 0")));
        }
        Ok(Self { experts })
    }

    /// Random bank with `N(0, 1/fan_in)` weights.
    pub fn random(num_experts: usize, model_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        let experts = (0..num_experts)
            .map(|_| Expert {
                w_in: Matrix::gaussian(hidden_dim, model_dim, (model_dim as f64).recip().sqrt(), rng),
                w_out: Matrix::gaussian(model_dim, hidden_dim, (hidden_dim as f64).recip().sqrt(), rng),
            })
            .collect();
        Self { experts }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn expert(&self, i: usize) -> &Expert {
        &self.experts[i]
    }

    pub fn model_dim(&self) -> usize {
        self.experts[0].model_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.experts[0].hidden_dim()
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(Expert::param_count).sum()
    }

    /// Checks the bank against a layer spec.
    pub fn check_spec(&self, spec: &MoeLayerSpec) -> Result<()> {
        if self.len() != spec.num_experts
            || self.model_dim() != spec.model_dim
            || self.hidden_dim() != spec.hidden_dim
        {
            return Err(Error::Shape(format!(
                "bank has {} experts of {}->{}, spec wants {} of {}->{}",
                self.len(),
                self.model_dim(),
                self.hidden_dim(),
                spec.num_experts,
                spec.model_dim,
                spec.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Result of routing one token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Selected experts, ascending.
    pub selected: Vec<usize>,
    /// Gate weights aligned with `selected`.
    pub gates: Vec<f64>,
}

/// `softmax((W_r x) / tau)`.
pub fn router_probs(x: &[f64], w_r: &Matrix, tau: f64) -> Result<Vec<f64>> {
    let z = w_r.matvec(x)?;
    probs_from_logits(&z, tau)
}

/// Temperature softmax with finiteness and `tau` checks.
pub fn probs_from_logits(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    if let Some(expert) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogit { expert });
    }
    Ok(numeric::softmax(z, tau))
}

/// Indices of the `k` largest entries in descending order of value.
/// Ties go to the lower index.
pub fn ranked_topk(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > p.len() {
        return Err(Error::TooManySelected { k, n: p.len() });
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Indices of the `k` largest probabilities, ascending. Ties go to the lower index.
pub fn topk_select(p: &[f64], k: usize) -> Result<Vec<usize>> {
    let mut s = ranked_topk(p, k)?;
    s.sort_unstable();
    Ok(s)
}

/// Union of per-group top-(K/G) selections over contiguous expert blocks.
pub fn grouped_select(p: &[f64], spec: &MoeLayerSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    if p.len() != spec.num_experts {
        return Err(Error::Shape(format!(
            "{} probabilities for {} experts",
            p.len(),
            spec.num_experts
        )));
    }
    let block = spec.experts_per_group();
    let per_group = spec.k_per_group();
    let mut selected = Vec::with_capacity(spec.active_k);
    for (g, chunk) in p.chunks(block).enumerate() {
        selected.extend(topk_select(chunk, per_group)?.into_iter().map(|i| g * block + i));
    }
    Ok(selected)
}

/// Dispatches to [`topk_select`] or [`grouped_select`].
pub fn select(p: &[f64], spec: &MoeLayerSpec, mode: RoutingMode) -> Result<Vec<usize>> {
    match mode {
        RoutingMode::PlainTopK => topk_select(p, spec.active_k),
        RoutingMode::Grouped => grouped_select(p, spec),
    }
}

/// `p_i / Σ_{j∈S} p_j` for `i ∈ S`.
pub fn gate_weights(p: &[f64], selected: &[usize]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::InvalidConfig("empty selection".into()));
    }
    if let Some(&i) = selected.iter().find(|&&i| i >= p.len()) {
        return Err(Error::Shape(format!("selected index {i} out of range for {} experts", p.len())));
    }
    let mass: f64 = selected.iter().map(|&i| p[i]).sum();
    if !(mass > 0.0) {
        return Err(Error::ZeroGateMass);
    }
    Ok(selected.iter().map(|&i| p[i] / mass).collect())
}

/// Routes `x` through `w_r`: selection on unit-temperature probabilities.
pub fn route(x: &[f64], w_r: &Matrix, spec: &MoeLayerSpec, mode: RoutingMode) -> Result<RoutingDecision> {
    let logits = w_r.matvec(x)?;
    decide(logits, spec, mode)
}

/// Builds a decision from precomputed logits.
pub fn decide(logits: Vec<f64>, spec: &MoeLayerSpec, mode: RoutingMode) -> Result<RoutingDecision> {
    if logits.len() != spec.num_experts {
        return Err(Error::Shape(format!(
            "{} logits for {} experts",
            logits.len(),
            spec.num_experts
        )));
    }
    let probs = probs_from_logits(&logits, 1.0)?;
    let selected = select(&probs, spec, mode)?;
    let gates = gate_weights(&probs, &selected)?;
    Ok(RoutingDecision { logits, probs, selected, gates })
}

/// `y = Σ_{i∈S} gate_i · E_i(x)`.
pub fn moe_forward(x: &[f64], bank: &ExpertBank, decision: &RoutingDecision) -> Result<Vec<f64>> {
    if decision.selected.len() != decision.gates.len() {
        return Err(Error::Shape("gates not aligned with selection".into()));
    }
    if x.len() != bank.model_dim() {
        return Err(Error::Shape(format!(
            "token of width {} for experts of width {}",
            x.len(),
            bank.model_dim()
        )));
    }
    let mut y = vec![0.0; x.len()];
    for (&i, &g) in decision.selected.iter().zip(&decision.gates) {
        if i >= bank.len() {
            return Err(Error::Shape(format!("expert {i} not in bank of {}", bank.len())));
        }
        for (acc, e) in y.iter_mut().zip(bank.expert(i).forward(x)?) {
            *acc += g * e;
        }
    }
    Ok(y)
}

/// Forward value of the straight-through gate.
///
/// The stop-gradient terms cancel in value, so this is the renormalized
/// selection of `softmax(z)`; `tau` is validated but does not enter.
pub fn ste_gate_value(z: &[f64], selected: &[usize], tau: f64) -> Result<Vec<f64>> {
    probs_from_logits(z, tau)?;
    let p = probs_from_logits(z, 1.0)?;
    gate_weights(&p, selected)
}

/// `dL/dz_j = Σ_{i∈S} upstream_i · ∂p^τ_i/∂z_j` with
/// `∂p^τ_i/∂z_j = p^τ_i (δ_ij − p^τ_j) / τ`.
///
/// No renormalization over `S` enters the backward path, so unselected experts
/// get gradient too.
pub fn ste_backward(upstream: &[f64], z: &[f64], selected: &[usize], tau: f64) -> Result<Vec<f64>> {
    if upstream.len() != selected.len() {
        return Err(Error::Shape(format!(
            "{} upstream gradients for {} selected experts",
            upstream.len(),
            selected.len()
        )));
    }
    if let Some(&i) = selected.iter().find(|&&i| i >= z.len()) {
        return Err(Error::Shape(format!("selected index {i} out of range for {} experts", z.len())));
    }
    let p = probs_from_logits(z, tau)?;
    let mut u = vec![0.0; z.len()];
    for (&i, &g) in selected.iter().zip(upstream) {
        u[i] += g;
    }
    let weighted: f64 = u.iter().zip(&p).map(|(a, b)| a * b).sum();
    Ok(p.iter().zip(&u).map(|(&pj, &uj)| pj * (uj - weighted) / tau).collect())
}
