//! Expert expansion: grow a trained `N`-expert layer to `r·N` experts by copying,
//! choosing which originals seed each routing group.

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};
use crate::routing::{self, ExpertBank, MoeLayerSpec, RoutingMode};

/// Default router-row noise, relative to the copied row's norm.
pub const DEFAULT_ROUTER_NOISE: f64 = 1e-3;

/// How often each expert ranked first and second over a calibration batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationStats {
    pub rank1: Vec<u64>,
    /// Only tallied when `K >= 2`.
    pub rank2: Vec<u64>,
    pub total_tokens: u64,
}

impl ActivationStats {
    pub fn num_experts(&self) -> usize {
        self.rank1.len()
    }

    /// Experts ordered by rank-1 count, then rank-2 count, then index.
    pub fn frequency_ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.rank1.len()).collect();
        order.sort_by(|&a, &b| {
            self.rank1[b]
                .cmp(&self.rank1[a])
                .then(self.rank2[b].cmp(&self.rank2[a]))
                .then(a.cmp(&b))
        });
        order
    }
}

/// Tallies rank-1 and rank-2 appearances under plain top-`k` routing.
pub fn activation_stats(batch: &Matrix, w_r: &Matrix, k: usize) -> Result<ActivationStats> {
    if batch.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if k == 0 || k > w_r.rows() {
        return Err(Error::TooManySelected { k, n: w_r.rows() });
    }
    let n = w_r.rows();
    let mut rank1 = vec![0u64; n];
    let mut rank2 = vec![0u64; n];
    for t in 0..batch.rows() {
        let p = routing::router_probs(batch.row(t), w_r, 1.0)?;
        let ranked = routing::ranked_topk(&p, k)?;
        rank1[ranked[0]] += 1;
        if let Some(&second) = ranked.get(1) {
            rank2[second] += 1;
        }
    }
    Ok(ActivationStats { rank1, rank2, total_tokens: batch.rows() as u64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExpansionStrategy {
    /// Every group gets copies of the globally most frequent top-1/top-2 experts.
    GroupedTop,
    /// Group `g` is filled with copies of the `g`-th most frequent expert.
    Differentiated,
}

impl ExpansionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpansionStrategy::GroupedTop => "grouped_top",
            ExpansionStrategy::Differentiated => "differentiated",
        }
    }
}

impl std::str::FromStr for ExpansionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grouped_top" | "grouped-top" => Ok(Self::GroupedTop),
            "differentiated" => Ok(Self::Differentiated),
            other => Err(Error::InvalidConfig(format!("unknown expansion strategy `{other}`"))),
        }
    }
}

/// Source expert for every slot of the expanded layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansionPlan {
    pub factor: usize,
    pub num_groups: usize,
    pub strategy: ExpansionStrategy,
    pub source_experts: usize,
    /// `mapping[e']` is the original expert copied into new slot `e'`.
    pub mapping: Vec<usize>,
}

impl ExpansionPlan {
    pub fn new_experts(&self) -> usize {
        self.mapping.len()
    }

    pub fn group_size(&self) -> usize {
        self.mapping.len() / self.num_groups
    }

    /// Source experts of group `g`.
    pub fn group(&self, g: usize) -> &[usize] {
        let b = self.group_size();
        &self.mapping[g * b..(g + 1) * b]
    }
}

pub fn plan_expansion(
    stats: &ActivationStats,
    factor: usize,
    num_groups: usize,
    strategy: ExpansionStrategy,
) -> Result<ExpansionPlan> {
    let n = stats.num_experts();
    if n == 0 || factor == 0 || num_groups == 0 {
        return Err(Error::InvalidConfig("expansion needs N, r, G >= 1".into()));
    }
    let total = factor * n;
    if !total.is_multiple_of(num_groups) {
        return Err(Error::InvalidConfig(format!(
            "G={num_groups} does not divide r*N={total}"
        )));
    }
    let block = total / num_groups;
    let ranking = stats.frequency_ranking();

    let mut mapping = Vec::with_capacity(total);
    match strategy {
        ExpansionStrategy::GroupedTop => {
            let seeds = &ranking[..2.min(block).min(n)];
            let rest = if ranking.len() > seeds.len() { &ranking[seeds.len()..] } else { seeds };
            let mut cursor = 0;
            for _ in 0..num_groups {
                let mut group: Vec<usize> = seeds.to_vec();
                while group.len() < block {
                    group.push(rest[cursor % rest.len()]);
                    cursor += 1;
                }
                group.sort_unstable();
                mapping.extend(group);
            }
        }
        ExpansionStrategy::Differentiated => {
            for g in 0..num_groups {
                mapping.extend(std::iter::repeat_n(ranking[g % n], block));
            }
        }
    }
    Ok(ExpansionPlan { factor, num_groups, strategy, source_experts: n, mapping })
}

/// Copies experts per `plan` and perturbs each copied router row by Gaussian
/// noise of norm about `noise · ‖row‖`. With `noise == 0` the result is an
/// exact copy and `rng` is left untouched.
pub fn expand_layer(
    bank: &ExpertBank,
    w_r: &Matrix,
    plan: &ExpansionPlan,
    noise: f64,
    rng: &mut Rng,
) -> Result<(ExpertBank, Matrix)> {
    if bank.len() != plan.source_experts || w_r.rows() != plan.source_experts {
        return Err(Error::Shape(format!(
            "plan expects {} experts, bank has {} and router has {} rows",
            plan.source_experts,
            bank.len(),
            w_r.rows()
        )));
    }
    if w_r.cols() != bank.model_dim() {
        return Err(Error::Shape("router width differs from expert width".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise must be non-negative, got {noise}")));
    }
    let d = w_r.cols();
    let experts = plan.mapping.iter().map(|&src| bank.expert(src).clone()).collect();
    let mut router = Matrix::zeros(plan.mapping.len(), d);
    for (row, &src) in plan.mapping.iter().enumerate() {
        router.row_mut(row).copy_from_slice(w_r.row(src));
        if noise > 0.0 {
            let sigma = noise * w_r.row_norm(src) / (d as f64).sqrt();
            for v in router.row_mut(row) {
                *v += sigma * rng.next_gaussian();
            }
        }
    }
    Ok((ExpertBank::new(experts)?, router))
}

/// Fraction of tokens whose expanded-layer selection (top-`k_per_group` inside
/// each of the plan's groups) maps back into the token's original top-`k` set.
pub fn selection_consistency(
    batch: &Matrix,
    original_router: &Matrix,
    k: usize,
    plan: &ExpansionPlan,
    expanded_router: &Matrix,
    k_per_group: usize,
) -> Result<f64> {
    if batch.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let expanded = MoeLayerSpec::new(
        plan.new_experts(),
        k_per_group * plan.num_groups,
        plan.num_groups,
        expanded_router.cols(),
        1,
        1.0,
    )?;
    let mut consistent = 0usize;
    for t in 0..batch.rows() {
        let x = batch.row(t);
        let before = routing::topk_select(&routing::router_probs(x, original_router, 1.0)?, k)?;
        let after = routing::route(x, expanded_router, &expanded, RoutingMode::Grouped)?;
        if after.selected.iter().all(|&e| before.binary_search(&plan.mapping[e]).is_ok()) {
            consistent += 1;
        }
    }
    Ok(consistent as f64 / batch.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_with_ranking(order: &[usize]) -> ActivationStats {
        let n = order.len();
        let mut rank1 = vec![0; n];
        for (pos, &e) in order.iter().enumerate() {
            rank1[e] = (n - pos) as u64 * 10;
        }
        let total = rank1.iter().sum();
        ActivationStats { rank1, rank2: vec![0; n], total_tokens: total }
    }

    #[test]
    fn dominant_router_row() {
        let mut rng = Rng::new(5);
        let batch = Matrix::from_fn(50, 3, |_, _| rng.uniform_range(0.5, 1.0));
        let w_r = Matrix::from_rows(&[vec![0.0; 3], vec![10.0; 3], vec![-1.0; 3]]).unwrap();
        let stats = activation_stats(&batch, &w_r, 2).unwrap();
        assert_eq!(stats.rank1, vec![0, 50, 0]);
        assert_eq!(stats.rank2, vec![50, 0, 0]);
        assert_eq!(stats.frequency_ranking(), vec![1, 0, 2]);
    }

    #[test]
    fn empty_batch_rejected() {
        let err = activation_stats(&Matrix::zeros(0, 3), &Matrix::zeros(2, 3), 1).unwrap_err();
        assert!(matches!(err, Error::EmptyBatch));
    }

    #[test]
    fn identity_plan() {
        let stats = stats_with_ranking(&[4, 2, 0, 1, 3]);
        let plan = plan_expansion(&stats, 1, 1, ExpansionStrategy::GroupedTop).unwrap();
        assert_eq!(plan.mapping, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn grouped_top_every_group_has_leader() {
        let stats = stats_with_ranking(&[3, 5, 0, 1, 2, 4, 6, 7]);
        let plan = plan_expansion(&stats, 4, 8, ExpansionStrategy::GroupedTop).unwrap();
        assert_eq!(plan.new_experts(), 32);
        for g in 0..8 {
            assert!(plan.group(g).contains(&3), "group {g}: {:?}", plan.group(g));
            assert!(plan.group(g).contains(&5));
        }
        // The six remaining experts are all still represented somewhere.
        for e in [0, 1, 2, 4, 6, 7] {
            assert!(plan.mapping.contains(&e));
        }
    }

    #[test]
    fn differentiated_one_family_per_group() {
        let order = [3, 5, 0, 1, 2, 4, 6, 7];
        let stats = stats_with_ranking(&order);
        let plan = plan_expansion(&stats, 4, 8, ExpansionStrategy::Differentiated).unwrap();
        for (g, &expected) in order.iter().enumerate() {
            assert!(plan.group(g).iter().all(|&e| e == expected));
        }
    }

    #[test]
    fn bad_divisibility() {
        let stats = stats_with_ranking(&[0, 1, 2]);
        assert!(plan_expansion(&stats, 1, 2, ExpansionStrategy::GroupedTop).is_err());
    }

    #[test]
    fn zero_noise_identity_expansion_is_bit_identical() {
        let mut rng = Rng::new(11);
        let bank = ExpertBank::random(4, 3, 5, &mut rng);
        let w_r = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let stats = stats_with_ranking(&[2, 0, 1, 3]);
        let plan = plan_expansion(&stats, 1, 1, ExpansionStrategy::GroupedTop).unwrap();
        let (bank2, w_r2) = expand_layer(&bank, &w_r, &plan, 0.0, &mut rng).unwrap();
        assert_eq!(bank2, bank);
        assert_eq!(w_r2, w_r);
    }

    #[test]
    fn noise_breaks_router_ties() {
        let mut rng = Rng::new(12);
        let bank = ExpertBank::random(2, 4, 4, &mut rng);
        let w_r = Matrix::gaussian(2, 4, 1.0, &mut rng);
        let stats = stats_with_ranking(&[0, 1]);
        let plan = plan_expansion(&stats, 2, 1, ExpansionStrategy::GroupedTop).unwrap();
        let (_, w_r2) = expand_layer(&bank, &w_r, &plan, DEFAULT_ROUTER_NOISE, &mut rng).unwrap();
        assert_eq!(plan.mapping, vec![0, 0, 1, 1]);
        assert_ne!(w_r2.row(0), w_r2.row(1));
        let rel = (0..4).map(|c| (w_r2.get(0, c) - w_r.get(0, c)).abs()).sum::<f64>() / w_r.row_norm(0);
        assert!(rel > 0.0 && rel < 1e-2, "{rel}");
    }
}
