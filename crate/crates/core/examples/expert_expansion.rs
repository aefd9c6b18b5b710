//! Grows a 4-expert layer to 16 experts in 4 groups, comparing the two
//! expansion strategies by how often the expanded grouped router still picks
//! experts the original router would have chosen.

use moelab::expansion::{self, ExpansionStrategy};
use moelab::{ExpertBank, Matrix, Rng};

pub fn run_example() -> moelab::Result<Vec<(ExpansionStrategy, f64)>> {
    let mut rng = Rng::new(11);
    let (n, d, k) = (4, 8, 2);
    let bank = ExpertBank::random(n, d, 16, &mut rng);
    let router = Matrix::gaussian(n, d, 1.0, &mut rng);
    let calibration = Matrix::gaussian(512, d, 1.0, &mut rng);
    let probe = Matrix::gaussian(512, d, 1.0, &mut rng);

    let stats = expansion::activation_stats(&calibration, &router, k)?;
    println!("rank-1 counts {:?}, ranking {:?}", stats.rank1, stats.frequency_ranking());

    let mut results = Vec::new();
    for strategy in [ExpansionStrategy::GroupedTop, ExpansionStrategy::Differentiated] {
        let plan = expansion::plan_expansion(&stats, 4, 4, strategy)?;
        let (new_bank, new_router) =
            expansion::expand_layer(&bank, &router, &plan, expansion::DEFAULT_ROUTER_NOISE, &mut rng.fork(1))?;
        let rate = expansion::selection_consistency(&probe, &router, k, &plan, &new_router, 1)?;
        println!(
            "{:<14} groups {:?}  params {} -> {}  consistency {:.3}",
            strategy.as_str(),
            (0..plan.num_groups).map(|g| plan.group(g).to_vec()).collect::<Vec<_>>(),
            bank.param_count(),
            new_bank.param_count(),
            rate
        );
        results.push((strategy, rate));
    }
    Ok(results)
}

pub fn main() -> moelab::Result<()> {
    run_example().map(|_| ())
}
