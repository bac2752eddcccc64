//! Shared fixtures for the benchmarks.

use kpirl::costs::DemoTarget;
use kpirl::dynamics::{DynamicsModel, MlpParams};
use kpirl::harness::experiment::reaching_demos;
use kpirl::sim::Simulator;

pub const HORIZON: usize = 25;

/// One reaching demo from seed 0 at the full horizon.
pub fn reaching_target() -> DemoTarget {
    let sim = Simulator::default();
    let demo = reaching_demos(&sim, 0, 1, HORIZON).expect("feasible reaching demo");
    DemoTarget::from_demo(&demo[0])
}

pub fn ground_truth() -> DynamicsModel {
    DynamicsModel::GroundTruth(Simulator::default())
}

/// Untrained MLP; same cost per step as a trained one.
pub fn mlp() -> DynamicsModel {
    DynamicsModel::Learned(MlpParams::init(Simulator::default().k(), 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_match_the_reaching_layout() {
        let t = reaching_target();
        assert_eq!(t.horizon(), HORIZON);
        assert_eq!(mlp().k(), t.k());
        assert_eq!(ground_truth().k(), t.k());
    }
}
