//! Fixtures shared by the criterion benches.

use specdiff_core::{desk_schedule, GmmTarget, MlpNet, NoiseSchedule};

pub fn gmm_2d() -> GmmTarget {
    GmmTarget::desk_default()
}

pub fn schedule() -> NoiseSchedule {
    desk_schedule()
}

/// Untrained target/drafter pair with the experiment shapes. Speed does not
/// depend on the weights, except through acceptance in the sampling benches.
pub fn mlp_pair(steps: usize) -> (MlpNet, MlpNet) {
    let target = MlpNet::new(2, 0, &[64, 64], steps, 1).expect("valid net");
    let drafter = MlpNet::new(2, 64, &[64], steps, 2).expect("valid net");
    (target, drafter)
}
