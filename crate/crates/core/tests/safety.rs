//! Closed-loop safety of the QP filter, independent of what the network learned.

use std::sync::Arc;

use livenet_core::policy::{ControllerConfig, EncodingConfig, LiveNetController, NetworkParams, NetworkShape};
use livenet_core::sim::{build_scenario, jittered, run_episode, Controller, ScenarioKind};
use livenet_core::KinodynamicLimits;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Any parameters, any jittered start: if every QP was solved without
    /// relaxation, the obstacle barrier never went negative.
    #[test]
    fn untrained_policy_is_forward_invariant(param_seed in 0u64..1000, start_seed in 0u64..1000, doorway in any::<bool>()) {
        let limits = KinodynamicLimits::default();
        let enc = EncodingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed);
        let params = Arc::new(NetworkParams::init(NetworkShape::new(enc.input_dim()), &limits, 1.0, 1.0, &mut rng));
        let kind = if doorway { ScenarioKind::Doorway } else { ScenarioKind::Intersection };
        let mut spec = jittered(&build_scenario(kind, None).unwrap(), start_seed, 0.05);
        spec.horizon = 8.0;
        let config = ControllerConfig::default();
        let mut cs: Vec<Box<dyn Controller>> =
            (0..2).map(|_| Box::new(LiveNetController::new(params.clone(), config)) as Box<dyn Controller>).collect();
        let log = run_episode(&spec, &mut cs).unwrap();
        if log.all_optimal() {
            prop_assert!(log.min_barrier() >= -1e-9, "min barrier {}", log.min_barrier());
        }
    }
}
