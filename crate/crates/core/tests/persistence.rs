mod common;

use common::*;
use proptest::prelude::*;

use spalmtl::engine::{Mode, TrainPlan, Trainer};
use spalmtl::io::{decode_checkpoint, encode_checkpoint};
use spalmtl::model::ModelConfig;
use spalmtl::tasks::TaskSpec;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>()) {
        let (model, optimizer, extra) = random_model(seed);
        let bytes = encode_checkpoint(&model, optimizer.as_ref(), extra.as_deref()).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_models_bit_equal(&model, &back.model);
        prop_assert_eq!(&extra, &back.extra);
        match (&optimizer, &back.optimizer) {
            (None, None) => {}
            (Some(a), Some(b)) => assert_optimizers_bit_equal(a, b),
            _ => prop_assert!(false, "optimizer presence differs"),
        }
        let again = encode_checkpoint(&back.model, back.optimizer.as_ref(), back.extra.as_deref()).unwrap();
        prop_assert_eq!(bytes, again);
    }
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    assert_resume_is_seamless(&[1, 13, 20]);
}

#[test]
fn resume_rejects_a_different_plan() {
    let tasks = resume_suite();
    let specs: Vec<&TaskSpec> = tasks.iter().map(|(s, _)| s).collect();
    let model = model_with_heads(ModelConfig::new(tiny_backbone(1, 4, 2, 100), Some(2), 1), &specs);
    let mut plan = TrainPlan::new(Mode::Mtl, 1);
    plan.max_steps = Some(10);
    let mut t = Trainer::new(plan.clone(), model, &tasks).unwrap();
    t.run_until(3).unwrap();
    let (m, o, s) = (t.model().clone(), t.optimizer().clone(), t.state());
    plan.temperature = 3.0;
    assert!(Trainer::resume(plan, m, o, &tasks, s).is_err());
}
