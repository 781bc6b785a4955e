use mc2_core::denoiser::{AdapterKind, Vocabulary};
use mc2_core::grounding::{grounding_l1, grounding_l2, heldout_mse, train_concept, TrainConfig};
use mc2_core::harness::{
    build_scene_dataset, build_world, concept_by_name, run_grounding_trial, GroundingTrialConfig,
    WorldConfig,
};
use mc2_core::numerics::Map2D;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probs(h: usize, w: usize) -> impl Strategy<Value = Map2D> {
    proptest::collection::vec(0.01f64..0.99, h * w).prop_map(move |v| Map2D::new(h, w, v).unwrap())
}

fn binary(h: usize, w: usize) -> impl Strategy<Value = Map2D> {
    proptest::collection::vec(any::<bool>(), h * w)
        .prop_map(move |b| Map2D::from_mask(h, w, |y, x| b[y * w + x]))
}

#[test]
fn l1_examples() {
    let a = Map2D::filled(2, 2, 0.25);
    assert!(grounding_l1(&[a.clone()], &[Map2D::filled(2, 2, 1.0)], 1e-12).unwrap().abs() < 1e-9);
    let half = Map2D::from_mask(2, 2, |_, x| x == 0);
    assert!((grounding_l1(&[a], &[half], 1e-12).unwrap() - 0.5).abs() < 1e-9);
    let spot = Map2D::from_mask(2, 2, |y, x| y == 0 && x == 0);
    let other = Map2D::from_mask(2, 2, |y, x| y == 1 && x == 1);
    assert!((grounding_l1(&[spot], &[other], 1e-12).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn l2_examples() {
    let eps = 1e-6;
    let v = grounding_l2(&[Map2D::filled(1, 1, 0.5)], &[Map2D::filled(1, 1, 1.0)], eps).unwrap();
    assert!((v - 2f64.ln()).abs() < 1e-12);
    let m = Map2D::from_mask(3, 3, |y, x| (y + x) % 2 == 0);
    let matched = grounding_l2(&[m.clone()], &[m.clone()], eps).unwrap();
    assert!((matched + (1.0 - eps).ln()).abs() < 1e-12);
    let flipped = Map2D::from_mask(3, 3, |y, x| (y + x) % 2 == 1);
    let worst = grounding_l2(&[flipped], &[m], eps).unwrap();
    assert!((worst + eps.ln()).abs() < 1e-9);
    assert!(grounding_l2(&[Map2D::zeros(2, 2)], &[Map2D::zeros(3, 3)], eps).is_err());
}

fn world_setup(count: usize, seed: u64) -> (mc2_core::denoiser::DenoiserParams, Vec<mc2_core::grounding::GroundedSample>, Vec<mc2_core::grounding::GroundedSample>, mc2_core::denoiser::TokenId) {
    let vocab = Vocabulary::standard();
    let params = build_world(&vocab, &WorldConfig::default()).unwrap();
    let spec = concept_by_name("red_disc").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = build_scene_dataset(&vocab, &spec, count, 16, 16, &mut rng).unwrap();
    let held = build_scene_dataset(&vocab, &spec, count, 16, 16, &mut rng).unwrap();
    (params, train, held, vocab.id(&spec.trigger).unwrap())
}

#[test]
fn zero_step_budget_gives_a_neutral_adapter() {
    let (params, train, _, trigger) = world_setup(2, 0);
    let cfg = TrainConfig { steps: 0, ..Default::default() };
    let report = train_concept(&params, &train, trigger, &cfg).unwrap();
    assert!(report.adapter.is_zero_effect());
    assert!(report.curve.is_empty());
}

#[test]
fn diffusion_only_training_beats_the_untrained_model() {
    let (params, train, held, trigger) = world_setup(8, 1);
    let before = params.clone();
    let cfg = TrainConfig {
        steps: 150,
        batch: 4,
        learning_rate: 0.02,
        gamma1: 0.0,
        gamma2: 0.0,
        kind: AdapterKind::EmbeddingOffset,
        seed: 1,
        ..Default::default()
    };
    let report = train_concept(&params, &train, trigger, &cfg).unwrap();
    assert_eq!(params, before);
    let range = (0, 1000);
    let base = heldout_mse(&params, None, &held, range, 8, 7).unwrap();
    let trained = heldout_mse(&params, Some(&report.adapter), &held, range, 8, 7).unwrap();
    assert!(trained <= 0.7 * base, "trained {trained} vs untrained {base}");

    let again = train_concept(&params, &train, trigger, &cfg).unwrap();
    assert_eq!(report.adapter, again.adapter);
}

#[test]
fn grounding_raises_in_mask_mass_on_a_paired_run() {
    let trial = run_grounding_trial(&WorldConfig::default(), &GroundingTrialConfig::default(), 3).unwrap();
    assert!(trial.improved(), "{trial:?}");
}

proptest! {
    #[test]
    fn l1_is_scale_invariant(a in probs(4, 4), m in binary(4, 4), c in 0.1f64..10.0) {
        let l = grounding_l1(&[a.clone()], &[m.clone()], 0.0).unwrap();
        let scaled = grounding_l1(&[a.scale(c).unwrap()], &[m], 0.0).unwrap();
        prop_assert!((l - scaled).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn l2_falls_along_the_path_to_the_mask(a in probs(4, 4), m in binary(4, 4)) {
        let at = |u: f64| {
            let v = a.values().iter().zip(m.values()).map(|(x, y)| (1.0 - u) * x + u * y).collect();
            grounding_l2(&[Map2D::new(4, 4, v).unwrap()], &[m.clone()], 1e-6).unwrap()
        };
        let (l0, l5, l1) = (at(0.0), at(0.5), at(1.0));
        prop_assert!(l0 >= 0.0);
        prop_assert!(l5 < l0);
        prop_assert!(l1 < l5);
    }
}
