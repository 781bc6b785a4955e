use mc2_core::denoiser::Vocabulary;
use mc2_core::harness::{
    build_scene_dataset, catalog, concept_by_name, evaluate_run, presence_score, render_at,
    render_concept, ConceptSpec, Placement, RunImage, BACKGROUND,
};
use mc2_core::numerics::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Disc coverage of each pixel by integrating chord lengths over rows.
fn quadrature_disc_mask(cy: f64, cx: f64, r: f64, h: usize, w: usize) -> usize {
    let rows = 4000;
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            let mut area = 0.0;
            for k in 0..rows {
                let yy = y as f64 + (k as f64 + 0.5) / rows as f64;
                let d = r * r - (yy - cy) * (yy - cy);
                if d <= 0.0 {
                    continue;
                }
                let half = d.sqrt();
                let lo = (cx - half).max(x as f64);
                let hi = (cx + half).min(x as f64 + 1.0);
                area += (hi - lo).max(0.0) / rows as f64;
            }
            if area >= 0.5 {
                count += 1;
            }
        }
    }
    count
}

fn is_blank(image: &Tensor) -> bool {
    image.data().iter().all(|v| *v == BACKGROUND)
}

fn spec(name: &str) -> ConceptSpec {
    concept_by_name(name).unwrap()
}

#[test]
fn centered_disc_mask_matches_quadrature() {
    let s = spec("red_disc");
    let p = Placement { cy: 8.0, cx: 8.0, size: 3.0 };
    let sample = render_at(&s, p, 16, 16).unwrap();
    assert_eq!(sample.mask.count_set(), quadrature_disc_mask(8.0, 8.0, 3.0, 16, 16));
    let off = Placement { cy: 6.3, cx: 9.1, size: 3.4 };
    let sample = render_at(&s, off, 16, 16).unwrap();
    assert_eq!(sample.mask.count_set(), quadrature_disc_mask(6.3, 9.1, 3.4, 16, 16));
}

#[test]
fn zero_size_blob_is_blank() {
    let s = render_at(&spec("blue_square"), Placement { cy: 4.0, cx: 4.0, size: 0.0 }, 8, 8).unwrap();
    assert_eq!(s.mask.count_set(), 0);
    assert!(is_blank(&s.image));
}

#[test]
fn out_of_frame_is_rejected() {
    let p = Placement { cy: 1.0, cx: 8.0, size: 3.0 };
    assert!(render_at(&spec("red_disc"), p, 16, 16).is_err());
}

#[test]
fn rendering_is_seed_deterministic() {
    let s = spec("green_triangle");
    let a = render_concept(&s, 16, 16, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = render_concept(&s, 16, 16, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dataset_has_nonempty_in_frame_masks_and_reproduces() {
    let vocab = Vocabulary::standard();
    for s in catalog() {
        let a = build_scene_dataset(&vocab, &s, 8, 16, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = build_scene_dataset(&vocab, &s, 8, 16, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        let trigger = vocab.id(&s.trigger).unwrap();
        for g in &a {
            let p = g.tokens.iter().position(|t| *t == trigger).unwrap();
            assert!(g.masks[p].count_set() > 0);
            assert_eq!(g.masks[p].dims(), (16, 16));
        }
    }
}

#[test]
fn presence_calibration() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for s in catalog() {
        let blank = render_at(&s, Placement { cy: 8.0, cx: 8.0, size: 0.0 }, 16, 16).unwrap();
        assert!(presence_score(&blank.image, &s).unwrap() <= 0.2, "{}", s.name);
        for _ in 0..20 {
            let r = render_concept(&s, 16, 16, &mut rng).unwrap();
            let own = presence_score(&r.image, &s).unwrap();
            assert!(own >= 0.95, "{}: {own}", s.name);
            for other in catalog().iter().filter(|o| o.shape == s.shape && o.name != s.name) {
                let cross = presence_score(&r.image, other).unwrap();
                assert!(cross < own, "{} scored as {}: {cross} vs {own}", s.name, other.name);
            }
        }
    }
}

fn runs_for(images: &[Tensor]) -> Vec<RunImage> {
    images
        .iter()
        .enumerate()
        .map(|(i, image)| RunImage {
            seed: i as u64,
            image: image.clone(),
            final_inter: Some(0.1 * i as f64),
            wall_time_s: 0.0,
        })
        .collect()
}

fn two_concept_scene(a: &ConceptSpec, b: &ConceptSpec, show: (bool, bool)) -> Tensor {
    let mut image = render_at(a, Placement { cy: 5.0, cx: 5.0, size: if show.0 { 3.0 } else { 0.0 } }, 16, 16)
        .unwrap()
        .image;
    let other = render_at(b, Placement { cy: 11.0, cx: 11.0, size: if show.1 { 3.0 } else { 0.0 } }, 16, 16)
        .unwrap()
        .image;
    for (v, o) in image.data_mut().iter_mut().zip(other.data()) {
        if *o != BACKGROUND {
            *v = *o;
        }
    }
    image
}

#[test]
fn evaluate_run_examples() {
    let (a, b) = (spec("red_disc"), spec("blue_square"));
    let specs = [a.clone(), b.clone()];
    let full: Vec<Tensor> = (0..3).map(|_| two_concept_scene(&a, &b, (true, true))).collect();
    let (_, s) = evaluate_run(&runs_for(&full), &specs, 0.6).unwrap();
    assert_eq!(s.co_occurrence_rate, 1.0);
    let blanks: Vec<Tensor> = (0..3).map(|_| two_concept_scene(&a, &b, (false, false))).collect();
    let (_, s) = evaluate_run(&runs_for(&blanks), &specs, 0.6).unwrap();
    assert_eq!(s.co_occurrence_rate, 0.0);
    let mixed = vec![
        two_concept_scene(&a, &b, (true, true)),
        two_concept_scene(&a, &b, (true, false)),
        two_concept_scene(&a, &b, (false, true)),
        two_concept_scene(&a, &b, (true, true)),
    ];
    let (scenes, s) = evaluate_run(&runs_for(&mixed), &specs, 0.6).unwrap();
    let expect = scenes.iter().filter(|m| m.presence.iter().all(|p| *p >= 0.6)).count() as f64 / 4.0;
    assert_eq!(s.co_occurrence_rate, expect);
    assert_eq!(s.co_occurrence_rate, 0.5);
    let report = s.report();
    for key in ["co_occurrence_rate", "mean_presence.red_disc", "mean_presence.blue_square", "mean_final_inter_loss"] {
        assert!(report.contains_key(key), "{key}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn presence_tolerates_small_shifts(k in 0usize..8, cy in 6.0f64..14.0, cx in 6.0f64..14.0, dy in -2.0f64..2.0, dx in -2.0f64..2.0) {
        let s = catalog()[k].clone();
        let size = 0.5 * (s.size_range.0 + s.size_range.1);
        let a = render_at(&s, Placement { cy, cx, size }, 20, 20).unwrap();
        let b = render_at(&s, Placement { cy: cy + dy, cx: cx + dx, size }, 20, 20).unwrap();
        let (sa, sb) = (presence_score(&a.image, &s).unwrap(), presence_score(&b.image, &s).unwrap());
        prop_assert!((sa - sb).abs() <= 0.05, "{} vs {}", sa, sb);
    }

    #[test]
    fn evaluate_run_ignores_image_order(shows in proptest::collection::vec((any::<bool>(), any::<bool>()), 2..6), rot in 0usize..6) {
        let (a, b) = (spec("red_disc"), spec("blue_square"));
        let specs = [a.clone(), b.clone()];
        let images: Vec<Tensor> = shows.iter().map(|s| two_concept_scene(&a, &b, *s)).collect();
        let runs = runs_for(&images);
        let mut rotated = runs.clone();
        rotated.rotate_left(rot % runs.len());
        rotated.reverse();
        let (_, s1) = evaluate_run(&runs, &specs, 0.6).unwrap();
        let (_, s2) = evaluate_run(&rotated, &specs, 0.6).unwrap();
        prop_assert_eq!(s1, s2);
    }
}
