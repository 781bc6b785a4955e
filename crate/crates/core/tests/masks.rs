use mc2_core::masks::{propose_masks, MaskProposalConfig};
use mc2_core::numerics::Map2D;
use proptest::prelude::*;

mod oracles;
use oracles::brute_masks;

fn pair(h: usize, w: usize) -> impl Strategy<Value = (Map2D, Map2D)> {
    let n = h * w;
    (
        proptest::collection::vec(0.0f64..1.0, n),
        proptest::collection::vec(0.0f64..1.0, n),
    )
        .prop_map(move |(a, b)| (Map2D::new(h, w, a).unwrap(), Map2D::new(h, w, b).unwrap()))
}

fn disjoint(a: &Map2D, b: &Map2D) -> bool {
    a.values().iter().zip(b.values()).all(|(x, y)| !(*x > 0.0 && *y > 0.0))
}

#[test]
fn left_right_split_matches_transcription() {
    let a1 = Map2D::from_fn(8, 8, |_, x| if x < 4 { 0.9 - 0.1 * x as f64 } else { 0.05 }).unwrap();
    let a2 = Map2D::from_fn(8, 8, |_, x| if x >= 4 { 0.2 + 0.1 * x as f64 } else { 0.05 }).unwrap();
    let cfg = MaskProposalConfig::default();
    let p = propose_masks(&a1, &a2, &cfg).unwrap();
    let (hard, soft) = brute_masks(&a1, &a2, &cfg);
    assert_eq!(p.hard, hard);
    assert_eq!(p.masks, soft);
    assert!(disjoint(&p.hard[0], &p.hard[1]));
    for y in 0..8 {
        assert!(p.hard[0].is_set(y, 0) && !p.hard[0].is_set(y, 7));
        assert!(p.hard[1].is_set(y, 7) && !p.hard[1].is_set(y, 0));
    }
    assert!(p.diagnostics.is_empty());
}

#[test]
fn identical_maps_are_a_degenerate_tie() {
    let a = Map2D::from_fn(8, 8, |y, x| ((y * 3 + x * 5) % 7) as f64).unwrap();
    let p = propose_masks(&a, &a, &MaskProposalConfig::default()).unwrap();
    assert!(p.masks.iter().chain(&p.hard).all(|m| m.count_set() == 0));
    assert!(p.diagnostics.iter().any(|d| d.contains("degenerate tie")));
}

#[test]
fn one_sided_domination() {
    let a1 = Map2D::from_fn(10, 10, |y, x| if (3..6).contains(&y) && (3..6).contains(&x) { 1.0 } else { 0.2 }).unwrap();
    let cfg = MaskProposalConfig::default();
    let p = propose_masks(&a1, &Map2D::zeros(10, 10), &cfg).unwrap();
    assert_eq!(p.hard[1].count_set(), 0);
    assert_eq!(p.masks[1].count_set(), 0);
    // every pixel where the rescaled first map beats zero is positive, so
    // the first mask is that region grown by the ring
    let (hard, _) = brute_masks(&a1, &Map2D::zeros(10, 10), &cfg);
    assert_eq!(p.hard[0], hard[0]);
    assert!(p.hard[0].count_set() >= 9);
}

proptest! {
    #[test]
    fn matches_transcription_and_stays_disjoint((a1, a2) in pair(12, 12)) {
        let cfg = MaskProposalConfig::default();
        let p = propose_masks(&a1, &a2, &cfg).unwrap();
        let (hard, soft) = brute_masks(&a1, &a2, &cfg);
        prop_assert!(disjoint(&p.hard[0], &p.hard[1]));
        prop_assert_eq!(&p.hard, &hard);
        prop_assert_eq!(&p.masks, &soft);
        prop_assert!(p.masks.iter().all(|m| m.max() <= 1.0 + 1e-12));
    }

    #[test]
    fn assigned_region_is_the_dilated_core((a1, a2) in pair(10, 9), r in 1usize..4) {
        let cfg = MaskProposalConfig { dilation_radius: r, ..Default::default() };
        let p = propose_masks(&a1, &a2, &cfg).unwrap();
        prop_assume!(p.counts.binarized != [0, 0]);
        let (h, w) = a1.dims();
        let union = Map2D::from_mask(h, w, |y, x| p.hard[0].is_set(y, x) || p.hard[1].is_set(y, x));
        prop_assert_eq!(union.count_set(), p.counts.binarized[0] + p.counts.binarized[1] + p.counts.ring);
    }

    #[test]
    fn swapping_inputs_swaps_masks((a1, a2) in pair(9, 11)) {
        let cfg = MaskProposalConfig::default();
        let p = propose_masks(&a1, &a2, &cfg).unwrap();
        let q = propose_masks(&a2, &a1, &cfg).unwrap();
        prop_assert_eq!(p.counts.binarized, [q.counts.binarized[1], q.counts.binarized[0]]);
        let (h, w) = a1.dims();
        for y in 0..h {
            for x in 0..w {
                let tie = p.hard[0].is_set(y, x) && q.hard[0].is_set(y, x);
                if !tie {
                    prop_assert_eq!(p.hard[0].is_set(y, x), q.hard[1].is_set(y, x));
                    prop_assert_eq!(p.hard[1].is_set(y, x), q.hard[0].is_set(y, x));
                }
            }
        }
    }
}
