mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use units_core::detector::connected_components;
use units_core::evalkit::{iou, match_detections};
use units_core::raster::PixelBox;

#[test]
fn components_match_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let p = rng.gen_range(0.1..0.7);
        let map = common::random_map(&mut rng, 16, 16, p);
        assert_eq!(connected_components(&map), common::flood_fill_components(&map));
    }
}

#[test]
fn component_areas_cover_every_foreground_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let map = common::random_map(&mut rng, 12, 9, 0.5);
        let total: usize = connected_components(&map).iter().map(|c| c.area).sum();
        assert_eq!(total, map.count_ones());
    }
}

fn candidates(preds: &[PixelBox], gts: &[PixelBox]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (p, pb) in preds.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            if iou(pb, gb) >= 0.5 {
                out.push((p, g));
            }
        }
    }
    out
}

// Greedy is maximal, so it reaches at least half the exhaustive maximum.
#[test]
fn greedy_matching_is_maximal_and_within_half_of_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let (preds, gts) = common::matching_instance(&mut rng, 12);
        let m = match_detections(&preds, &gts, 0.5);
        let best = common::brute_force_matching(&preds, &gts, 0.5);
        assert!(m.pairs.len() <= best && 2 * m.pairs.len() >= best);
        for (p, g) in candidates(&preds, &gts) {
            assert!(!(m.unmatched_preds.contains(&p) && m.unmatched_gts.contains(&g)));
        }
    }
}

#[test]
fn greedy_matching_equals_exhaustive_without_shared_candidates() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut checked = 0;
    while checked < 300 {
        let (preds, gts) = common::matching_instance(&mut rng, 12);
        let c = candidates(&preds, &gts);
        let shared = |f: fn(&(usize, usize)) -> usize| {
            let mut ids: Vec<usize> = c.iter().map(f).collect();
            ids.sort_unstable();
            ids.windows(2).any(|w| w[0] == w[1])
        };
        if shared(|e| e.0) || shared(|e| e.1) {
            continue;
        }
        checked += 1;
        assert_eq!(match_detections(&preds, &gts, 0.5).pairs.len(), common::brute_force_matching(&preds, &gts, 0.5));
    }
}

// Distinct IoUs are not enough for greedy to reach the maximum.
#[test]
fn greedy_can_miss_the_maximum_with_distinct_ious() {
    let b = |x0, y0, x1, y1| PixelBox::new(x0, y0, x1, y1).unwrap();
    let preds = [b(3, 5, 8, 9), b(3, 4, 7, 10)];
    let gts = [b(2, 5, 7, 9), b(0, 5, 10, 9)];
    assert_eq!(match_detections(&preds, &gts, 0.5).pairs, vec![(0, 0)]);
    assert_eq!(common::brute_force_matching(&preds, &gts, 0.5), 2);
}
