use proptest::prelude::*;

use glad_core::datasets::{read_results, write_results};
use glad_core::geometry::{
    map_box_to_crop, map_box_to_frame_unclipped, BoundingBox, CropMapping, Unit,
};
use glad_core::head::{decode_box, encode_targets, ScoreMaps};
use glad_core::metrics::{evaluate_sequence, got10k_metrics, precision, success_auc, EvalReport};

fn int_box() -> impl Strategy<Value = BoundingBox> {
    (-50i32..300, -50i32..300, 1i32..120, 1i32..120).prop_map(|(x, y, w, h)| {
        BoundingBox::xywh(x as f64, y as f64, w as f64, h as f64, Unit::Pixel)
    })
}

fn px_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..80.0f64, 1.0..80.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::xywh(x, y, w, h, Unit::Pixel))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn results_file_round_trip(boxes in prop::collection::vec(int_box(), 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.txt");
        write_results(&boxes, &path).unwrap();
        let back = read_results(&path).unwrap();
        prop_assert_eq!(back.len(), boxes.len());
        for (a, b) in back.iter().zip(&boxes) {
            prop_assert_eq!(a.as_xywh(), b.as_xywh());
        }
    }

    #[test]
    fn auc_tracks_mean_iou(ious in prop::collection::vec(0.0..=1.0f64, 1..60)) {
        // each frame contributes ceil(20 v) / 21, so the gap to v is below 1/21
        let auc = success_auc(&ious).unwrap();
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        prop_assert!((auc - mean).abs() <= 1.0 / 21.0 + 1e-12, "auc {} mean {}", auc, mean);
        prop_assert!((0.0..=1.0).contains(&auc));
    }

    #[test]
    fn metrics_ignore_frame_order(ious in prop::collection::vec(0.0..=1.0f64, 2..40), shift in 1usize..40) {
        let mut rotated = ious.clone();
        rotated.rotate_left(shift % ious.len());
        let errs: Vec<f64> = ious.iter().map(|v| 40.0 * v).collect();
        let rerrs: Vec<f64> = rotated.iter().map(|v| 40.0 * v).collect();
        prop_assert_eq!(success_auc(&ious).unwrap(), success_auc(&rotated).unwrap());
        prop_assert_eq!(precision(&errs, 20.0).unwrap(), precision(&rerrs, 20.0).unwrap());
        let (a, b) = (got10k_metrics(&ious).unwrap(), got10k_metrics(&rotated).unwrap());
        prop_assert_eq!((a.1, a.2), (b.1, b.2));
        prop_assert!((a.0 - b.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_scores_are_sequence_means(
        seqs in prop::collection::vec(prop::collection::vec((px_box(), px_box()), 1..15), 1..5)
    ) {
        let evals: Vec<_> = seqs
            .iter()
            .enumerate()
            .map(|(i, pairs)| {
                let (pred, gt): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
                evaluate_sequence(&format!("s{i}"), &pred, &gt).unwrap()
            })
            .collect();
        let report = EvalReport::new(evals.clone()).unwrap();
        let n = evals.len() as f64;
        let mean_auc = evals.iter().map(|e| e.scores.auc).sum::<f64>() / n;
        let mean_ao = evals.iter().map(|e| e.scores.ao).sum::<f64>() / n;
        prop_assert!((report.aggregate.auc - mean_auc).abs() < 1e-12);
        prop_assert!((report.aggregate.ao - mean_ao).abs() < 1e-12);
        // brute-force recount of one per-sequence value
        for e in &evals {
            let hits = e.ious.iter().filter(|v| **v > 0.5).count() as f64;
            prop_assert_eq!(e.scores.sr50, hits / e.ious.len() as f64);
        }
    }

    #[test]
    fn crop_mapping_round_trip(b in px_box(), cx in 0.0..200.0f64, cy in 0.0..200.0f64, scale in 0.25..4.0f64) {
        let m = CropMapping {
            source_center: (cx, cy),
            scale,
            crop_size: 64,
            frame_size: (256, 256),
        };
        let back = map_box_to_frame_unclipped(&map_box_to_crop(&b, &m), &m);
        for (u, v) in back.as_xywh().iter().zip(b.as_xywh().iter()) {
            prop_assert!((u - v).abs() < 1e-9, "{:?} vs {:?}", back.as_xywh(), b.as_xywh());
        }
    }

    #[test]
    fn head_targets_decode_back(
        cx in 0.0..1.0f64, cy in 0.0..1.0f64, w in 0.01..1.0f64, h in 0.01..1.0f64, grid in 2usize..20
    ) {
        let gt = BoundingBox::cxcywh(cx, cy, w, h, Unit::Normalized);
        let t = encode_targets(&gt, (grid, grid)).unwrap();
        prop_assert!(t.offset.0 >= 0.0 && t.offset.0 < 1.0 && t.offset.1 >= 0.0 && t.offset.1 < 1.0);
        let n = grid * grid;
        let k = t.cell.0 * grid + t.cell.1;
        prop_assert_eq!(t.heatmap[k], 1.0);
        let mut maps = ScoreMaps {
            c: t.heatmap.clone(),
            o: [vec![0.0; n], vec![0.0; n]],
            s: [vec![0.0; n], vec![0.0; n]],
            h: grid,
            w: grid,
        };
        maps.o[0][k] = t.offset.0;
        maps.o[1][k] = t.offset.1;
        maps.s[0][k] = t.size.0;
        maps.s[1][k] = t.size.1;
        let d = decode_box(&maps);
        prop_assert_eq!((d.width(), d.height()), (w, h));
        prop_assert!((d.center().0 - cx).abs() * grid as f64 <= 0.5);
        prop_assert!((d.center().1 - cy).abs() * grid as f64 <= 0.5);
    }
}
