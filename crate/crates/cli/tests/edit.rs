use std::path::Path;

use proptest::prelude::*;
use sgnet::data::{ScaleType, Task};
use sgnet::media::{open_media, write_srv};
use sgnet::model::ScoreVector;
use sgnet::Error;
use sgnet_cli::edit::*;

fn cfg(k: usize, seed: u64) -> CropConfig {
    CropConfig { k, seed, ..CropConfig::default() }
}

#[test]
fn rect_text_round_trip() {
    let r = Rect::new(3, 4, 10, 12);
    assert_eq!(r.to_string().parse::<Rect>().unwrap(), r);
    assert_eq!(r.center(), (8, 10));
    assert!(r.contains(3, 4) && r.contains(12, 15) && !r.contains(13, 4));
    assert!(r.within(13, 16) && !r.within(12, 16));
    assert!("1,2,3".parse::<Rect>().is_err());
    assert!("a,b,c,d".parse::<Rect>().is_err());
}

#[test]
fn single_full_tier_with_full_anchor_gives_the_full_frame() {
    let c = CropConfig { k: 1, tiers: vec![1.0], aspect_jitter: 1.0, ..cfg(1, 0) };
    let rects = propose_crops_in(64, 48, Some(Rect::full(64, 48)), &c).unwrap();
    assert_eq!(rects.len(), 1);
    // Height can only be clamped down to the frame.
    let r = rects[0];
    assert!(r.within(64, 48));
    assert!(r.h >= 43, "{r}");
}

#[test]
fn proposals_are_seeded() {
    let a = propose_crops_in(96, 64, None, &cfg(50, 9)).unwrap();
    assert_eq!(a, propose_crops_in(96, 64, None, &cfg(50, 9)).unwrap());
    assert_ne!(a, propose_crops_in(96, 64, None, &cfg(50, 10)).unwrap());
    assert!(a.iter().all(|r| r.within(96, 64) && r.w >= 8 && r.h >= 8));
}

#[test]
fn proposal_errors() {
    assert!(matches!(propose_crops_in(32, 32, Some(Rect::new(30, 30, 5, 5)), &cfg(4, 0)), Err(Error::AnchorOutOfBounds(_))));
    assert!(matches!(propose_crops_in(32, 32, None, &cfg(0, 0)), Err(Error::Config(_))));
    let c = CropConfig { tiers: vec![1.5], ..cfg(4, 0) };
    assert!(matches!(propose_crops_in(32, 32, None, &c), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn every_proposal_contains_the_anchor_center(seed in 0u64..1000, w in 40usize..128, h in 40usize..128) {
        let anchor = Rect::new(10, 10, 20, 20);
        let (cx, cy) = anchor.center();
        for r in propose_crops_in(w, h, Some(anchor), &cfg(40, seed)).unwrap() {
            prop_assert!(r.within(w, h), "{} outside {}x{}", r, w, h);
            prop_assert!(r.contains(cx, cy), "{} misses ({}, {})", r, cx, cy);
        }
    }
}

#[test]
fn segments_parse() {
    assert_eq!(parse_segments("0:4, 6:10").unwrap(), vec![(0, 4), (6, 10)]);
    assert_eq!(parse_segments("").unwrap(), vec![]);
    assert!(parse_segments("3").is_err());
    assert!(parse_segments("a:3").is_err());
}

fn scored(x: u32, probs: [f64; 5]) -> ScoredCrop {
    ScoredCrop { rect: Rect::new(x, 0, 8, 8), scale: ScoreVector::new(Task::Scale, probs.to_vec(), []).unwrap() }
}

#[test]
fn candidates_keep_the_target_and_sort_by_confidence() {
    let crops = [
        scored(0, [0.1, 0.6, 0.1, 0.1, 0.1]),
        scored(1, [0.7, 0.1, 0.1, 0.05, 0.05]),
        scored(2, [0.05, 0.9, 0.05, 0.0, 0.0]),
        // Tied with class 2; the lower index wins.
        scored(3, [0.3, 0.35, 0.35, 0.0, 0.0]),
    ];
    let target = ScaleType::from_index(1).unwrap();
    let c = rank_candidates(&crops, target);
    assert_eq!(c.iter().map(|c| c.rect.x).collect::<Vec<_>>(), vec![2, 0, 3]);
    assert_eq!(c.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(c.iter().all(|c| c.predicted_scale == target));
    assert_eq!(c[0].confidence, 0.9);
    assert!(rank_candidates(&crops, ScaleType::from_index(4).unwrap()).is_empty());
}

/// Smooth RGB frames: horizontal and vertical ramps plus a per-frame offset.
fn write_source(path: &Path, w: usize, h: usize, frames: usize) -> Vec<Vec<u8>> {
    let data: Vec<Vec<u8>> = (0..frames)
        .map(|f| {
            let mut v = Vec::with_capacity(w * h * 3);
            for y in 0..h {
                for x in 0..w {
                    v.push((x * 255 / w) as u8);
                    v.push((y * 255 / h) as u8);
                    v.push(((x + y + 4 * f) * 2 % 256) as u8);
                }
            }
            v
        })
        .collect();
    write_srv(path, w, h, 24.0, data.iter().map(Vec::as_slice)).unwrap();
    data
}

fn plan(dir: &Path, rect: Rect, segments: Vec<(u64, u64)>) -> EditPlan {
    let target = ScaleType::from_index(0).unwrap();
    let candidate = CropCandidate { rect, predicted_scale: target, confidence: 0.8, rank: 1 };
    EditPlan {
        source_shot: "s".into(),
        source_media: dir.join("src.srv"),
        frame_start: 1,
        frame_end: 7,
        target_scale: target,
        segments: segments.into_iter().map(|(start, end)| EditSegment { start, end, candidate: candidate.clone() }).collect(),
        output: dir.join("out/edit.srv"),
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn full_frame_edit_is_an_exact_copy() {
    let dir = tempfile::tempdir().unwrap();
    let src = write_source(&dir.path().join("src.srv"), 40, 30, 8);
    let p = plan(dir.path(), Rect::full(40, 30), vec![(1, 7)]);
    let out = render_edit(&p).unwrap();
    let edited = open_media(&out).unwrap();
    assert_eq!(edited.frame_count(), 6);
    for k in 0..6 {
        assert_eq!(edited.read_rgb8(k).unwrap(), src[k as usize + 1]);
    }
    let sidecar: EditPlan = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&out)).unwrap()).unwrap();
    assert_eq!(sidecar, p);
}

#[test]
fn cropped_segment_matches_the_upscaled_crop() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (48, 36);
    let src = write_source(&dir.path().join("src.srv"), w, h, 8);
    let rect = Rect::new(12, 6, 24, 18);
    let p = plan(dir.path(), rect, vec![(2, 5)]);
    let edited = open_media(render_edit(&p).unwrap()).unwrap();
    for index in 1..7u64 {
        let got = edited.read_rgb8(index - 1).unwrap();
        if !(2..5).contains(&index) {
            assert_eq!(got, src[index as usize], "frame {index} outside the segment");
            continue;
        }
        // Nearest-neighbour upscale of the crop as the reference.
        let frame = &src[index as usize];
        let mut want = Vec::with_capacity(got.len());
        for y in 0..h {
            for x in 0..w {
                let sx = rect.x as usize + (x * rect.w as usize) / w;
                let sy = rect.y as usize + (y * rect.h as usize) / h;
                for c in 0..3 {
                    want.push(frame[(sy * w + sx) * 3 + c] as f64);
                }
            }
        }
        let got: Vec<f64> = got.iter().map(|&v| v as f64).collect();
        let r = correlation(&got, &want);
        assert!(r >= 0.99, "frame {index}: correlation {r}");
    }
}

#[test]
fn invalid_plans_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_source(&dir.path().join("src.srv"), 40, 30, 8);
    let cases = [
        plan(dir.path(), Rect::new(30, 0, 20, 10), vec![(1, 3)]),
        plan(dir.path(), Rect::new(0, 0, 10, 10), vec![(0, 3)]),
        plan(dir.path(), Rect::new(0, 0, 10, 10), vec![(1, 4), (3, 6)]),
        plan(dir.path(), Rect::new(0, 0, 10, 10), vec![(4, 4)]),
        EditPlan { frame_end: 9, ..plan(dir.path(), Rect::new(0, 0, 10, 10), vec![]) },
        EditPlan { target_scale: ScaleType::from_index(2).unwrap(), ..plan(dir.path(), Rect::new(0, 0, 10, 10), vec![(1, 2)]) },
    ];
    for p in cases {
        assert!(matches!(render_edit(&p), Err(Error::InvalidPlan(_))), "{p:?}");
        assert!(!p.output.exists());
    }
}
