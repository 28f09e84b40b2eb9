//! End-to-end pipeline behavior on simulated approaches.

mod common;

use common::{approach_config, approach_scene, detection_track};
use evttc::event::EventSlice;
use evttc::linear_solver::Ttc;
use evttc::pipeline::{run_pipeline, Stage};
use evttc::simulator::generate_events;

#[test]
fn approach_ttc_stream_is_accurate_and_monotone() {
    let scene = approach_scene(101);
    let (slice, gt) = generate_events(&scene).expect("scene generates");
    let track = detection_track(&gt, scene.t_span_s);
    let cfg = approach_config(101);
    let out = run_pipeline(&slice, &track, &scene.intr, &cfg);

    assert!(
        out.estimates.len() >= 10,
        "expected a stream of estimates, got {} ({} diagnostics)",
        out.estimates.len(),
        out.diagnostics.len()
    );
    let n_init = out.estimates.iter().filter(|e| e.stage == Stage::Init).count();
    assert_eq!(n_init, 1, "clean approach should initialize exactly once");

    let mut prev_t = f64::NEG_INFINITY;
    let mut prev_ttc = f64::INFINITY;
    for e in &out.estimates {
        assert!(e.t_ref_s > prev_t, "reference times must be strictly increasing");
        prev_t = e.t_ref_s;
        let ttc = match e.ttc {
            Ttc::Approaching(s) => s,
            other => panic!("approach scene produced {other:?}"),
        };
        let gt_ttc = gt.ttc_at(e.t_ref_s);
        let err_pct = ((gt_ttc - ttc) / gt_ttc).abs() * 100.0;
        assert!(err_pct < 5.0, "e_TTC {err_pct:.2}% at t_ref {:.3}", e.t_ref_s);
        assert!(ttc < prev_ttc, "TTC must decrease along the approach");
        prev_ttc = ttc;
    }
}

#[test]
fn event_gap_idles_without_reset() {
    let scene = approach_scene(102);
    let (slice, gt) = generate_events(&scene).expect("scene generates");
    // Remove all events in a 100 ms hole after the first quarter.
    let hole = (0.6, 0.7);
    let kept: Vec<_> = slice
        .events()
        .iter()
        .filter(|e| e.t_s() < hole.0 || e.t_s() > hole.1)
        .copied()
        .collect();
    let gappy = EventSlice::new(kept, slice.t_begin_s(), slice.t_end_s(), 640, 480).unwrap();
    let track = detection_track(&gt, scene.t_span_s);
    let cfg = approach_config(102);
    let out = run_pipeline(&gappy, &track, &scene.intr, &cfg);

    let n_init = out.estimates.iter().filter(|e| e.stage == Stage::Init).count();
    assert_eq!(n_init, 1, "a data gap must idle the pipeline, not reset it");
    // Estimates resume after the hole.
    assert!(out.estimates.iter().any(|e| e.t_ref_s > hole.1));
    for e in &out.estimates {
        let ttc = match e.ttc {
            Ttc::Approaching(s) => s,
            other => panic!("approach scene produced {other:?}"),
        };
        let gt_ttc = gt.ttc_at(e.t_ref_s);
        assert!(((gt_ttc - ttc) / gt_ttc).abs() < 0.05);
    }
}

#[test]
fn outliers_in_init_slice_are_survived() {
    let scene = evttc::simulator::SceneConfig {
        outlier_fraction: 0.3,
        ..approach_scene(103)
    };
    let (slice, gt) = generate_events(&scene).expect("scene generates");
    let track = detection_track(&gt, scene.t_span_s);
    let cfg = approach_config(103);
    let out = run_pipeline(&slice, &track, &scene.intr, &cfg);
    assert!(!out.estimates.is_empty());
    let first = &out.estimates[0];
    assert_eq!(first.stage, Stage::Init);
    let ttc = match first.ttc {
        Ttc::Approaching(s) => s,
        other => panic!("init produced {other:?}"),
    };
    let gt_ttc = gt.ttc_at(first.t_ref_s);
    let err_pct = ((gt_ttc - ttc) / gt_ttc).abs() * 100.0;
    assert!(err_pct < 10.0, "init e_TTC {err_pct:.2}% with 30% outliers");
}

#[test]
fn pipeline_is_deterministic_end_to_end() {
    let scene = approach_scene(105);
    let (slice, gt) = generate_events(&scene).expect("scene generates");
    let track = detection_track(&gt, scene.t_span_s);
    let cfg = approach_config(105);
    let a = run_pipeline(&slice, &track, &scene.intr, &cfg);
    let b = run_pipeline(&slice, &track, &scene.intr, &cfg);
    assert_eq!(a.estimates.len(), b.estimates.len());
    for (x, y) in a.estimates.iter().zip(&b.estimates) {
        assert_eq!(x.t_ref_s, y.t_ref_s);
        assert_eq!(x.params.as_vector(), y.params.as_vector());
        assert_eq!(x.n_inliers, y.n_inliers);
        assert_eq!(x.rms_s, y.rms_s);
    }
}

#[test]
fn warm_started_slices_iterate_no_more_than_init() {
    let scene = approach_scene(104);
    let (slice, gt) = generate_events(&scene).expect("scene generates");
    let track = detection_track(&gt, scene.t_span_s);
    let cfg = approach_config(104);
    let out = run_pipeline(&slice, &track, &scene.intr, &cfg);
    let init_iters = out
        .estimates
        .iter()
        .find(|e| e.stage == Stage::Init)
        .expect("one init estimate")
        .lm_iterations;
    let track_estimates: Vec<_> =
        out.estimates.iter().filter(|e| e.stage == Stage::Refine).collect();
    assert!(!track_estimates.is_empty());
    let cheap = track_estimates.iter().filter(|e| e.lm_iterations <= init_iters).count();
    let frac = cheap as f64 / track_estimates.len() as f64;
    assert!(frac >= 0.9, "warm starts helped in only {:.0}% of slices", frac * 100.0);
}
