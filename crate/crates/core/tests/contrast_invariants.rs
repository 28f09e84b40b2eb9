//! Contrast invariants of the image of warped events on seeded scenes.

use evttc::eval::{build_iwe, contrast, WarpModel};
use evttc::event::CameraIntrinsics;
use evttc::linear_solver::AffineParams;
use evttc::lts::median_reference_time;
use evttc::simulator::{circle_contour, generate_events, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// True params beat +/-10% a_z perturbations on every seeded noise-free scene.
#[test]
fn true_params_maximize_contrast_against_10pct_perturbations() {
    let intr = CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let scene = SceneConfig {
            contour: circle_contour(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(0.35..0.55),
                2.0,
                600,
            ),
            nu: [0.0, 0.0, 2.0],
            intr,
            t_span_s: 0.25,
            event_pixel_step: 0.5,
            timestamp_jitter_sigma_s: 0.0,
            outlier_fraction: 0.0,
            rng_seed: seed,
        };
        let (slice, gt) = generate_events(&scene).expect("scene generates");
        let t_ref = median_reference_time(&slice).unwrap();
        let a_true = gt.affine_at(t_ref);
        let c_true =
            contrast(&build_iwe(&slice, &a_true, &intr, WarpModel::TimeVariant, 640, 480));
        for factor in [0.9, 1.1] {
            let a_pert =
                AffineParams::new(a_true.a_x, a_true.a_y, a_true.a_z * factor, t_ref);
            let c_pert =
                contrast(&build_iwe(&slice, &a_pert, &intr, WarpModel::TimeVariant, 640, 480));
            assert!(
                c_true > c_pert,
                "seed {seed}: contrast {c_pert} at {factor}x a_z beats true {c_true}"
            );
        }
    }
}
