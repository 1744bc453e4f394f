use nalgebra::Vector3;
use proptest::prelude::*;
use splatpose::harness::{make_synthetic_cloud, ColorMode, SceneSpec};
use splatpose::lie::{se3_exp, Tangent};
use splatpose::{render, render_reference, CameraIntrinsics, Pose};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn tiled_matches_reference(
        seed in any::<u64>(),
        n in 1usize..120,
        full_sh in any::<bool>(),
        rho in prop::array::uniform3(-0.5f64..0.5),
        phi in prop::array::uniform3(-3.0f64..3.0),
        w in 8usize..70,
        h in 8usize..70,
    ) {
        let cloud = make_synthetic_cloud(&SceneSpec {
            n_gaussians: n,
            color_mode: if full_sh { ColorMode::FullSh } else { ColorMode::DcOnly },
            seed,
            ..Default::default()
        });
        let p = se3_exp(&Tangent::new(Vector3::from(rho), Vector3::from(phi)));
        let pose = Pose::new(p.rotation, p.translation + Vector3::new(0.0, 0.0, 3.5));
        let k = CameraIntrinsics::new(1.2 * w as f64, 1.2 * w as f64, 0.5 * (w as f64 - 1.0), 0.5 * (h as f64 - 1.0), w, h);
        let a = render(&cloud, &pose, &k).unwrap();
        let b = render_reference(&cloud, &pose, &k).unwrap();
        prop_assert!(max_diff(&a.color.data, &b.color.data) <= 1e-5);
        prop_assert!(max_diff(&a.alpha.data, &b.alpha.data) <= 1e-5);
        prop_assert!(max_diff(&a.depth.data, &b.depth.data) <= 1e-5);
    }
}

#[test]
fn object_behind_camera_renders_black() {
    let cloud = make_synthetic_cloud(&SceneSpec::default());
    let k = CameraIntrinsics::centered(80.0, 64);
    let out = render(&cloud, &Pose::from_translation(Vector3::new(0.0, 0.0, -4.0)), &k).unwrap();
    assert!(out.color.data.iter().all(|&v| v == 0.0));
    assert!(out.splats.is_empty());
}

#[test]
fn render_is_deterministic() {
    let cloud = make_synthetic_cloud(&SceneSpec {
        seed: 11,
        ..Default::default()
    });
    let k = CameraIntrinsics::centered(120.0, 96);
    let pose = Pose::from_translation(Vector3::new(0.1, -0.05, 4.0));
    let a = render(&cloud, &pose, &k).unwrap();
    let b = render(&cloud, &pose, &k).unwrap();
    assert_eq!(a.color.data, b.color.data);
    assert_eq!(a.depth.data, b.depth.data);
}
