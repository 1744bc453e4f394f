use nalgebra::{Matrix3, Vector3, Vector6};
use proptest::prelude::*;
use splatpose::lie::{
    apply_left_perturbation, apply_right_perturbation, hat, se3_exp, se3_log, so3_exp, so3_left_jacobian, so3_log, vee,
    Pose, Tangent,
};

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-r..r).prop_map(Vector3::from)
}

fn small_angle() -> impl Strategy<Value = Vector3<f64>> {
    // Keeps the angle below pi so log(exp(phi)) = phi.
    vec3(1.75)
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(3.0), small_angle()).prop_map(|(rho, phi)| se3_exp(&Tangent::new(rho, phi)))
}

fn poses_close(a: &Pose, b: &Pose, tol: f64) -> bool {
    (a.rotation - b.rotation).abs().max() < tol && (a.translation - b.translation).abs().max() < tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn hat_vee_inverse(v in vec3(10.0)) {
        prop_assert_eq!(vee(&hat(&v)), v);
        prop_assert!((hat(&v) + hat(&v).transpose()).abs().max() == 0.0);
    }

    #[test]
    fn so3_round_trip(phi in small_angle()) {
        let r = so3_exp(&phi);
        prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        prop_assert!((so3_log(&r).unwrap() - phi).abs().max() < 1e-9);
    }

    #[test]
    fn se3_round_trip(rho in vec3(3.0), phi in small_angle()) {
        let tau = Tangent::new(rho, phi);
        let back = se3_log(&se3_exp(&tau)).unwrap();
        prop_assert!((back.to_vector() - tau.to_vector()).abs().max() < 1e-9);
    }

    #[test]
    fn adjoint_moves_perturbation_across(t in pose(), rho in vec3(0.5), phi in vec3(0.5)) {
        let tau = Tangent::new(rho, phi);
        let right = apply_right_perturbation(&tau, &t);
        let moved = Tangent::from_vector(&(t.adjoint() * tau.to_vector()));
        let left = apply_left_perturbation(&moved, &t);
        prop_assert!(poses_close(&right, &left, 1e-9));
    }

    #[test]
    fn left_jacobian_matches_exp_derivative(phi in small_angle(), dir in vec3(1.0)) {
        // exp(phi + h d) ~ exp(J_l h d) exp(phi)
        let h = 1e-6;
        let a = so3_exp(&(phi + dir * h));
        let b = so3_exp(&(phi - dir * h));
        let fd = vee(&((a - b) * so3_exp(&phi).transpose())) / (2.0 * h);
        prop_assert!((fd - so3_left_jacobian(&phi) * dir).abs().max() < 1e-6);
    }

    #[test]
    fn inverse_composes_to_identity(t in pose()) {
        prop_assert!(poses_close(&t.compose(&t.inverse()), &Pose::identity(), 1e-12));
    }
}

#[test]
fn zero_tangent_is_identity() {
    assert_eq!(se3_exp(&Tangent::from_vector(&Vector6::zeros())), Pose::identity());
}
