mod common;

use std::f64::consts::FRAC_PI_2;

use nalgebra::Matrix3;
use proptest::prelude::*;

use common::{apply_h, homogeneous, pose_strategy, quat_strategy};
use robodata_core::action::{
    self, apply, convert_repr, delta, ActionRepr, DeltaRotation, GripperMap, GRIPPER_CLOSED,
    GRIPPER_OPEN,
};
use robodata_core::align::{align_action, align_pose, builtin_profiles};
use robodata_core::se3::{
    euler_to_matrix, invert, matrix_to_euler, matrix_to_quat, quat_to_matrix, EulerAngles, Pose,
    Quaternion, RigidTransform, Vec3,
};

const EULER_MARGIN: f64 = 1e-3;

fn transform_strategy() -> impl Strategy<Value = RigidTransform> {
    (quat_strategy(), prop::array::uniform3(-2.0f64..2.0))
        .prop_map(|(q, t)| RigidTransform::new(q.to_matrix(), Vec3::from(t)))
}

fn safe_pitch_pose() -> impl Strategy<Value = Pose> {
    let lim = FRAC_PI_2 - EULER_MARGIN;
    (
        prop::array::uniform3(-1.0f64..1.0),
        -3.1f64..3.1,
        -lim..lim,
        -3.1f64..3.1,
    )
        .prop_map(|(p, r, pi, y)| {
            Pose::from_rotation(Vec3::from(p), &euler_to_matrix(&EulerAngles::new(r, pi, y)))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn quat_matrix_round_trip(q in quat_strategy()) {
        let back = matrix_to_quat(&quat_to_matrix(&q));
        prop_assert!(back.angle_to(&q) < 1e-9);
        prop_assert!(back.w() >= 0.0);
    }

    #[test]
    fn crmm_pcm_round_trip(a in pose_strategy(), b in pose_strategy()) {
        for repr in [ActionRepr::Crmm, ActionRepr::Pcm] {
            let d = delta(repr, &a, &b).unwrap();
            let (dp, dr) = apply(&a, &d).unwrap().error_to(&b);
            prop_assert!(dp < 1e-9 && dr < 1e-9, "{repr:?}: {dp} {dr}");
        }
    }

    #[test]
    fn eadm_round_trip(a in safe_pitch_pose(), b in safe_pitch_pose()) {
        let d = delta(ActionRepr::Eadm, &a, &b).unwrap();
        let (dp, dr) = apply(&a, &d).unwrap().error_to(&b);
        prop_assert!(dp < 1e-9 && dr < 1e-9, "{dp} {dr}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn inverse_composes_to_identity(t in transform_strategy()) {
        let id = invert(&t).compose(&t);
        let m = homogeneous(&id) - nalgebra::Matrix4::identity();
        prop_assert!(m.abs().max() < 1e-9);
        let id = t.compose(&invert(&t));
        prop_assert!((homogeneous(&id) - nalgebra::Matrix4::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn euler_round_trip(
        r in -3.1f64..3.1,
        p in -(FRAC_PI_2 - EULER_MARGIN)..(FRAC_PI_2 - EULER_MARGIN),
        y in -3.1f64..3.1,
    ) {
        let e = EulerAngles::new(r, p, y);
        let d = matrix_to_euler(&euler_to_matrix(&e));
        prop_assert!(!d.gimbal_lock);
        for (a, b) in d.angles.to_array().iter().zip(e.to_array()) {
            prop_assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", d.angles, e);
        }
    }

    #[test]
    fn antipodal_quaternions_share_a_matrix(q in quat_strategy()) {
        let [w, x, y, z] = q.to_array();
        let neg = Quaternion::from_raw(-w, -x, -y, -z);
        prop_assert_eq!(*quat_to_matrix(&q).matrix(), *quat_to_matrix(&neg).matrix());
    }

    /// Small rotations: the Euler-difference payload and the rotation vector
    /// of the composite matrix differ only at second order.
    #[test]
    fn eadm_matches_crmm_for_small_angles(
        axis in prop::array::uniform3(-1.0f64..1.0)
            .prop_filter("axis", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-2),
        theta in 0.0f64..5f64.to_radians(),
        p in prop::array::uniform3(-1.0f64..1.0),
    ) {
        let axis = Vec3::from(axis).normalize();
        let from = Pose::new(Vec3::from(p), Quaternion::IDENTITY);
        let to = Pose::new(Vec3::from(p), Quaternion::from_axis_angle(&axis, theta).unwrap());
        let e = action::eadm(&from, &to).unwrap();
        let c = action::crmm(&from, &to);
        let DeltaRotation::Euler(angles) = e.drot else { unreachable!() };
        let q = action::rotation_quaternion(&c).unwrap();
        // Rotation vector of the CRMM payload.
        let v = Vec3::new(q.x(), q.y(), q.z());
        let rotvec = if v.norm() > 0.0 { v.normalize() * q.angle_to(&Quaternion::IDENTITY) } else { Vec3::zeros() };
        let diff = (Vec3::from(angles.to_array()) - rotvec).norm();
        prop_assert!(diff <= theta * theta / 2.0 + 1e-15, "theta {theta}: diff {diff}");
    }

    #[test]
    fn convert_repr_is_self_inverse(a in safe_pitch_pose(), b in safe_pitch_pose(), g in prop::bool::ANY) {
        let gripper = if g { GRIPPER_CLOSED } else { GRIPPER_OPEN };
        for src in [ActionRepr::Eadm, ActionRepr::Crmm, ActionRepr::Pcm] {
            let act = delta(src, &a, &b).unwrap().with_gripper(gripper);
            let want = apply(&a, &act).unwrap();
            for dst in [ActionRepr::Eadm, ActionRepr::Crmm, ActionRepr::Pcm] {
                let there = convert_repr(&act, &a, dst).unwrap();
                let back = convert_repr(&there, &a, src).unwrap();
                prop_assert_eq!(back.repr(), src);
                prop_assert_eq!(back.gripper, gripper);
                let (dp, dr) = apply(&a, &back).unwrap().error_to(&want);
                prop_assert!(dp < 1e-9 && dr < 1e-9, "{src:?}->{dst:?}: {dp} {dr}");
            }
        }
    }

    #[test]
    fn remap_is_canonical(open in -10.0f64..10.0, gap in 0.01f64..5.0, flip in prop::bool::ANY, x in -20.0f64..20.0) {
        let close = if flip { open - gap } else { open + gap };
        let map = GripperMap::new(open, close).unwrap();
        let v = map.remap(x).unwrap();
        prop_assert!(v == GRIPPER_OPEN || v == GRIPPER_CLOSED);
        prop_assert_eq!(map.remap(open).unwrap(), GRIPPER_OPEN);
        prop_assert_eq!(map.remap(close).unwrap(), GRIPPER_CLOSED);
    }

    #[test]
    fn alignment_preserves_distances(a in pose_strategy(), b in pose_strategy()) {
        for prof in builtin_profiles() {
            let pa = align_pose(&prof, &a).pose;
            let pb = align_pose(&prof, &b).pose;
            let before = (b.position - a.position).norm();
            let after = (pb.position - pa.position).norm();
            prop_assert!((before - after).abs() < 1e-12, "{}", prof.name);
        }
    }

    /// Oracle: transform both poses with an independently assembled 4x4
    /// matrix, then take the relative rotation and translation directly.
    #[test]
    fn align_action_matches_oracle(a in pose_strategy(), b in pose_strategy()) {
        for prof in builtin_profiles() {
            let h = homogeneous(&prof.world_from_native);
            let r_w: Matrix3<f64> = h.fixed_view::<3, 3>(0, 0).into();
            let ra = r_w * a.rotation().matrix();
            let rb = r_w * b.rotation().matrix();
            let dp = apply_h(&h, &b.position) - apply_h(&h, &a.position);
            let dr = rb * ra.transpose();
            let got = align_action(&prof, &a, &b);
            prop_assert!((got.dpos - dp).norm() < 1e-12, "{}", prof.name);
            let DeltaRotation::Matrix(m) = got.drot else { unreachable!() };
            prop_assert!((m.matrix() - dr).abs().max() < 1e-12, "{}", prof.name);
        }
    }
}

#[test]
fn builtin_transforms_are_rigid() {
    for prof in builtin_profiles() {
        let m = *prof.world_from_native.rotation.matrix();
        assert!((m * m.transpose() - Matrix3::identity()).abs().max() < 1e-12, "{}", prof.name);
        assert!((m.determinant() - 1.0).abs() < 1e-12, "{}", prof.name);
    }
}
