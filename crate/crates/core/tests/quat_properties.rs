use proptest::prelude::*;
use qcaps::quat::{
    left_embed, operator_from_rotor, orthogonality_defect, right_embed, rotate, PureQuaternion, Quaternion, RotorWeight,
};

fn quat() -> impl Strategy<Value = Quaternion<f64>> {
    prop::array::uniform4(-3.0f64..3.0).prop_map(Quaternion::from_array)
}

fn pure() -> impl Strategy<Value = PureQuaternion<f64>> {
    prop::array::uniform3(-3.0f64..3.0).prop_map(PureQuaternion::from_array)
}

fn weight() -> impl Strategy<Value = RotorWeight<f64>> {
    (-10.0f64..10.0, prop::array::uniform3(-2.0f64..2.0))
        .prop_filter("axis above floor", |(_, a)| a.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        .prop_map(|(t, a)| RotorWeight::new(t, a))
}

fn close(a: Quaternion<f64>, b: Quaternion<f64>, tol: f64) -> bool {
    a.to_array().iter().zip(b.to_array()).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn product_norm_is_multiplicative(a in quat(), b in quat()) {
        let n = a.hamilton(b).norm();
        prop_assert!((n - a.norm() * b.norm()).abs() <= 1e-12 * (1.0 + n));
    }

    #[test]
    fn product_is_associative(a in quat(), b in quat(), c in quat()) {
        prop_assert!(close(a.hamilton(b).hamilton(c), a.hamilton(b.hamilton(c)), 1e-11));
    }

    #[test]
    fn conjugate_reverses_products(a in quat(), b in quat()) {
        prop_assert!(close(a.hamilton(b).conjugate(), b.conjugate().hamilton(a.conjugate()), 1e-12));
        prop_assert_eq!(a.conjugate().conjugate(), a);
    }

    #[test]
    fn materialized_rotors_are_unit(w in weight()) {
        prop_assert!((w.normalize().unwrap().norm() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn rotation_preserves_norm_and_inner_products(w in weight(), u in pure(), v in pure()) {
        let r = w.normalize().unwrap();
        let (ru, rv) = (rotate(r, u).unwrap(), rotate(r, v).unwrap());
        prop_assert!((ru.norm() - u.norm()).abs() <= 1e-12);
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        prop_assert!((dot(ru.to_array(), rv.to_array()) - dot(u.to_array(), v.to_array())).abs() <= 1e-11);
    }

    #[test]
    fn embeddings_reproduce_products(a in quat(), b in quat()) {
        prop_assert!(close(right_embed(a).apply(b), a.hamilton(b), 1e-12));
        prop_assert!(close(left_embed(b).apply(a), a.hamilton(b), 1e-12));
    }

    #[test]
    fn operator_is_a_proper_rotation(w in weight(), u in quat()) {
        let r = w.normalize().unwrap();
        let m = operator_from_rotor(r);
        prop_assert!(close(m.apply(u), r.hamilton(u).hamilton(r.conjugate()), 1e-11));
        let (defect, det) = orthogonality_defect(&m.rotation_block());
        prop_assert!(defect <= 1e-12 && (det - 1.0).abs() <= 1e-12);
        for k in 0..4 {
            let e = if k == 0 { 1.0 } else { 0.0 };
            prop_assert!((m.0[0][k] - e).abs() <= 1e-12 && (m.0[k][0] - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn shifting_the_angle_by_pi_gives_the_same_rotation(w in weight(), u in pure()) {
        let shifted = RotorWeight::new(w.theta + std::f64::consts::PI, w.axis);
        let a = rotate(w.normalize().unwrap(), u).unwrap().to_array();
        let b = rotate(shifted.normalize().unwrap(), u).unwrap().to_array();
        for (x, y) in a.iter().zip(b) {
            prop_assert!((x - y).abs() <= 1e-11);
        }
    }
}
