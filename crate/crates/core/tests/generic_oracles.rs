use aspnn::dataset::CellState;
use aspnn::generic::{
    degeneracy_residual, generic_step, matvec, symmetric_eigenvalues, thermo_increments,
    GenericOperators, GradientMatrices, Mat4,
};
use proptest::prelude::*;

fn mat() -> impl Strategy<Value = Mat4> {
    prop::array::uniform4(prop::array::uniform4(-2.0f64..2.0))
}

fn state() -> impl Strategy<Value = CellState> {
    prop::array::uniform4(-1.0f64..1.0).prop_map(|v| CellState::from_slice(&v))
}

/// Flattened index loops, deliberately not reusing `matvec`.
fn flat_residual(l: &Mat4, g: &Mat4, z: &[f64; 4]) -> f64 {
    let mut total = 0.0;
    for i in 0..4 {
        let mut acc = 0.0;
        for k in 0..16 {
            let (j, m) = (k / 4, k % 4);
            acc += l[i][j] * g[j][m] * z[m];
        }
        total += acc * acc;
    }
    total
}

#[test]
fn structural_checks() {
    let ops = GenericOperators::cell_migration();
    let (l, m) = (ops.l(), ops.m());
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(l[i][j], -l[j][i]);
            assert_eq!(m[i][j], m[j][i]);
        }
    }
    let ev = symmetric_eigenvalues(m);
    assert!(ev[0] >= -1e-12);
    // eigenvalues of [[1, -0.5], [-0.5, 1]] blocks
    assert!((ev[0] - 0.5).abs() < 1e-10 && (ev[3] - 1.5).abs() < 1e-10);
    let mut not_psd = *m;
    not_psd[0][1] = -2.0;
    not_psd[1][0] = -2.0;
    assert!(GenericOperators::new(*l, not_psd).is_err());
}

#[test]
fn hand_computed_steps() {
    let ops = GenericOperators::cell_migration();
    let z = CellState::new(1.0, 2.0, 3.0, 4.0);
    let next = generic_step(&z, &ops, &GradientMatrices::identity_a(), 1.0).unwrap();
    assert_eq!(next.to_array(), [4.0, 6.0, 2.0, 2.0]);
    let z = CellState::new(1.0, 0.0, 0.0, 0.0);
    let next = generic_step(&z, &ops, &GradientMatrices::identity_b(), 1.0).unwrap();
    assert_eq!(next.to_array(), [2.0, -0.5, 0.0, 0.0]);
}

#[test]
fn zero_gradients_give_identity_rollout() {
    let ops = GenericOperators::cell_migration();
    let z0 = CellState::new(0.3, -0.7, 0.1, 0.9);
    let mut z = z0;
    for _ in 0..500 {
        z = generic_step(&z, &ops, &GradientMatrices::default(), 1.0).unwrap();
    }
    assert_eq!(z, z0);
}

proptest! {
    #[test]
    fn step_is_linear_in_state(a in mat(), b in mat(), z in state(), alpha in -3.0f64..3.0) {
        let ops = GenericOperators::cell_migration();
        let g = GradientMatrices { a, b };
        let scaled = CellState::from_slice(&z.to_array().map(|v| alpha * v));
        let lhs = generic_step(&scaled, &ops, &g, 1.0).unwrap().to_array();
        let rhs = generic_step(&z, &ops, &g, 1.0).unwrap().to_array().map(|v| alpha * v);
        for k in 0..4 {
            prop_assert!((lhs[k] - rhs[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn residuals_agree_two_ways(a in mat(), b in mat(), z in state()) {
        let ops = GenericOperators::cell_migration();
        let g = GradientMatrices { a, b };
        let (r_l, r_m) = degeneracy_residual(&ops, &g, &z);
        let zv = z.to_array();
        prop_assert!(r_l >= 0.0 && r_m >= 0.0);
        prop_assert!((r_l - flat_residual(ops.l(), &b, &zv)).abs() < 1e-12);
        prop_assert!((r_m - flat_residual(ops.m(), &a, &zv)).abs() < 1e-12);
    }

    #[test]
    fn thermo_increments_are_dot_products(a in mat(), b in mat(), z in state(), w in state()) {
        let g = GradientMatrices { a, b };
        let (de, ds) = thermo_increments(&z, &w, &g);
        let zv = z.to_array();
        let dz: Vec<f64> = w.to_array().iter().zip(&zv).map(|(x, y)| x - y).collect();
        let az = matvec(&a, &zv);
        let bz = matvec(&b, &zv);
        let e: f64 = (0..4).map(|k| az[k] * dz[k]).sum();
        let s: f64 = (0..4).map(|k| bz[k] * dz[k]).sum();
        prop_assert!((de - e).abs() < 1e-12 && (ds - s).abs() < 1e-12);
        prop_assert_eq!(thermo_increments(&z, &z, &g), (0.0, 0.0));
    }
}
