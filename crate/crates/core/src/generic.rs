//! GENERIC time stepping with learned discrete gradients.
//!
//! The state `z = (x, y, vx, vy)` evolves as
//!
//! ```text
//! z[n+1] = z[n] + dt * (L·A·z[n] + M·B·z[n])
//! ```
//!
//! where `A·z` and `B·z` approximate the energy and entropy gradients and the
//! gradient matrices `A`, `B` are predicted per state by a network. `L` is
//! skew-symmetric (reversible part) and `M` symmetric positive semi-definite
//! (dissipative part). Thermodynamic consistency requires the degeneracy
//! conditions `L·B·z = 0` and `M·A·z = 0`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, DenseNet};
use crate::dataset::CellState;
use crate::error::{Error, Result};

pub type Mat4 = [[f64; 4]; 4];

/// Widths of the gradient-matrix network: 4 state inputs, five tanh hidden
/// layers, 32 outputs (A then B, row-major).
pub const SPNN_SIZES: [usize; 7] = [4, 16, 64, 128, 64, 16, 32];

pub fn matvec(m: &Mat4, v: &[f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (r, row) in m.iter().enumerate() {
        out[r] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

fn dot(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The constant reversible (`l`) and dissipative (`m`) operators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenericOperators {
    l: Mat4,
    m: Mat4,
}

impl GenericOperators {
    /// Canonical position/velocity coupling for `L`, and a dissipation
    /// matrix coupling the two axes through ±0.5 off-diagonal terms.
    pub fn cell_migration() -> Self {
        let l = [
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [-1.0, 0.0, 0.0, 0.0],
            [0.0, -1.0, 0.0, 0.0],
        ];
        let m = [
            [1.0, -0.5, 0.0, 0.0],
            [-0.5, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, -0.5],
            [0.0, 0.0, -0.5, 1.0],
        ];
        Self::new(l, m).expect("constant operators are well formed")
    }

    /// Checks `L = -Lᵀ` exactly, `M = Mᵀ` exactly and `M ⪰ 0`.
    pub fn new(l: Mat4, m: Mat4) -> Result<Self> {
        for i in 0..4 {
            for j in 0..4 {
                if l[i][j] != -l[j][i] {
                    return Err(Error::Config(format!("L is not skew-symmetric at ({i}, {j})")));
                }
                if m[i][j] != m[j][i] {
                    return Err(Error::Config(format!("M is not symmetric at ({i}, {j})")));
                }
            }
        }
        let min_eig = min_eigenvalue(&m);
        if min_eig < -1e-12 {
            return Err(Error::Config(format!(
                "M is not positive semi-definite (smallest eigenvalue {min_eig})"
            )));
        }
        Ok(Self { l, m })
    }

    pub fn l(&self) -> &Mat4 {
        &self.l
    }

    pub fn m(&self) -> &Mat4 {
        &self.m
    }
}

impl Default for GenericOperators {
    fn default() -> Self {
        Self::cell_migration()
    }
}

/// Eigenvalues of a symmetric 4×4 matrix, ascending.
pub fn symmetric_eigenvalues(m: &Mat4) -> [f64; 4] {
    let mat = nalgebra::Matrix4::from_fn(|i, j| m[i][j]);
    let mut ev: Vec<f64> = mat.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    [ev[0], ev[1], ev[2], ev[3]]
}

fn min_eigenvalue(m: &Mat4) -> f64 {
    symmetric_eigenvalues(m)[0]
}

/// Discrete energy (`a`) and entropy (`b`) gradient matrices for one state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientMatrices {
    pub a: Mat4,
    pub b: Mat4,
}

impl GradientMatrices {
    /// Splits a 32-vector: first 16 entries are `a`, last 16 are `b`, both
    /// row-major.
    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 32 {
            return Err(Error::dim("gradient matrix output", 32, v.len()));
        }
        let mut g = Self::default();
        for r in 0..4 {
            for c in 0..4 {
                g.a[r][c] = v[4 * r + c];
                g.b[r][c] = v[16 + 4 * r + c];
            }
        }
        Ok(g)
    }

    pub fn identity_a() -> Self {
        let mut g = Self::default();
        (0..4).for_each(|i| g.a[i][i] = 1.0);
        g
    }

    pub fn identity_b() -> Self {
        let mut g = Self::default();
        (0..4).for_each(|i| g.b[i][i] = 1.0);
        g
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(&self.b).flatten().all(|v| v.is_finite())
    }
}

pub fn spnn_network<R: rand::Rng + ?Sized>(rng: &mut R) -> DenseNet {
    DenseNet::glorot(&SPNN_SIZES, Activation::Tanh, Activation::Identity, rng)
}

/// Evaluates the gradient-matrix network on a normalized state.
pub fn predict_gradient_matrices(net: &DenseNet, z_norm: &CellState) -> Result<GradientMatrices> {
    let out = net.forward(&z_norm.to_array())?;
    GradientMatrices::from_flat(&out)
}

/// Explicit GENERIC step.
pub fn generic_step(z: &CellState, ops: &GenericOperators, g: &GradientMatrices, dt: f64) -> Result<CellState> {
    let zv = z.to_array();
    let la = matvec(&ops.l, &matvec(&g.a, &zv));
    let mb = matvec(&ops.m, &matvec(&g.b, &zv));
    let mut next = [0.0; 4];
    for i in 0..4 {
        next[i] = zv[i] + dt * (la[i] + mb[i]);
    }
    let next = CellState::from_slice(&next);
    if !next.is_finite() {
        return Err(Error::Diverged {
            context: "GENERIC step produced a non-finite state".into(),
        });
    }
    Ok(next)
}

/// `(‖L·B·z‖², ‖M·A·z‖²)`; their sum is the degeneracy loss of one state.
pub fn degeneracy_residual(ops: &GenericOperators, g: &GradientMatrices, z: &CellState) -> (f64, f64) {
    let zv = z.to_array();
    let lb = matvec(&ops.l, &matvec(&g.b, &zv));
    let ma = matvec(&ops.m, &matvec(&g.a, &zv));
    (dot(&lb, &lb), dot(&ma, &ma))
}

/// Energy and entropy increments `((A·z)·Δz, (B·z)·Δz)` over one step.
pub fn thermo_increments(z: &CellState, z_next: &CellState, g: &GradientMatrices) -> (f64, f64) {
    let zv = z.to_array();
    let nv = z_next.to_array();
    let dz = [nv[0] - zv[0], nv[1] - zv[1], nv[2] - zv[2], nv[3] - zv[3]];
    (dot(&matvec(&g.a, &zv), &dz), dot(&matvec(&g.b, &zv), &dz))
}

/// Per-frame energy/entropy increments and their running sums from zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThermoTrace {
    pub d_energy: Vec<f64>,
    pub d_entropy: Vec<f64>,
    pub energy: Vec<f64>,
    pub entropy: Vec<f64>,
}

impl ThermoTrace {
    pub fn push(&mut self, de: f64, ds: f64) {
        let e = self.energy.last().copied().unwrap_or(0.0) + de;
        let s = self.entropy.last().copied().unwrap_or(0.0) + ds;
        self.d_energy.push(de);
        self.d_entropy.push(ds);
        self.energy.push(e);
        self.entropy.push(s);
    }

    pub fn len(&self) -> usize {
        self.energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energy.is_empty()
    }

    /// Smallest frame-to-frame change of cumulative entropy (including the
    /// first step from zero); `None` for an empty trace.
    pub fn min_entropy_step(&self) -> Option<f64> {
        self.d_entropy.iter().copied().reduce(f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,dE,dS,E_cum,S_cum\n");
        for k in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                k, self.d_energy[k], self.d_entropy[k], self.energy[k], self.entropy[k]
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operators_are_structured() {
        let ops = GenericOperators::cell_migration();
        let ev = symmetric_eigenvalues(ops.m());
        for (got, want) in ev.iter().zip([0.5, 0.5, 1.5, 1.5]) {
            assert!((got - want).abs() < 1e-12, "{ev:?}");
        }
    }

    #[test]
    fn malformed_operators_rejected() {
        let ops = GenericOperators::cell_migration();
        let mut l = *ops.l();
        l[0][2] = 2.0;
        assert!(GenericOperators::new(l, *ops.m()).is_err());
        let mut m = *ops.m();
        m[0][0] = -1.0;
        assert!(GenericOperators::new(*ops.l(), m).is_err());
    }

    #[test]
    fn zero_gradients_freeze_state() {
        let ops = GenericOperators::default();
        let z = CellState::new(1.0, -2.0, 0.5, 3.0);
        assert_eq!(generic_step(&z, &ops, &GradientMatrices::default(), 1.0).unwrap(), z);
    }

    #[test]
    fn hand_computed_steps() {
        let ops = GenericOperators::default();
        let z = CellState::new(1.0, 2.0, 3.0, 4.0);
        let next = generic_step(&z, &ops, &GradientMatrices::identity_a(), 1.0).unwrap();
        assert_eq!(next, CellState::new(4.0, 6.0, 2.0, 2.0));

        let z = CellState::new(1.0, 0.0, 0.0, 0.0);
        let next = generic_step(&z, &ops, &GradientMatrices::identity_b(), 1.0).unwrap();
        assert_eq!(next, CellState::new(2.0, -0.5, 0.0, 0.0));
    }

    #[test]
    fn divergence_is_an_error() {
        let ops = GenericOperators::default();
        let mut g = GradientMatrices::identity_a();
        g.a[0][0] = f64::INFINITY;
        let z = CellState::new(1.0, 0.0, 0.0, 0.0);
        assert!(generic_step(&z, &ops, &g, 1.0).is_err());
    }

    #[test]
    fn residual_zero_cases() {
        let ops = GenericOperators::default();
        let z = CellState::new(0.3, 0.1, -0.2, 0.9);
        assert_eq!(degeneracy_residual(&ops, &GradientMatrices::default(), &z), (0.0, 0.0));
        let g = GradientMatrices::identity_a();
        assert_eq!(degeneracy_residual(&ops, &g, &CellState::default()), (0.0, 0.0));
    }

    #[test]
    fn thermo_increment_cases() {
        let z = CellState::new(1.0, 0.0, 0.0, 0.0);
        let g = GradientMatrices::identity_a();
        assert_eq!(thermo_increments(&z, &z, &g), (0.0, 0.0));
        let next = CellState::new(2.0, 0.0, 0.0, 0.0);
        assert_eq!(thermo_increments(&z, &next, &g).0, 1.0);
    }

    #[test]
    fn trace_accumulates_from_zero() {
        let mut t = ThermoTrace::default();
        t.push(1.0, 0.5);
        t.push(-0.25, 0.25);
        assert_eq!(t.energy, vec![1.0, 0.75]);
        assert_eq!(t.entropy, vec![0.5, 0.75]);
        assert_eq!(t.min_entropy_step(), Some(0.25));
        assert_eq!(t.to_csv().lines().count(), 3);
    }

    #[test]
    fn zero_network_gives_zero_matrices() {
        let net = DenseNet::zeros(&SPNN_SIZES, Activation::Tanh, Activation::Identity);
        let g = predict_gradient_matrices(&net, &CellState::new(0.1, 0.2, 0.3, 0.4)).unwrap();
        assert_eq!(g, GradientMatrices::default());
    }
}
