//! SO(2) yaw symmetry: the group action on vehicle states and task targets,
//! representations over feature layouts, and numerical equivariance checks.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::dynamics::rot_z;
use crate::dynamics::MavState;
use crate::tasks::{rel_state, TaskTargets};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymmetryError {
    #[error("layout index {0} is out of range or repeated")]
    BadPartition(usize),
    #[error("layout does not cover index {0}")]
    Uncovered(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    /// Rotates as a planar vector.
    VecPair(usize, usize),
    /// Invariant.
    Scalar(usize),
}

/// Partition of feature indices into planar-vector pairs and invariant scalars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct FeatureLayout {
    channels: Vec<Channel>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawLayout {
    channels: Vec<Channel>,
    dim: usize,
}

impl TryFrom<RawLayout> for FeatureLayout {
    type Error = SymmetryError;
    fn try_from(r: RawLayout) -> Result<Self, Self::Error> {
        FeatureLayout::new(r.channels, r.dim)
    }
}

impl From<FeatureLayout> for RawLayout {
    fn from(l: FeatureLayout) -> Self {
        RawLayout { channels: l.channels, dim: l.dim }
    }
}

impl FeatureLayout {
    pub fn new(channels: Vec<Channel>, dim: usize) -> Result<Self, SymmetryError> {
        let mut seen = vec![false; dim];
        let mut mark = |i: usize| -> Result<(), SymmetryError> {
            match seen.get_mut(i) {
                Some(s) if !*s => {
                    *s = true;
                    Ok(())
                }
                _ => Err(SymmetryError::BadPartition(i)),
            }
        };
        for c in &channels {
            match *c {
                Channel::VecPair(x, y) => {
                    mark(x)?;
                    mark(y)?;
                }
                Channel::Scalar(i) => mark(i)?,
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(SymmetryError::Uncovered(i));
        }
        Ok(Self { channels, dim })
    }

    /// `pairs` interleaved (x, y) pairs followed by `scalars` scalars.
    pub fn canonical(pairs: usize, scalars: usize) -> Self {
        let mut channels: Vec<Channel> = (0..pairs).map(|k| Channel::VecPair(2 * k, 2 * k + 1)).collect();
        channels.extend((0..scalars).map(|k| Channel::Scalar(2 * pairs + k)));
        Self { channels, dim: 2 * pairs + scalars }
    }

    pub fn scalars_only(dim: usize) -> Self {
        Self::canonical(0, dim)
    }

    /// Grouping of relative state plus previous action: the horizontal
    /// components of p, v, ω, of each R_rel column, and of the previous rate
    /// command rotate together; everything else is invariant.
    pub fn observation_features() -> Self {
        let pairs = [(0, 1), (3, 4), (6, 7), (9, 10), (12, 13), (15, 16), (19, 20)];
        let scalars = [2, 5, 8, 11, 14, 17, 18, 21];
        let mut channels: Vec<Channel> = pairs.iter().map(|&(x, y)| Channel::VecPair(x, y)).collect();
        channels.extend(scalars.iter().map(|&i| Channel::Scalar(i)));
        Self::new(channels, 22).expect("static layout")
    }

    /// Appends `n` invariant scalars after the existing indices.
    pub fn with_extra_scalars(&self, n: usize) -> Self {
        let mut channels = self.channels.clone();
        channels.extend((0..n).map(|k| Channel::Scalar(self.dim + k)));
        Self { channels, dim: self.dim + n }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.channels.iter().filter_map(|c| match *c {
            Channel::VecPair(x, y) => Some((x, y)),
            Channel::Scalar(_) => None,
        })
    }

    pub fn scalars(&self) -> impl Iterator<Item = usize> + '_ {
        self.channels.iter().filter_map(|c| match *c {
            Channel::Scalar(i) => Some(i),
            Channel::VecPair(..) => None,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs().count()
    }

    pub fn n_scalars(&self) -> usize {
        self.scalars().count()
    }

    /// Applies ρ(g) without materializing the matrix.
    pub fn act(&self, g: GroupElement, x: &[f64]) -> Vec<f64> {
        let (s, c) = g.theta.sin_cos();
        let mut y = x.to_vec();
        for (i, j) in self.pairs() {
            y[i] = c * x[i] - s * x[j];
            y[j] = s * x[i] + c * x[j];
        }
        y
    }
}

/// Yaw rotation g_θ with θ normalized to [0, 2π).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupElement {
    theta: f64,
}

impl GroupElement {
    pub fn new(theta: f64) -> Self {
        let mut t = theta.rem_euclid(TAU);
        if t >= TAU {
            t = 0.0;
        }
        Self { theta: t }
    }

    pub fn identity() -> Self {
        Self { theta: 0.0 }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn compose(&self, other: &GroupElement) -> Self {
        Self::new(self.theta + other.theta)
    }

    pub fn inverse(&self) -> Self {
        Self::new(-self.theta)
    }
}

pub fn act_on_state(g: GroupElement, s: &MavState) -> MavState {
    let rz = rot_z(g.theta);
    MavState {
        p: rz * s.p,
        v: rz * s.v,
        r: rz * s.r,
        omega: s.omega,
        motor_f: s.motor_f,
    }
}

pub fn act_on_targets(g: GroupElement, t: &TaskTargets) -> TaskTargets {
    let rz = rot_z(g.theta);
    TaskTargets {
        p_des: rz * t.p_des,
        v_des: rz * t.v_des,
        omega_des: rz * t.omega_des,
        psi_des: t.psi_des + g.theta,
    }
}

pub fn rep_matrix(layout: &FeatureLayout, g: GroupElement) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(layout.dim(), layout.dim());
    let (s, c) = g.theta.sin_cos();
    for ch in layout.channels() {
        match *ch {
            Channel::Scalar(i) => m[(i, i)] = 1.0,
            Channel::VecPair(x, y) => {
                m[(x, x)] = c;
                m[(x, y)] = -s;
                m[(y, x)] = s;
                m[(y, y)] = c;
            }
        }
    }
    m
}

/// Test angles: the four axis-aligned rotations, then a golden-ratio
/// low-discrepancy sequence.
pub fn test_angles(n: usize) -> Vec<f64> {
    let special = [0.0, FRAC_PI_2, PI, 3.0 * FRAC_PI_2];
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    (0..n)
        .map(|k| if k < special.len() { special[k] } else { TAU * ((0.5 + k as f64 * phi) % 1.0) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub trials: usize,
    pub max_violation: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Measures max ‖f(ρ_in(θ)x) − ρ_out(θ)f(x)‖_∞ over Gaussian inputs.
pub fn check_equivariance<F>(
    f: F,
    layout_in: &FeatureLayout,
    layout_out: &FeatureLayout,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivarianceReport, SymmetryError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for theta in test_angles(trials) {
        let g = GroupElement::new(theta);
        let x: Vec<f64> = (0..layout_in.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let fx = f(&x);
        let fgx = f(&layout_in.act(g, &x));
        for v in [&fx, &fgx] {
            if v.len() != layout_out.dim() {
                return Err(SymmetryError::DimensionMismatch { expected: layout_out.dim(), got: v.len() });
            }
        }
        let gfx = layout_out.act(g, &fx);
        let v = fgx.iter().zip(&gfx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // NaN must not pass silently
        worst = if v.is_nan() { f64::NAN } else { worst.max(v) };
        if worst.is_nan() {
            break;
        }
    }
    Ok(EquivarianceReport { trials, max_violation: worst, tol, passed: worst <= tol })
}

/// Whether rel_state(g∘s, g∘targets) = rel_state(s, targets) within `tol`.
pub fn check_relstate_invariance(s: &MavState, targets: &TaskTargets, theta: f64, tol: f64) -> bool {
    let g = GroupElement::new(theta);
    let a = rel_state(s, targets).to_array();
    let b = rel_state(&act_on_state(g, s), &act_on_targets(g, targets)).to_array();
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Random state over a generous envelope, for property tests.
pub fn random_state<R: Rng + ?Sized>(rng: &mut R) -> MavState {
    use crate::dynamics::{orthonormalize, Mat3, Vec3};
    let mut n = || rng.sample::<f64, _>(StandardNormal);
    let r = orthonormalize(&Mat3::from_fn(|_, _| n()));
    MavState {
        p: Vec3::new(n(), n(), n() + 2.0),
        v: Vec3::new(n(), n(), n()),
        r,
        omega: Vec3::new(n(), n(), n()),
        motor_f: [1.0 + n().abs(), 1.0 + n().abs(), 1.0 + n().abs(), 1.0 + n().abs()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{derivative, MavParams, Vec3};
    use crate::tasks::{task_targets, Anchor, Command, TaskConfig, TaskId, TaskProgress};

    #[test]
    fn rot_z_examples() {
        assert_eq!(rot_z(0.0), crate::dynamics::Mat3::identity());
        let v = rot_z(FRAC_PI_2) * Vec3::x();
        assert!((v - Vec3::y()).norm() < 1e-15);
        assert!((rot_z(0.3) * rot_z(1.1) - rot_z(1.4)).amax() < 1e-12);
    }

    #[test]
    fn group_element_normalizes() {
        assert!((GroupElement::new(-FRAC_PI_2).theta() - 3.0 * FRAC_PI_2).abs() < 1e-15);
        assert_eq!(GroupElement::new(TAU).theta(), 0.0);
        let g = GroupElement::new(1.0);
        assert!(g.compose(&g.inverse()).theta() < 1e-15 || g.compose(&g.inverse()).theta() > TAU - 1e-15);
    }

    #[test]
    fn act_on_state_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_state(&mut rng);
        let id = act_on_state(GroupElement::identity(), &s);
        assert_eq!(id, s);
        let (a, b) = (GroupElement::new(0.7), GroupElement::new(2.9));
        let s1 = act_on_state(a, &act_on_state(b, &s));
        let s2 = act_on_state(a.compose(&b), &s);
        assert!((s1.p - s2.p).amax() < 1e-12 && (s1.r - s2.r).amax() < 1e-12 && (s1.v - s2.v).amax() < 1e-12);
        assert_eq!(s1.omega, s.omega);
        assert_eq!(s1.motor_f, s.motor_f);
        let rtr = s1.r.transpose() * s1.r;
        assert!((rtr - crate::dynamics::Mat3::identity()).amax() < 1e-12);
    }

    #[test]
    fn layout_validation() {
        assert!(FeatureLayout::new(vec![Channel::VecPair(0, 1), Channel::Scalar(1)], 2).is_err());
        assert_eq!(FeatureLayout::new(vec![Channel::Scalar(0)], 2), Err(SymmetryError::Uncovered(1)));
        assert!(FeatureLayout::new(vec![Channel::Scalar(3)], 2).is_err());
        let l = FeatureLayout::observation_features();
        assert_eq!((l.n_pairs(), l.n_scalars(), l.dim()), (7, 8, 22));
        let json = serde_json::to_string(&l).unwrap();
        assert_eq!(serde_json::from_str::<FeatureLayout>(&json).unwrap(), l);
        assert!(serde_json::from_str::<FeatureLayout>(r#"{"channels":[{"Scalar":0}],"dim":2}"#).is_err());
    }

    #[test]
    fn rep_matrix_properties() {
        let scal = FeatureLayout::scalars_only(4);
        assert_eq!(rep_matrix(&scal, GroupElement::new(1.0)), DMatrix::identity(4, 4));
        let one = FeatureLayout::canonical(1, 0);
        assert!((rep_matrix(&one, GroupElement::new(PI)) + DMatrix::identity(2, 2)).amax() < 1e-15);

        let l = FeatureLayout::observation_features();
        for t in test_angles(20) {
            let r = rep_matrix(&l, GroupElement::new(t));
            assert!((r.transpose() * &r - DMatrix::identity(22, 22)).amax() < 1e-12);
            let r2 = rep_matrix(&l, GroupElement::new(0.4));
            let r12 = rep_matrix(&l, GroupElement::new(t + 0.4));
            assert!((&r * r2 - r12).amax() < 1e-12);
            let x: Vec<f64> = (0..22).map(|i| i as f64 * 0.1 - 1.0).collect();
            let a = l.act(GroupElement::new(t), &x);
            let b = &r * nalgebra::DVector::from_vec(x);
            assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn checker_examples() {
        let l = FeatureLayout::observation_features();
        let rep = check_equivariance(|x| x.to_vec(), &l, &l, 100, 1e-12, 0).unwrap();
        assert!(rep.passed && rep.max_violation == 0.0);

        let fixed = rep_matrix(&l, GroupElement::new(0.77));
        let rep = check_equivariance(
            |x| (&fixed * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec(),
            &l,
            &l,
            100,
            1e-12,
            0,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DMatrix::<f64>::from_fn(22, 22, |_, _| rng.sample(StandardNormal));
        let rep = check_equivariance(
            |x| (&m * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec(),
            &l,
            &l,
            100,
            1e-6,
            0,
        )
        .unwrap();
        assert!(!rep.passed);

        let err = check_equivariance(|x| x[..3].to_vec(), &l, &l, 5, 1e-6, 0);
        assert!(matches!(err, Err(SymmetryError::DimensionMismatch { .. })));
    }

    #[test]
    fn relstate_invariant_for_all_tasks() {
        let cfg = TaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for task in TaskId::ALL {
            for t in test_angles(30) {
                let cmd = cfg.sample_command(&mut rng, task);
                let s = random_state(&mut rng);
                let anchor = Anchor::from_pose(&cmd, &Vec3::new(0.3, -0.2, 2.0), 0.5, &cfg);
                let targets = task_targets(&cmd, &anchor, &s, &TaskProgress::default(), &cfg);
                assert!(check_relstate_invariance(&s, &targets, 0.0, 0.0));
                assert!(check_relstate_invariance(&s, &targets, t, 1e-9), "{task:?} θ={t}");
                assert!(check_relstate_invariance(&s, &targets, 1.3, 1e-9));
            }
        }
    }

    #[test]
    fn targets_commute_with_group_action() {
        // realizing targets from a rotated state and anchor equals rotating
        // the realized targets
        let cfg = TaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for task in TaskId::ALL {
            let cmd: Command = cfg.sample_command(&mut rng, task);
            let s = random_state(&mut rng);
            let anchor = Anchor { point: Vec3::new(0.4, 0.1, 2.0), yaw: 0.2 };
            let t = task_targets(&cmd, &anchor, &s, &TaskProgress::default(), &cfg);
            let g = GroupElement::new(1.9);
            let ga = Anchor { point: rot_z(1.9) * anchor.point, yaw: anchor.yaw + 1.9 };
            let t2 = task_targets(&cmd, &ga, &act_on_state(g, &s), &TaskProgress::default(), &cfg);
            let t1 = act_on_targets(g, &t);
            assert!((t1.p_des - t2.p_des).amax() < 1e-9, "{task:?}");
            assert!((t1.v_des - t2.v_des).amax() < 1e-9);
            assert!((t1.omega_des - t2.omega_des).amax() < 1e-9);
            assert!((rot_z(t1.psi_des) - rot_z(t2.psi_des)).amax() < 1e-9);
        }
    }

    #[test]
    fn dynamics_equivariance_requires_isotropic_drag() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let iso = MavParams { drag: [0.2, 0.2, 0.1], ..MavParams::default() };
        let aniso = MavParams { drag: [0.2, 0.5, 0.1], ..MavParams::default() };
        let mut worst_iso = 0.0f64;
        let mut worst_aniso = 0.0f64;
        for t in test_angles(50).into_iter().skip(1) {
            let g = GroupElement::new(t);
            let s = random_state(&mut rng);
            let thrusts = [1.0, 2.0, 1.5, 0.7];
            for (params, worst) in [(&iso, &mut worst_iso), (&aniso, &mut worst_aniso)] {
                let d = derivative(&s, &thrusts, params).unwrap();
                let dg = derivative(&act_on_state(g, &s), &thrusts, params).unwrap();
                let rz = rot_z(t);
                let e = [
                    (dg.p_dot - rz * d.p_dot).amax(),
                    (dg.v_dot - rz * d.v_dot).amax(),
                    (dg.r_dot - rz * d.r_dot).amax(),
                    (dg.omega_dot - d.omega_dot).amax(),
                ];
                *worst = e.iter().fold(*worst, |a, b| a.max(*b));
            }
        }
        assert!(worst_iso < 1e-9, "{worst_iso}");
        assert!(worst_aniso > 1e-6);
    }
}
