//! Rigid-body quadrotor model: Newton-Euler equations on SO(3), an X-frame
//! motor layout with first-order motor lag, a body-rate inner loop and RK4
//! integration at the physics rate.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("state diverged during integration")]
    Diverged,
    #[error("motor mixing matrix is singular")]
    SingularMixer,
}

/// Physical and low-level control parameters of the vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MavParams {
    /// kg
    pub mass: f64,
    /// Diagonal of the inertia tensor, kg·m².
    pub inertia: [f64; 3],
    /// Diagonal of the linear drag matrix, N·s/m.
    pub drag: [f64; 3],
    /// Motor positions in the body frame, m.
    pub arms: [[f64; 3]; 4],
    /// Rotor spin direction (+1/-1), sign of each motor's reaction yaw torque.
    pub spin: [f64; 4],
    /// Yaw torque per unit thrust, m.
    pub k_tau: f64,
    /// Motor time constant, s.
    pub motor_tc: f64,
    /// Max thrust per motor, N.
    pub f_motor_max: f64,
    /// Body-rate P gain, N·m·s/rad per axis.
    pub rate_gain: [f64; 3],
    /// Body-rate command bound, rad/s.
    pub omega_max: f64,
}

/// Arm length from the motor-to-motor span of 0.149 m.
pub const ARM_RADIUS: f64 = 0.149 / 2.0;
pub const NOMINAL_MASS: f64 = 0.46;
pub const THRUST_TO_WEIGHT: f64 = 4.1;

impl Default for MavParams {
    fn default() -> Self {
        let d = ARM_RADIUS / std::f64::consts::SQRT_2;
        let inertia = [8e-4, 8e-4, 1.4e-3];
        Self {
            mass: NOMINAL_MASS,
            inertia,
            drag: [0.05, 0.05, 0.08],
            // front-right, back-left, front-left, back-right
            arms: [[d, -d, 0.0], [-d, d, 0.0], [d, d, 0.0], [-d, -d, 0.0]],
            spin: [1.0, 1.0, -1.0, -1.0],
            k_tau: 0.016,
            motor_tc: 0.02,
            f_motor_max: THRUST_TO_WEIGHT * NOMINAL_MASS * GRAVITY / 4.0,
            rate_gain: [inertia[0] * 50.0, inertia[1] * 50.0, inertia[2] * 25.0],
            omega_max: 10.0,
        }
    }
}

impl MavParams {
    pub fn gravity(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, -GRAVITY)
    }

    pub fn inertia_matrix(&self) -> Mat3 {
        Mat3::from_diagonal(&Vec3::from(self.inertia))
    }

    pub fn drag_matrix(&self) -> Mat3 {
        Mat3::from_diagonal(&Vec3::from(self.drag))
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * GRAVITY
    }

    pub fn max_collective(&self) -> f64 {
        4.0 * self.f_motor_max
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mass > 0.0) {
            return Err("mass must be positive".into());
        }
        if self.inertia.iter().any(|j| !(*j > 0.0)) {
            return Err("inertia diagonal must be positive".into());
        }
        if self.drag.iter().any(|k| !(*k >= 0.0)) {
            return Err("drag diagonal must be non-negative".into());
        }
        if !(self.motor_tc > 0.0) || !(self.f_motor_max > 0.0) || !(self.omega_max > 0.0) {
            return Err("motor_tc, f_motor_max and omega_max must be positive".into());
        }
        if self.max_collective() < self.hover_thrust() {
            return Err("motors cannot lift the vehicle".into());
        }
        Mixer::new(self).map_err(|e| e.to_string())?;
        Ok(())
    }
}

/// Collective thrust and body-rate setpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub thrust: f64,
    pub rates: Vec3,
}

impl Action {
    pub fn hover(params: &MavParams) -> Self {
        Self { thrust: params.hover_thrust(), rates: Vec3::zeros() }
    }

    pub fn clamped(&self, params: &MavParams) -> Self {
        let w = params.omega_max;
        Self {
            thrust: self.thrust.clamp(0.0, params.max_collective()),
            rates: self.rates.map(|x| x.clamp(-w, w)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MavState {
    /// World-frame position, m.
    pub p: Vec3,
    /// World-frame velocity, m/s.
    pub v: Vec3,
    /// Body-to-world rotation.
    pub r: Mat3,
    /// Body-frame angular velocity, rad/s.
    pub omega: Vec3,
    /// Per-motor thrust, N.
    pub motor_f: [f64; 4],
}

impl MavState {
    /// Level hover at `p` with heading `yaw`, motors at hover thrust.
    pub fn hover(p: Vec3, yaw: f64, params: &MavParams) -> Self {
        Self {
            p,
            v: Vec3::zeros(),
            r: rot_z(yaw),
            omega: Vec3::zeros(),
            motor_f: [params.hover_thrust() / 4.0; 4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.r.iter().all(|x| x.is_finite())
            && self.omega.iter().all(|x| x.is_finite())
            && self.motor_f.iter().all(|x| x.is_finite())
    }

    fn check_finite(&self) -> Result<(), DynamicsError> {
        let fields: [(&'static str, bool); 5] = [
            ("position", self.p.iter().all(|x| x.is_finite())),
            ("velocity", self.v.iter().all(|x| x.is_finite())),
            ("attitude", self.r.iter().all(|x| x.is_finite())),
            ("body rate", self.omega.iter().all(|x| x.is_finite())),
            ("motor thrust", self.motor_f.iter().all(|x| x.is_finite())),
        ];
        match fields.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(DynamicsError::NonFinite(name)),
            None => Ok(()),
        }
    }

    /// Unit quaternion of the attitude with non-negative scalar part.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        quaternion_of(&self.r)
    }

    /// Heading of the body x-axis projected on the horizontal plane.
    pub fn yaw(&self) -> f64 {
        heading_of(&self.r)
    }

    pub fn world_rates(&self) -> Vec3 {
        self.r * self.omega
    }
}

pub fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn quaternion_of(r: &Mat3) -> UnitQuaternion<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Rotation angle between two attitudes, in [0, π]. atan2 of the sine and
/// cosine of the relative rotation stays accurate near zero, where acos
/// loses half the digits.
pub fn attitude_distance(a: &Mat3, b: &Mat3) -> f64 {
    let r = a.transpose() * b;
    let sin = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin.atan2(cos)
}

pub fn heading_of(r: &Mat3) -> f64 {
    let x = r.column(0);
    if x[0].hypot(x[1]) > 1e-6 {
        x[1].atan2(x[0])
    } else {
        // body x is vertical; fall back to the body y-axis
        let y = r.column(1);
        (-y[0]).atan2(y[1])
    }
}

/// Gram–Schmidt on the columns; the third column is re-derived as a cross
/// product so the result is a proper rotation.
pub fn orthonormalize(r: &Mat3) -> Mat3 {
    let c0 = r.column(0).normalize();
    let c1 = r.column(1) - c0 * c0.dot(&r.column(1));
    let c1 = c1.normalize();
    let c2 = c0.cross(&c1);
    Mat3::from_columns(&[c0, c1, c2])
}

/// Time derivative of the rigid-body state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub p_dot: Vec3,
    pub v_dot: Vec3,
    pub r_dot: Mat3,
    pub omega_dot: Vec3,
}

/// Collective thrust and body torque produced by the four motor thrusts.
pub fn wrench(thrusts: &[f64; 4], params: &MavParams) -> (f64, Vec3) {
    let e3 = Vec3::z();
    let mut f_sigma = 0.0;
    let mut tau = Vec3::zeros();
    for i in 0..4 {
        let arm = Vec3::from(params.arms[i]);
        f_sigma += thrusts[i];
        tau += arm.cross(&(e3 * thrusts[i])) + e3 * (params.spin[i] * params.k_tau * thrusts[i]);
    }
    (f_sigma, tau)
}

pub fn derivative(
    state: &MavState,
    thrusts: &[f64; 4],
    params: &MavParams,
) -> Result<StateDerivative, DynamicsError> {
    state.check_finite()?;
    if thrusts.iter().any(|f| !f.is_finite()) {
        return Err(DynamicsError::NonFinite("applied thrust"));
    }
    Ok(rigid_body_rates(state, thrusts, params))
}

fn rigid_body_rates(state: &MavState, thrusts: &[f64; 4], params: &MavParams) -> StateDerivative {
    let (f_sigma, tau) = wrench(thrusts, params);
    let j = Vec3::from(params.inertia);
    let drag = Vec3::from(params.drag);
    let thrust_w = state.r * Vec3::new(0.0, 0.0, f_sigma);
    let v_dot = params.gravity() + (thrust_w - drag.component_mul(&state.v)) / params.mass;
    let jw = j.component_mul(&state.omega);
    let omega_dot = (tau - state.omega.cross(&jw)).component_div(&j);
    StateDerivative {
        p_dot: state.v,
        v_dot,
        r_dot: state.r * hat(&state.omega),
        omega_dot,
    }
}

/// Feedback-linearizing proportional body-rate law.
pub fn rate_controller(omega_cmd: &Vec3, omega: &Vec3, params: &MavParams) -> Vec3 {
    let j = Vec3::from(params.inertia);
    let k = Vec3::from(params.rate_gain);
    k.component_mul(&(omega_cmd - omega)) + omega.cross(&j.component_mul(omega))
}

/// Inverse of the thrust/torque allocation.
#[derive(Debug, Clone)]
pub struct Mixer {
    inv: Matrix4<f64>,
    f_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixOutput {
    pub thrusts: [f64; 4],
    pub saturated: bool,
}

impl Mixer {
    pub fn new(params: &MavParams) -> Result<Self, DynamicsError> {
        let mut m = Matrix4::zeros();
        for i in 0..4 {
            let basis = {
                let mut t = [0.0; 4];
                t[i] = 1.0;
                t
            };
            let (f, tau) = wrench(&basis, params);
            m.set_column(i, &Vector4::new(f, tau.x, tau.y, tau.z));
        }
        let inv = m.try_inverse().ok_or(DynamicsError::SingularMixer)?;
        Ok(Self { inv, f_max: params.f_motor_max })
    }

    fn solve(&self, f: f64, tau: &Vec3) -> Vector4<f64> {
        self.inv * Vector4::new(f, tau.x, tau.y, tau.z)
    }

    /// Largest `s ∈ [0, 1]` keeping `base + s·dir` inside the motor bounds,
    /// or `None` when `base` itself is infeasible.
    fn feasible_scale(&self, base: &Vector4<f64>, dir: &Vector4<f64>) -> Option<f64> {
        const EPS: f64 = 1e-12;
        if base.iter().any(|b| *b < -EPS || *b > self.f_max + EPS) {
            return None;
        }
        let mut s = 1.0f64;
        for i in 0..4 {
            let (b, d) = (base[i], dir[i]);
            if d > 0.0 {
                s = s.min((self.f_max - b) / d);
            } else if d < 0.0 {
                s = s.min(-b / d);
            }
        }
        Some(s.clamp(0.0, 1.0))
    }

    /// Motor thrusts realizing `(f_sigma, tau)`. Under saturation the yaw
    /// torque is scaled down first, then roll/pitch; collective thrust is
    /// preserved whenever it is itself achievable.
    pub fn mix(&self, f_sigma: f64, tau: &Vec3) -> MixOutput {
        let f = f_sigma.clamp(0.0, 4.0 * self.f_max);
        let mut saturated = f != f_sigma;
        let rp = Vec3::new(tau.x, tau.y, 0.0);
        let yaw = Vec3::new(0.0, 0.0, tau.z);
        let base = self.solve(f, &rp);
        let yaw_dir = self.solve(0.0, &yaw);
        let t = match self.feasible_scale(&base, &yaw_dir) {
            Some(s) => {
                saturated |= s < 1.0;
                base + yaw_dir * s
            }
            None => {
                let collective = self.solve(f, &Vec3::zeros());
                let rp_dir = self.solve(0.0, &rp);
                let s = self.feasible_scale(&collective, &rp_dir).unwrap_or(0.0);
                saturated = true;
                collective + rp_dir * s
            }
        };
        let mut thrusts = [0.0; 4];
        for i in 0..4 {
            let c = t[i].clamp(0.0, self.f_max);
            saturated |= (c - t[i]).abs() > 1e-9;
            thrusts[i] = c;
        }
        MixOutput { thrusts, saturated }
    }
}

pub fn mix(f_sigma: f64, tau: &Vec3, params: &MavParams) -> Result<MixOutput, DynamicsError> {
    Ok(Mixer::new(params)?.mix(f_sigma, tau))
}

pub const PHYSICS_DT: f64 = 1e-3;
pub const POLICY_DT: f64 = 1e-2;

#[derive(Clone)]
struct Stage {
    p: Vec3,
    v: Vec3,
    r: Mat3,
    omega: Vec3,
    motor: [f64; 4],
}

fn stage_rates(x: &Stage, setpoint: &[f64; 4], params: &MavParams) -> Stage {
    let s = MavState { p: x.p, v: x.v, r: x.r, omega: x.omega, motor_f: x.motor };
    let d = rigid_body_rates(&s, &x.motor, params);
    let mut motor = [0.0; 4];
    for i in 0..4 {
        motor[i] = (setpoint[i] - x.motor[i]) / params.motor_tc;
    }
    Stage { p: d.p_dot, v: d.v_dot, r: d.r_dot, omega: d.omega_dot, motor }
}

fn stage_axpy(x: &Stage, h: f64, k: &Stage) -> Stage {
    let mut motor = x.motor;
    for i in 0..4 {
        motor[i] += h * k.motor[i];
    }
    Stage {
        p: x.p + k.p * h,
        v: x.v + k.v * h,
        r: x.r + k.r * h,
        omega: x.omega + k.omega * h,
        motor,
    }
}

/// One RK4 physics substep with motor setpoints held constant.
pub fn integrate_substep(
    state: &MavState,
    setpoint: &[f64; 4],
    params: &MavParams,
    dt: f64,
) -> MavState {
    let x = Stage { p: state.p, v: state.v, r: state.r, omega: state.omega, motor: state.motor_f };
    let k1 = stage_rates(&x, setpoint, params);
    let k2 = stage_rates(&stage_axpy(&x, dt / 2.0, &k1), setpoint, params);
    let k3 = stage_rates(&stage_axpy(&x, dt / 2.0, &k2), setpoint, params);
    let k4 = stage_rates(&stage_axpy(&x, dt, &k3), setpoint, params);
    let w = dt / 6.0;
    let mut motor_f = x.motor;
    for i in 0..4 {
        motor_f[i] += w * (k1.motor[i] + 2.0 * k2.motor[i] + 2.0 * k3.motor[i] + k4.motor[i]);
        motor_f[i] = motor_f[i].clamp(0.0, params.f_motor_max);
    }
    MavState {
        p: x.p + (k1.p + k2.p * 2.0 + k3.p * 2.0 + k4.p) * w,
        v: x.v + (k1.v + k2.v * 2.0 + k3.v * 2.0 + k4.v) * w,
        r: orthonormalize(&(x.r + (k1.r + k2.r * 2.0 + k3.r * 2.0 + k4.r) * w)),
        omega: x.omega + (k1.omega + k2.omega * 2.0 + k3.omega * 2.0 + k4.omega) * w,
        motor_f,
    }
}

/// Advances one policy period: the action is held for `substeps` physics
/// steps of length `dt_physics`, each running rate loop, mixer, motor lag
/// and RK4.
pub fn step(
    state: &MavState,
    action: &Action,
    params: &MavParams,
    dt_physics: f64,
    substeps: usize,
) -> Result<MavState, DynamicsError> {
    let mixer = Mixer::new(params)?;
    let action = action.clamped(params);
    let mut s = state.clone();
    for _ in 0..substeps {
        let tau = rate_controller(&action.rates, &s.omega, params);
        let setpoint = mixer.mix(action.thrust, &tau).thrusts;
        s = integrate_substep(&s, &setpoint, params, dt_physics);
        if !s.is_finite() {
            return Err(DynamicsError::Diverged);
        }
    }
    Ok(s)
}

/// Default policy step: 10 substeps at 1 kHz.
pub fn policy_step(state: &MavState, action: &Action, params: &MavParams) -> Result<MavState, DynamicsError> {
    step(state, action, params, PHYSICS_DT, (POLICY_DT / PHYSICS_DT).round() as usize)
}

/// Randomization half-widths at curriculum level 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitRanges {
    /// Nominal start position (world), m.
    pub nominal_position: [f64; 3],
    pub position: [f64; 3],
    /// m/s per axis
    pub velocity: f64,
    /// Max tilt from level, degrees.
    pub tilt_deg: f64,
    /// Max heading offset, degrees.
    pub yaw_deg: f64,
    /// rad/s per axis
    pub body_rate: f64,
    /// Fraction of hover thrust.
    pub motor_thrust: f64,
    pub mass: f64,
    pub inertia: f64,
    pub drag: f64,
    pub motor_tc: f64,
}

impl Default for InitRanges {
    fn default() -> Self {
        Self {
            nominal_position: [0.0, 0.0, 2.0],
            position: [1.0, 1.0, 0.5],
            velocity: 1.0,
            tilt_deg: 30.0,
            yaw_deg: 180.0,
            body_rate: 1.0,
            motor_thrust: 0.2,
            mass: 0.1,
            inertia: 0.1,
            drag: 0.2,
            motor_tc: 0.2,
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Samples an initial state and perturbed parameters; every range is scaled
/// by `level`. At level 0 this is the nominal hover state with nominal
/// parameters. In-plane symmetric quantities (Jxx/Jyy, Kxx/Kyy) share one
/// factor so the yaw symmetry of the model is kept.
pub fn randomize_init<R: Rng + ?Sized>(
    rng: &mut R,
    level: f64,
    ranges: &InitRanges,
    nominal: &MavParams,
) -> (MavState, MavParams) {
    let level = level.clamp(0.0, 1.0);
    let mut params = nominal.clone();
    let scale = |rng: &mut R, w: f64| 1.0 + symmetric(rng, w * level);

    params.mass *= scale(rng, ranges.mass);
    let j_xy = scale(rng, ranges.inertia);
    let j_z = scale(rng, ranges.inertia);
    params.inertia = [nominal.inertia[0] * j_xy, nominal.inertia[1] * j_xy, nominal.inertia[2] * j_z];
    let k_xy = scale(rng, ranges.drag);
    let k_z = scale(rng, ranges.drag);
    params.drag = [nominal.drag[0] * k_xy, nominal.drag[1] * k_xy, nominal.drag[2] * k_z];
    params.motor_tc *= scale(rng, ranges.motor_tc);

    let mut p = Vec3::from(ranges.nominal_position);
    for i in 0..3 {
        p[i] += symmetric(rng, ranges.position[i] * level);
    }
    let v = Vec3::from_fn(|_, _| symmetric(rng, ranges.velocity * level));
    let omega = Vec3::from_fn(|_, _| symmetric(rng, ranges.body_rate * level));

    let tilt = ranges.tilt_deg.to_radians() * level;
    let tilt_angle = if tilt > 0.0 { rng.random_range(0.0..=tilt) } else { 0.0 };
    let tilt_dir = rng.random_range(0.0..std::f64::consts::TAU);
    let yaw = symmetric(rng, ranges.yaw_deg.to_radians() * level);
    let axis = Vec3::new(tilt_dir.cos(), tilt_dir.sin(), 0.0);
    let tilt_rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), tilt_angle);
    let r = rot_z(yaw) * tilt_rot.matrix();

    let hover = nominal.hover_thrust() / 4.0;
    let mut motor_f = [0.0; 4];
    for f in motor_f.iter_mut() {
        *f = (hover * (1.0 + symmetric(rng, ranges.motor_thrust * level))).clamp(0.0, params.f_motor_max);
    }
    (MavState { p, v, r, omega, motor_f }, params)
}

/// Kinetic plus potential energy.
pub fn mechanical_energy(state: &MavState, params: &MavParams) -> f64 {
    let j = Vec3::from(params.inertia);
    0.5 * params.mass * state.v.norm_squared() - params.mass * params.gravity().dot(&state.p)
        + 0.5 * state.omega.dot(&j.component_mul(&state.omega))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).amax() <= tol
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let params = MavParams::default();
        let s = MavState::hover(Vec3::new(0.0, 0.0, 1.0), 0.0, &params);
        let d = derivative(&s, &s.motor_f, &params).unwrap();
        assert!(vec_close(&d.v_dot, &Vec3::zeros(), 1e-12));
        assert!(vec_close(&d.omega_dot, &Vec3::zeros(), 1e-12));
        assert!(vec_close(&d.p_dot, &Vec3::zeros(), 0.0));
    }

    #[test]
    fn zero_thrust_is_free_fall() {
        let params = MavParams::default();
        let mut s = MavState::hover(Vec3::zeros(), 0.3, &params);
        s.motor_f = [0.0; 4];
        let d = derivative(&s, &[0.0; 4], &params).unwrap();
        assert!(vec_close(&d.v_dot, &Vec3::new(0.0, 0.0, -9.81), 1e-12));
    }

    #[test]
    fn drag_decelerates_at_hover_thrust() {
        let params = MavParams { drag: [0.3, 0.3, 0.1], ..MavParams::default() };
        let mut s = MavState::hover(Vec3::zeros(), 0.0, &params);
        s.v = Vec3::new(1.0, 0.0, 0.0);
        let d = derivative(&s, &s.motor_f, &params).unwrap();
        let expected = Vec3::new(-0.3 / params.mass, 0.0, 0.0);
        assert!(vec_close(&d.v_dot, &expected, 1e-12), "{:?}", d.v_dot);
    }

    #[test]
    fn derivative_rejects_nan() {
        let params = MavParams::default();
        let mut s = MavState::hover(Vec3::zeros(), 0.0, &params);
        s.v.x = f64::NAN;
        assert_eq!(derivative(&s, &s.motor_f, &params), Err(DynamicsError::NonFinite("velocity")));
        let s = MavState::hover(Vec3::zeros(), 0.0, &params);
        assert!(derivative(&s, &[0.0, f64::INFINITY, 0.0, 0.0], &params).is_err());
    }

    #[test]
    fn rate_controller_laws() {
        let params = MavParams::default();
        let w = Vec3::new(0.4, -1.0, 2.0);
        let j = Vec3::from(params.inertia);
        let gyro = w.cross(&j.component_mul(&w));
        assert!(vec_close(&rate_controller(&w, &w, &params), &gyro, 1e-15));

        let k = 0.7;
        let p = MavParams { rate_gain: [k; 3], ..params };
        let tau = rate_controller(&Vec3::new(0.0, 5.0, 0.0), &Vec3::zeros(), &p);
        assert!(vec_close(&tau, &Vec3::new(0.0, 5.0 * k, 0.0), 1e-15));
    }

    #[test]
    fn rate_step_response_reaches_90_percent_in_50ms() {
        let params = MavParams::default();
        let mixer = Mixer::new(&params).unwrap();
        let mut s = MavState::hover(Vec3::zeros(), 0.0, &params);
        let cmd = Vec3::new(0.0, 5.0, 0.0);
        let mut reached = None;
        for k in 1..=200 {
            let tau = rate_controller(&cmd, &s.omega, &params);
            let sp = mixer.mix(params.hover_thrust(), &tau).thrusts;
            s = integrate_substep(&s, &sp, &params, PHYSICS_DT);
            if s.omega.y >= 4.5 {
                reached = Some(k as f64 * PHYSICS_DT);
                break;
            }
        }
        let t = reached.expect("never reached 90%");
        assert!(t <= 0.05, "90% rise time {t}");
    }

    #[test]
    fn mixer_symmetric_and_yaw_cases() {
        let params = MavParams::default();
        let mg = params.hover_thrust();
        let out = mix(mg, &Vec3::zeros(), &params).unwrap();
        for f in out.thrusts {
            assert!((f - mg / 4.0).abs() < 1e-12);
        }
        assert!(!out.saturated);

        let out = mix(mg, &Vec3::new(0.0, 0.0, 0.01), &params).unwrap();
        for i in 0..4 {
            let dev = out.thrusts[i] - mg / 4.0;
            assert!((dev.signum() - params.spin[i]).abs() < 1e-12, "motor {i}: {dev}");
            assert!((dev.abs() - 0.01 / (4.0 * params.k_tau)).abs() < 1e-12);
        }
    }

    #[test]
    fn mixer_round_trip_when_unsaturated() {
        let params = MavParams::default();
        let mixer = Mixer::new(&params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let f = rng.random_range(2.0..12.0);
            let tau = Vec3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.01..0.01),
            );
            let out = mixer.mix(f, &tau);
            if out.saturated {
                continue;
            }
            let (f2, tau2) = wrench(&out.thrusts, &params);
            assert!((f2 - f).abs() < 1e-9);
            assert!(vec_close(&tau2, &tau, 1e-9));
        }
    }

    #[test]
    fn mixer_saturation_keeps_collective_over_yaw() {
        let params = MavParams::default();
        let mg = params.hover_thrust();
        let out = mix(mg, &Vec3::new(0.0, 0.0, 10.0), &params).unwrap();
        assert!(out.saturated);
        let (f, tau) = wrench(&out.thrusts, &params);
        assert!((f - mg).abs() < 1e-9);
        assert!(tau.z > 0.0);
        assert!(out.thrusts.iter().all(|t| (0.0..=params.f_motor_max).contains(t)));

        // roll demand beyond capability still keeps collective
        let out = mix(mg, &Vec3::new(5.0, 0.0, 1.0), &params).unwrap();
        assert!(out.saturated);
        let (f, tau) = wrench(&out.thrusts, &params);
        assert!((f - mg).abs() < 1e-9);
        assert!(tau.x > 0.0);
    }

    #[test]
    fn hover_held_for_one_second() {
        let params = MavParams::default();
        let s0 = MavState::hover(Vec3::new(1.0, -2.0, 3.0), 0.7, &params);
        let mut s = s0.clone();
        for _ in 0..100 {
            s = policy_step(&s, &Action::hover(&params), &params).unwrap();
        }
        assert!((s.p - s0.p).norm() < 1e-3);
    }

    #[test]
    fn one_policy_step_of_free_fall() {
        let params = MavParams::default();
        let mut s = MavState::hover(Vec3::new(0.0, 0.0, 5.0), 0.0, &params);
        s.motor_f = [0.0; 4];
        let a = Action { thrust: 0.0, rates: Vec3::zeros() };
        let s1 = policy_step(&s, &a, &params).unwrap();
        assert!((s1.v.z + 0.0981).abs() < 1e-4, "{}", s1.v.z);
    }

    #[test]
    fn pitch_rate_command_integrates_to_angle() {
        let params = MavParams::default();
        let mut s = MavState::hover(Vec3::new(0.0, 0.0, 10.0), 0.0, &params);
        let a = Action { thrust: params.hover_thrust(), rates: Vec3::new(0.0, 5.0, 0.0) };
        for _ in 0..20 {
            s = policy_step(&s, &a, &params).unwrap();
        }
        // rotation about body y: R = Ry(θ), R[0,2] = sin θ, R[0,0] = cos θ
        let pitch = s.r[(0, 2)].atan2(s.r[(0, 0)]);
        assert!((pitch - 1.0).abs() <= 0.1, "pitch {pitch}");
    }

    #[test]
    fn rotation_stays_orthonormal() {
        let params = MavParams::default();
        let mut s = MavState::hover(Vec3::new(0.0, 0.0, 50.0), 0.0, &params);
        let a = Action { thrust: params.hover_thrust(), rates: Vec3::new(3.0, -4.0, 2.0) };
        for _ in 0..300 {
            s = policy_step(&s, &a, &params).unwrap();
            let err = (s.r.transpose() * s.r - Mat3::identity()).amax();
            assert!(err < 1e-5);
        }
        assert!((s.r.determinant() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn energy_conserved_without_thrust_or_drag() {
        let params = MavParams { drag: [0.0; 3], ..MavParams::default() };
        let mut s = MavState::hover(Vec3::new(0.0, 0.0, 100.0), 0.2, &params);
        s.motor_f = [0.0; 4];
        s.v = Vec3::new(1.0, -2.0, 3.0);
        s.omega = Vec3::new(0.5, 0.1, 0.0);
        for _ in 0..500 {
            let e0 = mechanical_energy(&s, &params);
            let s1 = integrate_substep(&s, &[0.0; 4], &params, PHYSICS_DT);
            let e1 = mechanical_energy(&s1, &params);
            assert!((e0 - e1) / e0.abs() < 1e-6);
            s = s1;
        }
    }

    #[test]
    fn nan_action_flags_divergence() {
        let params = MavParams::default();
        let s = MavState::hover(Vec3::zeros(), 0.0, &params);
        let a = Action { thrust: f64::NAN, rates: Vec3::zeros() };
        assert_eq!(policy_step(&s, &a, &params), Err(DynamicsError::Diverged));
    }

    #[test]
    fn randomize_level_zero_is_nominal() {
        let params = MavParams::default();
        let ranges = InitRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, p) = randomize_init(&mut rng, 0.0, &ranges, &params);
        assert_eq!(p, params);
        assert_eq!(s, MavState::hover(Vec3::from(ranges.nominal_position), 0.0, &params));
    }

    #[test]
    fn randomize_is_deterministic_per_seed() {
        let params = MavParams::default();
        let ranges = InitRanges::default();
        let a = randomize_init(&mut ChaCha8Rng::seed_from_u64(11), 0.8, &ranges, &params);
        let b = randomize_init(&mut ChaCha8Rng::seed_from_u64(11), 0.8, &ranges, &params);
        assert_eq!(a, b);
    }

    #[test]
    fn randomize_full_level_covers_position_range() {
        let params = MavParams::default();
        let ranges = InitRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lo = [f64::MAX; 3];
        let mut hi = [f64::MIN; 3];
        for _ in 0..10_000 {
            let (s, p) = randomize_init(&mut rng, 1.0, &ranges, &params);
            for i in 0..3 {
                let d = s.p[i] - ranges.nominal_position[i];
                lo[i] = lo[i].min(d);
                hi[i] = hi[i].max(d);
            }
            assert!((p.mass / params.mass - 1.0).abs() <= 0.1 + 1e-12);
            assert_eq!(p.drag[0], p.drag[1]);
            assert!(s.motor_f.iter().all(|f| *f >= 0.0 && *f <= p.f_motor_max));
            assert!((s.r.transpose() * s.r - Mat3::identity()).amax() < 1e-9);
        }
        for i in 0..3 {
            let w = ranges.position[i];
            assert!(hi[i] >= 0.98 * w && hi[i] <= w, "axis {i} hi {}", hi[i]);
            assert!(lo[i] <= -0.98 * w && lo[i] >= -w, "axis {i} lo {}", lo[i]);
        }
    }
}
