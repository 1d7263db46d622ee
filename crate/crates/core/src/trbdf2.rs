//! One-step TR-BDF2 integrator with an embedded third-order error estimate
//! and cubic Hermite dense output.
//!
//! The composite step runs a trapezoidal stage to t + gamma*h and a BDF2
//! stage to t + h. With gamma = 2 - sqrt(2) both stages share the iteration
//! matrix M = I - (gamma*h/2) J, so one numeric Jacobian and one LU
//! factorization per attempt serve the whole step. The load dynamics this
//! integrator drives are stiff (time constants from 1e-3 s up to seconds,
//! harder still during faults), which rules out explicit methods and makes
//! L-stability worth having.

use nalgebra::{DMatrix, DVector};

const GAMMA: f64 = 2.0 - std::f64::consts::SQRT_2;

/// Shared implicit coefficient of both stages: gamma/2 = (1-gamma)/(2-gamma).
const D: f64 = GAMMA / 2.0;

const MAX_NEWTON: usize = 10;
const NEWTON_TOL: f64 = 1e-3;
const FACTOR_MIN: f64 = 0.2;
const FACTOR_MAX: f64 = 5.0;
const SAFETY: f64 = 0.9;

pub type Rhs<'a> = dyn FnMut(f64, &DVector<f64>) -> Option<DVector<f64>> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub enum IntegrateError {
    /// Step control drove h below the floor; the state is not integrable
    /// further (usually the trajectory left the algebraic solution manifold).
    StepSizeUnderflow { t: f64 },
    /// The right-hand side failed at an accepted state, so not even a
    /// zero-length step can be evaluated.
    RhsFailedAtState { t: f64 },
}

/// One accepted step with everything needed for dense output.
#[derive(Debug, Clone)]
pub struct Step {
    pub t0: f64,
    pub h: f64,
    pub x0: DVector<f64>,
    pub f0: DVector<f64>,
    pub x1: DVector<f64>,
    pub f1: DVector<f64>,
}

impl Step {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    /// Cubic Hermite interpolant over [t0, t0+h]. Third-order accurate,
    /// matching the step error itself.
    pub fn interpolate(&self, t: f64) -> DVector<f64> {
        let s = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        &self.x0 * h00 + &self.f0 * (h10 * self.h) + &self.x1 * h01 + &self.f1 * (h11 * self.h)
    }
}

pub struct Integrator {
    pub atol: f64,
    pub rtol: f64,
    h: f64,
    jac: Option<DMatrix<f64>>,
    rejects_since_jac: usize,
}

/// Third-order embedded weights solve the order conditions for the TR-BDF2
/// tableau; the difference against the method weights gives the local error.
fn error_weights() -> [f64; 3] {
    let b2 = 1.0 / (6.0 * GAMMA * (1.0 - GAMMA));
    let b3 = (2.0 - 3.0 * GAMMA) / (6.0 * (1.0 - GAMMA));
    let b1 = 1.0 - b2 - b3;
    let w = 1.0 / (2.0 * (2.0 - GAMMA));
    [w - b1, w - b2, D - b3]
}

impl Integrator {
    pub fn new(atol: f64, rtol: f64) -> Self {
        Integrator { atol, rtol, h: 0.0, jac: None, rejects_since_jac: 0 }
    }

    /// Forget the Jacobian and shrink the step after a state or parameter
    /// discontinuity (event application, controller mode switch).
    pub fn reset_after_discontinuity(&mut self) {
        self.jac = None;
        if self.h > 0.0 {
            self.h = self.h.min(1e-4);
        }
    }

    fn wrms(&self, e: &DVector<f64>, x0: &DVector<f64>, x1: &DVector<f64>) -> f64 {
        let n = e.len();
        if n == 0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let scale = self.atol + self.rtol * x0[i].abs().max(x1[i].abs());
            let r = e[i] / scale;
            acc += r * r;
        }
        (acc / n as f64).sqrt()
    }

    fn numeric_jacobian(
        rhs: &mut Rhs,
        t: f64,
        x: &DVector<f64>,
        f0: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        let n = x.len();
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut delta = f64::EPSILON.sqrt() * x[j].abs().max(1.0);
            let mut col = None;
            for _ in 0..3 {
                let mut xp = x.clone();
                xp[j] += delta;
                if let Some(fp) = rhs(t, &xp) {
                    col = Some((fp - f0) / delta);
                    break;
                }
                delta *= 0.5;
            }
            jac.set_column(j, &col?);
        }
        Some(jac)
    }

    /// Solve z - D*h*f(t_z, z) = rhs_const by modified Newton with the shared
    /// factorization. Returns (z, f(t_z, z)).
    fn stage(
        lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        rhs: &mut Rhs,
        t_z: f64,
        h: f64,
        rhs_const: &DVector<f64>,
        predictor: DVector<f64>,
        atol: f64,
        rtol: f64,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let mut z = predictor;
        let mut last_norm = f64::INFINITY;
        for _ in 0..MAX_NEWTON {
            let fz = rhs(t_z, &z)?;
            let residual = &z - &fz * (D * h) - rhs_const;
            let dz = lu.solve(&residual)?;
            let mut norm = 0.0;
            for i in 0..z.len() {
                let scale = atol + rtol * z[i].abs();
                norm = f64::max(norm, (dz[i] / scale).abs());
            }
            z -= &dz;
            if norm <= NEWTON_TOL {
                let fz = rhs(t_z, &z)?;
                return Some((z, fz));
            }
            if norm > 4.0 * last_norm {
                return None;
            }
            last_norm = norm;
        }
        None
    }

    /// Take one accepted step from (t, x), never stepping past t_limit.
    pub fn step(
        &mut self,
        rhs: &mut Rhs,
        t: f64,
        x: &DVector<f64>,
        t_limit: f64,
    ) -> Result<Step, IntegrateError> {
        let span = t_limit - t;
        assert!(span > 0.0, "step called with nothing left to integrate");
        let f0 = rhs(t, x).ok_or(IntegrateError::RhsFailedAtState { t })?;
        if x.is_empty() {
            // No differential states: jump straight to the limit.
            return Ok(Step { t0: t, h: span, x0: x.clone(), f0: f0.clone(), x1: x.clone(), f1: f0 });
        }
        if self.h <= 0.0 {
            // First call: conservative guess refined by the controller.
            let fn_ = f0.amax().max(1e-10);
            self.h = (0.01 * x.amax().max(1.0) / fn_).min(1e-2).max(1e-8);
        }
        let [e1, e2, e3] = error_weights();
        let h_floor = 1e-13 * t.abs().max(1.0);
        loop {
            let h = self.h.min(span);
            if h < h_floor {
                return Err(IntegrateError::StepSizeUnderflow { t });
            }
            if self.jac.is_none() {
                self.jac = Self::numeric_jacobian(rhs, t, x, &f0);
                self.rejects_since_jac = 0;
                if self.jac.is_none() {
                    self.h *= 0.5;
                    continue;
                }
            }
            let jac = self.jac.as_ref().unwrap();
            let n = x.len();
            let mut m = DMatrix::<f64>::identity(n, n);
            m -= jac * (D * h);
            let lu = m.lu();

            let attempt = (|| {
                let t_g = t + GAMMA * h;
                let c1 = x + &f0 * (GAMMA * h / 2.0);
                let pred1 = x + &f0 * (GAMMA * h);
                let (xg, fg) =
                    Self::stage(&lu, rhs, t_g, h, &c1, pred1, self.atol, self.rtol)?;
                // BDF2 stage: x1 = ag*xg + a0*x + D*h*f(t+h, x1).
                let ag = 1.0 / (GAMMA * (2.0 - GAMMA));
                let a0 = -(1.0 - GAMMA) * (1.0 - GAMMA) / (GAMMA * (2.0 - GAMMA));
                let c2 = &xg * ag + x * a0;
                let pred2 = &c2 + &fg * (D * h);
                let (x1, f1) =
                    Self::stage(&lu, rhs, t + h, h, &c2, pred2, self.atol, self.rtol)?;
                // Filtered error estimate: M^-1 (h * sum (b - bhat)_i f_i).
                let raw = (&f0 * e1 + &fg * e2 + &f1 * e3) * h;
                let est = lu.solve(&raw)?;
                Some((x1, f1, est))
            })();

            match attempt {
                Some((x1, f1, est)) => {
                    let err = self.wrms(&est, x, &x1);
                    if err <= 1.0 {
                        let factor = if err < 1e-10 {
                            FACTOR_MAX
                        } else {
                            (SAFETY * err.powf(-1.0 / 3.0)).clamp(FACTOR_MIN, FACTOR_MAX)
                        };
                        self.h = h * factor;
                        return Ok(Step { t0: t, h, x0: x.clone(), f0, x1, f1 });
                    }
                    let factor = (SAFETY * err.powf(-1.0 / 3.0)).clamp(FACTOR_MIN, 1.0);
                    self.h = h * factor;
                    self.rejects_since_jac += 1;
                    if self.rejects_since_jac >= 2 {
                        self.jac = None;
                    }
                }
                None => {
                    // Newton failure: refresh the Jacobian once, then shrink.
                    if self.rejects_since_jac == 0 && self.jac.is_some() {
                        self.jac = None;
                        self.rejects_since_jac = 1;
                    } else {
                        self.h = h * 0.5;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn integrate_to(
        integ: &mut Integrator,
        rhs: &mut Rhs,
        mut t: f64,
        mut x: DVector<f64>,
        t_end: f64,
    ) -> DVector<f64> {
        while t < t_end - 1e-12 {
            let step = integ.step(rhs, t, &x, t_end).unwrap();
            t = step.t1();
            x = step.x1;
        }
        x
    }

    #[test]
    fn exponential_decay_meets_tolerance() {
        let mut integ = Integrator::new(1e-10, 1e-8);
        let mut rhs = |_t: f64, x: &DVector<f64>| Some(-x.clone());
        let x = integrate_to(&mut integ, &mut rhs, 0.0, DVector::from_vec(vec![1.0]), 2.0);
        assert_relative_eq!(x[0], (-2.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn stiff_relaxation_uses_few_steps() {
        // x' = (sin(t) - x)/tau with tau = 1e-3: explicit methods would need
        // h ~ tau throughout; TR-BDF2 should track the slow manifold.
        let tau = 1e-3;
        let mut integ = Integrator::new(1e-8, 1e-6);
        let mut rhs = |t: f64, x: &DVector<f64>| {
            Some(DVector::from_vec(vec![(t.sin() - x[0]) / tau]))
        };
        let mut t = 0.0;
        let mut x = DVector::from_vec(vec![0.0]);
        let mut steps = 0;
        while t < 3.0 - 1e-12 {
            let step = integ.step(&mut rhs, t, &x, 3.0).unwrap();
            t = step.t1();
            x = step.x1;
            steps += 1;
            assert!(steps < 3000, "step count blew up: integrator is not L-stable");
        }
        // Slow manifold: x ~ sin(t) - tau cos(t) + O(tau^2).
        assert_relative_eq!(x[0], 3.0f64.sin() - tau * 3.0f64.cos(), epsilon = 1e-4);
    }

    #[test]
    fn dense_output_matches_endpoints_and_midpoint() {
        let mut integ = Integrator::new(1e-12, 1e-10);
        let mut rhs = |_t: f64, x: &DVector<f64>| Some(-2.0 * x.clone());
        let x0 = DVector::from_vec(vec![1.0]);
        let step = integ.step(&mut rhs, 0.0, &x0, 1.0).unwrap();
        assert_relative_eq!(step.interpolate(step.t0)[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(step.interpolate(step.t1())[0], step.x1[0], epsilon = 1e-14);
        let tm = step.t0 + step.h / 2.0;
        assert_relative_eq!(step.interpolate(tm)[0], (-2.0 * tm).exp(), epsilon = 1e-8);
    }

    #[test]
    fn two_state_linear_system_against_matrix_exponential() {
        // x' = A x with A = [[0, 1], [-4, -0.4]]: lightly damped oscillator.
        let mut integ = Integrator::new(1e-10, 1e-8);
        let mut rhs = |_t: f64, x: &DVector<f64>| {
            Some(DVector::from_vec(vec![x[1], -4.0 * x[0] - 0.4 * x[1]]))
        };
        let x = integrate_to(
            &mut integ,
            &mut rhs,
            0.0,
            DVector::from_vec(vec![1.0, 0.0]),
            5.0,
        );
        // Reference from the closed-form solution of the damped oscillator:
        // eigenvalues -0.2 +- i*sqrt(4 - 0.04).
        let s = (4.0f64 - 0.04).sqrt();
        let e = (-0.2f64 * 5.0).exp();
        let xr = e * ((s * 5.0).cos() + 0.2 / s * (s * 5.0).sin());
        let vr = e * (-(4.0 / s) * (s * 5.0).sin());
        assert_relative_eq!(x[0], xr, epsilon = 1e-5);
        assert_relative_eq!(x[1], vr, epsilon = 1e-5);
    }

    #[test]
    fn rhs_failure_at_state_is_reported() {
        let mut integ = Integrator::new(1e-8, 1e-6);
        let mut rhs = |_t: f64, _x: &DVector<f64>| None;
        let x0 = DVector::from_vec(vec![1.0]);
        match integ.step(&mut rhs, 0.0, &x0, 1.0) {
            Err(IntegrateError::RhsFailedAtState { t }) => assert_eq!(t, 0.0),
            other => panic!("expected RhsFailedAtState, got {:?}", other),
        }
    }
}
