use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::tensor::{GradTape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Rk4,
}

impl Solver {
    pub fn default_steps(self) -> usize {
        match self {
            Solver::Euler => 8,
            Solver::Rk4 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Solver::Euler => "euler",
            Solver::Rk4 => "rk4",
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "euler" => Ok(Solver::Euler),
            "rk4" => Ok(Solver::Rk4),
            other => Err(format!("unknown solver '{other}' (expected euler or rk4)")),
        }
    }
}

/// Fixed-step integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub solver: Solver,
    pub steps: usize,
    pub t0: f64,
    pub t1: f64,
}

impl OdeConfig {
    pub fn new(solver: Solver) -> Self {
        Self { solver, steps: solver.default_steps(), t0: 0.0, t1: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.t1 > self.t0) || !self.t0.is_finite() || !self.t1.is_finite() {
            return Err(ModelError::Contract(format!("invalid ODE settings {self:?}")));
        }
        Ok(())
    }
}

/// State arithmetic plus the vector field, so one stepping routine serves
/// both the differentiable tape and plain f64 vectors.
pub trait OdeBackend {
    type State: Clone;
    fn field(&mut self, h: &Self::State, t: f64) -> Result<Self::State>;
    /// `y + a·x`
    fn axpy(&mut self, y: &Self::State, a: f64, x: &Self::State) -> Result<Self::State>;
    fn is_finite(&self, h: &Self::State) -> bool;
}

/// Integrates `dh/dt = field(h, t)` from `t0` to `t1` in `steps` equal steps.
pub fn ode_solve<B: OdeBackend>(backend: &mut B, h0: B::State, cfg: &OdeConfig) -> Result<B::State> {
    cfg.validate()?;
    let dt = (cfg.t1 - cfg.t0) / cfg.steps as f64;
    let mut h = h0;
    for n in 0..cfg.steps {
        let t = cfg.t0 + n as f64 * dt;
        h = match cfg.solver {
            Solver::Euler => {
                let k = backend.field(&h, t)?;
                backend.axpy(&h, dt, &k)?
            }
            Solver::Rk4 => {
                let k1 = backend.field(&h, t)?;
                let y = backend.axpy(&h, dt / 2.0, &k1)?;
                let k2 = backend.field(&y, t + dt / 2.0)?;
                let y = backend.axpy(&h, dt / 2.0, &k2)?;
                let k3 = backend.field(&y, t + dt / 2.0)?;
                let y = backend.axpy(&h, dt, &k3)?;
                let k4 = backend.field(&y, t + dt)?;
                let acc = backend.axpy(&h, dt / 6.0, &k1)?;
                let acc = backend.axpy(&acc, dt / 3.0, &k2)?;
                let acc = backend.axpy(&acc, dt / 3.0, &k3)?;
                backend.axpy(&acc, dt / 6.0, &k4)?
            }
        };
        if !backend.is_finite(&h) {
            return Err(ModelError::Numerical { step: n, message: "non-finite ODE state".into() });
        }
    }
    Ok(h)
}

/// Plain f64 vectors with a caller-supplied field.
pub struct VecBackend<F: FnMut(&[f64], f64) -> Vec<f64>>(pub F);

impl<F: FnMut(&[f64], f64) -> Vec<f64>> OdeBackend for VecBackend<F> {
    type State = Vec<f64>;

    fn field(&mut self, h: &Vec<f64>, t: f64) -> Result<Vec<f64>> {
        Ok((self.0)(h, t))
    }

    fn axpy(&mut self, y: &Vec<f64>, a: f64, x: &Vec<f64>) -> Result<Vec<f64>> {
        Ok(y.iter().zip(x).map(|(y, x)| y + a * x).collect())
    }

    fn is_finite(&self, h: &Vec<f64>) -> bool {
        h.iter().all(|v| v.is_finite())
    }
}

/// Differentiable integration on a tape; the field records its own ops.
pub struct TapeBackend<'t, F: FnMut(&mut GradTape, Var, f64) -> Result<Var>> {
    pub tape: &'t mut GradTape,
    pub field: F,
}

impl<F: FnMut(&mut GradTape, Var, f64) -> Result<Var>> OdeBackend for TapeBackend<'_, F> {
    type State = Var;

    fn field(&mut self, h: &Var, t: f64) -> Result<Var> {
        (self.field)(self.tape, *h, t)
    }

    fn axpy(&mut self, y: &Var, a: f64, x: &Var) -> Result<Var> {
        Ok(self.tape.add_scaled(*y, *x, a as f32)?)
    }

    fn is_finite(&self, h: &Var) -> bool {
        self.tape.value(*h).all_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn linear(h0: f64, cfg: &OdeConfig) -> f64 {
        ode_solve(&mut VecBackend(|h: &[f64], _| h.to_vec()), vec![h0], cfg).unwrap()[0]
    }

    fn cfg(solver: Solver, steps: usize) -> OdeConfig {
        OdeConfig { solver, steps, t0: 0.0, t1: 1.0 }
    }

    #[test]
    fn one_step_hand_values() {
        assert_eq!(linear(1.0, &cfg(Solver::Euler, 1)), 2.0);
        assert!((linear(1.0, &cfg(Solver::Rk4, 1)) - 65.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn zero_field_is_identity() {
        for solver in [Solver::Euler, Solver::Rk4] {
            let h0 = vec![0.3, -1.25, 7.0];
            let out = ode_solve(&mut VecBackend(|h: &[f64], _| vec![0.0; h.len()]), h0.clone(), &cfg(solver, 5)).unwrap();
            assert_eq!(out, h0);
        }
    }

    #[test]
    fn rk4_beats_euler_by_two_orders() {
        for steps in [2, 4, 8] {
            let e = std::f64::consts::E;
            let eu = (linear(1.0, &cfg(Solver::Euler, steps)) - e).abs();
            let rk = (linear(1.0, &cfg(Solver::Rk4, steps)) - e).abs();
            assert!(eu / rk >= 100.0, "steps {steps}: {eu} vs {rk}");
        }
    }

    #[test]
    fn blow_up_names_the_step() {
        let err = ode_solve(&mut VecBackend(|h: &[f64], _| h.iter().map(|v| v * v * 1e200).collect()), vec![1e100], &cfg(Solver::Euler, 4));
        match err {
            Err(ModelError::Numerical { step, .. }) => assert_eq!(step, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_settings_rejected() {
        assert!(cfg(Solver::Rk4, 0).validate().is_err());
        assert!(OdeConfig { t1: 0.0, ..cfg(Solver::Rk4, 2) }.validate().is_err());
    }

    #[test]
    fn tape_and_vector_backends_agree() {
        let mut tape = GradTape::new();
        let h0 = tape.leaf(Tensor::from_vec(vec![1.0, -0.5]));
        let mut b = TapeBackend { tape: &mut tape, field: |_: &mut GradTape, h: Var, _| Ok(h) };
        let out = ode_solve(&mut b, h0, &cfg(Solver::Rk4, 3)).unwrap();
        let want = [1.0, -0.5].map(|v| linear(v, &cfg(Solver::Rk4, 3)));
        for (g, w) in tape.value(out).data().iter().zip(want) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
    }
}
