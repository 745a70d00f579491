use serde::{Deserialize, Serialize};

/// Gains of the discrete PD law. `ts` is the sample period in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
    pub ts: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: 0.1, kd: 0.2, ts: 0.04 }
    }
}

impl PdGains {
    /// kp = 0.1, kd = 0.2, ts = 0.04 s.
    pub fn original() -> Self {
        Self::default()
    }

    /// Gains that hold the line in this simulator. The original derivative
    /// gain drives a ±30° limit cycle at 640 px image width.
    pub fn retuned() -> Self {
        Self { kp: 0.1, kd: 0.01, ts: 0.04 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.kp.is_finite() && self.kd.is_finite() && self.ts.is_finite()) {
            return Err(format!("PD gains must be finite: {self:?}"));
        }
        if self.ts <= 0.0 {
            return Err(format!("PD sample period must be positive, got {}", self.ts));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PdState {
    pub prev_error: f64,
    pub initialized: bool,
}

/// `w = kp·e + kd·(e − e_prev)/ts`, in degrees, before saturation.
/// The first call after a reset has no derivative term.
pub fn pd_control(e: f64, state: PdState, gains: &PdGains) -> (f64, PdState) {
    let derivative = if state.initialized { (e - state.prev_error) / gains.ts } else { 0.0 };
    let w = gains.kp * e + gains.kd * derivative;
    (w, PdState { prev_error: e, initialized: true })
}

pub fn saturate(w: f64, limit: f64) -> f64 {
    w.clamp(-limit, limit)
}
