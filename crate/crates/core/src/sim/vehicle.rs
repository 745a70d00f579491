use serde::{Deserialize, Serialize};

use super::{Result, SimError};

/// Racecar-scale wheelbase in meters.
pub const DEFAULT_WHEELBASE: f64 = 0.3;
pub const DEFAULT_STEERING_LIMIT_DEG: f64 = 30.0;

/// Pose and actuation state of the simulated car.
///
/// Steering is in degrees; positive steering turns the car counterclockwise
/// (heading increases).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Radians in (-π, π].
    pub heading: f64,
    pub speed: f64,
    pub steering_angle: f64,
    pub wheelbase: f64,
    pub steering_limit: f64,
    pub tick: u64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            speed: 0.0,
            steering_angle: 0.0,
            wheelbase: DEFAULT_WHEELBASE,
            steering_limit: DEFAULT_STEERING_LIMIT_DEG,
            tick: 0,
        }
    }

    pub fn with_speed(mut self, speed: f64) -> Self {
        self.speed = speed;
        self
    }

    pub fn saturate(&self, steering_deg: f64) -> f64 {
        steering_deg.clamp(-self.steering_limit, self.steering_limit)
    }
}

/// Maps an angle into (-π, π].
pub(crate) fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// One explicit-Euler step of the kinematic bicycle at constant speed.
pub fn step_vehicle(state: &VehicleState, steering_cmd: f64, dt: f64) -> Result<VehicleState> {
    let finite = [state.x, state.y, state.heading, state.speed, steering_cmd, dt];
    if finite.iter().any(|v| !v.is_finite()) {
        return Err(SimError::Contract("step_vehicle: non-finite input".into()));
    }
    if dt <= 0.0 {
        return Err(SimError::Contract(format!("step_vehicle: dt must be positive, got {dt}")));
    }
    if state.speed < 0.0 || state.wheelbase <= 0.0 {
        return Err(SimError::Contract("step_vehicle: invalid speed or wheelbase".into()));
    }
    let steering = state.saturate(steering_cmd);
    let (sin_h, cos_h) = state.heading.sin_cos();
    let yaw_rate = state.speed / state.wheelbase * steering.to_radians().tan();
    Ok(VehicleState {
        x: state.x + state.speed * cos_h * dt,
        y: state.y + state.speed * sin_h * dt,
        heading: wrap_angle(state.heading + yaw_rate * dt),
        steering_angle: steering,
        tick: state.tick + 1,
        ..*state
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn straight_line_motion() {
        let s = VehicleState::new(0.0, 0.0, 0.0).with_speed(1.0);
        let n = step_vehicle(&s, 0.0, 0.04).unwrap();
        assert!((n.x - 0.04).abs() < 1e-15);
        assert_eq!(n.y, 0.0);
        assert_eq!(n.heading, 0.0);
        assert_eq!(n.tick, 1);
    }

    #[test]
    fn command_is_saturated() {
        let s = VehicleState::new(1.0, 2.0, 0.3).with_speed(0.8);
        let a = step_vehicle(&s, 90.0, 0.04).unwrap();
        let b = step_vehicle(&s, 30.0, 0.04).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steering_angle, 30.0);
    }

    #[test]
    fn constant_steering_heading_matches_closed_form() {
        let mut s = VehicleState::new(0.0, 0.0, 0.0).with_speed(1.0);
        let steps = 157;
        let mut unwrapped = 0.0;
        for _ in 0..steps {
            let n = step_vehicle(&s, 10.0, 0.04).unwrap();
            unwrapped += wrap_angle(n.heading - s.heading);
            s = n;
        }
        let expected = 1.0 / 0.3 * 10f64.to_radians().tan() * (steps as f64 * 0.04);
        assert!((unwrapped - expected).abs() < 1e-9, "{unwrapped} vs {expected}");
    }

    #[test]
    fn rejects_non_finite() {
        let s = VehicleState::new(0.0, 0.0, 0.0).with_speed(1.0);
        assert!(step_vehicle(&s, f64::NAN, 0.04).is_err());
        assert!(step_vehicle(&s, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn speed_constant_and_steering_bounded(cmd in -200.0f64..200.0, h in -3.1f64..3.1, v in 0.0f64..3.0) {
            let s = VehicleState::new(0.5, -0.5, h).with_speed(v);
            let n = step_vehicle(&s, cmd, 0.04).unwrap();
            prop_assert_eq!(n.speed, v);
            prop_assert!(n.steering_angle.abs() <= s.steering_limit);
            prop_assert!(n.heading > -std::f64::consts::PI && n.heading <= std::f64::consts::PI);
        }

        #[test]
        fn stepping_is_deterministic(cmds in proptest::collection::vec(-40.0f64..40.0, 1..40)) {
            let run = || {
                let mut s = VehicleState::new(0.0, 0.0, 0.1).with_speed(0.6);
                for c in &cmds {
                    s = step_vehicle(&s, *c, 0.04).unwrap();
                }
                s
            };
            let (a, b) = (run(), run());
            prop_assert_eq!(a.x.to_bits(), b.x.to_bits());
            prop_assert_eq!(a.heading.to_bits(), b.heading.to_bits());
        }
    }
}
