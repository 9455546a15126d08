//! Discrete PID controller and control-vector assembly.
//!
//! The controller turns the judge's scalar error stream into a control
//! action `u`. During learning the action is concatenated with the judge's
//! feedback vector `f` and the memory signal `k` into the 7-dimensional
//! control vector consumed by the prompt mapper. At inference there is no
//! judge: `f` is zero and `u` comes from a fixed linear policy over `k`.
//!
//! All transitions are pure: [`pid_step`] takes a state by reference and
//! returns the next one, so replaying a recorded error sequence reproduces
//! the recorded actions bit for bit.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_INTEGRAL_BOUND: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 1.0,
            ki: 0.5,
            kd: 0.1,
        }
    }
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Result<Self> {
        let gains = Self { kp, ki, kd };
        gains.validate()?;
        Ok(gains)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.kp, self.ki, self.kd].iter().all(|g| g.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("PID gains must be finite".into()))
        }
    }
}

/// Controller memory carried between steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    integral: f64,
    prev_error: f64,
    step_count: u64,
    integral_bound: f64,
}

impl Default for PidState {
    fn default() -> Self {
        Self::fresh(DEFAULT_INTEGRAL_BOUND)
    }
}

impl PidState {
    /// Fresh state with the given anti-windup bound. `f64::INFINITY`
    /// disables clamping.
    pub fn new(integral_bound: f64) -> Result<Self> {
        if integral_bound.is_nan() || integral_bound <= 0.0 {
            return Err(Error::Config(format!(
                "integral_bound must be positive, got {integral_bound}"
            )));
        }
        Ok(Self::fresh(integral_bound))
    }

    fn fresh(integral_bound: f64) -> Self {
        Self {
            integral: 0.0,
            prev_error: 0.0,
            step_count: 0,
            integral_bound,
        }
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }

    pub fn prev_error(&self) -> f64 {
        self.prev_error
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn integral_bound(&self) -> f64 {
        self.integral_bound
    }
}

/// One PID transition. The error is added to the integral first and the
/// sum is then clamped to `±integral_bound`.
pub fn pid_step(state: &PidState, gains: &PidGains, error: f64) -> Result<(f64, PidState)> {
    if !error.is_finite() {
        return Err(Error::NonFinite("PID error"));
    }
    let bound = state.integral_bound;
    let integral = (state.integral + error).clamp(-bound, bound);
    let u = gains.kp * error + gains.ki * integral + gains.kd * (error - state.prev_error);
    let next = PidState {
        integral,
        prev_error: error,
        step_count: state.step_count + 1,
        integral_bound: bound,
    };
    Ok((u, next))
}

pub fn reset(state: &PidState) -> PidState {
    PidState::fresh(state.integral_bound)
}

macro_rules! three_vector {
    ($(#[$meta:meta])* $name:ident, $what:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
        #[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
        pub struct $name([f64; 3]);

        impl $name {
            pub const ZERO: Self = Self([0.0; 3]);

            pub fn new(components: [f64; 3]) -> Result<Self> {
                if components.iter().all(|c| c.is_finite()) {
                    Ok(Self(components))
                } else {
                    Err(Error::NonFinite($what))
                }
            }

            /// Takes the first three components of a longer vector.
            pub fn from_prefix(values: &[f64]) -> Result<Self> {
                match values {
                    [a, b, c, ..] => Self::new([*a, *b, *c]),
                    _ => Err(Error::DimensionTooSmall(values.len())),
                }
            }

            pub fn components(&self) -> [f64; 3] {
                self.0
            }

            pub fn is_zero(&self) -> bool {
                self.0.iter().all(|c| *c == 0.0)
            }
        }

        impl TryFrom<[f64; 3]> for $name {
            type Error = Error;

            fn try_from(value: [f64; 3]) -> Result<Self> {
                Self::new(value)
            }
        }

        impl From<$name> for [f64; 3] {
            fn from(value: $name) -> Self {
                value.0
            }
        }
    };
}

three_vector!(
    /// Judge feedback along the irony, narrative and layout axes.
    FeedbackVector,
    "feedback vector"
);
three_vector!(
    /// Compact summary of retrieved experiences.
    MemorySignal,
    "memory signal"
);

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlVector {
    pub u: f64,
    pub f: FeedbackVector,
    pub k: MemorySignal,
}

impl ControlVector {
    pub const DIM: usize = 7;
    pub const ZERO: Self = Self {
        u: 0.0,
        f: FeedbackVector::ZERO,
        k: MemorySignal::ZERO,
    };

    pub fn to_array(&self) -> [f64; Self::DIM] {
        let [f1, f2, f3] = self.f.components();
        let [k1, k2, k3] = self.k.components();
        [self.u, f1, f2, f3, k1, k2, k3]
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != Self::DIM {
            return Err(Error::InvalidControl(format!(
                "expected {} components, got {}",
                Self::DIM,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidControl("non-finite component".into()));
        }
        Ok(Self {
            u: values[0],
            f: FeedbackVector::new([values[1], values[2], values[3]])?,
            k: MemorySignal::new([values[4], values[5], values[6]])?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn assemble_training_control(
    u: f64,
    f: FeedbackVector,
    k: MemorySignal,
) -> Result<ControlVector> {
    if !u.is_finite() {
        return Err(Error::NonFinite("control action"));
    }
    Ok(ControlVector { u, f, k })
}

/// Linear inference policy `u = clamp(w·k, ±u_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub weights: [f64; 3],
    pub u_max: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            weights: [1.0 / 3.0; 3],
            u_max: 2.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.u_max.is_nan() || self.u_max <= 0.0 {
            return Err(Error::Config(format!(
                "policy.u_max must be positive, got {}",
                self.u_max
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("policy.weights must be finite".into()));
        }
        Ok(())
    }
}

pub fn inference_policy_u(k: &MemorySignal, policy: &PolicyConfig) -> Result<f64> {
    policy.validate()?;
    let dot: f64 = policy
        .weights
        .iter()
        .zip(k.components())
        .map(|(w, c)| w * c)
        .sum();
    Ok(dot.clamp(-policy.u_max, policy.u_max))
}

pub fn assemble_inference_control(k: MemorySignal, policy: &PolicyConfig) -> Result<ControlVector> {
    let u = inference_policy_u(&k, policy)?;
    Ok(ControlVector {
        u,
        f: FeedbackVector::ZERO,
        k,
    })
}

/// One row of an offline step-response trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidTraceRow {
    pub step: u64,
    pub error: f64,
    pub integral: f64,
    pub derivative_term: f64,
    pub u: f64,
}

/// Runs an error sequence through a fresh controller.
pub fn simulate(errors: &[f64], gains: &PidGains, integral_bound: f64) -> Result<Vec<PidTraceRow>> {
    gains.validate()?;
    let mut state = PidState::new(integral_bound)?;
    let mut rows = Vec::with_capacity(errors.len());
    for &error in errors {
        let (u, next) = pid_step(&state, gains, error)?;
        rows.push(PidTraceRow {
            step: next.step_count,
            error,
            integral: next.integral,
            derivative_term: gains.kd * (error - state.prev_error),
            u,
        });
        state = next;
    }
    Ok(rows)
}

pub fn write_trace_csv<W: Write>(rows: &[PidTraceRow], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Parse(format!("csv write: {e}")))?;
    }
    writer.flush().map_err(|e| Error::io("<pid trace>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn zero_error_is_a_fixed_point() {
        let (u, next) = pid_step(&PidState::default(), &PidGains::default(), 0.0).unwrap();
        assert_eq!(u, 0.0);
        assert_eq!(next.integral(), 0.0);
        assert_eq!(next.step_count(), 1);
    }

    #[test]
    fn hand_evaluated_sequence() {
        let gains = PidGains::default();
        let s0 = PidState::default();
        let (u1, s1) = pid_step(&s0, &gains, 1.0).unwrap();
        assert!(close(u1, 1.6));
        assert_eq!(s1.integral(), 1.0);
        let (u2, s2) = pid_step(&s1, &gains, 0.5).unwrap();
        assert!(close(u2, 1.20));
        assert_eq!(s2.integral(), 1.5);
        assert_eq!(s2.prev_error(), 0.5);
        // input state untouched
        assert_eq!(s0, PidState::default());
    }

    #[test]
    fn non_finite_error_is_rejected() {
        let state = PidState::default();
        for bad in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            assert!(matches!(
                pid_step(&state, &PidGains::default(), bad),
                Err(Error::NonFinite(_))
            ));
        }
    }

    #[test]
    fn integral_clamps_after_adding() {
        let state = PidState::new(1.0).unwrap();
        let gains = PidGains::new(0.0, 1.0, 0.0).unwrap();
        let (u, next) = pid_step(&state, &gains, 3.0).unwrap();
        assert_eq!(next.integral(), 1.0);
        assert_eq!(u, 1.0);
        let (_, next) = pid_step(&next, &gains, -0.5).unwrap();
        assert_eq!(next.integral(), 0.5);
    }

    #[test]
    fn bad_bound_is_config_error() {
        assert!(PidState::new(0.0).is_err());
        assert!(PidState::new(-1.0).is_err());
        assert!(PidState::new(f64::NAN).is_err());
        assert!(PidState::new(f64::INFINITY).is_ok());
    }

    #[test]
    fn reset_returns_fresh_state() {
        let gains = PidGains::default();
        let (_, s1) = pid_step(&PidState::new(4.0).unwrap(), &gains, 1.0).unwrap();
        let (_, s2) = pid_step(&s1, &gains, 0.5).unwrap();
        let r = reset(&s2);
        assert_eq!(r, PidState::new(4.0).unwrap());
        assert_eq!(reset(&r), r);
        let after_reset = pid_step(&r, &gains, 1.0).unwrap();
        let brand_new = pid_step(&PidState::new(4.0).unwrap(), &gains, 1.0).unwrap();
        assert_eq!(after_reset, brand_new);
    }

    #[test]
    fn training_control_concatenates() {
        let f = FeedbackVector::new([0.1, -0.2, 0.3]).unwrap();
        let c = assemble_training_control(1.6, f, MemorySignal::ZERO).unwrap();
        assert_eq!(c.to_array(), [1.6, 0.1, -0.2, 0.3, 0.0, 0.0, 0.0]);
        let zero =
            assemble_training_control(0.0, FeedbackVector::ZERO, MemorySignal::ZERO).unwrap();
        assert_eq!(zero.to_array(), [0.0; 7]);
    }

    #[test]
    fn inference_policy_examples() {
        let p = PolicyConfig::default();
        assert_eq!(inference_policy_u(&MemorySignal::ZERO, &p).unwrap(), 0.0);
        let k = MemorySignal::new([0.6, 0.3, 0.0]).unwrap();
        assert!(close(inference_policy_u(&k, &p).unwrap(), 0.3));
        let big = MemorySignal::new([9.0; 3]).unwrap();
        assert_eq!(inference_policy_u(&big, &p).unwrap(), 2.0);
        let neg = MemorySignal::new([-9.0; 3]).unwrap();
        assert_eq!(inference_policy_u(&neg, &p).unwrap(), -2.0);
    }

    #[test]
    fn inference_policy_rejects_bad_u_max() {
        let p = PolicyConfig {
            u_max: 0.0,
            ..PolicyConfig::default()
        };
        assert!(matches!(
            inference_policy_u(&MemorySignal::ZERO, &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inference_control_has_zero_feedback() {
        let p = PolicyConfig::default();
        let c = assemble_inference_control(MemorySignal::ZERO, &p).unwrap();
        assert_eq!(c.to_array(), [0.0; 7]);
        let k = MemorySignal::new([0.6, 0.3, 0.0]).unwrap();
        let c = assemble_inference_control(k, &p).unwrap();
        let arr = c.to_array();
        assert!(close(arr[0], 0.3));
        assert_eq!(&arr[1..], &[0.0, 0.0, 0.0, 0.6, 0.3, 0.0]);
    }

    #[test]
    fn control_from_slice_checks_shape() {
        assert!(ControlVector::from_slice(&[0.0; 6]).is_err());
        assert!(ControlVector::from_slice(&[0.0, 0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0]).is_err());
        let c = ControlVector::from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!(c.to_array(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn three_vectors_need_three_finite_components() {
        assert!(FeedbackVector::new([0.0, f64::NAN, 0.0]).is_err());
        assert!(matches!(
            MemorySignal::from_prefix(&[1.0, 2.0]),
            Err(Error::DimensionTooSmall(2))
        ));
        let f = FeedbackVector::from_prefix(&[0.9, -0.1, 0.4, 7.0]).unwrap();
        assert_eq!(f.components(), [0.9, -0.1, 0.4]);
    }

    #[test]
    fn simulate_writes_csv() {
        let rows = simulate(&[1.0, 0.5], &PidGains::default(), DEFAULT_INTEGRAL_BOUND).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,error,integral,derivative_term,u"));
        assert!(lines.next().unwrap().starts_with("1,1.0,1.0,0.1,1.6"));
    }

    proptest! {
        #[test]
        fn p_term_is_linear(e in -1e6f64..1e6) {
            let gains = PidGains::new(2.5, 0.0, 0.0).unwrap();
            let (u, _) = pid_step(&PidState::new(f64::INFINITY).unwrap(), &gains, e).unwrap();
            prop_assert_eq!(u, 2.5 * e);
        }

        #[test]
        fn integral_never_exceeds_bound(
            errors in proptest::collection::vec(-5.0f64..5.0, 1..200),
            bound in 0.1f64..20.0,
        ) {
            let mut state = PidState::new(bound).unwrap();
            for e in errors {
                let (_, next) = pid_step(&state, &PidGains::default(), e).unwrap();
                prop_assert!(next.integral().abs() <= bound);
                state = next;
            }
        }

        #[test]
        fn unclamped_integral_is_running_sum(errors in proptest::collection::vec(-1.0f64..1.0, 1..50)) {
            let mut state = PidState::new(f64::INFINITY).unwrap();
            let mut sum = 0.0;
            for &e in &errors {
                let (_, next) = pid_step(&state, &PidGains::default(), e).unwrap();
                sum += e;
                state = next;
            }
            prop_assert_eq!(state.integral(), sum);
            prop_assert_eq!(state.step_count(), errors.len() as u64);
        }

        #[test]
        fn replay_is_bit_identical(errors in proptest::collection::vec(-1.0f64..1.0, 1..50)) {
            let run = || -> Vec<u64> {
                let mut state = PidState::default();
                errors
                    .iter()
                    .map(|&e| {
                        let (u, next) = pid_step(&state, &PidGains::default(), e).unwrap();
                        state = next;
                        u.to_bits()
                    })
                    .collect()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
