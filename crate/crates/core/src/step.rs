use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Right-continuous nondecreasing step function with jumps at event times.
///
/// Before the first jump the function is `-inf`. A value of `+inf` marks a
/// saturated step: the profile equation had no finite root there.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    jump_times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn new(jump_times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if jump_times.len() != values.len() {
            return Err(Error::Domain(format!(
                "step function has {} jump times but {} values",
                jump_times.len(),
                values.len()
            )));
        }
        if jump_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Domain("jump times must be strictly increasing".into()));
        }
        if values.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::Domain("step values must be finite or +inf".into()));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Domain("step values must be nondecreasing".into()));
        }
        Ok(Self { jump_times, values })
    }

    pub(crate) fn from_parts_unchecked(jump_times: Vec<f64>, values: Vec<f64>) -> Self {
        Self { jump_times, values }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of jumps at or before `t`.
    pub fn level_index(&self, t: f64) -> usize {
        self.jump_times.partition_point(|&s| s <= t)
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        match self.level_index(t) {
            0 => f64::NEG_INFINITY,
            k => self.values[k - 1],
        }
    }

    pub fn is_saturated(&self) -> bool {
        self.values.iter().any(|v| v.is_infinite())
    }
}

pub fn evaluate_h(h: &StepFunction, t: f64) -> f64 {
    h.evaluate(t)
}

#[derive(Serialize, Deserialize)]
struct StepRepr {
    jump_times: Vec<f64>,
    /// `null` encodes a saturated (`+inf`) step.
    values: Vec<Option<f64>>,
}

impl Serialize for StepFunction {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        StepRepr {
            jump_times: self.jump_times.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.is_finite().then_some(*v))
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for StepFunction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = StepRepr::deserialize(deserializer)?;
        let values = repr
            .values
            .into_iter()
            .map(|v| v.unwrap_or(f64::INFINITY))
            .collect();
        StepFunction::new(repr.jump_times, values).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluation_is_right_continuous() {
        let h = StepFunction::new(vec![1.0, 2.0, 3.5], vec![-1.0, 0.25, 0.25]).unwrap();
        assert_eq!(h.evaluate(0.5), f64::NEG_INFINITY);
        assert_eq!(h.evaluate(1.0), -1.0);
        assert_eq!(h.evaluate(1.999), -1.0);
        assert_eq!(h.evaluate(2.0), 0.25);
        assert_eq!(h.evaluate(100.0), 0.25);
    }

    #[test]
    fn rejects_broken_invariants() {
        assert!(StepFunction::new(vec![1.0, 1.0], vec![0.0, 1.0]).is_err());
        assert!(StepFunction::new(vec![1.0, 2.0], vec![1.0, 0.0]).is_err());
        assert!(StepFunction::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn json_round_trip_keeps_saturation() {
        let h = StepFunction::new(vec![1.0, 2.0], vec![0.5, f64::INFINITY]).unwrap();
        let text = serde_json::to_string(&h).unwrap();
        assert_eq!(text, r#"{"jump_times":[1.0,2.0],"values":[0.5,null]}"#);
        let back: StepFunction = serde_json::from_str(&text).unwrap();
        assert_eq!(back, h);
    }
}
