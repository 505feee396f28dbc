use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Const,
    Step,
    Cosine,
}

/// Alignment-weight schedule over training progress in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub start: f64,
    #[serde(default)]
    pub end: f64,
    #[serde(default = "half")]
    pub switch_fraction: f64,
}

fn half() -> f64 {
    0.5
}

impl ScheduleSpec {
    pub fn constant(value: f64) -> Self {
        Self {
            kind: ScheduleKind::Const,
            start: value,
            end: value,
            switch_fraction: 0.5,
        }
    }

    pub fn step(start: f64, end: f64, switch_fraction: f64) -> Self {
        Self {
            kind: ScheduleKind::Step,
            start,
            end,
            switch_fraction,
        }
    }

    pub fn cosine(start: f64, end: f64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            start,
            end,
            switch_fraction: 0.5,
        }
    }
}

/// `end` takes effect at `progress >= switch_fraction` for step schedules.
pub fn lambda_at(spec: &ScheduleSpec, progress: f64) -> f64 {
    match spec.kind {
        ScheduleKind::Const => spec.start,
        ScheduleKind::Step => {
            if progress < spec.switch_fraction {
                spec.start
            } else {
                spec.end
            }
        }
        ScheduleKind::Cosine => {
            spec.end + (spec.start - spec.end) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        assert_eq!(lambda_at(&ScheduleSpec::constant(2.0), 0.73), 2.0);
        let s = ScheduleSpec::step(2.0, 1.0, 0.5);
        assert_eq!(lambda_at(&s, 0.49), 2.0);
        assert_eq!(lambda_at(&s, 0.5), 1.0);
        let c = ScheduleSpec::cosine(2.0, 0.0);
        assert!((lambda_at(&c, 0.5) - 1.0).abs() < 1e-15);
        assert_eq!(lambda_at(&c, 0.0), 2.0);
    }
}
