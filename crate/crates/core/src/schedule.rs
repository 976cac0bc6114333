//! Step-size schedules and their summability classification.
//!
//! A schedule is a positive nonincreasing sequence `eps_1 >= eps_2 >= ...`
//! together with a certified exponent `p > 2`. Two regimes matter downstream:
//! the classical square-summable regime (`sum eps = inf`, `sum eps^2 < inf`)
//! and the relaxed regime (`sum eps = inf`, `sum eps^p < inf` for the carried
//! `p`). Power-law and log-power families are classified analytically; tabled
//! schedules carry no asymptotics and classify as unknown.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by schedule construction and evaluation.
#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("schedule parameter {name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("certified exponent p must exceed 2, got {0}")]
    ExponentTooSmall(f64),
    #[error("schedule parameter {name} must be finite")]
    NotFinite { name: &'static str },
    #[error("table schedule must be nonempty")]
    EmptyTable,
    #[error("table schedule must be nonincreasing, but values[{0}] < values[{1}]")]
    TableIncreases(usize, usize),
    #[error("log-power schedule failed the monotonicity sweep at t = {0}")]
    NotMonotone(u64),
    #[error("sum of eps^{power} has no finite certified bound for this schedule")]
    UnboundedPowerSum { power: f64 },
    #[error("unknown schedule family '{0}'")]
    UnknownFamily(String),
}

/// Analytic family of a step-size schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleFamily {
    /// `eps_t = scale / t^q`.
    PowerLaw { q: f64, scale: f64 },
    /// `eps_t = scale * ln(t) / t^q`, evaluated from `t = 3` on and clamped so
    /// the sequence starts positive and never increases (see `step_size`).
    LogPowerLaw { q: f64, scale: f64 },
    /// `eps_t = value` for every `t`.
    Constant { value: f64 },
    /// Explicit finite table, `eps_t = values[t - 1]`.
    Table { values: Vec<f64> },
}

/// A validated step-size schedule with its certified exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct StepSizeSchedule {
    family: ScheduleFamily,
    p_exponent: f64,
}

/// Three-valued answer for summability questions that a family may not settle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Unknown,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Yes => "yes",
            Verdict::No => "no",
            Verdict::Unknown => "unknown",
        })
    }
}

/// Which step-size conditions a schedule satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    /// `sum eps = inf` and `sum eps^2 < inf`.
    pub robbins_monro: Verdict,
    /// `sum eps = inf` and `sum eps^p < inf` for the schedule's certified `p`.
    pub relaxed: Verdict,
}

/// How many prefix terms the log-power monotonicity sweep inspects.
const MONOTONE_SWEEP_LEN: u64 = 1_000_000;

/// Where the tail bound of `power_sum_bound` takes over from direct summation.
const POWER_SUM_CUTOFF: u64 = 10_000_000;

impl StepSizeSchedule {
    /// Builds a schedule, rejecting parameters that break positivity,
    /// monotonicity, or the `p > 2` requirement.
    pub fn new(family: ScheduleFamily, p_exponent: f64) -> Result<Self, ScheduleError> {
        if !p_exponent.is_finite() {
            return Err(ScheduleError::NotFinite { name: "p" });
        }
        if p_exponent <= 2.0 {
            return Err(ScheduleError::ExponentTooSmall(p_exponent));
        }
        match &family {
            ScheduleFamily::PowerLaw { q, scale } | ScheduleFamily::LogPowerLaw { q, scale } => {
                check_positive("q", *q)?;
                check_positive("scale", *scale)?;
            }
            ScheduleFamily::Constant { value } => check_positive("value", *value)?,
            ScheduleFamily::Table { values } => {
                if values.is_empty() {
                    return Err(ScheduleError::EmptyTable);
                }
                for (i, v) in values.iter().enumerate() {
                    check_positive("table entry", *v)?;
                    if i > 0 && values[i - 1] < *v {
                        return Err(ScheduleError::TableIncreases(i - 1, i));
                    }
                }
            }
        }
        let schedule = Self { family, p_exponent };
        if let ScheduleFamily::LogPowerLaw { .. } = schedule.family {
            schedule.sweep_monotone()?;
        }
        Ok(schedule)
    }

    /// Convenience constructor for `eps_t = scale / t^q`.
    pub fn power_law(q: f64, scale: f64, p_exponent: f64) -> Result<Self, ScheduleError> {
        Self::new(ScheduleFamily::PowerLaw { q, scale }, p_exponent)
    }

    /// Convenience constructor for the clamped `scale * ln(t) / t^q` family.
    pub fn log_power_law(q: f64, scale: f64, p_exponent: f64) -> Result<Self, ScheduleError> {
        Self::new(ScheduleFamily::LogPowerLaw { q, scale }, p_exponent)
    }

    /// Convenience constructor for a constant schedule.
    pub fn constant(value: f64, p_exponent: f64) -> Result<Self, ScheduleError> {
        Self::new(ScheduleFamily::Constant { value }, p_exponent)
    }

    /// Convenience constructor for an explicit table.
    pub fn table(values: Vec<f64>, p_exponent: f64) -> Result<Self, ScheduleError> {
        Self::new(ScheduleFamily::Table { values }, p_exponent)
    }

    pub fn family(&self) -> &ScheduleFamily {
        &self.family
    }

    /// The exponent `p > 2` this schedule certifies for `sum eps^p`.
    pub fn p_exponent(&self) -> f64 {
        self.p_exponent
    }

    /// Number of steps the schedule can serve; `None` means unlimited.
    pub fn horizon(&self) -> Option<u64> {
        match &self.family {
            ScheduleFamily::Table { values } => Some(values.len() as u64),
            _ => None,
        }
    }

    /// Step size at iteration `t`.
    ///
    /// Iterations are 1-based; `t = 0` violates the contract, as does reading
    /// past the end of a table.
    ///
    /// The log-power family needs two repairs to be a valid schedule: the raw
    /// `ln(t)/t^q` vanishes at `t = 1` and can rise before its single peak at
    /// `t = e^(1/q)`. We therefore evaluate from `t = 3` (so `eps_1 > 0`) and
    /// clamp by the `t = 3` value; because the raw curve is unimodal the clamp
    /// makes the sequence nonincreasing without touching its tail.
    pub fn step_size(&self, t: u64) -> f64 {
        assert!(t >= 1, "step index is 1-based, got t = 0");
        match &self.family {
            ScheduleFamily::PowerLaw { q, scale } => scale * (t as f64).powf(-q),
            ScheduleFamily::LogPowerLaw { q, scale } => {
                let raw = |x: f64| x.ln() / x.powf(*q);
                let head = raw(3.0);
                if t <= 3 {
                    scale * head
                } else {
                    scale * raw(t as f64).min(head)
                }
            }
            ScheduleFamily::Constant { value } => *value,
            ScheduleFamily::Table { values } => {
                assert!(
                    (t as usize) <= values.len(),
                    "table schedule of length {} has no step {t}",
                    values.len()
                );
                values[t as usize - 1]
            }
        }
    }

    /// `sum_{k=1}^{t} eps_k^power` by direct accumulation.
    pub fn partial_sum(&self, power: f64, t: u64) -> f64 {
        let mut acc = 0.0;
        for k in 1..=t {
            acc += self.step_size(k).powf(power);
        }
        acc
    }

    /// Elapsed schedule time `sum_{k=1}^{t} eps_k`, with `cumulative(0) = 0`.
    pub fn cumulative(&self, t: u64) -> f64 {
        self.partial_sum(1.0, t)
    }

    /// Largest `j >= 0` whose elapsed time `cumulative(j)` is at most `s`.
    ///
    /// Accumulates in the same order as `cumulative`, so the two functions are
    /// exact inverses on schedule points: `index_at(cumulative(t)) == t`.
    pub fn index_at(&self, s: f64) -> u64 {
        assert!(s >= 0.0, "elapsed time must be nonnegative, got {s}");
        let mut acc = 0.0;
        let mut j = 0u64;
        loop {
            if let Some(h) = self.horizon() {
                if j >= h {
                    return j;
                }
            }
            acc += self.step_size(j + 1);
            if acc > s {
                return j;
            }
            j += 1;
        }
    }

    /// Which step-size summability conditions hold.
    ///
    /// For `eps_t = s/t^q`: divergence of the plain sum needs `q <= 1`, and
    /// `sum eps^w < inf` holds exactly when `q w > 1`. Logarithmic factors do
    /// not move these thresholds except on the boundary `q w = 1`, where the
    /// extra `(ln t)^w` keeps the sum divergent; both families therefore share
    /// one rule with strict inequalities at `q = 1/2` and `q = 1/p`.
    pub fn classify(&self) -> Classification {
        match &self.family {
            ScheduleFamily::PowerLaw { q, .. } | ScheduleFamily::LogPowerLaw { q, .. } => {
                let diverges = *q <= 1.0;
                let verdict = |power_summable: bool| {
                    if diverges && power_summable {
                        Verdict::Yes
                    } else {
                        Verdict::No
                    }
                };
                Classification {
                    robbins_monro: verdict(*q > 0.5),
                    relaxed: verdict(*q > 1.0 / self.p_exponent),
                }
            }
            ScheduleFamily::Constant { .. } => Classification {
                robbins_monro: Verdict::No,
                relaxed: Verdict::No,
            },
            ScheduleFamily::Table { .. } => Classification {
                robbins_monro: Verdict::Unknown,
                relaxed: Verdict::Unknown,
            },
        }
    }

    /// Certified upper bound on the full series `sum_{t=1}^{inf} eps_t^power`.
    ///
    /// Sums the first 10^7 terms directly and covers the tail with an
    /// integral-test bound; for the log-power family the logarithm is absorbed
    /// via `ln x <= x^b / (e b)`, which costs a constant factor but stays a
    /// genuine upper bound. Constant schedules have no finite sum and tables
    /// have no tail model, so both are rejected.
    pub fn power_sum_bound(&self, power: f64) -> Result<f64, ScheduleError> {
        let unbounded = || ScheduleError::UnboundedPowerSum { power };
        match &self.family {
            ScheduleFamily::PowerLaw { q, scale } => {
                let qw = q * power;
                if qw <= 1.0 {
                    return Err(unbounded());
                }
                let n = POWER_SUM_CUTOFF as f64;
                let tail = scale.powf(power) * n.powf(1.0 - qw) / (qw - 1.0);
                Ok(self.partial_sum(power, POWER_SUM_CUTOFF) + tail)
            }
            ScheduleFamily::LogPowerLaw { q, scale } => {
                let qw = q * power;
                if qw <= 1.0 {
                    return Err(unbounded());
                }
                // eps_t <= scale * ln(t)/t^q for t > 3, and with
                // b = (qw-1)/(2 power) the bound ln x <= x^b/(e b) gives
                // sum_{t>N} (ln t / t^q)^power <= (e b)^-power * 2/(qw-1)
                //                                  * N^((1-qw)/2).
                let b = (qw - 1.0) / (2.0 * power);
                let n = POWER_SUM_CUTOFF as f64;
                let tail = scale.powf(power)
                    * (std::f64::consts::E * b).powf(-power)
                    * 2.0
                    * n.powf((1.0 - qw) / 2.0)
                    / (qw - 1.0);
                Ok(self.partial_sum(power, POWER_SUM_CUTOFF) + tail)
            }
            ScheduleFamily::Constant { .. } => Err(unbounded()),
            ScheduleFamily::Table { .. } => Err(unbounded()),
        }
    }

    /// Belt-and-braces sweep backing the log-power clamp argument.
    fn sweep_monotone(&self) -> Result<(), ScheduleError> {
        let mut prev = self.step_size(1);
        if prev <= 0.0 {
            return Err(ScheduleError::NonPositive {
                name: "eps_1",
                value: prev,
            });
        }
        for t in 2..=MONOTONE_SWEEP_LEN {
            let cur = self.step_size(t);
            if cur > prev {
                return Err(ScheduleError::NotMonotone(t));
            }
            prev = cur;
        }
        Ok(())
    }
}

fn check_positive(name: &'static str, value: f64) -> Result<(), ScheduleError> {
    if !value.is_finite() {
        return Err(ScheduleError::NotFinite { name });
    }
    if value <= 0.0 {
        return Err(ScheduleError::NonPositive { name, value });
    }
    Ok(())
}

/// Flat JSON shape shared by all families:
/// `{"family":"power","q":0.4,"scale":1.0,"p":3.0}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRepr {
    family: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
    p: f64,
}

impl TryFrom<ScheduleRepr> for StepSizeSchedule {
    type Error = ScheduleError;

    fn try_from(repr: ScheduleRepr) -> Result<Self, ScheduleError> {
        let need =
            |field: Option<f64>, name: &'static str| field.ok_or(ScheduleError::NotFinite { name });
        let family = match repr.family.as_str() {
            "power" => ScheduleFamily::PowerLaw {
                q: need(repr.q, "q")?,
                scale: need(repr.scale, "scale")?,
            },
            "log_power" => ScheduleFamily::LogPowerLaw {
                q: need(repr.q, "q")?,
                scale: need(repr.scale, "scale")?,
            },
            "constant" => ScheduleFamily::Constant {
                value: need(repr.value, "value")?,
            },
            "table" => ScheduleFamily::Table {
                values: repr.values.ok_or(ScheduleError::EmptyTable)?,
            },
            other => return Err(ScheduleError::UnknownFamily(other.to_string())),
        };
        StepSizeSchedule::new(family, repr.p)
    }
}

impl From<StepSizeSchedule> for ScheduleRepr {
    fn from(s: StepSizeSchedule) -> Self {
        let p = s.p_exponent;
        match s.family {
            ScheduleFamily::PowerLaw { q, scale } => ScheduleRepr {
                family: "power".into(),
                q: Some(q),
                scale: Some(scale),
                value: None,
                values: None,
                p,
            },
            ScheduleFamily::LogPowerLaw { q, scale } => ScheduleRepr {
                family: "log_power".into(),
                q: Some(q),
                scale: Some(scale),
                value: None,
                values: None,
                p,
            },
            ScheduleFamily::Constant { value } => ScheduleRepr {
                family: "constant".into(),
                q: None,
                scale: None,
                value: Some(value),
                values: None,
                p,
            },
            ScheduleFamily::Table { values } => ScheduleRepr {
                family: "table".into(),
                q: None,
                scale: None,
                value: None,
                values: Some(values),
                p,
            },
        }
    }
}
