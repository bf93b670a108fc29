//! Empathy score: exponential decay between reports, a fixed boost per
//! accepted report, and slower decay while the entity has paused the app.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmpathyError {
    #[error("time went backwards: {now} is before {last}")]
    Backwards {
        now: DateTime<Utc>,
        last: DateTime<Utc>,
    },
    #[error("invalid empathy parameters: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmpathyParams {
    pub half_life_s: f64,
    pub report_boost: f64,
    /// Half-life multiplier applied while paused.
    pub pause_multiplier: f64,
}

impl Default for EmpathyParams {
    fn default() -> Self {
        EmpathyParams {
            half_life_s: 86_400.0,
            report_boost: 0.05,
            pause_multiplier: 2.0,
        }
    }
}

impl EmpathyParams {
    pub fn validate(&self) -> Result<(), EmpathyError> {
        if !(self.half_life_s.is_finite() && self.half_life_s > 0.0) {
            return Err(EmpathyError::Params("half_life_s must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.report_boost) {
            return Err(EmpathyError::Params("report_boost must be in [0, 1]".into()));
        }
        if !(self.pause_multiplier.is_finite() && self.pause_multiplier > 0.0) {
            return Err(EmpathyError::Params("pause_multiplier must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpathyState {
    pub score: f64,
    pub last_update: DateTime<Utc>,
    pub paused: bool,
    pub half_life_s: f64,
    pub report_boost: f64,
    pub pause_multiplier: f64,
}

impl EmpathyState {
    pub fn new(score: f64, at: DateTime<Utc>, params: &EmpathyParams) -> Self {
        EmpathyState {
            score: score.clamp(0.0, 1.0),
            last_update: at,
            paused: false,
            half_life_s: params.half_life_s,
            report_boost: params.report_boost,
            pause_multiplier: params.pause_multiplier,
        }
    }

    fn effective_half_life(&self) -> f64 {
        if self.paused {
            self.half_life_s * self.pause_multiplier
        } else {
            self.half_life_s
        }
    }

    pub fn advance(&self, now: DateTime<Utc>) -> Result<Self, EmpathyError> {
        if now < self.last_update {
            return Err(EmpathyError::Backwards {
                now,
                last: self.last_update,
            });
        }
        let dt = (now - self.last_update).num_milliseconds() as f64 / 1000.0;
        let mut next = *self;
        next.score = (self.score * (-dt / self.effective_half_life()).exp2()).clamp(0.0, 1.0);
        next.last_update = now;
        Ok(next)
    }

    pub fn on_report(&self, now: DateTime<Utc>) -> Result<Self, EmpathyError> {
        let mut next = self.advance(now)?;
        next.score = (next.score + self.report_boost).min(1.0);
        Ok(next)
    }

    /// Decays up to `now` under the current mode, then switches mode.
    pub fn set_paused(&self, now: DateTime<Utc>, paused: bool) -> Result<Self, EmpathyError> {
        let mut next = self.advance(now)?;
        next.paused = paused;
        Ok(next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmpathyEvent {
    Report,
    Pause,
    Resume,
    Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub at: DateTime<Utc>,
    pub event: EmpathyEvent,
    pub score: f64,
}

/// Replays time-ordered events, adding a `Tick` row every `tick` (if given)
/// between events so the decay curve is visible.
pub fn replay(
    start: DateTime<Utc>,
    initial_score: f64,
    params: &EmpathyParams,
    events: &[(DateTime<Utc>, EmpathyEvent)],
    tick: Option<Duration>,
) -> Result<Vec<TrajectoryPoint>, EmpathyError> {
    params.validate()?;
    let mut state = EmpathyState::new(initial_score, start, params);
    let mut out = Vec::with_capacity(events.len());
    for &(at, event) in events {
        if let Some(step) = tick.filter(|s| *s > Duration::zero()) {
            let mut t = state.last_update + step;
            while t < at {
                state = state.advance(t)?;
                out.push(TrajectoryPoint {
                    at: t,
                    event: EmpathyEvent::Tick,
                    score: state.score,
                });
                t += step;
            }
        }
        state = match event {
            EmpathyEvent::Report => state.on_report(at)?,
            EmpathyEvent::Pause => state.set_paused(at, true)?,
            EmpathyEvent::Resume => state.set_paused(at, false)?,
            EmpathyEvent::Tick => state.advance(at)?,
        };
        out.push(TrajectoryPoint {
            at,
            event,
            score: state.score,
        });
    }
    Ok(out)
}
