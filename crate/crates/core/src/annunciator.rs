//! Turns detections into short text announcements under a delivery policy.

use std::collections::HashMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::Range;

pub const DEFAULT_TOO_CLOSE_MM: f64 = 1000.0;
pub const DEFAULT_ONCE_TIMEOUT_S: f64 = 10.0;
/// Minimum spacing of too-close warnings for one class.
pub const TOO_CLOSE_REPEAT_S: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnounceError {
    #[error("timestamps must not decrease ({previous} then {got})")]
    NonMonotone { previous: f64, got: f64 },
    #[error("invalid policy '{0}' (expected interval:SECONDS, once or tooclose:MM)")]
    BadPolicy(String),
    #[error("interval period must be positive, got {0}")]
    BadPeriod(f64),
    #[error("too-close threshold must be at least 20 mm, got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Ahead,
    Right,
}

impl Direction {
    /// Outer thirds of the camera grid are left and right.
    pub fn from_column(col: usize, cols: usize) -> Self {
        let pos = (col as f64 + 0.5) / cols.max(1) as f64;
        if pos < 1.0 / 3.0 {
            Self::Left
        } else if pos > 2.0 / 3.0 {
            Self::Right
        } else {
            Self::Ahead
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Left => "left",
            Self::Ahead => "ahead",
            Self::Right => "right",
        })
    }
}

/// A classified object seen at time `time` (seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sighting {
    pub time: f64,
    pub class: String,
    pub direction: Direction,
    pub distance: Range,
}

pub fn format_message(s: &Sighting) -> String {
    match s.distance.rounded_mm() {
        Some(z) => format!("{} {} at {} millimeters", s.class, s.direction, z),
        None => format!("{} {}, distance unknown", s.class, s.direction),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Urgency {
    Normal,
    Urgent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Announcement {
    pub timestamp: f64,
    pub class: String,
    pub text: String,
    pub urgency: Urgency,
    /// Distance of the triggering sighting.
    pub distance: Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    /// At most one announcement per class every `period` seconds.
    FixedInterval { period: f64 },
    /// First sighting of a class; again after it was absent for `timeout` seconds.
    Once { timeout: f64 },
    /// Only sightings closer than `threshold` mm, at most once a second per class.
    TooClose { threshold: f64 },
}

impl Policy {
    pub fn validate(&self) -> Result<(), AnnounceError> {
        match *self {
            Self::FixedInterval { period } if !(period > 0.0) => Err(AnnounceError::BadPeriod(period)),
            Self::Once { timeout } if !(timeout > 0.0) => Err(AnnounceError::BadPeriod(timeout)),
            Self::TooClose { threshold } if !(threshold >= 20.0) => Err(AnnounceError::BadThreshold(threshold)),
            _ => Ok(()),
        }
    }
}

impl FromStr for Policy {
    type Err = AnnounceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AnnounceError::BadPolicy(s.to_string());
        let p = match s.split_once(':') {
            None if s == "once" => Policy::Once {
                timeout: DEFAULT_ONCE_TIMEOUT_S,
            },
            None if s == "tooclose" => Policy::TooClose {
                threshold: DEFAULT_TOO_CLOSE_MM,
            },
            Some(("interval", v)) => Policy::FixedInterval {
                period: v.parse().map_err(|_| bad())?,
            },
            Some(("once", v)) => Policy::Once {
                timeout: v.parse().map_err(|_| bad())?,
            },
            Some(("tooclose", v)) => Policy::TooClose {
                threshold: v.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        p.validate()?;
        Ok(p)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FixedInterval { period } => write!(f, "interval:{period}"),
            Self::Once { timeout } => write!(f, "once:{timeout}"),
            Self::TooClose { threshold } => write!(f, "tooclose:{threshold}"),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ClassState {
    last_announced: Option<f64>,
    last_seen: Option<f64>,
}

/// Stateful policy applied to a time-ordered sighting stream.
#[derive(Debug, Clone)]
pub struct Scheduler {
    policy: Policy,
    too_close_mm: f64,
    classes: HashMap<String, ClassState>,
    last_time: Option<f64>,
}

impl Scheduler {
    /// Urgency uses the policy's own threshold under `TooClose`, otherwise
    /// [`DEFAULT_TOO_CLOSE_MM`].
    pub fn new(policy: Policy) -> Result<Self, AnnounceError> {
        policy.validate()?;
        let too_close_mm = match policy {
            Policy::TooClose { threshold } => threshold,
            _ => DEFAULT_TOO_CLOSE_MM,
        };
        Ok(Self {
            policy,
            too_close_mm,
            classes: HashMap::new(),
            last_time: None,
        })
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    fn is_close(&self, d: Range) -> bool {
        matches!(d, Range::Millimeters(z) if z < self.too_close_mm)
    }

    pub fn push(&mut self, s: &Sighting) -> Result<Option<Announcement>, AnnounceError> {
        if let Some(prev) = self.last_time {
            if s.time < prev || s.time.is_nan() {
                return Err(AnnounceError::NonMonotone {
                    previous: prev,
                    got: s.time,
                });
            }
        }
        self.last_time = Some(s.time);
        let close = self.is_close(s.distance);
        let st = self.classes.entry(s.class.clone()).or_default();
        let fire = match self.policy {
            Policy::FixedInterval { period } => st.last_announced.map_or(true, |t| s.time - t >= period),
            Policy::Once { timeout } => st.last_seen.map_or(true, |t| s.time - t >= timeout),
            Policy::TooClose { .. } => close && st.last_announced.map_or(true, |t| s.time - t >= TOO_CLOSE_REPEAT_S),
        };
        st.last_seen = Some(s.time);
        if !fire {
            return Ok(None);
        }
        st.last_announced = Some(s.time);
        Ok(Some(Announcement {
            timestamp: s.time,
            class: s.class.clone(),
            text: format_message(s),
            urgency: if close { Urgency::Urgent } else { Urgency::Normal },
            distance: s.distance,
        }))
    }
}

pub fn schedule(policy: Policy, stream: &[Sighting]) -> Result<Vec<Announcement>, AnnounceError> {
    let mut sch = Scheduler::new(policy)?;
    let mut out = Vec::new();
    for s in stream {
        out.extend(sch.push(s)?);
    }
    Ok(out)
}

/// Where announcements go.
#[derive(Debug, Clone, PartialEq)]
pub enum Sink {
    Stdout,
    /// Appended, one line per announcement.
    File(PathBuf),
    /// Program and arguments split on whitespace; a `{text}` argument is
    /// replaced by the message, otherwise the message is appended.
    Command(String),
}

/// Writes the announcement; failures are logged and reported as `false`.
pub fn emit(a: &Announcement, sink: &Sink) -> bool {
    let res: Result<(), String> = match sink {
        Sink::Stdout => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{}", a.text).map_err(|e| e.to_string())
        }
        Sink::File(p) => OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .and_then(|mut f| writeln!(f, "{}", a.text))
            .map_err(|e| format!("{}: {e}", p.display())),
        Sink::Command(template) => run_command(template, &a.text),
    };
    match res {
        Ok(()) => true,
        Err(e) => {
            log::warn!("announcement not delivered: {e}");
            false
        }
    }
}

fn run_command(template: &str, text: &str) -> Result<(), String> {
    let mut parts = template.split_whitespace();
    let prog = parts.next().ok_or("empty speech command")?;
    let mut args: Vec<String> = parts.map(str::to_string).collect();
    match args.iter_mut().find(|a| a.as_str() == "{text}") {
        Some(a) => *a = text.to_string(),
        None => args.push(text.to_string()),
    }
    let status = Command::new(prog)
        .args(&args)
        .status()
        .map_err(|e| format!("{prog}: {e}"))?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("{prog} exited with {status}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(time: f64, class: &str, dir: Direction, d: Option<f64>) -> Sighting {
        Sighting {
            time,
            class: class.into(),
            direction: dir,
            distance: d.map_or(Range::NoReturn, Range::Millimeters),
        }
    }

    #[test]
    fn message_templates() {
        assert_eq!(format_message(&s(0.0, "car", Direction::Ahead, Some(2300.0))), "car ahead at 2300 millimeters");
        assert_eq!(format_message(&s(0.0, "person", Direction::Left, None)), "person left, distance unknown");
        assert_eq!(format_message(&s(0.0, "bus", Direction::Right, Some(850.0))), "bus right at 850 millimeters");
    }

    #[test]
    fn direction_from_column() {
        assert_eq!(Direction::from_column(0, 3), Direction::Left);
        assert_eq!(Direction::from_column(1, 3), Direction::Ahead);
        assert_eq!(Direction::from_column(2, 3), Direction::Right);
    }

    #[test]
    fn once_announces_first_sighting() {
        let stream: Vec<_> = (0..3).map(|t| s(t as f64, "car", Direction::Ahead, Some(3000.0))).collect();
        let a = schedule(Policy::Once { timeout: 10.0 }, &stream).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].timestamp, 0.0);
    }

    #[test]
    fn once_resets_after_absence() {
        let stream = [
            s(0.0, "car", Direction::Ahead, None),
            s(5.0, "car", Direction::Ahead, None),
            s(15.0, "car", Direction::Ahead, None),
            s(26.0, "car", Direction::Ahead, None),
        ];
        let a = schedule(Policy::Once { timeout: 10.0 }, &stream).unwrap();
        let t: Vec<f64> = a.iter().map(|a| a.timestamp).collect();
        assert_eq!(t, vec![0.0, 15.0, 26.0]);
    }

    #[test]
    fn too_close_threshold() {
        let stream = [
            s(0.0, "car", Direction::Ahead, Some(1500.0)),
            s(1.0, "car", Direction::Ahead, Some(800.0)),
        ];
        let a = schedule(Policy::TooClose { threshold: 1000.0 }, &stream).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].urgency, Urgency::Urgent);
        assert_eq!(a[0].timestamp, 1.0);
    }

    #[test]
    fn fixed_interval_window() {
        let stream: Vec<_> = [0.0, 2.0, 4.0, 6.0].iter().map(|&t| s(t, "sign", Direction::Left, None)).collect();
        let a = schedule(Policy::FixedInterval { period: 5.0 }, &stream).unwrap();
        let t: Vec<f64> = a.iter().map(|a| a.timestamp).collect();
        assert_eq!(t, vec![0.0, 6.0]);
    }

    #[test]
    fn non_monotone_rejected() {
        let stream = [s(2.0, "car", Direction::Ahead, None), s(1.0, "car", Direction::Ahead, None)];
        assert!(matches!(
            schedule(Policy::Once { timeout: 10.0 }, &stream),
            Err(AnnounceError::NonMonotone { .. })
        ));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("interval:5".parse::<Policy>().unwrap(), Policy::FixedInterval { period: 5.0 });
        assert_eq!("once".parse::<Policy>().unwrap(), Policy::Once { timeout: 10.0 });
        assert_eq!("tooclose:800".parse::<Policy>().unwrap(), Policy::TooClose { threshold: 800.0 });
        assert!("interval:0".parse::<Policy>().is_err());
        assert!("tooclose:5".parse::<Policy>().is_err());
        assert!("loud".parse::<Policy>().is_err());
    }

    #[test]
    fn file_sink_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.log");
        let a = schedule(Policy::Once { timeout: 10.0 }, &[s(0.0, "car", Direction::Ahead, Some(900.0))]).unwrap();
        assert!(emit(&a[0], &Sink::File(p.clone())));
        assert!(emit(&a[0], &Sink::File(p.clone())));
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "car ahead at 900 millimeters\n".repeat(2));
    }

    #[test]
    fn failing_command_is_not_fatal() {
        let a = schedule(Policy::Once { timeout: 10.0 }, &[s(0.0, "car", Direction::Ahead, None)]).unwrap();
        assert!(!emit(&a[0], &Sink::Command("false".into())));
        assert!(!emit(&a[0], &Sink::Command("/nonexistent/speaker {text}".into())));
        assert!(emit(&a[0], &Sink::Command("true {text}".into())));
    }
}
