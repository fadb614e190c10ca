//! Error classes and their exit codes.

use std::fmt;

use fusionsight::detector::DetectorError;
use fusionsight::train::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Bad flags or flag combinations.
    Usage,
    /// Unreadable, malformed or unsuitable input files.
    Data,
    /// Something that should never happen did.
    Invariant,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Invariant => 3,
        }
    }
}

pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {:#}", self.kind, self.error)
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn usage(msg: impl fmt::Display) -> Failure {
    Failure {
        kind: Kind::Usage,
        error: anyhow::anyhow!("{msg}"),
    }
}

pub fn invariant(msg: impl fmt::Display) -> Failure {
    Failure {
        kind: Kind::Invariant,
        error: anyhow::anyhow!("{msg}"),
    }
}

/// Tags any error with an exit class.
pub trait Classify<T> {
    fn or_kind(self, kind: Kind) -> CliResult<T>;

    fn data(self) -> CliResult<T>
    where
        Self: Sized,
    {
        self.or_kind(Kind::Data)
    }

    fn invariant(self) -> CliResult<T>
    where
        Self: Sized,
    {
        self.or_kind(Kind::Invariant)
    }
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_kind(self, kind: Kind) -> CliResult<T> {
        self.map_err(|e| Failure { kind, error: e.into() })
    }
}

pub fn detector_kind(e: &DetectorError) -> Kind {
    match e {
        DetectorError::ClassOutOfRange { .. } | DetectorError::Image(_) => Kind::Data,
        _ => Kind::Invariant,
    }
}

pub fn train_kind(e: &TrainError) -> Kind {
    match e {
        TrainError::TooFewSamples(_) => Kind::Data,
        TrainError::Config(_) => Kind::Usage,
        TrainError::Detector(d) => detector_kind(d),
        TrainError::Diverged { .. } | TrainError::Net(_) => Kind::Invariant,
    }
}

pub fn from_detector<T>(r: Result<T, DetectorError>) -> CliResult<T> {
    r.map_err(|e| Failure {
        kind: detector_kind(&e),
        error: e.into(),
    })
}

pub fn from_train<T>(r: Result<T, TrainError>) -> CliResult<T> {
    r.map_err(|e| Failure {
        kind: train_kind(&e),
        error: e.into(),
    })
}
