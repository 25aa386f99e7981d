use std::fmt;

use thiserror::Error;

/// Pipeline stage an error happened in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Data,
    Baseline,
    Harden,
    Train,
    Attack,
    Extract,
    Verify,
    Output,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Data => "data",
            Phase::Baseline => "baseline",
            Phase::Harden => "harden",
            Phase::Train => "train",
            Phase::Attack => "attack",
            Phase::Extract => "extract",
            Phase::Verify => "verify",
            Phase::Output => "output",
        })
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{phase} failed: {source}")]
    Phase {
        phase: Phase,
        #[source]
        source: inkwm::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Phase { .. } => 1,
        }
    }
}

pub trait InPhase<T> {
    fn during(self, phase: Phase) -> Result<T, CliError>;
}

impl<T, E: Into<inkwm::Error>> InPhase<T> for Result<T, E> {
    fn during(self, phase: Phase) -> Result<T, CliError> {
        self.map_err(|e| CliError::Phase { phase, source: e.into() })
    }
}
