use std::fmt;

use chargejump::error::{
    DetectError, FormatError, ModelError, RatesError, SynthError, TemplateError,
};

/// Process exit status by failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 1,
    Data = 2,
    Analysis = 3,
}

/// A failed stage: what ran, what it was working on, and why.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub stage: String,
    pub message: String,
}

impl Failure {
    pub fn usage(stage: &str, message: impl fmt::Display) -> Self {
        Self::new(Kind::Usage, stage, message)
    }

    pub fn data(stage: &str, message: impl fmt::Display) -> Self {
        Self::new(Kind::Data, stage, message)
    }

    pub fn analysis(stage: &str, message: impl fmt::Display) -> Self {
        Self::new(Kind::Analysis, stage, message)
    }

    fn new(kind: Kind, stage: &str, message: impl fmt::Display) -> Self {
        Self {
            kind,
            stage: stage.to_string(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.kind as u8
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

pub type Outcome<T> = Result<T, Failure>;

/// Attaches a stage name to a core error, classifying it by origin.
pub trait Stage<T> {
    fn stage(self, stage: &str) -> Outcome<T>;
}

macro_rules! classify {
    ($($err:ty => $kind:ident),* $(,)?) => {$(
        impl<T> Stage<T> for Result<T, $err> {
            fn stage(self, stage: &str) -> Outcome<T> {
                self.map_err(|e| Failure::$kind(stage, e))
            }
        }
    )*};
}

classify! {
    FormatError => data,
    ModelError => data,
    TemplateError => analysis,
    DetectError => analysis,
    SynthError => analysis,
    RatesError => analysis,
}
