use std::fmt;
use std::process::ExitCode;

/// A command failure, classified by the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or a config that does not fit the schema.
    Usage(String),
    /// Missing, unreadable or corrupt inputs.
    Data(String),
    /// The checkpoint or head does not fit the data.
    Model(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Model(_) => 3,
        }
    }

    pub fn exit(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Model(m) => m,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message())
    }
}

impl From<volcodec::Error> for Failure {
    fn from(e: volcodec::Error) -> Self {
        if e.is_model_error() {
            Failure::Model(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

pub type Outcome<T> = Result<T, Failure>;

/// Attach what was being read to a library error, keeping its class.
pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> Outcome<T>;
    fn data(self, what: impl fmt::Display) -> Outcome<T>;
}

impl<T> Context<T> for volcodec::Result<T> {
    fn context(self, what: impl fmt::Display) -> Outcome<T> {
        self.map_err(|e| match Failure::from(e) {
            Failure::Usage(m) => Failure::Usage(format!("{what}: {m}")),
            Failure::Data(m) => Failure::Data(format!("{what}: {m}")),
            Failure::Model(m) => Failure::Model(format!("{what}: {m}")),
        })
    }

    /// Any failure here is the input's fault.
    fn data(self, what: impl fmt::Display) -> Outcome<T> {
        self.map_err(|e| Failure::Data(format!("{what}: {e}")))
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn context(self, what: impl fmt::Display) -> Outcome<T> {
        self.map_err(|e| Failure::Data(format!("{what}: {e}")))
    }

    fn data(self, what: impl fmt::Display) -> Outcome<T> {
        self.context(what)
    }
}
