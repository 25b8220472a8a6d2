//! CLI error taxonomy mapped to process exit codes.

use transgp::dataset::DatasetError;
use transgp::gp::GpError;
use transgp::guided::GuidedError;
use transgp::neural::NeuralError;
use transgp::sim::SimError;

#[derive(Debug)]
pub enum CliError {
    /// Exit code 2: bad flags, config files, or option combinations.
    Config(String),
    /// Exit code 3: OS-level file errors.
    Io(String),
    /// Exit code 4: everything that failed while actually computing.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(m) => CliError::Config(m),
            SimError::Io(e) => CliError::Io(e.to_string()),
            SimError::Parse(m) => CliError::Config(m),
        }
    }
}

impl From<GpError> for CliError {
    fn from(e: GpError) -> Self {
        match e {
            GpError::InvalidConfig(m) => CliError::Config(m),
            GpError::Sim(e) => e.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<NeuralError> for CliError {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::Io(e) => CliError::Io(e.to_string()),
            NeuralError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<GuidedError> for CliError {
    fn from(e: GuidedError) -> Self {
        CliError::Runtime(e.to_string())
    }
}
