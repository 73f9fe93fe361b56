use ctxforge::compositing::CompositeError;
use ctxforge::evaluation::EvalError;
use ctxforge::harness::HarnessError;
use ctxforge::DatasetError;

/// Errors grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Service(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Service(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Service(_) => "service",
        }
    }

    /// `error[<kind>] exit=<code>: <detail>` on a single line.
    pub fn line(&self) -> String {
        let (CliError::Config(d) | CliError::Data(d) | CliError::Service(d)) = self;
        let detail = d.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}] exit={}: {detail}", self.kind(), self.exit_code())
    }
}

impl From<CompositeError> for CliError {
    fn from(e: CompositeError) -> Self {
        if e.is_service() {
            CliError::Service(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Composite(c) => c.into(),
            DatasetError::InvalidPlan(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidThreshold(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidSpec(m) => CliError::Config(m),
            HarnessError::Dataset(d) => d.into(),
            HarnessError::Eval(d) => d.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
