use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("duplicate frame index {0}")]
    DuplicateFrame(usize),
    #[error("frame index {found} follows {previous}; frames must be sorted")]
    NonMonotonicIndex { previous: usize, found: usize },
    #[error("landmark id {0} outside the 70-point face model")]
    InvalidLandmark(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("segment of {len} samples is too short to filter (needs more than {min})")]
    SegmentTooShort { len: usize, min: usize },
    #[error("no valid samples for landmark {0}")]
    NoValidSamples(usize),
    #[error("degenerate reference configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("series of {len} samples is too short (needs {needed})")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("trajectory of {0} points is too large for the brute-force oracle")]
    TooLarge(usize),
    #[error("row {row}: {msg}")]
    MalformedRow { row: usize, msg: String },
    #[error("row {row}: unknown subtask '{name}'")]
    UnknownSubtask { row: usize, name: String },
    #[error("all features were dropped by filtering")]
    AllFeaturesDropped,
    #[error("training data contains a single class")]
    SingleClassTraining,
    #[error("class {0} missing from a split")]
    ClassMissingInSplit(String),
    #[error("leave-one-participant-out needs at least two participants")]
    SingleParticipant,
    #[error("participant {participant} has too few windows for training size {size}")]
    InsufficientWindows { participant: String, size: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{stage} failed on {}{}: {source}", file.display(), frame.map(|f| format!(" (frame {f})")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        file: PathBuf,
        frame: Option<usize>,
        #[source]
        source: Box<Error>,
    },
    #[error("path does not exist: {}", .0.display())]
    MissingPath(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn in_stage(
        self,
        stage: &'static str,
        file: impl Into<PathBuf>,
        frame: Option<usize>,
    ) -> Self {
        Error::Stage {
            stage,
            file: file.into(),
            frame,
            source: Box::new(self),
        }
    }
}
