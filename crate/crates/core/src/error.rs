//! Error type shared by every stage of the pipeline.

use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage, used to label errors surfaced by [`crate::register`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prealign,
    Graph3d,
    Classify3d,
    Graph2d,
    Classify2d,
    Matching,
    Assignment,
    Optimization,
    PostDeformation,
    Evaluation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Prealign => "prealign",
            Stage::Graph3d => "graph-3d",
            Stage::Classify3d => "classify-3d",
            Stage::Graph2d => "graph-2d",
            Stage::Classify2d => "classify-2d",
            Stage::Matching => "matching",
            Stage::Assignment => "assignment",
            Stage::Optimization => "optimization",
            Stage::PostDeformation => "post-deformation",
            Stage::Evaluation => "evaluation",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("EmptyInput: point set is empty")]
    EmptyInput,

    #[error("NonGridInput: point {index} is not aligned to the grid (offset {offset:.3e})")]
    NonGridInput { index: usize, offset: f64 },

    #[error("DuplicatePoint: point {index} repeats an earlier point")]
    DuplicatePoint { index: usize },

    #[error("InvalidPoint: point {index} has a non-finite coordinate")]
    InvalidPoint { index: usize },

    #[error("InvalidSpacing: grid spacing must be positive and finite")]
    InvalidSpacing,

    #[error("EmptyMask: mask has no foreground pixels")]
    EmptyMask,

    #[error("EmptyVolume: volume has no foreground voxels")]
    EmptyVolume,

    #[error("IndexOutOfRange: node {index} (graph has {len} nodes)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("Unreachable: no path between node {from} and node {to}")]
    Unreachable { from: usize, to: usize },

    #[error("TooFewNodes: classification needs at least 2 nodes, got {found}")]
    TooFewNodes { found: usize },

    #[error("TooFewEndNodes: found {found} end-nodes, {required} branches requested")]
    TooFewEndNodes { found: usize, required: usize },

    #[error("TooFewJunctions: graph has no node of degree >= 3 ({end_nodes} end-nodes)")]
    TooFewJunctions { end_nodes: usize },

    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),

    #[error("DegenerateDepth: projective depth of point {index} is {depth:.3e}")]
    DegenerateDepth { index: usize, depth: f64 },

    #[error("DegenerateProjection: third row of the projection matrix is zero")]
    DegenerateProjection,

    #[error("NoTrunks: {dim}D decomposition has no trunks")]
    NoTrunks { dim: usize },

    #[error("DegenerateBranch: tangent endpoints coincide")]
    DegenerateBranch,

    #[error("CountMismatch: {branches_2d} 2D branches vs {branches_3d} 3D branches")]
    CountMismatch { branches_2d: usize, branches_3d: usize },

    #[error("ZeroLengthTrunk: trunk has zero Euclidean length")]
    ZeroLengthTrunk,

    #[error("NoAssignedNodes: no 3D node received a correspondence")]
    NoAssignedNodes,

    #[error("SingularSystem: {0}")]
    SingularSystem(String),

    #[error("EmptyCurve: curve needs at least one segment")]
    EmptyCurve,

    #[error("InvalidParams: {0}")]
    InvalidParams(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at(self, stage: Stage) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, with stage labels stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for malformed inputs (file format, parse failures) as opposed to
    /// domain failures in the pipeline.
    pub fn is_format(&self) -> bool {
        matches!(self.root(), Error::Format(_) | Error::Io(_))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
