use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth {depth} is not in front of the camera")]
    NonPositiveDepth { depth: f64 },
    #[error("viewing ray is parallel to the plane")]
    RayParallelToPlane,
    #[error("plane intersection lies behind the camera (depth {depth})")]
    NegativeDepth { depth: f64 },
    #[error("interpolation factor {factor} outside [0, 1]")]
    OutOfRangeFactor { factor: f64 },
    #[error("rotation angle {angle} too close to pi for the logarithm")]
    NearPiRotation { angle: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("plane normal must be non-zero and finite")]
    InvalidPlane,
    #[error("quaternion must be non-zero and finite")]
    InvalidQuaternion,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntityError {
    #[error("no LiDAR frame inside the accumulation window")]
    EmptyWindow,
    #[error("{found} points, at least {required} required")]
    TooFewPoints { found: usize, required: usize },
    #[error("every sampled triple was collinear")]
    DegenerateSample,
    #[error("inlier ratio {ratio:.3} below {required:.3}")]
    LowInlierRatio { ratio: f64, required: f64 },
    #[error("text edge shorter than {min_length} m")]
    DegenerateEdge { min_length: f64 },
    #[error("image timestamp {t} not bracketed by odometry")]
    UnbracketedTimestamp { t: f64 },
    #[error("invalid ID pattern: {0}")]
    InvalidPattern(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpError {
    #[error("{found} points, at least {required} required")]
    TooFewPoints { found: usize, required: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("normal equations are singular at node {node}")]
    SingularNormalEquations { node: usize },
    #[error("edge references unknown frame {frame}")]
    UnknownFrame { frame: usize },
    #[error("pose graph needs at least one node")]
    Empty,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectory lengths differ: {est} estimated vs {gt} ground truth")]
    LengthMismatch { est: usize, gt: usize },
    #[error("at least {required} poses required")]
    TooFewPoses { required: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("waypoint {index} lies outside the walkable world")]
    WaypointOutsideWorld { index: usize },
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown scenario '{0}' (expected corridor, semi_outdoor or multifloor)")]
    UnknownScenario(String),
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("log does not start with a calib record")]
    MissingCalibration,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("environment override {key}: {message}")]
    Env { key: String, message: String },
    #[error("invalid config value: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("log does not start with a calib record")]
    MissingCalibration,
    #[error("duplicate calib record")]
    DuplicateCalibration,
    #[error("odometry frame {found} out of order (expected {expected})")]
    FrameOutOfOrder { found: usize, expected: usize },
    #[error("cloud for frame {frame} has no preceding odometry")]
    UnknownFrame { frame: usize },
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error(transparent)]
    Entity(#[from] EntityError),
}
