//! Builders for the experimental games.

pub mod crosswalk;
pub mod intersection;
pub mod lane;
pub mod receding;

pub use crosswalk::{build_crosswalk, CollisionForm, CrosswalkConfig};
pub use intersection::{
    build_bundled_intersection, build_intersection, build_intersection_from_files, AgentKind,
    IntersectionConfig, IntersectionScenario,
};
pub use lane::{fit_lane_centerline, fit_polynomial, LaneCenterline, Polynomial, PolynomialFit};
pub use receding::{
    braking_command, build_driving, left_turn_path, path_samples, receding_horizon_batch,
    receding_horizon_run, BrakingConfig, CarSpec, DrivingConfig, DrivingScenario, InferenceStatus,
    LaneSpec, RecedingHorizonConfig, SimulationLog, StepRecord,
};
