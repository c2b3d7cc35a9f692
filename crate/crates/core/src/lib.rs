//! Camera and LiDAR fusion detection on synthetic driving scenes, with
//! PGD attacks, adversarial training and robustness evaluation.

pub mod advtrain;
pub mod attacks;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod lidarmap;
pub mod ndlab;
pub mod rng;
pub mod scenegen;

pub use error::{Error, Result};
pub use advtrain::{AtVariant, LrSchedule, TrainConfig, TrainReport};
pub use attacks::{AttackSpec, Channel, MaskMode, MaskSet, Perturbation};
pub use detector::{Detection, Detector, DetectorConfig, FusionMode, RawPrediction};
pub use evalkit::{ApResult, BudgetAxis, EvalConfig, RobustnessCurve};
pub use lidarmap::{DepthMaps, DepthStats};
pub use ndlab::{ParamStore, Tensor};
pub use scenegen::{CameraIntrinsics, Dataset, GtBox, ObjectClass, Scene, SceneSpec, Split};
