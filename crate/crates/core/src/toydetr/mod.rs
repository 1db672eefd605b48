//! Desk-scale detection transformer used to exercise the distillation losses
//! end to end: synthetic scenes, the detector, its losses, training and
//! evaluation.

pub mod ablate;
pub mod checkpoint;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod scene;
pub mod train;

pub use ablate::{suite_cells, AblationReport, Cell, CellRun, CellSummary, Direction, Runner, Suite};
pub use checkpoint::Checkpoint;
pub use eval::{average_precision, detections, evaluate_toy_ap, Detection};
pub use loss::{gt_loss, GtLossWeights};
pub use model::{Forward, ModelConfig, ToyDetector};
pub use optim::{AdamW, AdamWConfig};
pub use scene::{gen_scene, patches, Dataset, SceneSpec, SyntheticScene};
pub use train::{prepare_student, Distillation, EpochMetrics, TeacherOutputs, TrainConfig, Trainer};
