//! Joint objective, optimization loop and checkpoints.

pub mod checkpoint;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod optim;
pub mod trainer;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, load_groups, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use evaluation::{probe_flows, reconstruct_video, reconstruction_report, reenact, tensor_to_frames, FlowProbe};
pub use losses::{
    loss_adversarial, loss_equivariance, loss_keypoint_distance, loss_reconstruction, PerceptualExtractor,
    RandomPerceptual, ReconstructionLoss,
};
pub use model::{FaceAnimator, GeneratorOutput, ParamGroup};
pub use optim::Adam;
pub use trainer::{
    must_be_isolated, step_rng, AuditEntry, Batch, StepReport, TrainState, LOSS_TERMS, STREAM_DATA,
};
