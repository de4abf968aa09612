//! Training loops: mask-backward label generation, the alternating
//! framework, reconstructor training and the LOUPE baseline.

pub mod alternating;
pub mod batch;
pub mod evaluate;
pub mod events;
pub mod loupe;
pub mod losses;
pub mod mask_backward;
pub mod optim;
pub mod recon;
pub mod sampling;

pub use alternating::{alternating_train, AlphaGrid, Alternating, AlternatingConfig, AlternatingSummary, BatchOutcome};
pub use batch::{epoch_batches, make_batch, masks_to_tensor, Batch};
pub use events::{EventLog, GateRecord, TrainEvent};
pub use mask_backward::{mask_backward, MaskBackwardConfig, MaskBackwardOutcome};
pub use optim::{Plateau, RmsProp, RmsState};
pub use sampling::{DensitySampler, FixedSampler, MaskSource, MnetSampler, UniformSampler};
pub use evaluate::evaluate;
pub use loupe::{train_loupe, LoupeConfig, LoupeModel, LoupeOptimizers, LoupeSampler, LoupeSummary};
pub use recon::{train_separate_reconstructor, warmup_reconstructor, Budget, SeparateSummary, SeparateTrainConfig, WarmupConfig};
