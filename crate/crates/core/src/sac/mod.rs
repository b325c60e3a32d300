//! Soft actor-critic with flow policies: critics, replay memory, losses,
//! presets and the two training loops.

pub mod config;
pub mod critic;
pub mod gaussian;
pub mod losses;
pub mod pretrain;
pub mod replay;
pub mod train;

pub use config::{Preset, TrainConfig};
pub use critic::{Critic, CriticSpec};
pub use replay::{Batch, ReplayBuffer};
pub use train::{Mode, StepReport, Trainer};
