//! Alternating adversarial training of the generator and discriminator.

pub mod data;
pub mod losses;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use data::{BatchSource, DirectorySource, DomainBatch, SourceSequence, SyntheticSource};
pub use losses::{discriminator_loss, generator_loss, GeneratorLoss};
pub use optim::Adam;
pub use schedule::poly_lr;
pub use trainer::{EpochSummary, LossReport, StepOutcome, Trainer, TrainingHistory, UpdateAudit};
