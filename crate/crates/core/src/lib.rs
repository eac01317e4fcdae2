//! Few-shot out-of-distribution detection with adaptive multi-prompt
//! contrast on the unit hypersphere: learnable prompt banks behind a
//! frozen encoder, a seven-term contrastive objective with analytic
//! gradients, class-wise adaptive score thresholds with a momentum
//! pseudo-OOD distribution, and deterministic training plus evaluation.

pub mod config;
pub mod distribution;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod prompt_bank;
pub mod synth;
pub mod trainer;
pub mod vecmath;

pub use config::{HyperParams, Polarity, SynthConfig, TrainConfig};
pub use distribution::{detect, ClassStats, DetectionOutcome};
pub use error::{AmcnError, Result};
pub use losses::{Batch, GradCheckReport, LossReport};
pub use metrics::{auroc, fpr95, ScoredSet};
pub use prompt_bank::{DeskEncoder, PromptBank};
pub use synth::{synth_generate, SampleSet};
pub use trainer::{evaluate, train, EvalOutput, TrainOutput};
