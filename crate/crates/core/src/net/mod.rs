//! The learned model and its per-frame inference step.

mod checkpoint;
mod config;
mod layers;
mod model;
mod step;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use config::{Likelihood, ModelConfig};
pub use layers::{init_weights, ConvLstm, ConvLstmState, GlimpseEncoder, GruCell, UpDecoder};
pub use model::{context_probability, proposal_weights, ApexNet, FeatureMap, ObjectDecoding};
pub use step::{filter_slots, ObjectSlot, SceneState, StepContext, StepObject, StepOutputs};

pub(crate) use step::check_finite_outputs;
