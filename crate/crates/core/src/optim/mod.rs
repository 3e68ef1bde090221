//! Per-group clipping, Adam, cosine warm restarts and the gradient-routing step.

pub mod adam;
pub mod routing;
pub mod schedule;

pub use adam::{adam_step, clip_gradients, AdamState, GroupConfig, ParamGroup};
pub use routing::{gr_train_step, standard_train_step, GroupStepStats, TrainStepReport};
pub use schedule::{CosineWarmRestarts, ScheduleConfig};
