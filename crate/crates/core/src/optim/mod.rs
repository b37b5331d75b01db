//! Adam, learning-rate decay, and exponential moving averages of weights.

pub mod adam;
pub mod ema;
pub mod schedule;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use ema::{ema_kernel, EmaState, DEFAULT_EMA_DECAY};
pub use schedule::LrSchedule;
