//! Autoregressive multi-channel EEG pre-training with temporal-routing
//! mixture-of-experts.
//!
//! * [`autodiff`]: dense tensors and a reverse-mode tape.
//! * [`data`]: synthetic corpora, the segment file format, filtering and windowing.
//! * [`encoder`]: patching, time/frequency patch embedding, channel positional encoding.
//! * [`backbone`]: causal spatial-temporal attention, routing context and the routed FFN.
//! * [`objective`]: multi-horizon forecasting heads and the pre-training loss.
//! * [`train`]: AdamW, schedules, checkpoints and the pre-training loop.
//! * [`finetune`] and [`metrics`]: classification head and evaluation.
//! * [`analysis`]: routing statistics and expert-set overlap.

pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod init;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod par;
pub mod selfcheck;
pub mod tensor;
pub mod train;
pub use error::{Error, Result};
pub use tensor::Tensor;
