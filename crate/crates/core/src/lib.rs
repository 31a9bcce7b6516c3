//! Temporal-spatial token aggregation for divided space-time video
//! transformers.
//!
//! A clip is cut into patch tokens, run through blocks of temporal and
//! spatial self-attention, and after each attention sublayer the most
//! redundant frames or patches are merged by bipartite matching. Every
//! merge is recorded so the original cells behind each final token can be
//! recovered and drawn.
//!
//! ```
//! use testa::config::EncoderConfig;
//!
//! let cfg = EncoderConfig::long_video();
//! assert_eq!(cfg.final_shape(), (48, 100));
//! ```

pub mod ablation;
pub mod aggregation;
pub mod attention;
pub mod config;
pub mod costmodel;
pub mod encoder;
pub mod error;
pub mod io;
pub mod synthdata;
pub mod tensors;
pub mod tokenization;
pub mod trajectory;

pub use config::EncoderConfig;
pub use encoder::{encode, EncodedVideo, ModelWeights};
pub use error::{Result, TestaError};
pub use tensors::Matrix;
pub use tokenization::{RawVideo, TokenGrid};
pub use trajectory::{recover_groups, GroupMap, Trajectory};
