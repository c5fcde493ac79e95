//! Sparse-to-dense feature matching with learned multi-level correspondence
//! maps.
//!
//! A keypoint detected in image A is described by sampling a small stack of
//! backbone feature maps at that location. Each per-level descriptor is
//! correlated against the matching level of image B, upsampled to B's full
//! resolution and summed, giving one score per pixel of B. A softmax over
//! those scores is a categorical distribution over B's pixels; training
//! minimises its cross-entropy against the true correspondent and matching
//! takes its argmax.

pub mod fsutil;
pub mod tensor;
pub mod backbone;
pub mod image;
pub mod detector;
pub mod matcher;
pub mod evaluator;
pub mod trainer;
pub mod pose;
pub mod gradsuite;
