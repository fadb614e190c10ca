//! Multi-column object detection with laser-ranged distance announcements.
//!
//! Per-modality convolutional columns (intensity, edges, Gaussian scale
//! space, optical-flow orientation) are fused at their last feature map,
//! scored by an anchor-based objectness layer, ROI-pooled and classified by
//! a small head. Distances come from a 2-D laser scan mapped onto the
//! camera grid; an annunciator turns detections into text messages.

pub mod annunciator;
pub mod backbone;
pub mod dataset;
pub mod depth;
pub mod detector;
pub mod fusion;
pub mod gradcheck;
pub mod heads;
pub mod imaging;
pub mod model_io;
pub mod nn;
pub mod rpn;
pub mod svm;
pub mod tensor;
pub mod train;

pub use detector::{DetectorParams, Model, ModelConfig};
pub use fusion::FusionMode;
pub use heads::HeadVariant;
pub use imaging::Image;
pub use rpn::BBox;
pub use tensor::FeatureMap;
