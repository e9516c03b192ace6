//! Epipolar-supervised dense flow toolkit.

pub mod flow_field;
pub mod flow_optimizer;
pub mod geometry;
pub mod io;
pub mod matcher;
pub mod metrics;
pub mod model_fit;
pub mod supervision;
pub mod synth_transform;
pub mod synthetic;
