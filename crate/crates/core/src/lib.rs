pub mod autodiff;
pub mod cmm;
pub mod geometry;
pub mod germ;
pub mod graph;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod synth;
