//! A small, dependency-light laboratory for studying an unsupervised
//! intermediate training stage between synthetic pre-training and
//! supervised fine-tuning of a dense text detector.

pub mod augment;
pub mod detector;
pub mod evalkit;
pub mod numcore;
pub mod raster;
pub mod scenegen;
pub mod seeds;
pub mod units;
pub mod pipeline;
