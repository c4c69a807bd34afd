//! Salient object detection from scratch: reflective image-pair separation,
//! a weight-stitched two-branch convolutional encoder, hyper-dense feature
//! fusion, and the training and evaluation harness around them.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod reflect;
pub mod rng;
pub mod tensor;
pub mod train;

/// Compiles and runs every Rust snippet in the guide (book/src) as a
/// doc-test, so the book cannot drift from the code it documents.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(dead_code)]
            struct $name;
        };
    }

    chapter!(Readme, "../../../README.md");
    chapter!(Intro, "../../../book/src/intro.md");
    chapter!(Separation, "../../../book/src/separation.md");
    chapter!(Tape, "../../../book/src/tape.md");
    chapter!(Encoder, "../../../book/src/encoder.md");
    chapter!(Fusion, "../../../book/src/fusion.md");
    chapter!(Losses, "../../../book/src/losses.md");
    chapter!(Training, "../../../book/src/training.md");
    chapter!(Metrics, "../../../book/src/metrics.md");
    chapter!(Cli, "../../../book/src/cli.md");
}
