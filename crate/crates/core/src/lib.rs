//! # speechstate
//!
//! Imagined-speech vs idle-state detection from multichannel EEG.
//!
//! The crate covers the whole decoding pipeline on synthetic sessions:
//!
//! ```text
//! synth session (1/f noise + class-dependent components)
//!   │
//!   ├─ preprocess   band-pass → decimate → overlapping 500 ms windows,
//!   │               cue-based labels, seeded 80/20 split, class weights
//!   ├─ csp + linear CSP log-variance features → LDA / linear SVM
//!   ├─ deepnets     EEGNet / ShallowConvNet / DeepConvNet trained with
//!   │               class-weighted cross-entropy on the tensor engine
//!   ├─ eval         confusion-matrix metrics + pseudo-online replay
//!   └─ tsne         exact t-SNE of raw windows and penultimate features
//! ```
//!
//! Everything is deterministic per seed: all randomness flows through one
//! documented PRNG ([`rng::SplitMix64`]), and numeric loops run in fixed
//! order.

pub mod csp;
pub mod dataio;
pub mod deepnets;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod linear;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod svg;
pub mod tensor;
pub mod tsne;

pub use error::{Error, Result};
pub use rng::SplitMix64;
pub use tensor::Tensor;
