//! Mixed-modal text generation with visual critic feedback.

pub mod eval;
pub mod exec;
pub mod gateway;
pub mod linearize;
pub mod matching;
pub mod model;
pub mod pipeline;
pub mod postedit;
pub mod prompt;
pub mod synth;
pub mod text;
pub mod trainset;
