//! Character coreference for visual stories.
//!
//! Builds visual chains from per-image person detections, parses textual
//! chains from tagged stories, aligns the two into multimodal chains, and
//! scores stories with character-centric metrics. Model inference happens
//! elsewhere; this crate consumes its outputs as documents or through a
//! chat-completion endpoint.

pub mod align;
pub mod assignment;
pub mod corpus;
pub mod llm;
pub mod metrics;
pub mod model;
pub mod text;
pub mod textual;
pub mod visual;

pub use assignment::{solve, solve_with_threshold, Assignment, Match, ScoreMatrix};
pub use model::{
    AnnotatedStory, BBox, Detection, DetectionRef, DistributionVector, ImageSequence,
    MultimodalChain, Span, TextualMention, VisualChain,
};
pub use textual::{parse_annotated, render_annotated, strip_annotations, textual_chains};
