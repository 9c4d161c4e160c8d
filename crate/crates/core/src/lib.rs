//! Dataset factory for visual instruction tuning.
//!
//! Co-generates text-to-image prompts, images, and instruction dialogues via
//! external chat and text-to-image endpoints, filters and assembles them into
//! LLaVA-compatible training datasets, and scores model outputs with a
//! rubric-driven LLM judge.

pub mod assemble;
pub mod backend;
pub mod dialogue;
pub mod eval;
pub mod job;
pub mod prompt;
pub mod schema;
pub mod template;
