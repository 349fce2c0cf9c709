//! Core logic for auditing text-to-image models through aggregated scene graphs.
//!
//! Everything in this crate is a pure function over in-memory values. It builds
//! without `std` (only `alloc` is required), so IO, transport, persistence and
//! scheduling live in the companion `vipera` crate.
//!
//! The pipeline this crate models:
//!
//! 1. images are generated per [`model::Prompt`] and a seeded sample of them is
//!    sent to a vision model for scene-graph extraction ([`graph::parse_extraction`]);
//! 2. per-image graphs are merged into one [`model::AggregatedSceneGraph`]
//!    ([`graph::merge_graphs`]) and pruned to a bounded width ([`graph::prune_graph`]);
//! 3. auditors attach [`model::Criterion`]s to object nodes; every image is labeled
//!    against every criterion ([`labeling`]);
//! 4. label distributions ([`labeling::distribution`]) and a 2-D projection of label
//!    vectors ([`projection`]) summarize the collection;
//! 5. [`suggest`] proposes new criteria and prompt variants;
//! 6. bookmarks are rendered into a Markdown report ([`report`]).
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod graph;
pub mod labeling;
pub mod model;
pub mod name;
pub mod projection;
pub mod provider;
pub mod report;
pub mod rng;
pub mod session;
pub mod suggest;

pub use error::{Error, Result};
pub use model::*;
pub use name::{assign_color_index, normalize_name};
pub use provider::{ProviderError, TextModel, TextRequest, VisionKind, VisionModel, VisionRequest};
