use alloc::string::String;

use thiserror::Error;

use crate::model::{CriterionId, ImageId, NodePath, PromptId, SuggestionId};

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("name is empty after normalization")]
    EmptyName,
    #[error("node path has no segments")]
    EmptyPath,
    #[error("image collection is empty")]
    EmptyCollection,
    #[error("could not parse model output: {0}")]
    ParseFailure(String),
    #[error("image {0} appears in more than one graph")]
    DuplicateImage(ImageId),
    #[error("prompt selection is empty")]
    EmptySelection,
    #[error("unknown parent node {0}")]
    UnknownParent(NodePath),
    #[error("node {0} already exists")]
    DuplicateChild(NodePath),
    #[error("distance matrix is not usable: {0}")]
    DegenerateInput(&'static str),
    #[error("no labeled images among the selected prompts")]
    NoLabeledImages,
    #[error("at least two images are required")]
    NotEnoughImages,
    #[error("base prompt {0} no longer exists")]
    StalePrompt(PromptId),
    #[error("suggestion does not match the current text of prompt {0}")]
    SuggestionMismatch(PromptId),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(&'static str),
    #[error("criterion {name} already exists on {parent}")]
    DuplicateCriterion { parent: NodePath, name: String },
    #[error("invalid candidates: {0}")]
    InvalidCandidates(&'static str),
    #[error("unknown prompt {0}")]
    UnknownPrompt(PromptId),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("unknown criterion {0}")]
    UnknownCriterion(CriterionId),
    #[error("unknown suggestion {0}")]
    UnknownSuggestion(SuggestionId),
    #[error("suggestion {0} was already resolved")]
    SuggestionResolved(SuggestionId),
    #[error("suggestion {0} has the wrong kind for this action")]
    WrongSuggestionKind(SuggestionId),
    #[error("bookmark target {0:?} does not resolve")]
    UnknownBookmarkTarget(String),
}
