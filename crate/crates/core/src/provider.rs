//! Model-facing interfaces.
//!
//! Requests carry both the instruction text a real model reads and a
//! structured [`VisionKind`] so offline stand-ins can answer from fixtures
//! without parsing prose.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::model::ImageId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("instruction is empty")]
    InvalidInstruction,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VisionKind {
    Extraction,
    Label { criterion: String, candidates: Vec<String> },
    CriteriaSuggestion,
}

impl VisionKind {
    pub fn tag(&self) -> &'static str {
        match self {
            VisionKind::Extraction => "extraction",
            VisionKind::Label { .. } => "label",
            VisionKind::CriteriaSuggestion => "criteria_suggestion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisionRequest {
    pub kind: VisionKind,
    /// One or two images.
    pub image_ids: Vec<ImageId>,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextRequest {
    /// Prompt being varied.
    pub base_text: String,
    pub instruction: String,
    pub seed: u64,
}

pub trait VisionModel {
    fn vision_query(&self, request: &VisionRequest) -> Result<String, ProviderError>;
}

pub trait TextModel {
    fn text_query(&self, request: &TextRequest) -> Result<String, ProviderError>;
}

impl<T: VisionModel + ?Sized> VisionModel for &T {
    fn vision_query(&self, request: &VisionRequest) -> Result<String, ProviderError> {
        (**self).vision_query(request)
    }
}

impl<T: TextModel + ?Sized> TextModel for &T {
    fn text_query(&self, request: &TextRequest) -> Result<String, ProviderError> {
        (**self).text_query(request)
    }
}
