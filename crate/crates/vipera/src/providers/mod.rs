//! Clients for the three model roles: image generation, vision-language
//! queries and text generation.
//!
//! Each role has a remote HTTP client and a deterministic offline stub.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use vipera_core::model::ImageId;
use vipera_core::provider::{ProviderError, TextModel, TextRequest, VisionModel, VisionRequest};

use crate::config::{ProviderMode, Settings};

pub mod remote;
pub mod stub;

/// Bytes of one stored image, as sent to a vision model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub id: ImageId,
    pub bytes: Vec<u8>,
}

/// Outcome of one image in a generation batch.
pub type ImageResult = Result<Vec<u8>, String>;

pub trait ImageGenerator: Send + Sync {
    /// Generates `n` images; image `i` is requested with seed `base_seed + i`.
    ///
    /// A failure of one image is reported in its slot. The call as a whole
    /// fails only when the backend cannot be reached at all.
    fn generate_images(&self, prompt: &str, n: u32, base_seed: u64) -> Result<Vec<ImageResult>, ProviderError>;
}

pub trait VisionBackend: Send + Sync {
    fn vision_query(&self, images: &[ImagePayload], request: &VisionRequest) -> Result<String, ProviderError>;
}

pub trait TextBackend: Send + Sync {
    fn text_query(&self, request: &TextRequest) -> Result<String, ProviderError>;
}

pub(crate) fn check_vision_request(images: &[ImagePayload], request: &VisionRequest) -> Result<(), ProviderError> {
    if request.instruction.trim().is_empty() {
        return Err(ProviderError::InvalidInstruction);
    }
    if !(1..=2).contains(&images.len()) {
        return Err(ProviderError::InvalidRequest(format!(
            "expected 1 or 2 images, got {}",
            images.len()
        )));
    }
    Ok(())
}

/// One client per role.
#[derive(Clone)]
pub struct Providers {
    pub t2i: Arc<dyn ImageGenerator>,
    pub vlm: Arc<dyn VisionBackend>,
    pub llm: Arc<dyn TextBackend>,
}

impl Providers {
    pub fn stub() -> Self {
        Self {
            t2i: Arc::new(stub::StubImageGenerator::default()),
            vlm: Arc::new(stub::StubVision::default()),
            llm: Arc::new(stub::StubText::default()),
        }
    }

    pub fn from_settings(settings: &Settings) -> Result<Self, ProviderError> {
        let fixtures = Arc::new(stub::Fixtures::builtin());
        let t2i: Arc<dyn ImageGenerator> = match settings.t2i.mode {
            ProviderMode::Stub => Arc::new(stub::StubImageGenerator::default()),
            ProviderMode::Remote => Arc::new(remote::RemoteImageGenerator::new(&settings.t2i)?),
        };
        let vlm: Arc<dyn VisionBackend> = match settings.vlm.mode {
            ProviderMode::Stub => Arc::new(stub::StubVision::new(fixtures.clone())),
            ProviderMode::Remote => Arc::new(remote::RemoteVision::new(&settings.vlm)?),
        };
        let llm: Arc<dyn TextBackend> = match settings.llm.mode {
            ProviderMode::Stub => Arc::new(stub::StubText::new(fixtures)),
            ProviderMode::Remote => Arc::new(remote::RemoteText::new(&settings.llm)?),
        };
        Ok(Self { t2i, vlm, llm })
    }
}

/// Adapts a [`VisionBackend`] to the core [`VisionModel`] by reading image
/// bytes from a session's image directory.
pub struct SessionVision<'a> {
    backend: &'a dyn VisionBackend,
    images_dir: PathBuf,
}

impl<'a> SessionVision<'a> {
    pub fn new(backend: &'a dyn VisionBackend, images_dir: impl AsRef<Path>) -> Self {
        Self {
            backend,
            images_dir: images_dir.as_ref().to_path_buf(),
        }
    }
}

impl VisionModel for SessionVision<'_> {
    fn vision_query(&self, request: &VisionRequest) -> Result<String, ProviderError> {
        let images = request
            .image_ids
            .iter()
            .map(|id| {
                let path = self.images_dir.join(format!("{id}.png"));
                std::fs::read(&path)
                    .map(|bytes| ImagePayload { id: id.clone(), bytes })
                    .map_err(|e| ProviderError::InvalidRequest(format!("cannot read {}: {e}", path.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.backend.vision_query(&images, request)
    }
}

/// Adapts a [`TextBackend`] to the core [`TextModel`].
pub struct SessionText<'a>(pub &'a dyn TextBackend);

impl TextModel for SessionText<'_> {
    fn text_query(&self, request: &TextRequest) -> Result<String, ProviderError> {
        self.0.text_query(request)
    }
}
