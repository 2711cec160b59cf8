//! Model backends and the inference strategies that drive them.

pub mod http;
pub mod pipeline;
pub mod prompts;
pub mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coords::{Convention, RoiWindow};
use crate::dataset::ImageCanvas;
use crate::error::Result;
use crate::geometry::GeomBox;
use crate::mask::{box_fill_mask, RleMask};

pub use pipeline::{
    answer_kind, run_map, run_sample, run_strategy, EvidenceItem, MapConfig, Outcome, RoiPolicy, Runtime, Strategy,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no scripted reply for {0}")]
    Unscripted(String),
    #[error("injected failure: {0}")]
    Injected(String),
}

/// Pipeline stage a request belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Discovery,
    Inspection,
    Synthesis,
    /// Single-call strategies (native, resized, cropped views).
    Direct,
    /// One sliding-window tile.
    Tile,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Discovery => "discovery",
            Stage::Inspection => "inspection",
            Stage::Synthesis => "synthesis",
            Stage::Direct => "direct",
            Stage::Tile => "tile",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            top_p: 1.0,
        }
    }
}

/// Which canvas the image in a request shows, in full-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum View {
    /// The whole image at native resolution.
    Full,
    /// The whole image downsampled to `width x height`.
    Resized { width: u32, height: u32 },
    /// A padded crop.
    Window { roi: RoiWindow },
}

/// Request bookkeeping; lets test doubles answer without reading pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub sample_id: String,
    pub stage: Stage,
    /// ROI or tile index within the stage; 0 for single-call stages.
    pub index: usize,
    pub view: View,
    /// ROI budget announced to discovery; 0 elsewhere.
    pub budget: usize,
}

/// An image attached to a request. Pixels are omitted for backends that
/// declare they never look at them.
#[derive(Debug, Clone)]
pub struct RequestImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Option<Arc<ImageCanvas>>,
}

impl RequestImage {
    pub fn from_canvas(canvas: ImageCanvas) -> Self {
        RequestImage {
            width: canvas.width(),
            height: canvas.height(),
            pixels: Some(Arc::new(canvas)),
        }
    }

    pub fn shared(canvas: Arc<ImageCanvas>) -> Self {
        RequestImage {
            width: canvas.width(),
            height: canvas.height(),
            pixels: Some(canvas),
        }
    }

    pub fn dims_only(width: u32, height: u32) -> Self {
        RequestImage {
            width,
            height,
            pixels: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackendRequest {
    pub images: Vec<RequestImage>,
    pub prompt: String,
    pub decoding: Decoding,
    pub meta: RequestMeta,
}

impl BackendRequest {
    /// Hex SHA-256 over the sample id, stage, index, image sizes, decoding
    /// and prompt. Pixels are excluded: they are a function of the sample
    /// and view, which the other fields already pin down.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.meta.sample_id.as_bytes());
        h.update([0]);
        h.update(self.meta.stage.to_string().as_bytes());
        h.update(self.meta.index.to_le_bytes());
        for img in &self.images {
            h.update(img.width.to_le_bytes());
            h.update(img.height.to_le_bytes());
        }
        h.update(self.decoding.temperature.to_le_bytes());
        h.update(self.decoding.top_p.to_le_bytes());
        h.update(self.prompt.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Chat-style model endpoint: images plus prompt in, text out.
pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &BackendRequest) -> std::result::Result<String, BackendError>;

    /// Whether requests must carry pixel data.
    fn wants_pixels(&self) -> bool {
        true
    }

    fn name(&self) -> String {
        "backend".into()
    }

    /// Coordinate convention the backend insists on, overriding the run's.
    fn convention(&self) -> Option<Convention> {
        None
    }
}

impl<T: ModelBackend + ?Sized> ModelBackend for Arc<T> {
    fn complete(&self, request: &BackendRequest) -> std::result::Result<String, BackendError> {
        (**self).complete(request)
    }

    fn wants_pixels(&self) -> bool {
        (**self).wants_pixels()
    }

    fn name(&self) -> String {
        (**self).name()
    }

    fn convention(&self) -> Option<Convention> {
        (**self).convention()
    }
}

/// Turns a box prompt into a mask on the image canvas.
pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &RequestImage, prompt: &GeomBox) -> Result<RleMask>;

    fn wants_pixels(&self) -> bool {
        true
    }
}

/// Stub segmenter: the mask is the box interior.
#[derive(Debug, Default, Clone, Copy)]
pub struct BoxFillSegmenter;

impl Segmenter for BoxFillSegmenter {
    fn segment(&self, image: &RequestImage, prompt: &GeomBox) -> Result<RleMask> {
        box_fill_mask(prompt, image.height, image.width)
    }

    fn wants_pixels(&self) -> bool {
        false
    }
}

/// One logged exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub sample_id: String,
    pub stage: Stage,
    pub index: usize,
    pub fingerprint: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Wraps a backend and logs every exchange. Safe to share across workers.
pub struct Recorder<B> {
    inner: B,
    log: std::sync::Mutex<Vec<TranscriptEntry>>,
}

impl<B: ModelBackend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Recorder {
            inner,
            log: std::sync::Mutex::new(Vec::new()),
        }
    }

    /// Entries sorted by sample, stage order and index, independent of
    /// worker scheduling.
    pub fn entries(&self) -> Vec<TranscriptEntry> {
        let mut v = self.log.lock().expect("transcript poisoned").clone();
        v.sort_by(|a, b| {
            (&a.sample_id, a.stage, a.index).cmp(&(&b.sample_id, b.stage, b.index))
        });
        v
    }
}

impl<B: ModelBackend> ModelBackend for Recorder<B> {
    fn complete(&self, request: &BackendRequest) -> std::result::Result<String, BackendError> {
        let result = self.inner.complete(request);
        let entry = TranscriptEntry {
            sample_id: request.meta.sample_id.clone(),
            stage: request.meta.stage,
            index: request.meta.index,
            fingerprint: request.fingerprint(),
            prompt: request.prompt.clone(),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
        };
        self.log.lock().expect("transcript poisoned").push(entry);
        result
    }

    fn wants_pixels(&self) -> bool {
        self.inner.wants_pixels()
    }

    fn name(&self) -> String {
        self.inner.name()
    }

    fn convention(&self) -> Option<Convention> {
        self.inner.convention()
    }
}
