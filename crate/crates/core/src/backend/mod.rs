//! The encoder/decoder abstraction every segmentation model implements, the
//! model registry, and the deterministic classical reference backend.

mod reference;

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::RwLock;

use crate::mask::Bitmap;
use crate::volume::NormalizedSlice;

pub use self::reference::ReferenceBackend;

pub const REFERENCE_MODEL_ID: &str = "reference";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("prompt set has neither a positive point nor a bounding box")]
    EmptyPrompts,
    #[error("prompt {0} lies outside the {1}x{2} slice")]
    PromptOutOfBounds(String, usize, usize),
    #[error("bounding box corners are not ordered: {0:?}")]
    InvalidBox(BBox2D),
    #[error("embedding is {got:?} but the request expects {expected:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("embedding was produced by model {got:?}, not {expected:?}")]
    WrongModel { expected: String, got: String },
    #[error("embedding blob is malformed")]
    MalformedEmbedding,
    #[error("model worker unavailable: {0}")]
    Unavailable(String),
    #[error("model worker connection lost")]
    WorkerLost,
    #[error("model worker reported: {0}")]
    Remote(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Builtin,
    ExternalWorker,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelDescriptor {
    pub model_id: String,
    pub kind: ModelKind,
    /// Per-slice embedding size hint in bytes.
    pub embedding_bytes_estimate: u64,
}

/// Slice-local pixel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Point {
    pub row: u32,
    pub col: u32,
}

impl Point {
    pub fn new(row: u32, col: u32) -> Self {
        Point { row, col }
    }
}

/// Inclusive 2D box `(row0, col0)..=(row1, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox2D {
    pub row0: u32,
    pub col0: u32,
    pub row1: u32,
    pub col1: u32,
}

impl BBox2D {
    pub fn new(row0: u32, col0: u32, row1: u32, col1: u32) -> Self {
        BBox2D { row0, col0, row1, col1 }
    }

    pub fn contains(&self, p: Point) -> bool {
        (self.row0..=self.row1).contains(&p.row) && (self.col0..=self.col1).contains(&p.col)
    }

    pub fn center(&self) -> Point {
        Point::new((self.row0 + self.row1) / 2, (self.col0 + self.col1) / 2)
    }

    pub fn area(&self) -> usize {
        (self.row1 - self.row0 + 1) as usize * (self.col1 - self.col0 + 1) as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PromptSet {
    pub positive: Vec<Point>,
    pub negative: Vec<Point>,
    pub bbox: Option<BBox2D>,
}

impl PromptSet {
    pub fn points(positive: Vec<Point>, negative: Vec<Point>) -> Self {
        PromptSet { positive, negative, bbox: None }
    }

    pub fn bbox(bbox: BBox2D) -> Self {
        PromptSet { bbox: Some(bbox), ..Default::default() }
    }

    /// True when there is something to infer from: a positive point or a box.
    pub fn is_inferable(&self) -> bool {
        !self.positive.is_empty() || self.bbox.is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty() && self.negative.is_empty() && self.bbox.is_none()
    }

    /// Checks every coordinate against a `rows x cols` slice.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<(), BackendError> {
        let inside = |p: &Point| (p.row as usize) < rows && (p.col as usize) < cols;
        for p in self.positive.iter().chain(&self.negative) {
            if !inside(p) {
                return Err(BackendError::PromptOutOfBounds(format!("{p:?}"), rows, cols));
            }
        }
        if let Some(b) = self.bbox {
            if b.row0 > b.row1 || b.col0 > b.col1 {
                return Err(BackendError::InvalidBox(b));
            }
            if !inside(&Point::new(b.row1, b.col1)) {
                return Err(BackendError::PromptOutOfBounds(format!("{b:?}"), rows, cols));
            }
        }
        Ok(())
    }
}

/// Encoder output for one slice. The blob is only meaningful to its producer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Embedding {
    pub model_id: String,
    pub rows: usize,
    pub cols: usize,
    pub blob: Arc<[u8]>,
}

impl Embedding {
    pub fn byte_len(&self) -> usize {
        self.blob.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskResult {
    pub bitmap: Bitmap,
    /// Confidence in `[0, 1]`.
    pub score: f32,
    pub model_id: String,
}

impl MaskResult {
    pub fn empty(rows: usize, cols: usize, model_id: &str) -> Self {
        MaskResult { bitmap: Bitmap::zeros(rows, cols), score: 0.0, model_id: model_id.to_owned() }
    }
}

/// A promptable segmentation model split into an expensive per-slice
/// encoder and a cheap prompt-time decoder.
pub trait SegBackend: Send + Sync {
    fn descriptor(&self) -> &ModelDescriptor;

    fn encode_slice(&self, slice: &NormalizedSlice) -> Result<Embedding, BackendError>;

    /// Returns the single best mask for the prompts.
    fn decode_mask(&self, embedding: &Embedding, prompts: &PromptSet) -> Result<MaskResult, BackendError>;

    fn model_id(&self) -> &str {
        &self.descriptor().model_id
    }
}

/// Shared checks every backend applies before decoding.
pub fn check_decode_request(model_id: &str, embedding: &Embedding, prompts: &PromptSet) -> Result<(), BackendError> {
    if embedding.model_id != model_id {
        return Err(BackendError::WrongModel { expected: model_id.to_owned(), got: embedding.model_id.clone() });
    }
    if !prompts.is_inferable() {
        return Err(BackendError::EmptyPrompts);
    }
    prompts.validate(embedding.rows, embedding.cols)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("model {0:?} is already registered")]
    Duplicate(String),
    #[error("model id must not be empty")]
    EmptyId,
}

/// Models available to sessions. The reference backend is always present.
pub struct ModelRegistry {
    models: RwLock<BTreeMap<String, Arc<dyn SegBackend>>>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl ModelRegistry {
    pub fn new() -> Self {
        let reference: Arc<dyn SegBackend> = Arc::new(ReferenceBackend::new());
        let mut models = BTreeMap::new();
        models.insert(REFERENCE_MODEL_ID.to_owned(), reference);
        ModelRegistry { models: RwLock::new(models) }
    }

    pub fn register(&self, backend: Arc<dyn SegBackend>) -> Result<(), RegistryError> {
        let id = backend.model_id().to_owned();
        if id.is_empty() {
            return Err(RegistryError::EmptyId);
        }
        let mut models = self.models.write();
        if models.contains_key(&id) {
            return Err(RegistryError::Duplicate(id));
        }
        models.insert(id, backend);
        Ok(())
    }

    /// Removes an external model. The reference backend cannot be removed.
    pub fn deregister(&self, model_id: &str) -> bool {
        if model_id == REFERENCE_MODEL_ID {
            return false;
        }
        self.models.write().remove(model_id).is_some()
    }

    pub fn get(&self, model_id: &str) -> Option<Arc<dyn SegBackend>> {
        self.models.read().get(model_id).cloned()
    }

    /// Descriptors with the reference model first, the rest by id.
    pub fn list_models(&self) -> Vec<ModelDescriptor> {
        let models = self.models.read();
        let mut out: Vec<ModelDescriptor> = Vec::with_capacity(models.len());
        out.extend(models.get(REFERENCE_MODEL_ID).map(|m| m.descriptor().clone()));
        out.extend(models.iter().filter(|(id, _)| *id != REFERENCE_MODEL_ID).map(|(_, m)| m.descriptor().clone()));
        out
    }
}
