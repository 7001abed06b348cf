//! Interactive segmentation state for one volume: per-axis prompts,
//! prompt propagation, 3D-box automation and undo.
//!
//! Every inference commits immediately to the session's label volume under
//! the active label. Labels other than the active one are never touched.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::backend::{BBox2D, BackendError, Embedding, MaskResult, PromptSet, SegBackend};
use crate::cache::{EmbeddingCache, EmbeddingKey};
use crate::mask::Bitmap;
use crate::volume::{
    apply_window_level, slice_shape, slice_voxel_index, Axis, LabelVolume, SliceRef, Volume, VolumeError, WindowLevel,
};

const UNDO_DEPTH: usize = 256;

static NEXT_SESSION_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("propagation stays on one axis: current is {current}, target is {target}")]
    AxisChange { current: Axis, target: Axis },
    #[error("no prompts set on the {0} axis")]
    NoPrompts(Axis),
    #[error("3D box is empty after clamping to the volume")]
    EmptyBox,
    #[error("no 3D box has been applied in this session")]
    NoPreviousBox,
    #[error("undo stack is empty")]
    EmptyUndo,
    #[error("active label must be >= 1")]
    InvalidLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub u64);

/// Inclusive voxel-index box plus the axis its slices are segmented along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Box3D {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub axis: Axis,
}

impl Box3D {
    /// Clamps signed bounds to the volume; fails if nothing remains.
    pub fn clamped(lo: [i64; 3], hi: [i64; 3], axis: Axis, dims: [usize; 3]) -> Result<Box3D, SessionError> {
        let mut out_lo = [0usize; 3];
        let mut out_hi = [0usize; 3];
        for d in 0..3 {
            let l = lo[d].max(0);
            let h = hi[d].min(dims[d] as i64 - 1);
            if l > h {
                return Err(SessionError::EmptyBox);
            }
            out_lo[d] = l as usize;
            out_hi[d] = h as usize;
        }
        Ok(Box3D { lo: out_lo, hi: out_hi, axis })
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|d| self.lo[d] <= p[d] && p[d] <= self.hi[d])
    }

    /// Slice indices along the propagation axis.
    pub fn slice_range(&self) -> std::ops::RangeInclusive<usize> {
        let a = self.axis.index();
        self.lo[a]..=self.hi[a]
    }

    /// In-plane projection as a 2D box in slice `(row, col)` coordinates.
    pub fn projection(&self) -> BBox2D {
        let [i0, j0, k0] = self.lo.map(|v| v as u32);
        let [i1, j1, k1] = self.hi.map(|v| v as u32);
        match self.axis {
            Axis::Axial => BBox2D::new(j0, i0, j1, i1),
            Axis::Coronal => BBox2D::new(k0, i0, k1, i1),
            Axis::Sagittal => BBox2D::new(k0, j0, k1, j1),
        }
    }

    fn union(&self, other: &Box3D) -> Block {
        let mut b = Block { lo: self.lo, hi: self.hi };
        for d in 0..3 {
            b.lo[d] = b.lo[d].min(other.lo[d]);
            b.hi[d] = b.hi[d].max(other.hi[d]);
        }
        b
    }
}

/// Inclusive voxel block used for undo snapshots.
#[derive(Debug, Clone, Copy)]
struct Block {
    lo: [usize; 3],
    hi: [usize; 3],
}

impl Block {
    fn whole_slice(dims: [usize; 3], s: SliceRef) -> Block {
        let mut lo = [0; 3];
        let mut hi = [dims[0] - 1, dims[1] - 1, dims[2] - 1];
        lo[s.axis.index()] = s.index;
        hi[s.axis.index()] = s.index;
        Block { lo, hi }
    }

    fn indices(self, dims: [usize; 3]) -> impl Iterator<Item = usize> {
        let [nx, ny, _] = dims;
        (self.lo[2]..=self.hi[2]).flat_map(move |z| {
            (self.lo[1]..=self.hi[1]).flat_map(move |y| (self.lo[0]..=self.hi[0]).map(move |x| x + nx * (y + ny * z)))
        })
    }
}

struct UndoEntry {
    block: Block,
    values: Vec<u16>,
    slice: SliceRef,
}

/// Looks up the embedding for a slice, encoding and caching it on a miss.
pub fn embedding_for(
    cache: &EmbeddingCache,
    volume: &Volume,
    backend: &dyn SegBackend,
    wl: WindowLevel,
    slice: SliceRef,
) -> Result<Embedding, SessionError> {
    let key = EmbeddingKey::new(volume.id(), backend.model_id(), slice, wl);
    if let Some(e) = cache.get(&key) {
        return Ok(e);
    }
    let normalized = apply_window_level(&volume.extract_slice(slice)?, wl);
    let e = backend.encode_slice(&normalized)?;
    cache.put(key, e.clone());
    Ok(e)
}

pub struct Session {
    id: SessionId,
    volume: Arc<Volume>,
    backend: Arc<dyn SegBackend>,
    cache: Arc<EmbeddingCache>,
    active_label: u16,
    wl: WindowLevel,
    current: SliceRef,
    prompts: [PromptSet; 3],
    labels: LabelVolume,
    undo: Vec<UndoEntry>,
    last_box: Option<Box3D>,
    last_decode: Duration,
    decode_total: Duration,
}

impl Session {
    /// Starts on the middle axial slice with the volume's default window/level.
    pub fn new(volume: Arc<Volume>, backend: Arc<dyn SegBackend>, cache: Arc<EmbeddingCache>) -> Self {
        let current = SliceRef::new(Axis::Axial, volume.dims()[2] / 2);
        Session {
            id: SessionId(NEXT_SESSION_ID.fetch_add(1, Ordering::Relaxed)),
            wl: volume.default_window_level(),
            labels: LabelVolume::new_for(&volume),
            volume,
            backend,
            cache,
            active_label: 1,
            current,
            prompts: Default::default(),
            undo: Vec::new(),
            last_box: None,
            last_decode: Duration::ZERO,
            decode_total: Duration::ZERO,
        }
    }

    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn volume(&self) -> &Arc<Volume> {
        &self.volume
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    pub fn current(&self) -> SliceRef {
        self.current
    }

    pub fn window_level(&self) -> WindowLevel {
        self.wl
    }

    pub fn active_label(&self) -> u16 {
        self.active_label
    }

    pub fn prompts(&self, axis: Axis) -> &PromptSet {
        &self.prompts[axis.index()]
    }

    pub fn backend(&self) -> &Arc<dyn SegBackend> {
        &self.backend
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    /// Wall time of the most recent decode call alone.
    pub fn last_decode_time(&self) -> Duration {
        self.last_decode
    }

    /// Decode time summed over every inference this session has run.
    pub fn decode_time_total(&self) -> Duration {
        self.decode_total
    }

    pub fn undo_depth(&self) -> usize {
        self.undo.len()
    }

    pub fn set_backend(&mut self, backend: Arc<dyn SegBackend>) {
        self.backend = backend;
    }

    /// Later lookups use embeddings keyed by the new setting.
    pub fn set_window_level(&mut self, wl: WindowLevel) {
        self.wl = wl;
    }

    pub fn set_active_label(&mut self, label: u16) -> Result<(), SessionError> {
        if label == 0 {
            return Err(SessionError::InvalidLabel);
        }
        self.active_label = label;
        Ok(())
    }

    /// Moves to another slice without inferring. Prompts of every axis are kept.
    pub fn set_current(&mut self, slice: SliceRef) -> Result<(), SessionError> {
        slice.validate(self.volume.dims())?;
        self.current = slice;
        Ok(())
    }

    pub fn embedding(&self, slice: SliceRef) -> Result<Embedding, SessionError> {
        embedding_for(&self.cache, &self.volume, self.backend.as_ref(), self.wl, slice)
    }

    fn infer(&mut self, slice: SliceRef, prompts: &PromptSet) -> Result<MaskResult, SessionError> {
        let embedding = self.embedding(slice)?;
        let start = Instant::now();
        let result = self.backend.decode_mask(&embedding, prompts);
        self.last_decode = start.elapsed();
        self.decode_total += self.last_decode;
        let result = result?;
        let expected = slice_shape(self.volume.dims(), slice.axis);
        if result.bitmap.shape() != expected {
            return Err(BackendError::ShapeMismatch { expected, got: result.bitmap.shape() }.into());
        }
        Ok(result)
    }

    fn snapshot(&self, block: Block, slice: SliceRef) -> UndoEntry {
        let labels = self.labels.labels();
        UndoEntry { block, values: block.indices(self.labels.dims()).map(|i| labels[i]).collect(), slice }
    }

    fn push_undo(&mut self, entry: UndoEntry) {
        if self.undo.len() == UNDO_DEPTH {
            self.undo.remove(0);
        }
        self.undo.push(entry);
    }

    /// Clears the active label inside `region` of the slice (whole slice if
    /// `None`), then writes the mask there without overwriting other labels.
    fn commit(&mut self, slice: SliceRef, bitmap: &Bitmap, region: Option<BBox2D>) {
        let dims = self.labels.dims();
        let (rows, cols) = slice_shape(dims, slice.axis);
        let region = region.unwrap_or_else(|| BBox2D::new(0, 0, rows as u32 - 1, cols as u32 - 1));
        let active = self.active_label;
        let labels = self.labels.labels_mut();
        for r in region.row0 as usize..=region.row1 as usize {
            for c in region.col0 as usize..=region.col1 as usize {
                let i = slice_voxel_index(dims, slice, r, c);
                if labels[i] == active {
                    labels[i] = 0;
                }
                if bitmap.get(r, c) && labels[i] == 0 {
                    labels[i] = active;
                }
            }
        }
    }

    fn clear_box(&mut self, b: &Box3D) {
        let dims = self.labels.dims();
        let active = self.active_label;
        let labels = self.labels.labels_mut();
        for i in (Block { lo: b.lo, hi: b.hi }).indices(dims) {
            if labels[i] == active {
                labels[i] = 0;
            }
        }
    }

    /// Replaces the prompts of `slice.axis`, makes `slice` current, infers,
    /// and commits the mask. Prompts with neither a positive point nor a box
    /// clear the active label on that slice and yield an all-zero mask.
    pub fn set_prompts(&mut self, slice: SliceRef, prompts: PromptSet) -> Result<MaskResult, SessionError> {
        slice.validate(self.volume.dims())?;
        let (rows, cols) = slice_shape(self.volume.dims(), slice.axis);
        prompts.validate(rows, cols)?;
        let result = if prompts.is_inferable() {
            self.infer(slice, &prompts)?
        } else {
            MaskResult::empty(rows, cols, self.model_id())
        };
        self.current = slice;
        self.prompts[slice.axis.index()] = prompts;
        let entry = self.snapshot(Block::whole_slice(self.volume.dims(), slice), slice);
        self.push_undo(entry);
        self.commit(slice, &result.bitmap, None);
        Ok(result)
    }

    /// Re-runs the current axis's prompts, unchanged, on `target`.
    pub fn propagate_to(&mut self, target: SliceRef) -> Result<MaskResult, SessionError> {
        let axis = self.current.axis;
        if target.axis != axis {
            return Err(SessionError::AxisChange { current: axis, target: target.axis });
        }
        target.validate(self.volume.dims())?;
        let prompts = self.prompts[axis.index()].clone();
        if !prompts.is_inferable() {
            return Err(SessionError::NoPrompts(axis));
        }
        let result = self.infer(target, &prompts)?;
        self.current = target;
        let entry = self.snapshot(Block::whole_slice(self.volume.dims(), target), target);
        self.push_undo(entry);
        self.commit(target, &result.bitmap, None);
        Ok(result)
    }

    /// Segments every slice of the box along its axis with the box's 2D
    /// projection as the only prompt. Returns the number of slices written.
    pub fn apply_bbox3d(&mut self, b: Box3D) -> Result<usize, SessionError> {
        self.apply_bbox3d_with(b, |_, _| {})
    }

    /// As [`Session::apply_bbox3d`], reporting each slice's mask in ascending order.
    pub fn apply_bbox3d_with(
        &mut self,
        b: Box3D,
        on_slice: impl FnMut(SliceRef, &MaskResult),
    ) -> Result<usize, SessionError> {
        self.check_box(&b)?;
        let entry = self.snapshot(Block { lo: b.lo, hi: b.hi }, SliceRef::new(b.axis, b.lo[b.axis.index()]));
        let n = self.run_box(&b, on_slice)?;
        self.push_undo(entry);
        self.last_box = Some(b);
        Ok(n)
    }

    /// Replaces the previously applied box: its active-label voxels are
    /// cleared, then the new box is applied. Undoes as one step.
    pub fn adjust_bbox3d(&mut self, b: Box3D) -> Result<usize, SessionError> {
        self.adjust_bbox3d_with(b, |_, _| {})
    }

    pub fn adjust_bbox3d_with(
        &mut self,
        b: Box3D,
        on_slice: impl FnMut(SliceRef, &MaskResult),
    ) -> Result<usize, SessionError> {
        let previous = self.last_box.ok_or(SessionError::NoPreviousBox)?;
        self.check_box(&b)?;
        let entry = self.snapshot(previous.union(&b), SliceRef::new(b.axis, b.lo[b.axis.index()]));
        let saved = self.labels.clone();
        self.clear_box(&previous);
        match self.run_box(&b, on_slice) {
            Ok(n) => {
                self.push_undo(entry);
                self.last_box = Some(b);
                Ok(n)
            }
            Err(e) => {
                self.labels = saved;
                Err(e)
            }
        }
    }

    fn check_box(&self, b: &Box3D) -> Result<(), SessionError> {
        let dims = self.volume.dims();
        if (0..3).any(|d| b.lo[d] > b.hi[d] || b.hi[d] >= dims[d]) {
            return Err(SessionError::EmptyBox);
        }
        Ok(())
    }

    fn run_box(&mut self, b: &Box3D, mut on_slice: impl FnMut(SliceRef, &MaskResult)) -> Result<usize, SessionError> {
        let projection = b.projection();
        let prompts = PromptSet::bbox(projection);
        // infer everything first so a failure leaves labels untouched
        let mut results = Vec::with_capacity(b.slice_range().count());
        for index in b.slice_range() {
            let slice = SliceRef::new(b.axis, index);
            results.push((slice, self.infer(slice, &prompts)?));
        }
        for (slice, result) in &results {
            self.commit(*slice, &result.bitmap, Some(projection));
            on_slice(*slice, result);
        }
        Ok(results.len())
    }

    /// Reverts the most recent write (a whole box operation counts as one).
    pub fn undo(&mut self) -> Result<SliceRef, SessionError> {
        let entry = self.undo.pop().ok_or(SessionError::EmptyUndo)?;
        let dims = self.labels.dims();
        let labels = self.labels.labels_mut();
        for (i, v) in entry.block.indices(dims).zip(entry.values) {
            labels[i] = v;
        }
        Ok(entry.slice)
    }
}
