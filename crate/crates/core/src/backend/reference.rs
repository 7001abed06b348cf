//! Classical stand-in for a learned model: Otsu thresholding plus seeded
//! 4-connected region growing. Fully deterministic.
//!
//! Embedding blob layout (little-endian):
//!
//! | bytes                         | content                                  |
//! |-------------------------------|------------------------------------------|
//! | 4                             | rows (u32)                               |
//! | 4                             | cols (u32)                               |
//! | rows*cols                     | slice quantized to 8 bits                |
//! | 8*(rows+1)*(cols+1)           | integral image of the 8-bit values (u64) |
//! | 8*(rows+1)*(cols+1)           | integral image of squared values (u64)   |

use std::sync::Arc;

use super::{
    check_decode_request, BBox2D, BackendError, Embedding, MaskResult, ModelDescriptor, ModelKind, Point, PromptSet,
    SegBackend, REFERENCE_MODEL_ID,
};
use crate::mask::Bitmap;
use crate::volume::NormalizedSlice;

const HEADER_BYTES: usize = 8;

pub struct ReferenceBackend {
    descriptor: ModelDescriptor,
}

impl Default for ReferenceBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl ReferenceBackend {
    pub fn new() -> Self {
        ReferenceBackend {
            descriptor: ModelDescriptor {
                model_id: REFERENCE_MODEL_ID.to_owned(),
                kind: ModelKind::Builtin,
                // 256x256 slice: bytes + two u64 integral images
                embedding_bytes_estimate: blob_len(256, 256) as u64,
            },
        }
    }
}

pub(crate) fn blob_len(rows: usize, cols: usize) -> usize {
    HEADER_BYTES + rows * cols + 16 * (rows + 1) * (cols + 1)
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl SegBackend for ReferenceBackend {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    fn encode_slice(&self, slice: &NormalizedSlice) -> Result<Embedding, BackendError> {
        let (rows, cols) = (slice.rows, slice.cols);
        let stride = cols + 1;
        let integral_len = (rows + 1) * stride;
        let mut blob = vec![0u8; blob_len(rows, cols)];
        blob[0..4].copy_from_slice(&(rows as u32).to_le_bytes());
        blob[4..8].copy_from_slice(&(cols as u32).to_le_bytes());

        let (head, tables) = blob.split_at_mut(HEADER_BYTES + rows * cols);
        let quantized = &mut head[HEADER_BYTES..];
        for (q, &v) in quantized.iter_mut().zip(&slice.pixels) {
            *q = quantize(v);
        }

        let mut sum = vec![0u64; integral_len];
        let mut sq = vec![0u64; integral_len];
        for r in 0..rows {
            let mut row_sum = 0u64;
            let mut row_sq = 0u64;
            for c in 0..cols {
                let q = quantized[r * cols + c] as u64;
                row_sum += q;
                row_sq += q * q;
                let i = (r + 1) * stride + c + 1;
                sum[i] = sum[i - stride] + row_sum;
                sq[i] = sq[i - stride] + row_sq;
            }
        }
        let (sum_bytes, sq_bytes) = tables.split_at_mut(8 * integral_len);
        for (dst, v) in sum_bytes.chunks_exact_mut(8).zip(&sum) {
            dst.copy_from_slice(&v.to_le_bytes());
        }
        for (dst, v) in sq_bytes.chunks_exact_mut(8).zip(&sq) {
            dst.copy_from_slice(&v.to_le_bytes());
        }

        Ok(Embedding { model_id: REFERENCE_MODEL_ID.to_owned(), rows, cols, blob: Arc::from(blob) })
    }

    fn decode_mask(&self, embedding: &Embedding, prompts: &PromptSet) -> Result<MaskResult, BackendError> {
        check_decode_request(REFERENCE_MODEL_ID, embedding, prompts)?;
        let view = EmbeddingView::parse(embedding)?;
        let (bitmap, score) = segment(&view, prompts);
        Ok(MaskResult { bitmap, score, model_id: REFERENCE_MODEL_ID.to_owned() })
    }
}

/// Borrowed, validated view over a reference embedding blob.
struct EmbeddingView<'a> {
    rows: usize,
    cols: usize,
    quantized: &'a [u8],
    sum: &'a [u8],
    sq: &'a [u8],
}

impl<'a> EmbeddingView<'a> {
    fn parse(e: &'a Embedding) -> Result<Self, BackendError> {
        let blob = &e.blob[..];
        if blob.len() < HEADER_BYTES {
            return Err(BackendError::MalformedEmbedding);
        }
        let rows = u32::from_le_bytes(blob[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(blob[4..8].try_into().unwrap()) as usize;
        if (rows, cols) != (e.rows, e.cols) {
            return Err(BackendError::ShapeMismatch { expected: (e.rows, e.cols), got: (rows, cols) });
        }
        if blob.len() != blob_len(rows, cols) {
            return Err(BackendError::MalformedEmbedding);
        }
        let table = 8 * (rows + 1) * (cols + 1);
        let (quantized, rest) = blob[HEADER_BYTES..].split_at(rows * cols);
        let (sum, sq) = rest.split_at(table);
        Ok(EmbeddingView { rows, cols, quantized, sum, sq })
    }

    #[inline]
    fn q(&self, r: usize, c: usize) -> u8 {
        self.quantized[r * self.cols + c]
    }

    #[inline]
    fn table_at(table: &[u8], i: usize) -> u64 {
        u64::from_le_bytes(table[8 * i..8 * i + 8].try_into().unwrap())
    }

    fn rect(&self, table: &[u8], b: &BBox2D) -> u64 {
        let stride = self.cols + 1;
        let (r0, c0, r1, c1) = (b.row0 as usize, b.col0 as usize, b.row1 as usize + 1, b.col1 as usize + 1);
        Self::table_at(table, r1 * stride + c1) + Self::table_at(table, r0 * stride + c0)
            - Self::table_at(table, r0 * stride + c1)
            - Self::table_at(table, r1 * stride + c0)
    }

    /// `(sum, sum of squares)` of the 8-bit values inside `b`.
    fn moments(&self, b: &BBox2D) -> (u64, u64) {
        (self.rect(self.sum, b), self.rect(self.sq, b))
    }
}

/// 192-bit product of a u128 and a u64, as (high 64 bits, low 128 bits).
fn mul_wide(a: u128, b: u64) -> (u64, u128) {
    let lo = (a as u64) as u128 * b as u128;
    let hi = (a >> 64) * b as u128;
    let (low, carry) = lo.overflowing_add(hi << 64);
    ((hi >> 64) as u64 + carry as u64, low)
}

/// Otsu threshold `t` over an 8-bit histogram, with classes `q < t` and
/// `q >= t`. Maximizes the between-class variance; ties go to the smallest
/// `t`. Returns `None` when only one intensity occurs.
///
/// The between-class variance is proportional to
/// `(s0 * n - S * w0)^2 / (w0 * w1)`; candidates are compared exactly by
/// cross-multiplication.
pub(crate) fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    let n: u64 = hist.iter().sum();
    let total: u64 = hist.iter().enumerate().map(|(v, &h)| v as u64 * h).sum();
    let mut best: Option<(u8, u128, u64)> = None;
    let (mut w0, mut s0) = (0u64, 0u64);
    for t in 1..256usize {
        w0 += hist[t - 1];
        s0 += (t as u64 - 1) * hist[t - 1];
        let w1 = n - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let diff = (s0 as i128) * (n as i128) - (total as i128) * (w0 as i128);
        let num = (diff * diff) as u128;
        let den = w0 * w1;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => mul_wide(num, bd) > mul_wide(bn, den),
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    best.map(|(t, _, _)| t)
}

/// Flood fills the 4-connected region of pixels satisfying `member`,
/// restricted to `region`, starting at `seed`. Marks into `out`.
fn flood(
    cols: usize,
    region: &BBox2D,
    seed: Point,
    member: impl Fn(usize, usize) -> bool,
    out: &mut [bool],
    stack: &mut Vec<(u32, u32)>,
) {
    let (r, c) = (seed.row as usize, seed.col as usize);
    if out[r * cols + c] || !member(r, c) {
        return;
    }
    out[r * cols + c] = true;
    stack.clear();
    stack.push((seed.row, seed.col));
    while let Some((r, c)) = stack.pop() {
        let mut visit = |nr: u32, nc: u32| {
            let i = nr as usize * cols + nc as usize;
            if !out[i] && member(nr as usize, nc as usize) {
                out[i] = true;
                stack.push((nr, nc));
            }
        };
        if r > region.row0 {
            visit(r - 1, c);
        }
        if r < region.row1 {
            visit(r + 1, c);
        }
        if c > region.col0 {
            visit(r, c - 1);
        }
        if c < region.col1 {
            visit(r, c + 1);
        }
    }
}

fn segment(view: &EmbeddingView<'_>, prompts: &PromptSet) -> (Bitmap, f32) {
    let (rows, cols) = (view.rows, view.cols);
    let region = prompts.bbox.unwrap_or_else(|| BBox2D::new(0, 0, rows as u32 - 1, cols as u32 - 1));
    let n = region.area() as u64;
    let (sum, sum_sq) = view.moments(&region);
    let mut bits = vec![false; rows * cols];

    // variance < 1  <=>  n * sum_sq - sum^2 < n^2
    let spread = n as u128 * sum_sq as u128 - sum as u128 * sum as u128;
    let threshold = if spread < n as u128 * n as u128 {
        None
    } else {
        let mut hist = [0u64; 256];
        for r in region.row0..=region.row1 {
            let row = &view.quantized[r as usize * cols..(r as usize + 1) * cols];
            for &q in &row[region.col0 as usize..=region.col1 as usize] {
                hist[q as usize] += 1;
            }
        }
        otsu_threshold(&hist)
    };
    let Some(t) = threshold else {
        for r in region.row0..=region.row1 {
            let start = r as usize * cols;
            bits[start + region.col0 as usize..=start + region.col1 as usize].fill(true);
        }
        return (Bitmap::from_bits(rows, cols, bits), 0.5);
    };

    let seeds_in_region: Vec<Point> = prompts.positive.iter().copied().filter(|p| region.contains(*p)).collect();
    let seed = seeds_in_region.first().copied().unwrap_or_else(|| region.center());
    let seed_bright = view.q(seed.row as usize, seed.col as usize) >= t;
    let candidate = |r: usize, c: usize| (view.q(r, c) >= t) == seed_bright;

    let mut stack = Vec::new();
    flood(cols, &region, seed, candidate, &mut bits, &mut stack);
    for &p in &seeds_in_region {
        flood(cols, &region, p, candidate, &mut bits, &mut stack);
    }

    let mut scratch = vec![false; rows * cols];
    for &p in &prompts.negative {
        let i = p.row as usize * cols + p.col as usize;
        if !bits[i] {
            continue;
        }
        scratch.fill(false);
        {
            let mask = &bits;
            flood(cols, &region, p, |r, c| mask[r * cols + c], &mut scratch, &mut stack);
        }
        for (b, s) in bits.iter_mut().zip(&scratch) {
            if *s {
                *b = false;
            }
        }
    }

    let (mut in_sum, mut in_count) = (0u64, 0u64);
    for r in region.row0..=region.row1 {
        for c in region.col0..=region.col1 {
            if bits[r as usize * cols + c as usize] {
                in_sum += view.q(r as usize, c as usize) as u64;
                in_count += 1;
            }
        }
    }
    let mean = |s: u64, k: u64| if k == 0 { 0.0 } else { s as f64 / k as f64 };
    let score = ((mean(in_sum, in_count) - mean(sum - in_sum, n - in_count)) / 255.0).clamp(0.0, 1.0);
    (Bitmap::from_bits(rows, cols, bits), score as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Axis, SliceRef};

    fn slice(rows: usize, cols: usize, pixels: Vec<f32>) -> NormalizedSlice {
        NormalizedSlice { rows, cols, pixels, origin: SliceRef::new(Axis::Axial, 0) }
    }

    fn integral_at(e: &Embedding, i: usize) -> u64 {
        let off = HEADER_BYTES + e.rows * e.cols + 8 * i;
        u64::from_le_bytes(e.blob[off..off + 8].try_into().unwrap())
    }

    fn block_slice() -> NormalizedSlice {
        let mut px = vec![0.0; 64];
        for r in 2..5 {
            for c in 2..5 {
                px[r * 8 + c] = 1.0;
            }
        }
        slice(8, 8, px)
    }

    #[test]
    fn integral_image_of_checker() {
        let e = ReferenceBackend::new().encode_slice(&slice(2, 2, vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        let got: Vec<u64> = (0..9).map(|i| integral_at(&e, i)).collect();
        assert_eq!(got, [0, 0, 0, 0, 0, 255, 0, 255, 510]);
    }

    #[test]
    fn zero_slice_has_zero_integral() {
        let e = ReferenceBackend::new().encode_slice(&slice(3, 4, vec![0.0; 12])).unwrap();
        assert!((0..20).all(|i| integral_at(&e, i) == 0));
    }

    #[test]
    fn encoding_is_deterministic() {
        let b = ReferenceBackend::new();
        let s = block_slice();
        assert_eq!(b.encode_slice(&s).unwrap().blob, b.encode_slice(&s).unwrap().blob);
    }

    #[test]
    fn positive_point_selects_block() {
        let b = ReferenceBackend::new();
        let e = b.encode_slice(&block_slice()).unwrap();
        let m = b.decode_mask(&e, &PromptSet::points(vec![Point::new(3, 3)], vec![])).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m.bitmap.get(r, c), (2..5).contains(&r) && (2..5).contains(&c));
            }
        }
        assert_eq!(m.score, 1.0);
    }

    #[test]
    fn uniform_box_is_degenerate() {
        let b = ReferenceBackend::new();
        let e = b.encode_slice(&slice(8, 8, vec![0.3; 64])).unwrap();
        let m = b.decode_mask(&e, &PromptSet::bbox(BBox2D::new(1, 1, 4, 4))).unwrap();
        assert_eq!(m.score, 0.5);
        assert_eq!(m.bitmap.count_ones(), 16);
        assert!(m.bitmap.get(1, 1) && m.bitmap.get(4, 4) && !m.bitmap.get(0, 0));
    }

    #[test]
    fn negative_point_removes_bright_block() {
        let b = ReferenceBackend::new();
        let e = b.encode_slice(&block_slice()).unwrap();
        // background seed, negative on the block
        let p = PromptSet::points(vec![Point::new(0, 0)], vec![Point::new(3, 3)]);
        let m = b.decode_mask(&e, &p).unwrap();
        assert_eq!(m.bitmap.count_ones(), 64 - 9);
        assert!(!m.bitmap.get(3, 3));
        // block seed plus a background positive; the negative removes the block component
        let p = PromptSet::points(vec![Point::new(3, 3), Point::new(0, 0)], vec![Point::new(3, 3)]);
        let m = b.decode_mask(&e, &p).unwrap();
        assert_eq!(m.bitmap.count_ones(), 0);
    }

    #[test]
    fn errors() {
        let b = ReferenceBackend::new();
        let e = b.encode_slice(&block_slice()).unwrap();
        assert_eq!(b.decode_mask(&e, &PromptSet::default()), Err(BackendError::EmptyPrompts));
        let far = PromptSet::points(vec![Point::new(8, 0)], vec![]);
        assert!(matches!(b.decode_mask(&e, &far), Err(BackendError::PromptOutOfBounds(..))));
        let mut lying = e.clone();
        lying.rows = 4;
        assert!(b.decode_mask(&lying, &PromptSet::points(vec![Point::new(0, 0)], vec![])).is_err());
    }

    #[test]
    fn otsu_on_two_levels() {
        let mut h = [0u64; 256];
        h[10] = 5;
        h[200] = 5;
        // any t in 11..=200 separates; the smallest wins
        assert_eq!(otsu_threshold(&h), Some(11));
        let mut single = [0u64; 256];
        single[7] = 3;
        assert_eq!(otsu_threshold(&single), None);
    }

    #[test]
    fn wide_multiply() {
        let a = u128::MAX;
        let (hi, lo) = mul_wide(a, 2);
        assert_eq!(hi, 1);
        assert_eq!(lo, u128::MAX - 1);
        assert_eq!(mul_wide(5, 7), (0, 35));
    }
}
