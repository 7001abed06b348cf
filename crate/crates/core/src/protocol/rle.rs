use crate::mask::Bitmap;

/// Row-major run lengths alternating 0-runs and 1-runs, starting with a
/// (possibly empty) 0-run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    pub rows: u32,
    pub cols: u32,
    pub runs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RleError {
    #[error("runs sum to {got}, shape needs {expected}")]
    RunSumMismatch { expected: u64, got: u64 },
    #[error("zero-length run at position {0}")]
    EmptyRun(usize),
}

pub fn rle_encode(bitmap: &Bitmap) -> RleMask {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &b in bitmap.bits() {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    if len > 0 || runs.is_empty() {
        runs.push(len);
    }
    RleMask { rows: bitmap.rows() as u32, cols: bitmap.cols() as u32, runs }
}

pub fn rle_decode(mask: &RleMask) -> Result<Bitmap, RleError> {
    mask.validate()?;
    let mut bits = Vec::with_capacity(mask.pixel_count() as usize);
    for (i, &run) in mask.runs.iter().enumerate() {
        bits.resize(bits.len() + run as usize, i % 2 == 1);
    }
    Ok(Bitmap::from_bits(mask.rows as usize, mask.cols as usize, bits))
}

impl RleMask {
    pub fn pixel_count(&self) -> u64 {
        self.rows as u64 * self.cols as u64
    }

    pub fn validate(&self) -> Result<(), RleError> {
        if let Some(i) = self.runs.iter().skip(1).position(|&r| r == 0) {
            return Err(RleError::EmptyRun(i + 1));
        }
        let got: u64 = self.runs.iter().map(|&r| r as u64).sum();
        if got != self.pixel_count() {
            return Err(RleError::RunSumMismatch { expected: self.pixel_count(), got });
        }
        Ok(())
    }
}
