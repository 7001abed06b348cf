/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Bitmap {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Bitmap { rows, cols, bits: vec![false; rows * cols] }
    }

    /// Panics if `bits.len() != rows * cols`.
    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), rows * cols, "bitmap buffer does not match its shape");
        Bitmap { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.cols + col] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }
}
