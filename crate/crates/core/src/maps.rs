use crate::error::{Error, Result};

/// A `[D, T]` grid indexed by duration `j` (row) and start `i` (column).
///
/// Cell `(j, i)` stands for the proposal `[i, i + j]`; it is valid when
/// `i + j < T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationMap {
    pub max_duration: usize,
    pub len: usize,
    pub values: Vec<f64>,
}

impl DurationMap {
    pub fn zeros(max_duration: usize, len: usize) -> Self {
        Self { max_duration, len, values: vec![0.0; max_duration * len] }
    }

    pub fn from_values(max_duration: usize, len: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != max_duration * len {
            return Err(Error::Shape(format!(
                "{}×{} map needs {} values, got {}",
                max_duration,
                len,
                max_duration * len,
                values.len()
            )));
        }
        Ok(Self { max_duration, len, values })
    }

    #[inline]
    pub fn is_valid(&self, j: usize, i: usize) -> bool {
        i + j < self.len
    }

    #[inline]
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.len + i]
    }

    #[inline]
    pub fn set(&mut self, j: usize, i: usize, v: f64) {
        self.values[j * self.len + i] = v;
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.max_duration)
            .flat_map(|j| (0..self.len).map(move |i| i + j < self.len))
            .collect()
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.max_duration == other.max_duration && self.len == other.len
    }
}
