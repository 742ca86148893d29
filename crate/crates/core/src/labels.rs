use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether a label vector is a free binary vector or a one-hot class indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Multilabel,
    Multiclass,
}

/// A binary label vector (`y`, `ŷ`, or `h`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector {
    bits: Vec<u8>,
    mode: LabelMode,
}

impl LabelVector {
    pub fn new(bits: Vec<u8>, mode: LabelMode) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArgument("label vector must be non-empty".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("label entries must be 0 or 1".into()));
        }
        if mode == LabelMode::Multiclass && bits.iter().filter(|&&b| b == 1).count() != 1 {
            return Err(Error::InvalidArgument(
                "multiclass label vector must be one-hot".into(),
            ));
        }
        Ok(Self { bits, mode })
    }

    pub fn multilabel(bits: Vec<u8>) -> Result<Self> {
        Self::new(bits, LabelMode::Multilabel)
    }

    pub fn one_hot(len: usize, class: usize) -> Result<Self> {
        if class >= len {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {len} classes"
            )));
        }
        let mut bits = vec![0; len];
        bits[class] = 1;
        Ok(Self {
            bits,
            mode: LabelMode::Multiclass,
        })
    }

    /// Hidden-unit vectors may be empty (H = 0) and are always multilabel.
    pub fn hidden(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("hidden entries must be 0 or 1".into()));
        }
        Ok(Self {
            bits,
            mode: LabelMode::Multilabel,
        })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Index of the active class. Only meaningful for one-hot vectors.
    pub fn class(&self) -> Option<usize> {
        match self.mode {
            LabelMode::Multiclass => self.bits.iter().position(|&b| b == 1),
            LabelMode::Multilabel => None,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary_and_non_one_hot() {
        assert!(LabelVector::multilabel(vec![0, 2]).is_err());
        assert!(LabelVector::new(vec![1, 1, 0], LabelMode::Multiclass).is_err());
        assert!(LabelVector::new(vec![0, 0, 0], LabelMode::Multiclass).is_err());
        assert!(LabelVector::one_hot(3, 3).is_err());
        let v = LabelVector::one_hot(4, 2).unwrap();
        assert_eq!(v.class(), Some(2));
        assert_eq!(v.ones().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn hidden_vectors_may_be_empty() {
        assert!(LabelVector::hidden(vec![]).unwrap().is_empty());
        assert!(LabelVector::multilabel(vec![]).is_err());
    }
}
