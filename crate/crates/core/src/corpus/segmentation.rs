use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{segment_mean_kernel, Tape, Tensor, Var};

/// Sparse `L_w x L_b` matrix mapping subword units to words.
///
/// Row `i` has weight `1/n_i` on each of the `n_i` units of word `i` and
/// zero elsewhere; the rows' supports partition the unit columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMatrix {
    units: usize,
    groups: Arc<[Vec<usize>]>,
}

impl SegmentationMatrix {
    /// `groups[i]` lists the unit columns of word `i`.
    pub fn new(groups: Vec<Vec<usize>>, units: usize) -> Result<Self> {
        let mut owner = vec![None; units];
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Contract(format!("word {i} has no subword units")));
            }
            for &j in g {
                if j >= units {
                    return Err(Error::Index {
                        op: "segmentation",
                        index: j,
                        size: units,
                    });
                }
                if owner[j].replace(i).is_some() {
                    return Err(Error::Contract(format!("unit {j} belongs to more than one word")));
                }
            }
        }
        if let Some(j) = owner.iter().position(Option::is_none) {
            return Err(Error::Contract(format!("unit {j} belongs to no word")));
        }
        Ok(Self {
            units,
            groups: groups.into(),
        })
    }

    /// Contiguous segmentation from per-word unit counts.
    pub fn from_word_lengths(lengths: &[usize]) -> Result<Self> {
        let mut groups = Vec::with_capacity(lengths.len());
        let mut next = 0;
        for &n in lengths {
            groups.push((next..next + n).collect());
            next += n;
        }
        Self::new(groups, next)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            units: n,
            groups: (0..n).map(|i| vec![i]).collect::<Vec<_>>().into(),
        }
    }

    /// Number of words (rows).
    pub fn rows(&self) -> usize {
        self.groups.len()
    }

    /// Number of subword units (columns).
    pub fn cols(&self) -> usize {
        self.units
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let g = &self.groups[i];
        if g.contains(&j) {
            1.0 / g.len() as f64
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows().max(1), self.units.max(1)]);
        let c = self.units;
        for (i, g) in self.groups.iter().enumerate() {
            for &j in g {
                t.data_mut()[i * c + j] = 1.0 / g.len() as f64;
            }
        }
        t
    }

    /// Differentiable `S · F_b` on a tape.
    pub fn pool_on_tape(&self, tape: &mut Tape<'_>, features: Var) -> Result<Var> {
        self.check_rows(tape.value(features))?;
        tape.segment_mean(features, self.groups.clone())
    }

    fn check_rows(&self, f: &Tensor) -> Result<()> {
        if f.rows() != self.units {
            return Err(Error::Shape {
                op: "pool_features",
                left: vec![self.rows(), self.units],
                right: f.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Word-level features `S · F_b`: each word's row is the mean of its
/// subword rows.
pub fn pool_features(features: &Tensor, seg: &SegmentationMatrix) -> Result<Tensor> {
    seg.check_rows(features)?;
    segment_mean_kernel(features, seg.groups())
}
