//! Total dropout: whole residual mappings switched off at random during
//! training. Identity carries and vertical mappings are never dropped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{GridError, GridSpec, Topology};

/// Keep decisions for every residual mapping of a grid, `keep[i][j]`.
/// Blocks without a residual mapping are always marked kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropMask {
    pub keep: Vec<Vec<bool>>,
    pub p: f64,
    pub seed: u64,
    pub step: u64,
}

impl DropMask {
    pub fn all_keep(n_streams: usize, n_columns: usize) -> Self {
        DropMask {
            keep: vec![vec![true; n_columns]; n_streams],
            p: 1.0,
            seed: 0,
            step: 0,
        }
    }

    pub fn keeps(&self, i: usize, j: usize) -> bool {
        self.keep[i][j]
    }
}

/// Draws an independent Bernoulli(`p`) keep decision for every block that
/// has a residual mapping, in row-major block order. The draw is a pure
/// function of `(seed, step)`.
pub fn sample_drop_mask(spec: &GridSpec, p: f64, seed: u64, step: u64) -> Result<DropMask, GridError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(GridError::InvalidSpec(format!("keep probability {p} outside [0, 1]")));
    }
    let topo = Topology::of(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let mut keep = vec![vec![true; spec.n_columns()]; spec.n_streams];
    for (i, row) in keep.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            if topo.has_horizontal[i][j] {
                *k = rng.random_bool(p);
            }
        }
    }
    Ok(DropMask { keep, p, seed, step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extremes_are_deterministic() {
        let spec = GridSpec::reference(4);
        let all = sample_drop_mask(&spec, 1.0, 3, 0).unwrap();
        assert!(all.keep.iter().flatten().all(|k| *k));
        let none = sample_drop_mask(&spec, 0.0, 3, 0).unwrap();
        let topo = Topology::of(&spec);
        for i in 0..5 {
            for j in 0..6 {
                assert_eq!(none.keeps(i, j), !topo.has_horizontal[i][j]);
            }
        }
    }

    #[test]
    fn steps_give_different_masks() {
        let spec = GridSpec::reference(4);
        let a = sample_drop_mask(&spec, 0.5, 9, 0).unwrap();
        let b = sample_drop_mask(&spec, 0.5, 9, 1).unwrap();
        assert_ne!(a.keep, b.keep);
        assert_eq!(a, sample_drop_mask(&spec, 0.5, 9, 0).unwrap());
        assert!(sample_drop_mask(&spec, 1.5, 0, 0).is_err());
    }
}
