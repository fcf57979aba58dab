use crate::{Error, Result};

/// The four confidence clusters of a batch under two peer models.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchPartition {
    /// Both models confident: descent for both.
    pub both: Vec<usize>,
    /// Neither model confident: dropped.
    pub neither: Vec<usize>,
    /// Only the first model confident: ascent for the first model.
    pub dot_only: Vec<usize>,
    /// Only the second model confident: ascent for the second model.
    pub ddot_only: Vec<usize>,
}

impl BatchPartition {
    pub fn len(&self) -> usize {
        self.both.len() + self.neither.len() + self.dot_only.len() + self.ddot_only.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample loss weights for the two models: `+1` on shared confident
    /// samples, `-1` on samples only that model is confident about, else `0`.
    pub fn peer_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let mut dot = vec![0.0; n];
        let mut ddot = vec![0.0; n];
        for &j in &self.both {
            dot[j] = 1.0;
            ddot[j] = 1.0;
        }
        for &j in &self.dot_only {
            dot[j] = -1.0;
        }
        for &j in &self.ddot_only {
            ddot[j] = -1.0;
        }
        (dot, ddot)
    }
}

/// Split a batch by target-class confidence. Confident means `p > eta`.
pub fn partition_batch(p_dot: &[f64], p_ddot: &[f64], eta: f64) -> Result<BatchPartition> {
    if p_dot.len() != p_ddot.len() {
        return Err(Error::shape(format!(
            "peer probability vectors differ in length: {} vs {}",
            p_dot.len(),
            p_ddot.len()
        )));
    }
    let mut out = BatchPartition::default();
    for (j, (&a, &b)) in p_dot.iter().zip(p_ddot).enumerate() {
        match (a > eta, b > eta) {
            (true, true) => out.both.push(j),
            (true, false) => out.dot_only.push(j),
            (false, true) => out.ddot_only.push(j),
            (false, false) => out.neither.push(j),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_clusters() {
        let p = partition_batch(&[0.9, 0.2, 0.9, 0.3], &[0.8, 0.3, 0.3, 0.9], 0.5).unwrap();
        assert_eq!(p.both, vec![0]);
        assert_eq!(p.neither, vec![1]);
        assert_eq!(p.dot_only, vec![2]);
        assert_eq!(p.ddot_only, vec![3]);
        let (dot, ddot) = p.peer_weights();
        assert_eq!(dot, vec![1.0, 0.0, -1.0, 0.0]);
        assert_eq!(ddot, vec![1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn threshold_itself_is_unconfident() {
        let p = partition_batch(&[0.5, 0.5], &[0.9, 0.5], 0.5).unwrap();
        assert_eq!(p.ddot_only, vec![0]);
        assert_eq!(p.neither, vec![1]);
    }

    #[test]
    fn tiny_threshold_makes_everything_confident() {
        let p = partition_batch(&[1e-6, 0.3, 0.99], &[0.2, 1e-7, 0.5], 1e-12).unwrap();
        assert_eq!(p.both, vec![0, 1, 2]);
    }

    #[test]
    fn length_mismatch_is_a_shape_error() {
        assert!(matches!(partition_batch(&[0.1], &[], 0.5), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn clusters_are_disjoint_and_cover(
            probs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 0..64),
            eta in 0.0f64..1.0,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = probs.into_iter().unzip();
            let p = partition_batch(&a, &b, eta).unwrap();
            let mut all: Vec<usize> = p.both.iter()
                .chain(&p.neither).chain(&p.dot_only).chain(&p.ddot_only).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..a.len()).collect::<Vec<_>>());
        }
    }
}
