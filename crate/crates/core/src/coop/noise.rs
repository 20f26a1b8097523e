use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{ParamId, ParamStore};

/// Uniform perturbation of one task's encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub task: usize,
    pub ids: Vec<ParamId>,
    /// One array per id, same length as the parameter.
    pub values: Vec<Vec<f64>>,
}

impl NoiseSample {
    pub fn zeros(store: &ParamStore, task: usize) -> Result<Self> {
        let ids = store.ids(task, true)?;
        let values = ids
            .iter()
            .map(|&i| vec![0.0; store.get(i).tensor.len()])
            .collect();
        Ok(NoiseSample { task, ids, values })
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }
}

/// Draws every encoder coordinate of `task` i.i.d. from `U(-b, b)`.
pub fn sample_noise<R: Rng + ?Sized>(
    store: &ParamStore,
    task: usize,
    b: f64,
    rng: &mut R,
) -> Result<NoiseSample> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::invalid(
            "sample_noise",
            format!("bound must be positive and finite, got {b}"),
        ));
    }
    let ids = store.ids(task, true)?;
    let values = ids
        .iter()
        .map(|&i| {
            (0..store.get(i).tensor.len())
                .map(|_| rng.random_range(-b..=b))
                .collect()
        })
        .collect();
    Ok(NoiseSample { task, ids, values })
}

/// Encoder values of one task at the start of an outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    pub task: usize,
    pub ids: Vec<ParamId>,
    pub values: Vec<Vec<f64>>,
}

impl ParamSnapshot {
    pub fn take(store: &ParamStore, task: usize) -> Result<Self> {
        let ids = store.ids(task, true)?;
        let values = ids
            .iter()
            .map(|&i| store.get(i).tensor.values().to_vec())
            .collect();
        Ok(ParamSnapshot { task, ids, values })
    }

    /// Largest absolute coordinate change since the snapshot.
    pub fn max_shift(&self, store: &ParamStore) -> f64 {
        self.ids
            .iter()
            .zip(&self.values)
            .flat_map(|(&id, s)| {
                store
                    .get(id)
                    .tensor
                    .values()
                    .iter()
                    .zip(s)
                    .map(|(v, s)| (v - s).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Bounds `[lo, hi]` around `s` such that `hi - s <= b` and `s - lo <= b`
/// hold in floating point, not just in exact arithmetic.
pub(crate) fn box_bounds(s: f64, b: f64) -> (f64, f64) {
    let mut hi = s + b;
    while hi - s > b {
        hi = hi.next_down();
    }
    let mut lo = s - b;
    while s - lo > b {
        lo = lo.next_up();
    }
    (lo, hi)
}

/// Projects the encoder of `snapshot.task` into the box of radius `b`
/// around the snapshot. Returns the number of coordinates moved.
pub fn clamp_to_snapshot(
    store: &mut ParamStore,
    snapshot: &ParamSnapshot,
    b: f64,
) -> Result<usize> {
    let ids = store.ids(snapshot.task, true)?;
    if ids != snapshot.ids {
        return Err(Error::invalid(
            "clamp",
            "snapshot was taken from a different parameter set",
        ));
    }
    for (&id, s) in ids.iter().zip(&snapshot.values) {
        if store.get(id).tensor.len() != s.len() {
            return Err(Error::Shape {
                op: "clamp",
                lhs: store.get(id).tensor.shape().to_vec(),
                rhs: vec![s.len()],
            });
        }
    }
    let mut count = 0;
    for (&id, s) in ids.iter().zip(&snapshot.values) {
        for (v, &s) in store.get_mut(id).tensor.values_mut().iter_mut().zip(s) {
            let (lo, hi) = box_bounds(s, b);
            if *v > hi {
                *v = hi;
                count += 1;
            } else if *v < lo {
                *v = lo;
                count += 1;
            }
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Param, ParamRole};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new(2);
        let n = values.len();
        s.push(Param {
            name: "enc.t0".into(),
            task: 0,
            role: ParamRole::Encoder,
            tensor: Tensor::from_parts(vec![n], values),
        });
        s.push(Param {
            name: "head.t0".into(),
            task: 0,
            role: ParamRole::Head,
            tensor: Tensor::from_parts(vec![1], vec![9.0]),
        });
        s.push(Param {
            name: "enc.t1".into(),
            task: 1,
            role: ParamRole::Encoder,
            tensor: Tensor::from_parts(vec![1], vec![0.0]),
        });
        s
    }

    #[test]
    fn clamp_example() {
        let mut s = store_with(vec![0.10]);
        let snap = ParamSnapshot::take(&s, 0).unwrap();
        s.get_mut(0).tensor.values_mut()[0] = 0.20;
        assert_eq!(clamp_to_snapshot(&mut s, &snap, 0.05).unwrap(), 1);
        let v = s.get(0).tensor.values()[0];
        assert!((v - 0.15).abs() < 1e-15);
        assert!(v - 0.10 <= 0.05);
    }

    #[test]
    fn clamp_inside_box_is_noop() {
        let mut s = store_with(vec![0.1, -0.3]);
        let snap = ParamSnapshot::take(&s, 0).unwrap();
        s.get_mut(0).tensor.values_mut()[1] = -0.31;
        let before = s.clone();
        assert_eq!(clamp_to_snapshot(&mut s, &snap, 0.05).unwrap(), 0);
        assert_eq!(s, before);
    }

    #[test]
    fn head_is_untouched_by_clamp() {
        let mut s = store_with(vec![0.0]);
        let snap = ParamSnapshot::take(&s, 0).unwrap();
        s.get_mut(1).tensor.values_mut()[0] = 100.0;
        clamp_to_snapshot(&mut s, &snap, 0.05).unwrap();
        assert_eq!(s.get(1).tensor.values()[0], 100.0);
    }

    #[test]
    fn snapshot_mismatch_rejected() {
        let mut s = store_with(vec![0.0]);
        let snap = ParamSnapshot::take(&store_with(vec![0.0, 1.0]), 0).unwrap();
        assert!(clamp_to_snapshot(&mut s, &snap, 0.05).is_err());
    }

    #[test]
    fn noise_within_bound_and_seeded() {
        let s = store_with(vec![0.0; 1000]);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let a = sample_noise(&s, 0, 0.05, &mut r1).unwrap();
        assert_eq!(a, sample_noise(&s, 0, 0.05, &mut r2).unwrap());
        assert_eq!(a.ids, vec![0]);
        assert!(a.iter_values().all(|v| v.abs() <= 0.05));
        assert!(sample_noise(&s, 0, 0.0, &mut r1).is_err());
        assert!(sample_noise(&s, 0, -1.0, &mut r1).is_err());
    }

    proptest! {
        #[test]
        fn clamp_matches_min_max_oracle(
            snap in prop::collection::vec(-2.0f64..2.0, 1..20),
            delta in prop::collection::vec(-1.0f64..1.0, 20),
            b in 1e-4f64..0.5,
        ) {
            let mut s = store_with(snap.clone());
            let shot = ParamSnapshot::take(&s, 0).unwrap();
            let proposal: Vec<f64> = snap.iter().zip(&delta).map(|(a, d)| a + d).collect();
            s.get_mut(0).tensor.values_mut().copy_from_slice(&proposal);
            clamp_to_snapshot(&mut s, &shot, b).unwrap();
            for ((v, p), s0) in s.get(0).tensor.values().iter().zip(&proposal).zip(&snap) {
                let want = p.min(s0 + b).max(s0 - b);
                prop_assert!((v - want).abs() <= 4.0 * f64::EPSILON * (1.0 + s0.abs()));
                prop_assert!((v - s0).abs() <= b);
            }
        }
    }
}
