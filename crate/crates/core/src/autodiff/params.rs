use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a slot in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Entry {
    name: String,
    value: ArrayD<f64>,
    /// Trainable slots receive optimizer updates and count toward parameter
    /// totals. Non-trainable slots are buffers (normalization running stats).
    trainable: bool,
}

/// Named tensor storage for model state. Insertion order is creation order
/// and is the canonical iteration order everywhere (optimizer, checkpoints,
/// parameter counting), which keeps all of those deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
    }

    /// Total number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Trainable scalar count per name prefix up to the first `.` after the
    /// prefix; used by parameter accounting reports.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }
}

/// Uniform init in `[-bound, bound]`.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// He-style init for conv kernels and matrices feeding rectifiers:
/// uniform with bound sqrt(6 / fan_in).
pub fn init_he(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    init_uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}

/// Xavier-style init for linear maps inside attention and feed-forward
/// blocks: uniform with bound sqrt(6 / (fan_in + fan_out)).
pub fn init_xavier(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> ArrayD<f64> {
    init_uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_round_trip_and_counts() {
        let mut s = ParamStore::new();
        let a = s.add("enc.w", zeros(&[3, 4]), true);
        let b = s.add("enc.bn.running_mean", zeros(&[4]), false);
        let c = s.add("head.b", ones(&[5]), true);
        assert_eq!(s.id("enc.w"), Some(a));
        assert_eq!(s.id("missing"), None);
        assert_eq!(s.n_trainable(), 12 + 5);
        assert_eq!(s.count_with_prefix("enc."), 12);
        assert!(!s.is_trainable(b));
        assert!(s.is_trainable(c));
        assert_eq!(s.trainable_ids().count(), 2);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_name_panics() {
        let mut s = ParamStore::new();
        s.add("w", zeros(&[1]), true);
        s.add("w", zeros(&[1]), true);
    }

    #[test]
    fn init_bounds_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = init_he(&mut rng, &[8, 8], 64);
        let bound = (6.0f64 / 64.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound + 1e-12));
        let x = init_xavier(&mut rng, &[4, 4], 4, 4);
        let xb = (6.0f64 / 8.0).sqrt();
        assert!(x.iter().all(|v| v.abs() <= xb + 1e-12));
    }
}
