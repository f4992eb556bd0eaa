//! Named parameter store.
//!
//! Models hold [`ParamId`]s into a [`ParamSet`]; each forward pass copies the
//! current values onto a fresh tape as leaf tensors. Gradients accumulate in
//! the store across micro-batches until the optimizer consumes them. The
//! `trainable` flag doubles as the freeze switch: frozen parameters are
//! skipped both by gradient computation and by the optimizer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{rng, ChaCha8Rng};

/// Handle to one parameter tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

/// All parameters of one model, in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter with explicit initial values.
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> ParamId {
        assert_eq!(values.len(), rows * cols, "parameter value count");
        let id = ParamId(self.entries.len());
        self.entries.push(Param {
            name: name.into(),
            rows,
            cols,
            grad: vec![0.0; values.len()],
            values,
            trainable: true,
        });
        id
    }

    /// Gaussian init with the given standard deviation.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let values = (0..rows * cols).map(|_| std * rng::normal(rng)).collect();
        self.add(name, rows, cols, values)
    }

    /// All-zero init.
    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, vec![0.0; rows * cols])
    }

    /// All-constant init (layer-norm gains and the like).
    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, rows, cols, vec![value; rows * cols])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    /// Handle for a raw entry index (as reported by gradient extraction).
    pub fn id_at(&self, index: usize) -> ParamId {
        assert!(index < self.entries.len(), "param index {index} out of range");
        ParamId(index)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Apply a trainable flag to every parameter whose name starts with
    /// `prefix`. Returns how many parameters matched.
    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.entries {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn n_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.values.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add `scale * grads` into the stored gradients. `grads` is the sparse
    /// per-parameter output of one backward pass.
    pub fn add_grads(&mut self, grads: &[(usize, Vec<f64>)], scale: f64) {
        for (idx, g) in grads {
            let dst = &mut self.entries[*idx].grad;
            debug_assert_eq!(dst.len(), g.len());
            for (d, s) in dst.iter_mut().zip(g) {
                *d += scale * s;
            }
        }
    }

    /// Deep snapshot of all values (for best-checkpoint tracking).
    pub fn snapshot_values(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|p| p.values.clone()).collect()
    }

    /// Restore values captured by [`ParamSet::snapshot_values`].
    pub fn restore_values(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (p, s) in self.entries.iter_mut().zip(snapshot) {
            p.values.copy_from_slice(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn prefix_freeze_and_grad_accumulation() {
        let mut rng = rng::stream(0, &[0]);
        let mut ps = ParamSet::new();
        let a = ps.add_normal("enc.w", 2, 2, 1.0, &mut rng);
        let b = ps.add_zeros("head.w", 1, 2);
        assert_eq!(ps.set_trainable_by_prefix("enc.", false), 1);
        assert!(!ps.get(a).trainable);
        assert!(ps.get(b).trainable);
        assert_eq!(ps.trainable_names(), vec!["head.w".to_string()]);

        ps.add_grads(&[(b.index(), vec![2.0, 4.0])], 0.5);
        ps.add_grads(&[(b.index(), vec![2.0, 4.0])], 0.5);
        assert_eq!(ps.get(b).grad, vec![2.0, 4.0]);
        ps.zero_grads();
        assert_eq!(ps.get(b).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut rng = rng::stream(1, &[0]);
        let mut ps = ParamSet::new();
        let w = ps.add_normal("w", 3, 3, 0.5, &mut rng);
        let snap = ps.snapshot_values();
        let before = ps.get(w).values.clone();
        ps.get_mut(w).values[0] += 1.0;
        ps.restore_values(&snap);
        assert_eq!(ps.get(w).values, before);
    }
}
