//! Named parameter storage and gradient accumulation buffers.

use crate::rng::Rng64;
use std::collections::HashMap;
use std::sync::Arc;

pub type ParamId = usize;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)) with fan_in = rows.
    XavierUniform,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    data: Arc<Vec<f64>>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Registration-ordered collection of named parameter tensors.
///
/// Data lives behind `Arc` so graphs can hold leaves without copying; the
/// optimizer takes back unique ownership between steps via `make_mut`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut Rng64,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter '{name}' registered twice"
        );
        let n = rows * cols;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => (0..n).map(|_| rng.normal() * std).collect(),
            Init::XavierUniform => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * limit).collect()
            }
        };
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            data: Arc::new(data),
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn shared_data(&self, id: ParamId) -> Arc<Vec<f64>> {
        Arc::clone(&self.entries[id].data)
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id].data
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.entries[id].data)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.len()).sum()
    }

    /// Rounds every value through f32, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for id in 0..self.entries.len() {
            for v in self.values_mut(id) {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Per-parameter gradient buffers, allocated lazily.
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl GradStore {
    pub fn new(store: &ParamStore) -> Self {
        GradStore {
            grads: vec![None; store.len()],
            sizes: store.iter().map(|(_, e)| e.len()).collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, values: &[f64], scale: f64) {
        let buf = self.grads[id].get_or_insert_with(|| vec![0.0; self.sizes[id]]);
        super::kernels::axpy(scale, values, buf);
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    /// Adds another gradient store into this one.
    pub fn merge(&mut self, other: &GradStore) {
        for (id, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g, 1.0);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_is_deterministic() {
        let mk = || {
            let mut rng = Rng64::new(1, 0);
            let mut s = ParamStore::new();
            s.register("a", 2, 3, Init::Normal { std: 0.1 }, &mut rng);
            s.register("b", 3, 1, Init::XavierUniform, &mut rng);
            s
        };
        let a = mk();
        let b = mk();
        for ((_, ea), (_, eb)) in a.iter().zip(b.iter()) {
            assert_eq!(ea.values(), eb.values());
        }
    }

    #[test]
    fn grad_store_accumulates_and_merges() {
        let mut rng = Rng64::new(0, 0);
        let mut s = ParamStore::new();
        let id = s.register("w", 1, 3, Init::Zeros, &mut rng);
        let mut g1 = GradStore::new(&s);
        g1.accumulate(id, &[1.0, 2.0, 3.0], 0.5);
        let mut g2 = GradStore::new(&s);
        g2.accumulate(id, &[2.0, 0.0, -2.0], 1.0);
        g1.merge(&g2);
        assert_eq!(g1.get(id).unwrap(), &[2.5, 1.0, -0.5]);
    }

    #[test]
    fn f32_rounding_is_idempotent() {
        let mut rng = Rng64::new(2, 0);
        let mut s = ParamStore::new();
        let id = s.register("w", 4, 4, Init::Normal { std: 1.0 }, &mut rng);
        s.round_to_f32();
        let once: Vec<f64> = s.values(id).to_vec();
        s.round_to_f32();
        assert_eq!(once, s.values(id));
    }
}
