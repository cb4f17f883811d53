//! Named parameter storage shared by all trainable modules.
//!
//! Layers hold [`ParamId`] handles into a [`ParamStore`]; gradients accumulate
//! into a parallel [`GradBuf`]. Keeping values, gradients, and names in one
//! indexed table makes the optimizer, checkpointing, and finite-difference
//! probing uniform across models.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn get1(&self, id: ParamId) -> ndarray::ArrayView1<'_, f64> {
        self.values[id.0].view().into_dimensionality().unwrap()
    }

    pub fn get2(&self, id: ParamId) -> ndarray::ArrayView2<'_, f64> {
        self.values[id.0].view().into_dimensionality().unwrap()
    }

    pub fn get4(&self, id: ParamId) -> ndarray::ArrayView4<'_, f64> {
        self.values[id.0].view().into_dimensionality().unwrap()
    }

    /// Adds `delta` to one flat element; used by finite-difference probes.
    pub fn perturb(&mut self, id: ParamId, flat: usize, delta: f64) {
        self.values[id.0].as_slice_mut().unwrap()[flat] += delta;
    }

    pub fn set_from(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let id = self
            .by_name(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let current = &self.values[id.0];
        if current.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} in file, {:?} in model",
                shape,
                current.shape()
            )));
        }
        let arr = ArrayD::from_shape_vec(
            IxDyn(shape),
            data.iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        self.values[id.0] = arr;
        Ok(())
    }
}

/// Per-parameter gradient accumulator aligned with a store.
#[derive(Debug, Clone)]
pub struct GradBuf {
    grads: Vec<ArrayD<f64>>,
}

impl GradBuf {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .ids()
                .map(|id| ArrayD::zeros(store.get(id).raw_dim()))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub fn accum<D: ndarray::Dimension>(&mut self, id: ParamId, delta: &ndarray::Array<f64, D>) {
        let view = delta.view().into_dyn();
        self.grads[id.0] += &view;
    }

    /// Adds another buffer elementwise; used to reduce per-sample gradients
    /// computed in parallel, in a fixed order.
    pub fn merge(&mut self, other: &GradBuf) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Truncated normal init: values are redrawn until within two standard
/// deviations. Box-Muller keeps the dependency surface small.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> ArrayD<f64> {
    let mut draw = || loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    };
    ArrayD::from_shape_simple_fn(IxDyn(shape), &mut draw)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_round_trip_and_counts() {
        let mut store = ParamStore::new();
        let a = store.add("a", zeros(&[2, 3]));
        let b = store.add("b", zeros(&[4]));
        assert_eq!(store.n_scalars(), 10);
        assert_eq!(store.name(a), "a");
        assert_eq!(store.by_name("b"), Some(b));
        store.perturb(a, 5, 1.5);
        assert_eq!(store.get(a)[[1, 2]], 1.5);
    }

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = trunc_normal(&[1000], 0.02, &mut rng);
        assert!(x.iter().all(|v| v.abs() <= 0.04 + 1e-12));
        let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let y = trunc_normal(&[1000], 0.02, &mut rng2);
        assert_eq!(x, y);
    }

    #[test]
    fn gradbuf_merge_is_elementwise_sum() {
        let mut store = ParamStore::new();
        let a = store.add("a", zeros(&[2]));
        let mut g1 = GradBuf::zeros_like(&store);
        let mut g2 = GradBuf::zeros_like(&store);
        g1.accum(a, &ndarray::arr1(&[1.0, 2.0]));
        g2.accum(a, &ndarray::arr1(&[10.0, 20.0]));
        g1.merge(&g2);
        assert_eq!(g1.get(a).as_slice().unwrap(), &[11.0, 22.0]);
    }
}
