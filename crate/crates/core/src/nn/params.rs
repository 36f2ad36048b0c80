use rand::Rng;

use super::tensor::Real;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Handle to one named parameter array inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Ordered collection of named parameter arrays. Also used for gradient
/// accumulators and optimiser state, which share the layout of the model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}");
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, shape, data });
        ParamId(self.entries.len() - 1)
    }

    /// Normal(0, std) initialisation.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut SeededRng,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // Box-Muller keeps this independent of the scalar type.
                let u1: f64 = rng.random::<f64>().max(1e-300);
                let u2: f64 = rng.random::<f64>();
                F::lit(std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
            })
            .collect();
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![F::zero(); n])
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.entries[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.entries[id.0].data
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: vec![F::zero(); e.data.len()],
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for e in &mut self.entries {
            e.data.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Flat view coordinate `i` across all entries (for finite differences).
    pub fn flat_get(&self, mut i: usize) -> F {
        for e in &self.entries {
            if i < e.data.len() {
                return e.data[i];
            }
            i -= e.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_set(&mut self, mut i: usize, v: F) {
        for e in &mut self.entries {
            if i < e.data.len() {
                e.data[i] = v;
                return;
            }
            i -= e.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn add_scaled(&mut self, other: &ParamSet<F>, scale: F) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    /// Casts every array to another scalar type.
    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|v| G::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
                })
                .collect(),
        }
    }

    /// Replaces values from `other`, matching entries by name and shape.
    pub fn load_from(&mut self, other: &ParamSet<F>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "expected {} parameter arrays, found {}",
                    self.entries.len(),
                    other.entries.len()
                ),
            ));
        }
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing key {}", e.name)))?;
            if src.shape != e.shape {
                return Err(Error::format(
                    "checkpoint",
                    format!("key {} has shape {:?}, expected {:?}", e.name, src.shape, e.shape),
                ));
            }
            e.data.clone_from(&src.data);
        }
        Ok(())
    }
}
