use sha2::{Digest, Sha256};

use crate::numerics::{Gradients, Graph, NumericsError, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether weight decay applies (false for normalization gains/offsets).
    pub decay: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Parameters inserted into a particular graph, indexable by [`ParamId`].
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_grad(),
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Binds every tensor into `graph`: as differentiable keyed leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if trainable {
                    graph.keyed_leaf(i, &p.tensor)
                } else {
                    graph.constant(&p.tensor)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds keyed gradients from a backward pass into the tensors' buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), NumericsError> {
        for (key, g) in grads.keyed() {
            if let Some(p) = self.params.get_mut(key) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Like [`ParamStore::accumulate`], but looks gradients up through the
    /// bound variables, so several stores can share one graph.
    pub fn accumulate_bound(
        &mut self,
        bound: &Bound<'_>,
        grads: &Gradients,
    ) -> Result<(), NumericsError> {
        for (p, &var) in self.params.iter_mut().zip(&bound.vars) {
            grads.accumulate_into(var, &mut p.tensor)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
