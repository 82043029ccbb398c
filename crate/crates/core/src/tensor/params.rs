use super::{InitScheme, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors owned by a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a parameter drawn from `scheme`. Each parameter gets its own
    /// stream derived from `seed` and its registration index.
    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scheme: InitScheme,
        seed: u64,
    ) -> Result<ParamId> {
        let salt = (self.tensors.len() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let t = super::seeded_init(shape, scheme, seed ^ salt)?;
        Ok(self.add(name, t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies values from `other`, which must have identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) {
        assert_eq!(self.len(), other.len(), "param stores differ in length");
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            assert_eq!(dst.shape(), src.shape(), "param shapes differ");
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}
