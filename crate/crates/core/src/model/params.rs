use crate::error::{Error, Result};
use crate::numeric::{Checkpoint, Real, Tensor};

/// Ordered, named parameter tensors (θ or Φ).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<R: Real> {
    entries: Vec<(String, Tensor<R>)>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<R>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<R>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<R>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// `Ok` when both stores hold the same names with the same shapes.
    pub fn check_compatible(&self, other: &Self) -> std::result::Result<(), String> {
        if self.entries.len() != other.entries.len() {
            return Err(format!(
                "{} tensors vs {} expected",
                other.entries.len(),
                self.entries.len()
            ));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(format!(
                    "tensor {nb} {:?} does not match {na} {:?}",
                    tb.shape(),
                    ta.shape()
                ));
            }
        }
        Ok(())
    }

    /// All values concatenated in store order.
    pub fn flatten(&self) -> Vec<R> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites all values from a flat slice in store order.
    pub fn assign_flat(&mut self, flat: &[R]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::dim(
                "assign_flat",
                format!("{} values for {} parameters", flat.len(), self.numel()),
            ));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn to_checkpoint(&self) -> Checkpoint<R> {
        Checkpoint {
            tensors: self
                .entries
                .iter()
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.clear_grad();
                    t.set_requires_grad(false);
                    (n.clone(), t)
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<R>) -> Self {
        Self { entries: ckpt.tensors }
    }

    /// SHA-256 of the checkpoint encoding.
    pub fn digest(&self) -> String {
        self.to_checkpoint()
            .digest()
            .expect("manifest serialization cannot fail")
    }
}
