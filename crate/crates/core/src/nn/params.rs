//! Named, ordered model parameters.

use super::tensor::Tensor;

/// A model's trainable state: named tensors in a stable order. The order
/// is fixed at construction and shared by gradients, optimizer state,
/// aggregation, and checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!self.entries.iter().any(|(n, _)| *n == name), "duplicate parameter name {name:?}");
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub(crate) fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// True when both sets list the same names with the same shapes in the
    /// same order.
    pub fn layout_matches(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    /// Exact bit-level equality of all values.
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.layout_matches(other)
            && self.entries.iter().zip(&other.entries).all(|((_, at), (_, bt))| at.bits_eq(bt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_bit_equality() {
        let mut a = ParamSet::new();
        a.push("w", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        a.push("b", Tensor::zeros(1, 1));
        let b = a.clone();
        assert!(a.layout_matches(&b));
        assert!(a.bits_eq(&b));

        let mut c = b.clone();
        c.get_mut("w").unwrap().data_mut()[0] = 1.5;
        assert!(a.layout_matches(&c));
        assert!(!a.bits_eq(&c));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::zeros(1, 1));
        p.push("w", Tensor::zeros(1, 1));
    }
}
