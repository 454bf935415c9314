use std::collections::HashMap;

use super::{DiffError, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable arrays, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ids_stable() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2, 2])).unwrap();
        let b = s.add("b", Tensor::zeros(&[3])).unwrap();
        assert!(matches!(
            s.add("a", Tensor::scalar(0.0)),
            Err(DiffError::DuplicateParam(_))
        ));
        assert_eq!(s.len(), 2);
        assert_eq!(s.numel(), 7);
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.id("c"), None);
        assert_eq!(s.name(a), "a");
        s.get_mut(b).values_mut()[1] = 4.0;
        assert_eq!(s.get(b).values(), &[0.0, 4.0, 0.0]);
        assert_eq!(s.ids().collect::<Vec<_>>(), vec![a, b]);
    }
}
