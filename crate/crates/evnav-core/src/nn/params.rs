//! Named parameter tensors with copy-on-update storage.
//!
//! Parameter data lives behind `Arc` so a recorded computation keeps the
//! exact values it ran with even after an optimizer step replaces the
//! store's buffers. Declaration order is the canonical serialization order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<T>>,
    pub trainable: bool,
}

impl<T> ParamTensor<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }
}

/// A handle an operation keeps to the parameter values it was executed with.
#[derive(Debug, Clone)]
pub struct ParamRef<T> {
    pub name: String,
    pub data: Arc<Vec<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    tensors: Vec<ParamTensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn declare(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<T>,
        trainable: bool,
    ) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} declared twice")));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Dimension(format!(
                "parameter {name}: {} values for shape {shape:?}",
                data.len()
            )));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape,
            data: Arc::new(data),
            trainable,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    /// Handle for recording an op: clones the `Arc`, not the data.
    pub fn reference(&self, name: &str) -> Result<ParamRef<T>> {
        let t = self.get(name)?;
        Ok(ParamRef {
            name: t.name.clone(),
            data: Arc::clone(&t.data),
        })
    }

    /// Replaces a tensor's values with a fresh buffer (copy-on-update).
    pub fn set_data(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if data.len() != self.tensors[i].len() {
            return Err(Error::Dimension(format!(
                "parameter {name}: replacing {} values with {}",
                self.tensors[i].len(),
                data.len()
            )));
        }
        self.tensors[i].data = Arc::new(data);
        Ok(())
    }

    /// Tensors in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn declare_and_lookup() {
        let mut s = ParamStore::<f32>::new();
        s.declare("a.w", vec![2, 3], vec![0.0; 6], true).unwrap();
        s.declare("a.b", vec![3], vec![1.0; 3], true).unwrap();
        assert!(s.contains("a.w"));
        assert_eq!(s.get("a.b").unwrap().data[0], 1.0);
        assert!(s.declare("a.w", vec![1], vec![0.0], true).is_err());
        assert!(s.declare("bad", vec![2], vec![0.0; 3], true).is_err());
        assert!(s.get("missing").is_err());
    }

    #[test]
    fn copy_on_update_preserves_references() {
        let mut s = ParamStore::<f64>::new();
        s.declare("w", vec![2], vec![1.0, 2.0], true).unwrap();
        let held = s.reference("w").unwrap();
        s.set_data("w", vec![9.0, 9.0]).unwrap();
        assert_eq!(*held.data, vec![1.0, 2.0]);
        assert_eq!(*s.get("w").unwrap().data, vec![9.0, 9.0]);
    }

    #[test]
    fn iteration_follows_declaration_order() {
        let mut s = ParamStore::<f32>::new();
        for name in ["z", "a", "m"] {
            s.declare(name, vec![1], vec![0.0], true).unwrap();
        }
        let names: Vec<&str> = s.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, vec!["z", "a", "m"]);
    }
}
