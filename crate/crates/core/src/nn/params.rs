use std::sync::Arc;

use indexmap::IndexMap;

use super::{Graph, NnError, Tensor, Var};

/// Named parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NnError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NnError::Config(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, Arc::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Registers parameter `name` as a graph leaf without copying its data.
    pub fn bind(&self, graph: &mut Graph, name: &str, requires_grad: bool) -> Result<Var, NnError> {
        let value = self
            .params
            .get(name)
            .ok_or_else(|| NnError::Contract(format!("unknown parameter `{name}`")))?;
        Ok(graph.leaf_shared(Arc::clone(value), requires_grad))
    }
}
