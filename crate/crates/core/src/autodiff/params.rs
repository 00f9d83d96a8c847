use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Flat, ordered parameter storage shared by all networks of a bundle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Maps a flat scalar index onto `(param, offset)`.
    pub fn locate(&self, mut flat: usize) -> Option<(ParamId, usize)> {
        for (i, p) in self.params.iter().enumerate() {
            if flat < p.value.len() {
                return Some((ParamId(i), flat));
            }
            flat -= p.value.len();
        }
        None
    }
}

/// Gradient of one objective with respect to every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients { grads: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        self.grads[id.0].add_assign(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn max_abs(&self) -> T {
        self.grads.iter().flat_map(|g| g.data().iter()).fold(T::zero(), |m, v| m.max(v.abs()))
    }
}
