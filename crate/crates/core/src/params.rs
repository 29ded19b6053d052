//! Named parameter matrices and their binding into a [`Graph`].

use crate::autodiff::{Graph, Var};
use crate::matrix::Matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which optimizer group a parameter belongs to. `Encoder` and `Projection`
/// form the retriever side; `Generator` is the base model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Projection,
    Generator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Encoder, ParamGroup::Projection, ParamGroup::Generator];

    pub fn is_retriever_side(self) -> bool {
        matches!(self, ParamGroup::Encoder | ParamGroup::Projection)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    /// Bias-like parameters receive weight decay by default.
    pub is_bias: bool,
    pub value: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, is_bias: bool, value: Matrix) -> ParamId {
        self.params.push(Param { name: name.to_string(), group, is_bias, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn max_abs(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.value.max_abs()))
    }
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

/// Lazily inserts parameters into a graph: trainable groups as leaves,
/// frozen groups as constants.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: [bool; 3],
}

fn group_index(g: ParamGroup) -> usize {
    match g {
        ParamGroup::Encoder => 0,
        ParamGroup::Projection => 1,
        ParamGroup::Generator => 2,
    }
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &[ParamGroup]) -> Self {
        let mut flags = [false; 3];
        for &g in trainable {
            flags[group_index(g)] = true;
        }
        Binder { store, vars: vec![None; store.len()], trainable: flags }
    }

    /// Every group frozen: inference only.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable[group_index(group)]
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if self.is_trainable(p.group) { g.leaf(p.value.clone()) } else { g.constant(p.value.clone()) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after `g.backward`.
    /// Unbound or frozen parameters get `None`.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Matrix>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(v) if self.is_trainable(self.store.get(ParamId(i)).group) => Some(g.grad(*v)),
                _ => None,
            })
            .collect()
    }
}
