//! Parameter storage partitioned into named groups, and the per-forward binding of
//! stored values onto a tape.

use std::cell::RefCell;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdpcr_autodiff::{Array, Gradients, Scalar, Tape, Var};

use crate::error::{Error, Result};

/// Parameter groups used by freeze policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    OpticalEncoder,
    SarEncoder,
    PromptGenerator,
    PgfBlocks,
    SharedDecoder,
    SegHead,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::OpticalEncoder,
        Group::SarEncoder,
        Group::PromptGenerator,
        Group::PgfBlocks,
        Group::SharedDecoder,
        Group::SegHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::OpticalEncoder => "optical_encoder",
            Group::SarEncoder => "sar_encoder",
            Group::PromptGenerator => "prompt_generator",
            Group::PgfBlocks => "pgf_blocks",
            Group::SharedDecoder => "shared_decoder",
            Group::SegHead => "seg_head",
        }
    }

    pub fn parse(s: &str) -> Result<Group> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown parameter group '{s}'")))
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub group: Group,
    pub name: String,
    pub value: Array<T>,
    pub trainable: bool,
}

/// Ordered collection of every learnable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, group: Group, name: impl Into<String>, value: Array<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(group, &name).is_none(), "duplicate parameter {group}/{name}");
        self.params.push(Param { group, name, value, trainable: true });
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

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, group: Group, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.group == group && p.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, group: Group, trainable: bool) {
        self.params.iter_mut().filter(|p| p.group == group).for_each(|p| p.trainable = trainable);
    }

    pub fn is_group_trainable(&self, group: Group) -> bool {
        self.params.iter().any(|p| p.group == group && p.trainable)
    }

    /// Number of scalar parameters in the selected groups (all groups when `groups` is `None`).
    pub fn count(&self, groups: Option<&[Group]>) -> usize {
        self.params
            .iter()
            .filter(|p| groups.is_none_or(|gs| gs.contains(&p.group)))
            .map(|p| p.value.len())
            .sum()
    }

    /// [`count`](Self::count) with groups given by name.
    pub fn count_by_names(&self, names: Option<&[&str]>) -> Result<usize> {
        match names {
            None => Ok(self.count(None)),
            Some(names) => {
                let groups = names.iter().map(|n| Group::parse(n)).collect::<Result<Vec<_>>>()?;
                Ok(self.count(Some(&groups)))
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { group: p.group, name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
        }
    }

    /// FNV-1a over the raw bytes of every parameter in `group`, in store order.
    pub fn group_checksum(&self, group: Group) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in self.params.iter().filter(|p| p.group == group) {
            for v in p.value.data() {
                for b in v.as_f64().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Copies values (not flags) from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Shape(format!("parameter count {} vs {}", other.params.len(), self.params.len())));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.group != src.group || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!("layout mismatch at {}/{}", dst.group, dst.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Registers parameters with initial values under one group.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    group: Group,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, group: Group) -> Self {
        Self { store, rng, group }
    }

    pub fn group(&mut self, group: Group) -> &mut Self {
        self.group = group;
        self
    }

    pub fn current_group(&self) -> Group {
        self.group
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let value = Array::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)));
        self.store.add(self.group, name, value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.add(self.group, name, Array::full(shape, T::lit(v)))
    }
}

/// Binds stored parameters to leaves of one tape, on first use.
pub struct Fwd<'t, T: Scalar> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
    track_grads: bool,
}

impl<'t, T: Scalar> Fwd<'t, T> {
    /// Trainable parameters become gradient-tracking leaves when `track_grads` is set.
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>, track_grads: bool) -> Self {
        Self { tape, store, bound: RefCell::new(vec![None; store.len()]), track_grads }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let v = self.tape.leaf(param.value.clone(), self.track_grads && param.trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, a: Array<T>) -> Var<'t, T> {
        self.tape.constant(a)
    }

    /// Moves parameter gradients out of `grads`, indexed like the store. Parameters that
    /// were not used or are frozen map to `None`.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Array<T>>> {
        self.bound.borrow().iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn count_partitions_by_group() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = substream(0, "t");
        let mut init = Init::new(&mut store, &mut rng, Group::PgfBlocks);
        init.uniform("a", &[3, 4], 0.1);
        init.group(Group::SegHead).constant("b", &[5], 0.0);
        assert_eq!(store.count(None), 17);
        assert_eq!(store.count(Some(&[])), 0);
        let per_group: usize = Group::ALL.iter().map(|g| store.count(Some(&[*g]))).sum();
        assert_eq!(per_group, 17);
        assert!(store.count_by_names(Some(&["decoder"])).is_err());
        assert_eq!(store.count_by_names(Some(&["seg_head"])).unwrap(), 5);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add(Group::SarEncoder, "a", Array::full(&[2], 1.0));
        let b = store.add(Group::SegHead, "b", Array::full(&[2], 2.0));
        store.set_trainable(Group::SarEncoder, false);
        let tape = Tape::new();
        let fwd = Fwd::new(&tape, &store, true);
        let loss = fwd.p(a).mul(fwd.p(b)).unwrap().sum_all();
        let mut grads = tape.backward(loss).unwrap();
        let g = fwd.param_grads(&mut grads);
        assert!(g[a.0].is_none());
        assert_eq!(g[b.0].as_ref().unwrap().data(), &[1.0, 1.0]);
    }
}
