use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_FUNCTOR, STREAM_WORLD};

/// Index into the full entity set. Category 1 is `[0, n)`, category 2 is `[n, 2n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// How the category-1 to category-2 bijection is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctorSampling {
    /// Uniform over all bijections.
    #[default]
    Uniform,
    /// `i -> i + n`; for debugging only.
    IdentityOffset,
}

/// Bijection from category 1 onto category 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct FunctorMap {
    mapping: Vec<EntityId>,
}

impl FunctorMap {
    /// Validates that `mapping` is a bijection `[0, n) -> [n, 2n)`.
    pub fn new(mapping: Vec<EntityId>) -> Result<Self> {
        let n = mapping.len();
        if n == 0 {
            return Err(Error::Config("functor over an empty category".into()));
        }
        let mut seen = vec![false; n];
        for (i, e) in mapping.iter().enumerate() {
            let idx = e.index();
            if idx < n || idx >= 2 * n {
                return Err(Error::Config(format!(
                    "functor maps entity {i} to {idx}, outside category 2 [{n}, {})",
                    2 * n
                )));
            }
            if std::mem::replace(&mut seen[idx - n], true) {
                return Err(Error::Config(format!(
                    "functor is not injective: {idx} is hit twice"
                )));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity_offset(n: usize) -> Self {
        Self {
            mapping: (n..2 * n).map(|i| EntityId(i as u32)).collect(),
        }
    }

    pub fn sample(n: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, STREAM_FUNCTOR);
        let mut mapping: Vec<EntityId> = (n..2 * n).map(|i| EntityId(i as u32)).collect();
        mapping.shuffle(&mut rng);
        Self { mapping }
    }

    /// Entities per category.
    pub fn n(&self) -> usize {
        self.mapping.len()
    }

    /// Image of a category-1 entity; `None` for anything else.
    pub fn apply(&self, e: EntityId) -> Option<EntityId> {
        self.mapping.get(e.index()).copied()
    }

    pub fn inverse(&self, e: EntityId) -> Option<EntityId> {
        self.mapping
            .iter()
            .position(|&m| m == e)
            .map(|i| EntityId(i as u32))
    }

    /// `(source, image)` pairs in source order.
    pub fn pairs(&self) -> impl Iterator<Item = (EntityId, EntityId)> + '_ {
        self.mapping
            .iter()
            .enumerate()
            .map(|(i, &t)| (EntityId(i as u32), t))
    }

    pub fn as_slice(&self) -> &[EntityId] {
        &self.mapping
    }
}

impl TryFrom<Vec<u32>> for FunctorMap {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        FunctorMap::new(v.into_iter().map(EntityId).collect())
    }
}

impl From<FunctorMap> for Vec<u32> {
    fn from(f: FunctorMap) -> Self {
        f.mapping.into_iter().map(|e| e.0).collect()
    }
}

/// Labeled complete digraph over one category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationTable {
    first: u32,
    n: usize,
    /// Row-major `n x n`; the diagonal is always `None`.
    labels: Vec<Option<RelationId>>,
}

impl RelationTable {
    fn empty(first: u32, n: usize) -> Self {
        Self {
            first,
            n,
            labels: vec![None; n * n],
        }
    }

    fn local(&self, e: EntityId) -> Option<usize> {
        let i = e.0.checked_sub(self.first)? as usize;
        (i < self.n).then_some(i)
    }

    pub fn contains(&self, e: EntityId) -> bool {
        self.local(e).is_some()
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.n as u32).map(move |i| EntityId(self.first + i))
    }

    pub fn label(&self, src: EntityId, dst: EntityId) -> Option<RelationId> {
        let (i, j) = (self.local(src)?, self.local(dst)?);
        self.labels[i * self.n + j]
    }

    fn set(&mut self, src: EntityId, dst: EntityId, r: RelationId) {
        let (i, j) = (self.local(src).unwrap(), self.local(dst).unwrap());
        self.labels[i * self.n + j] = Some(r);
    }

    /// Follows the outgoing edge of `src` labeled `r`.
    pub fn resolve(&self, src: EntityId, r: RelationId) -> Option<EntityId> {
        let i = self.local(src)?;
        (0..self.n)
            .find(|&j| self.labels[i * self.n + j] == Some(r))
            .map(|j| EntityId(self.first + j as u32))
    }

    /// All labeled edges `(src, rel, dst)`, ordered by source then target.
    pub fn edges(&self) -> impl Iterator<Item = (EntityId, RelationId, EntityId)> + '_ {
        (0..self.n).flat_map(move |i| {
            (0..self.n).filter_map(move |j| {
                self.labels[i * self.n + j].map(|r| {
                    (
                        EntityId(self.first + i as u32),
                        r,
                        EntityId(self.first + j as u32),
                    )
                })
            })
        })
    }

    pub fn outgoing(&self, src: EntityId) -> Vec<RelationId> {
        match self.local(src) {
            Some(i) => self.labels[i * self.n..(i + 1) * self.n]
                .iter()
                .flatten()
                .copied()
                .collect(),
            None => Vec::new(),
        }
    }
}

/// Both categories and the functor linking them.
#[derive(Clone, Debug)]
pub struct World {
    pub num_relations: usize,
    pub e1: RelationTable,
    pub e2: RelationTable,
    pub functor: FunctorMap,
}

impl World {
    pub fn n(&self) -> usize {
        self.functor.n()
    }

    pub fn num_entities(&self) -> usize {
        2 * self.n()
    }

    /// The table holding `e`, if any.
    pub fn table_of(&self, e: EntityId) -> Option<&RelationTable> {
        if self.e1.contains(e) {
            Some(&self.e1)
        } else if self.e2.contains(e) {
            Some(&self.e2)
        } else {
            None
        }
    }
}

pub fn build_world(n: usize, num_relations: usize, seed: u64) -> Result<World> {
    build_world_with(n, num_relations, seed, FunctorSampling::Uniform)
}

/// Samples the category-1 graph and transports it along the functor.
///
/// Each entity's `n - 1` outgoing labels are a uniform draw without
/// replacement from the relation set, assigned to its targets in order.
pub fn build_world_with(
    n: usize,
    num_relations: usize,
    seed: u64,
    functor: FunctorSampling,
) -> Result<World> {
    if n < 2 {
        return Err(Error::DegenerateWorld(format!(
            "need at least 2 entities per category, got {n}"
        )));
    }
    if num_relations < n - 1 {
        return Err(Error::InfeasibleConstraint(format!(
            "{num_relations} relations cannot give {} distinct outgoing labels per entity",
            n - 1
        )));
    }
    if n.checked_mul(2).map_or(true, |m| m > u32::MAX as usize) || num_relations > u32::MAX as usize
    {
        return Err(Error::Config("world too large for 32-bit ids".into()));
    }

    let mut rng = stream_rng(seed, STREAM_WORLD);
    let mut e1 = RelationTable::empty(0, n);
    for i in 0..n {
        let labels = index::sample(&mut rng, num_relations, n - 1);
        let targets = (0..n).filter(|&j| j != i);
        for (j, r) in targets.zip(labels.iter()) {
            e1.set(EntityId(i as u32), EntityId(j as u32), RelationId(r as u32));
        }
    }

    let functor = match functor {
        FunctorSampling::Uniform => FunctorMap::sample(n, seed),
        FunctorSampling::IdentityOffset => FunctorMap::identity_offset(n),
    };

    let mut e2 = RelationTable::empty(n as u32, n);
    for (s, r, t) in e1.edges() {
        let (fs, ft) = (functor.apply(s).unwrap(), functor.apply(t).unwrap());
        e2.set(fs, ft, r);
    }

    Ok(World {
        num_relations,
        e1,
        e2,
        functor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn two_entities_one_edge_each() {
        let w = build_world(2, 1, 0).unwrap();
        assert_eq!(w.e1.edges().count(), 2);
        for e in w.e1.entities() {
            assert_eq!(w.e1.outgoing(e).len(), 1);
        }
    }

    #[test]
    fn pigeonhole_boundary() {
        assert!(build_world(5, 4, 3).is_ok());
        assert!(matches!(
            build_world(5, 3, 3),
            Err(Error::InfeasibleConstraint(_))
        ));
        assert!(matches!(
            build_world(1, 10, 0),
            Err(Error::DegenerateWorld(_))
        ));
    }

    #[test]
    fn default_world_has_distinct_outgoing_labels() {
        let w = build_world(10, 10_000, 0).unwrap();
        for table in [&w.e1, &w.e2] {
            for e in table.entities() {
                let out = table.outgoing(e);
                assert_eq!(out.len(), 9);
                assert_eq!(out.iter().collect::<HashSet<_>>().len(), 9);
            }
        }
    }

    #[test]
    fn functor_transports_labels() {
        let w = build_world(7, 50, 11).unwrap();
        for (s, r, t) in w.e1.edges() {
            let (fs, ft) = (w.functor.apply(s).unwrap(), w.functor.apply(t).unwrap());
            assert_eq!(w.e2.label(fs, ft), Some(r));
        }
        assert_eq!(w.e2.edges().count(), 42);
    }

    #[test]
    fn resolve_follows_label() {
        let w = build_world(6, 20, 5).unwrap();
        for (s, r, t) in w.e2.edges() {
            assert_eq!(w.e2.resolve(s, r), Some(t));
        }
    }

    #[test]
    fn functor_validation() {
        assert!(FunctorMap::new(vec![EntityId(2), EntityId(3)]).is_ok());
        assert!(FunctorMap::new(vec![EntityId(2), EntityId(2)]).is_err());
        assert!(FunctorMap::new(vec![EntityId(1), EntityId(3)]).is_err());
        let f = FunctorMap::identity_offset(4);
        assert_eq!(f.apply(EntityId(1)), Some(EntityId(5)));
        assert_eq!(f.inverse(EntityId(5)), Some(EntityId(1)));
        assert_eq!(f.apply(EntityId(4)), None);
    }

    #[test]
    fn sampled_functor_is_bijection() {
        for seed in 0..20 {
            let f = FunctorMap::sample(9, seed);
            assert!(FunctorMap::new(f.as_slice().to_vec()).is_ok());
        }
    }
}
