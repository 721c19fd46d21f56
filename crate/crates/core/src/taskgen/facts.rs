use serde::{Deserialize, Serialize};

use super::world::{EntityId, RelationId, World};
use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactKind {
    Atomic,
    Compositional,
    Analogical,
}

/// One training or evaluation fact.
///
/// A compositional fact does not store its intermediate entity: it is not
/// part of the token sequence, and with distinct outgoing labels it is
/// recoverable from the relation table (see [`Fact::intermediate`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Fact {
    Atomic {
        source: EntityId,
        relation: RelationId,
        target: EntityId,
    },
    Compositional {
        source: EntityId,
        first: RelationId,
        second: RelationId,
        target: EntityId,
    },
    Analogical {
        source: EntityId,
        target: EntityId,
    },
}

impl Fact {
    pub fn kind(&self) -> FactKind {
        match self {
            Fact::Atomic { .. } => FactKind::Atomic,
            Fact::Compositional { .. } => FactKind::Compositional,
            Fact::Analogical { .. } => FactKind::Analogical,
        }
    }

    pub fn source(&self) -> EntityId {
        match *self {
            Fact::Atomic { source, .. }
            | Fact::Compositional { source, .. }
            | Fact::Analogical { source, .. } => source,
        }
    }

    pub fn target(&self) -> EntityId {
        match *self {
            Fact::Atomic { target, .. }
            | Fact::Compositional { target, .. }
            | Fact::Analogical { target, .. } => target,
        }
    }

    /// Number of tokens in the encoded form.
    pub fn len(&self) -> usize {
        match self {
            Fact::Compositional { .. } => 4,
            _ => 3,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Middle entity of a two-hop fact, looked up in `world`.
    pub fn intermediate(&self, world: &World) -> Option<EntityId> {
        match *self {
            Fact::Compositional { source, first, .. } => {
                world.table_of(source)?.resolve(source, first)
            }
            _ => None,
        }
    }

    /// The two atomic facts a compositional fact is built from.
    pub fn constituents(&self, world: &World) -> Option<[Fact; 2]> {
        match *self {
            Fact::Compositional {
                source,
                first,
                second,
                target,
            } => {
                let mid = self.intermediate(world)?;
                Some([
                    Fact::Atomic {
                        source,
                        relation: first,
                        target: mid,
                    },
                    Fact::Atomic {
                        source: mid,
                        relation: second,
                        target,
                    },
                ])
            }
            _ => None,
        }
    }
}

/// Dense token layout: entities, then relations, then the functor token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_entities: u32,
    pub num_relations: u32,
}

/// A decoded token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Entity(EntityId),
    Relation(RelationId),
    Functor,
}

impl Vocabulary {
    pub fn new(num_entities: usize, num_relations: usize) -> Self {
        Self {
            num_entities: num_entities as u32,
            num_relations: num_relations as u32,
        }
    }

    pub fn for_world(world: &World) -> Self {
        Self::new(world.num_entities(), world.num_relations)
    }

    pub fn size(&self) -> usize {
        (self.num_entities + self.num_relations + 1) as usize
    }

    pub fn entity_range(&self) -> std::ops::Range<TokenId> {
        0..self.num_entities
    }

    pub fn relation_range(&self) -> std::ops::Range<TokenId> {
        self.num_entities..self.num_entities + self.num_relations
    }

    pub fn functor_token(&self) -> TokenId {
        self.num_entities + self.num_relations
    }

    pub fn entity(&self, e: EntityId) -> Result<TokenId> {
        if e.0 < self.num_entities {
            Ok(e.0)
        } else {
            Err(Error::Encoding(format!(
                "entity {} outside vocabulary of {} entities",
                e.0, self.num_entities
            )))
        }
    }

    pub fn relation(&self, r: RelationId) -> Result<TokenId> {
        if r.0 < self.num_relations {
            Ok(self.num_entities + r.0)
        } else {
            Err(Error::Encoding(format!(
                "relation {} outside vocabulary of {} relations",
                r.0, self.num_relations
            )))
        }
    }

    pub fn decode(&self, tok: TokenId) -> Result<Token> {
        if tok < self.num_entities {
            Ok(Token::Entity(EntityId(tok)))
        } else if tok < self.num_entities + self.num_relations {
            Ok(Token::Relation(RelationId(tok - self.num_entities)))
        } else if tok == self.functor_token() {
            Ok(Token::Functor)
        } else {
            Err(Error::Encoding(format!(
                "token {tok} outside vocabulary of size {}",
                self.size()
            )))
        }
    }
}

pub fn tokenize(fact: &Fact, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    Ok(match *fact {
        Fact::Atomic {
            source,
            relation,
            target,
        } => vec![
            vocab.entity(source)?,
            vocab.relation(relation)?,
            vocab.entity(target)?,
        ],
        Fact::Compositional {
            source,
            first,
            second,
            target,
        } => vec![
            vocab.entity(source)?,
            vocab.relation(first)?,
            vocab.relation(second)?,
            vocab.entity(target)?,
        ],
        Fact::Analogical { source, target } => vec![
            vocab.entity(source)?,
            vocab.functor_token(),
            vocab.entity(target)?,
        ],
    })
}

pub fn detokenize(tokens: &[TokenId], vocab: &Vocabulary) -> Result<Fact> {
    let decoded = tokens
        .iter()
        .map(|&t| vocab.decode(t))
        .collect::<Result<Vec<_>>>()?;
    match decoded.as_slice() {
        [Token::Entity(source), Token::Relation(relation), Token::Entity(target)] => {
            Ok(Fact::Atomic {
                source: *source,
                relation: *relation,
                target: *target,
            })
        }
        [Token::Entity(source), Token::Relation(first), Token::Relation(second), Token::Entity(target)] => {
            Ok(Fact::Compositional {
                source: *source,
                first: *first,
                second: *second,
                target: *target,
            })
        }
        [Token::Entity(source), Token::Functor, Token::Entity(target)] => Ok(Fact::Analogical {
            source: *source,
            target: *target,
        }),
        _ => Err(Error::Encoding(format!(
            "token sequence {tokens:?} is not a fact"
        ))),
    }
}

/// All facts derivable from a world, before any split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FactSets {
    pub atomic: Vec<Fact>,
    pub compositional: Vec<Fact>,
    pub analogical: Vec<Fact>,
}

/// Enumerates facts for both categories.
///
/// Two-hop paths that return to their source are skipped unless
/// `include_cycles` is set.
pub fn enumerate_facts(world: &World, include_cycles: bool) -> FactSets {
    let mut sets = FactSets::default();
    for table in [&world.e1, &world.e2] {
        for (source, relation, target) in table.edges() {
            sets.atomic.push(Fact::Atomic {
                source,
                relation,
                target,
            });
        }
        for (source, first, mid) in table.edges() {
            for (_, second, target) in table.edges().filter(|&(s, _, _)| s == mid) {
                if target == source && !include_cycles {
                    continue;
                }
                sets.compositional.push(Fact::Compositional {
                    source,
                    first,
                    second,
                    target,
                });
            }
        }
    }
    sets.analogical = world
        .functor
        .pairs()
        .map(|(source, target)| Fact::Analogical { source, target })
        .collect();
    sets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::world::build_world;

    #[test]
    fn table_one_layouts() {
        let vocab = Vocabulary::new(20, 10);
        let atomic = Fact::Atomic {
            source: EntityId(0),
            relation: RelationId(5),
            target: EntityId(1),
        };
        assert_eq!(tokenize(&atomic, &vocab).unwrap(), vec![0, 25, 1]);
        let ana = Fact::Analogical {
            source: EntityId(0),
            target: EntityId(10),
        };
        assert_eq!(tokenize(&ana, &vocab).unwrap(), vec![0, 30, 10]);
        let comp = Fact::Compositional {
            source: EntityId(3),
            first: RelationId(0),
            second: RelationId(9),
            target: EntityId(4),
        };
        assert_eq!(tokenize(&comp, &vocab).unwrap(), vec![3, 20, 29, 4]);
        assert_eq!(vocab.size(), 31);
    }

    #[test]
    fn out_of_range_ids_fail() {
        let vocab = Vocabulary::new(4, 3);
        let bad = Fact::Atomic {
            source: EntityId(4),
            relation: RelationId(0),
            target: EntityId(1),
        };
        assert!(matches!(tokenize(&bad, &vocab), Err(Error::Encoding(_))));
        assert!(detokenize(&[0, 8, 1], &vocab).is_err());
        assert!(detokenize(&[0, 1, 2], &vocab).is_err());
        assert!(detokenize(&[0, 4], &vocab).is_err());
    }

    #[test]
    fn default_counts() {
        let w = build_world(10, 10_000, 0).unwrap();
        let sets = enumerate_facts(&w, false);
        assert_eq!(sets.atomic.len(), 180);
        assert_eq!(sets.compositional.len(), 1440);
        assert_eq!(sets.analogical.len(), 10);
        let with_cycles = enumerate_facts(&w, true);
        assert_eq!(with_cycles.compositional.len(), 1620);
    }

    #[test]
    fn constituents_are_edges() {
        let w = build_world(5, 30, 2).unwrap();
        let sets = enumerate_facts(&w, false);
        for c in &sets.compositional {
            let [a, b] = c.constituents(&w).unwrap();
            assert!(sets.atomic.contains(&a));
            assert!(sets.atomic.contains(&b));
        }
    }
}
