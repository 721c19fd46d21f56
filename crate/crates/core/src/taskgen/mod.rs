//! The two-category relational task: world construction, fact enumeration,
//! OOD splitting, sparsification and tokenization.

mod dataset;
mod facts;
mod world;

pub use dataset::{
    held_out_count, sparsify, split_ood, DatasetConfig, FactDataset, DATASET_FORMAT,
};
pub use facts::{
    detokenize, enumerate_facts, tokenize, Fact, FactKind, FactSets, Token, TokenId, Vocabulary,
};
pub use world::{
    build_world, build_world_with, EntityId, FunctorMap, FunctorSampling, RelationId,
    RelationTable, World,
};
