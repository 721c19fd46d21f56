use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::facts::{
    detokenize, enumerate_facts, tokenize, Fact, FactKind, FactSets, TokenId, Vocabulary,
};
use super::world::{build_world_with, FunctorMap, FunctorSampling, World};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_SPARSIFY, STREAM_SPLIT};

pub const DATASET_FORMAT: &str = "analogy-dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Total entity count |E|; split evenly between the two categories.
    pub entities: usize,
    pub relations: usize,
    pub comp_ood: f64,
    pub ana_ood: f64,
    /// Fraction of atomic training facts removed after the split.
    pub sparsity: f64,
    pub include_cycles: bool,
    pub functor: FunctorSampling,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            entities: 20,
            relations: 10_000,
            comp_ood: 0.1,
            ana_ood: 0.1,
            sparsity: 0.0,
            include_cycles: false,
            functor: FunctorSampling::Uniform,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities % 2 != 0 {
            return Err(Error::Config(format!(
                "entity count {} must be even (two equal categories)",
                self.entities
            )));
        }
        check_ratio("comp_ood", self.comp_ood)?;
        check_ratio("ana_ood", self.ana_ood)?;
        check_ratio("sparsity", self.sparsity)?;
        Ok(())
    }

    pub fn per_category(&self) -> usize {
        self.entities / 2
    }
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} ratio {r} is outside [0, 1)")))
    }
}

/// `round(ratio * total)`, at least one when the ratio is positive.
pub fn held_out_count(ratio: f64, total: usize) -> usize {
    if ratio <= 0.0 || total == 0 {
        return 0;
    }
    ((ratio * total as f64).round() as usize).clamp(1, total)
}

/// Train and held-out facts over one world.
#[derive(Clone, Debug)]
pub struct FactDataset {
    pub config: DatasetConfig,
    pub world: World,
    pub vocab: Vocabulary,
    pub train: Vec<Fact>,
    pub comp_ood: Vec<Fact>,
    pub ana_ood: Vec<Fact>,
}

/// Holds out uniformly sampled compositional and analogical facts.
/// Atomic facts always stay in training.
pub fn split_ood(
    facts: FactSets,
    comp_ratio: f64,
    ana_ratio: f64,
    seed: u64,
) -> Result<(Vec<Fact>, Vec<Fact>, Vec<Fact>)> {
    check_ratio("comp_ood", comp_ratio)?;
    check_ratio("ana_ood", ana_ratio)?;
    let mut rng = stream_rng(seed, STREAM_SPLIT);

    let mut take = |pool: Vec<Fact>, ratio: f64| {
        let k = held_out_count(ratio, pool.len());
        let mut held = vec![false; pool.len()];
        for i in index::sample(&mut rng, pool.len(), k) {
            held[i] = true;
        }
        let (mut keep, mut out) = (Vec::new(), Vec::new());
        for (f, h) in pool.into_iter().zip(held) {
            if h {
                out.push(f)
            } else {
                keep.push(f)
            }
        }
        (keep, out)
    };

    let (comp_train, comp_ood) = take(facts.compositional, comp_ratio);
    let (ana_train, ana_ood) = take(facts.analogical, ana_ratio);

    let mut train = facts.atomic;
    train.extend(comp_train);
    train.extend(ana_train);
    Ok((train, comp_ood, ana_ood))
}

impl FactDataset {
    /// World construction, enumeration, OOD split and optional sparsification.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let world = build_world_with(
            config.per_category(),
            config.relations,
            config.seed,
            config.functor,
        )?;
        let facts = enumerate_facts(&world, config.include_cycles);
        let (train, comp_ood, ana_ood) =
            split_ood(facts, config.comp_ood, config.ana_ood, config.seed)?;
        let vocab = Vocabulary::for_world(&world);
        let mut ds = FactDataset {
            config: DatasetConfig {
                sparsity: 0.0,
                ..config.clone()
            },
            world,
            vocab,
            train,
            comp_ood,
            ana_ood,
        };
        if config.sparsity > 0.0 {
            ds = sparsify(ds, config.sparsity, config.seed)?;
        }
        Ok(ds)
    }

    pub fn functor(&self) -> &FunctorMap {
        &self.world.functor
    }

    pub fn train_of_kind(&self, kind: FactKind) -> impl Iterator<Item = &Fact> {
        self.train.iter().filter(move |f| f.kind() == kind)
    }

    /// Checks the split invariants; used after loading from disk.
    pub fn check_invariants(&self) -> Result<()> {
        let train: HashSet<&Fact> = self.train.iter().collect();
        for f in self.comp_ood.iter().chain(&self.ana_ood) {
            if train.contains(f) {
                return Err(Error::Config(format!("held-out fact {f:?} also in train")));
            }
        }
        for f in &self.comp_ood {
            let parts = f.constituents(&self.world).ok_or_else(|| {
                Error::Config(format!(
                    "compositional fact {f:?} does not follow the world"
                ))
            })?;
            if !parts.iter().all(|p| train.contains(p)) {
                return Err(Error::Config(format!(
                    "held-out fact {f:?} has a constituent missing from train"
                )));
            }
        }
        for f in self
            .ana_ood
            .iter()
            .chain(self.train_of_kind(FactKind::Analogical))
        {
            if self.world.functor.apply(f.source()) != Some(f.target()) {
                return Err(Error::Config(format!(
                    "analogical fact {f:?} disagrees with the functor"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let enc = |facts: &[Fact]| -> Result<Vec<Vec<TokenId>>> {
            facts.iter().map(|f| tokenize(f, &self.vocab)).collect()
        };
        let file = DatasetFile {
            format: DATASET_FORMAT.to_string(),
            config: self.config.clone(),
            vocab: VocabManifest::of(&self.vocab),
            functor: self.world.functor.clone(),
            train: enc(&self.train)?,
            comp_ood: enc(&self.comp_ood)?,
            ana_ood: enc(&self.ana_ood)?,
        };
        let mut s = serde_json::to_string(&file).map_err(|e| Error::json("dataset", e))?;
        s.push('\n');
        Ok(s)
    }

    /// Re-derives the world from the stored config and decodes every split.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile =
            serde_json::from_str(text).map_err(|e| Error::json("dataset", e))?;
        if file.format != DATASET_FORMAT {
            return Err(Error::Config(format!(
                "unsupported dataset format {:?}",
                file.format
            )));
        }
        file.config.validate()?;
        let world = build_world_with(
            file.config.per_category(),
            file.config.relations,
            file.config.seed,
            file.config.functor,
        )?;
        if world.functor != file.functor {
            return Err(Error::Config(
                "stored functor does not match the world derived from the config".into(),
            ));
        }
        let vocab = Vocabulary::for_world(&world);
        if VocabManifest::of(&vocab) != file.vocab {
            return Err(Error::Config("vocabulary manifest mismatch".into()));
        }
        let dec = |seqs: &[Vec<TokenId>]| -> Result<Vec<Fact>> {
            seqs.iter().map(|s| detokenize(s, &vocab)).collect()
        };
        let ds = FactDataset {
            train: dec(&file.train)?,
            comp_ood: dec(&file.comp_ood)?,
            ana_ood: dec(&file.ana_ood)?,
            config: file.config,
            world,
            vocab,
        };
        ds.check_invariants()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the serialized dataset, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

/// Removes a uniform fraction of the atomic training facts, then drops every
/// compositional fact (train or held out) that used a removed edge.
pub fn sparsify(mut ds: FactDataset, remove_ratio: f64, seed: u64) -> Result<FactDataset> {
    check_ratio("sparsity", remove_ratio)?;
    if remove_ratio == 0.0 {
        return Ok(ds);
    }
    let atomic_idx: Vec<usize> = ds
        .train
        .iter()
        .enumerate()
        .filter(|(_, f)| f.kind() == FactKind::Atomic)
        .map(|(i, _)| i)
        .collect();
    let k = held_out_count(remove_ratio, atomic_idx.len());
    let mut rng = stream_rng(seed, STREAM_SPARSIFY);
    let removed: HashSet<Fact> = index::sample(&mut rng, atomic_idx.len(), k)
        .iter()
        .map(|i| ds.train[atomic_idx[i]])
        .collect();

    let world = &ds.world;
    let survives = |f: &Fact| -> bool {
        match f.kind() {
            FactKind::Atomic => !removed.contains(f),
            FactKind::Compositional => f
                .constituents(world)
                .is_some_and(|parts| parts.iter().all(|p| !removed.contains(p))),
            FactKind::Analogical => true,
        }
    };
    let train: Vec<Fact> = ds.train.iter().copied().filter(|f| survives(f)).collect();
    let comp_ood: Vec<Fact> = ds
        .comp_ood
        .iter()
        .copied()
        .filter(|f| survives(f))
        .collect();
    ds.train = train;
    ds.comp_ood = comp_ood;
    ds.config.sparsity = remove_ratio;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct VocabManifest {
    entities: [TokenId; 2],
    relations: [TokenId; 2],
    functor: TokenId,
    size: usize,
}

impl VocabManifest {
    fn of(v: &Vocabulary) -> Self {
        let (e, r) = (v.entity_range(), v.relation_range());
        Self {
            entities: [e.start, e.end],
            relations: [r.start, r.end],
            functor: v.functor_token(),
            size: v.size(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    config: DatasetConfig,
    vocab: VocabManifest,
    functor: FunctorMap,
    train: Vec<Vec<TokenId>>,
    comp_ood: Vec<Vec<TokenId>>,
    ana_ood: Vec<Vec<TokenId>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetConfig {
        DatasetConfig {
            entities: 10,
            relations: 40,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn default_split_sizes() {
        let ds = FactDataset::generate(&DatasetConfig::default()).unwrap();
        assert_eq!(ds.ana_ood.len(), 1);
        assert_eq!(ds.comp_ood.len(), 144);
        assert_eq!(ds.train.len(), 180 + 1440 - 144 + 9);
        assert_eq!(ds.vocab.size(), 10_021);
        ds.check_invariants().unwrap();
    }

    #[test]
    fn zero_comp_ratio_keeps_all_compositional() {
        let cfg = DatasetConfig {
            comp_ood: 0.0,
            ..small(1)
        };
        let ds = FactDataset::generate(&cfg).unwrap();
        assert!(ds.comp_ood.is_empty());
        assert_eq!(
            ds.train_of_kind(FactKind::Compositional).count(),
            2 * 5 * 4 * 3
        );
    }

    #[test]
    fn ratio_out_of_range() {
        for bad in [1.0, -0.1, 1.5] {
            let cfg = DatasetConfig {
                ana_ood: bad,
                ..small(0)
            };
            assert!(matches!(FactDataset::generate(&cfg), Err(Error::Config(_))));
        }
        let ds = FactDataset::generate(&small(0)).unwrap();
        assert!(sparsify(ds, 1.0, 0).is_err());
    }

    #[test]
    fn held_out_rounding() {
        assert_eq!(held_out_count(0.1, 10), 1);
        assert_eq!(held_out_count(0.01, 10), 1);
        assert_eq!(held_out_count(0.0, 10), 0);
        assert_eq!(held_out_count(0.9, 1440), 1296);
        assert_eq!(held_out_count(0.25, 10), 3);
    }

    #[test]
    fn sparsify_identity_and_half() {
        let ds = FactDataset::generate(&DatasetConfig::default()).unwrap();
        let same = sparsify(ds.clone(), 0.0, 3).unwrap();
        assert_eq!(same.train, ds.train);
        let half = sparsify(ds, 0.5, 3).unwrap();
        assert_eq!(half.train_of_kind(FactKind::Atomic).count(), 90);
        half.check_invariants().unwrap();
    }

    #[test]
    fn sparsify_drops_dependent_compositions() {
        let ds = FactDataset::generate(&small(4)).unwrap();
        let before: HashSet<Fact> = ds.train_of_kind(FactKind::Atomic).copied().collect();
        let sparse = sparsify(ds, 0.3, 9).unwrap();
        let after: HashSet<Fact> = sparse.train_of_kind(FactKind::Atomic).copied().collect();
        let removed: Vec<&Fact> = before.difference(&after).collect();
        assert!(!removed.is_empty());
        for f in sparse
            .train_of_kind(FactKind::Compositional)
            .chain(&sparse.comp_ood)
        {
            let [a, b] = f.constituents(&sparse.world).unwrap();
            for r in &removed {
                assert_ne!(&&a, r);
                assert_ne!(&&b, r);
            }
        }
    }

    #[test]
    fn json_round_trip_and_determinism() {
        let cfg = DatasetConfig {
            sparsity: 0.2,
            ..small(7)
        };
        let a = FactDataset::generate(&cfg).unwrap();
        let b = FactDataset::generate(&cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let back = FactDataset::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back.train, a.train);
        assert_eq!(back.comp_ood, a.comp_ood);
        assert_eq!(back.ana_ood, a.ana_ood);
        assert_eq!(back.content_hash().unwrap(), a.content_hash().unwrap());
    }

    #[test]
    fn tampered_json_rejected() {
        let a = FactDataset::generate(&small(2)).unwrap();
        let json = a.to_json().unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let held = v["ana_ood"][0].clone();
        v["train"].as_array_mut().unwrap().push(held);
        assert!(FactDataset::from_json(&v.to_string()).is_err());
    }
}
