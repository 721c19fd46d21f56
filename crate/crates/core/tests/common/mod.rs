#![allow(dead_code)]

use std::collections::HashSet;

use analogy_core::llmprobe::{DumpEntity, DumpManifest, HiddenDump, DUMP_FORMAT};
use analogy_core::manifest::sha256_hex;
use analogy_core::model::{init_params, loss_and_grads, ModelConfig, ModelParams};
use analogy_core::taskgen::{
    detokenize, enumerate_facts, held_out_count, tokenize, DatasetConfig, Fact, FactDataset,
    FactKind, FunctorSampling,
};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sum over ordered pairs `(i, j)` with `a[i][j] = 1` of `|x_i - x_j|^2`.
pub fn energy_oracle(x: &Array2<f64>, a: &[Vec<bool>]) -> f64 {
    let n = x.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if a[i][j] {
                let mut d2 = 0.0;
                for c in 0..x.ncols() {
                    let d = x[[i, c]] - x[[j, c]];
                    d2 += d * d;
                }
                total += d2;
            }
        }
    }
    total
}

/// Covariance-matrix PCA via nalgebra, with the same sign convention as the
/// library: the largest-magnitude coordinate of each projected column is positive.
pub fn pca_oracle(x: &Array2<f64>, k: usize) -> (Array2<f64>, Vec<f64>) {
    let (m, d) = x.dim();
    let mut xc = DMatrix::<f64>::zeros(m, d);
    for c in 0..d {
        let mean = (0..m).map(|r| x[[r, c]]).sum::<f64>() / m as f64;
        for r in 0..m {
            xc[(r, c)] = x[[r, c]] - mean;
        }
    }
    let cov = xc.transpose() * &xc / (m as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut coords = Array2::zeros((m, k));
    let mut var = Vec::with_capacity(k);
    for (c, &i) in order.iter().take(k).enumerate() {
        var.push(eig.eigenvalues[i]);
        let proj = &xc * eig.eigenvectors.column(i);
        let pivot = proj
            .iter()
            .fold(0.0f64, |b, &v| if v.abs() > b.abs() { v } else { b });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..m {
            coords[[r, c]] = sign * proj[r];
        }
    }
    (coords, var)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, d), |_| {
        // Box-Muller keeps the oracle free of the library's sampling code.
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks every structural property of a generated dataset, returning a
/// description of the first violation.
pub fn check_dataset(ds: &FactDataset) -> Result<(), String> {
    let w = &ds.world;
    let n = w.n();
    let f = &w.functor;

    let images: HashSet<u32> = f.as_slice().iter().map(|e| e.0).collect();
    if images.len() != n
        || images
            .iter()
            .any(|&e| !(n as u32..2 * n as u32).contains(&e))
    {
        return Err("functor is not a bijection onto the second category".into());
    }
    for (a, r, b) in w.e1.edges() {
        let (fa, fb) = (f.apply(a).unwrap(), f.apply(b).unwrap());
        if w.e2.label(fa, fb) != Some(r) {
            return Err(format!("edge {a:?}-{r:?}->{b:?} not transported"));
        }
    }
    if w.e2.edges().count() != w.e1.edges().count() {
        return Err("second category has extra edges".into());
    }
    for table in [&w.e1, &w.e2] {
        for e in table.entities() {
            let out = table.outgoing(e);
            let distinct: HashSet<_> = out.iter().collect();
            if out.len() != n - 1 || distinct.len() != n - 1 {
                return Err(format!(
                    "{e:?} has {} outgoing labels, {} distinct",
                    out.len(),
                    distinct.len()
                ));
            }
            if out.iter().any(|r| r.0 as usize >= w.num_relations) {
                return Err(format!("{e:?} uses a relation outside the vocabulary"));
            }
        }
    }

    let all = enumerate_facts(w, ds.config.include_cycles);
    if all.atomic.len() != 2 * n * (n - 1) {
        return Err(format!("{} atomic facts for n = {n}", all.atomic.len()));
    }
    if all.analogical.len() != n {
        return Err(format!(
            "{} analogical facts for n = {n}",
            all.analogical.len()
        ));
    }
    let comp_expected = if ds.config.include_cycles {
        2 * n * (n - 1) * (n - 1)
    } else {
        2 * n * (n - 1) * (n - 2)
    };
    if all.compositional.len() != comp_expected {
        return Err(format!(
            "{} compositional facts, expected {comp_expected}",
            all.compositional.len()
        ));
    }

    for fact in ds.train.iter().chain(&ds.comp_ood).chain(&ds.ana_ood) {
        if !holds(ds, fact) {
            return Err(format!("{fact:?} is false in the world"));
        }
        let toks = tokenize(fact, &ds.vocab).map_err(|e| e.to_string())?;
        let back = detokenize(&toks, &ds.vocab).map_err(|e| e.to_string())?;
        if back != *fact {
            return Err(format!("{fact:?} round-trips to {back:?}"));
        }
    }

    let train: HashSet<&Fact> = ds.train.iter().collect();
    if train.len() != ds.train.len() {
        return Err("duplicate training facts".into());
    }
    if ds
        .comp_ood
        .iter()
        .any(|x| x.kind() != FactKind::Compositional || train.contains(x))
    {
        return Err("compositional OOD split leaks or has the wrong kind".into());
    }
    if ds
        .ana_ood
        .iter()
        .any(|x| x.kind() != FactKind::Analogical || train.contains(x))
    {
        return Err("analogical OOD split leaks or has the wrong kind".into());
    }
    if ds.config.sparsity > 0.0 {
        return Ok(());
    }
    if ds.comp_ood.len() != held_out_count(ds.config.comp_ood, all.compositional.len()) {
        return Err(format!(
            "{} compositional facts held out",
            ds.comp_ood.len()
        ));
    }
    if ds.ana_ood.len() != held_out_count(ds.config.ana_ood, n) {
        return Err(format!("{} analogical facts held out", ds.ana_ood.len()));
    }
    let kept = |k: FactKind| ds.train.iter().filter(|x| x.kind() == k).count();
    if kept(FactKind::Atomic) != all.atomic.len()
        || kept(FactKind::Compositional) + ds.comp_ood.len() != all.compositional.len()
        || kept(FactKind::Analogical) + ds.ana_ood.len() != n
    {
        return Err("split does not partition the facts".into());
    }
    Ok(())
}

fn holds(ds: &FactDataset, fact: &Fact) -> bool {
    let w = &ds.world;
    match *fact {
        Fact::Atomic {
            source,
            relation,
            target,
        } => w.table_of(source).and_then(|t| t.label(source, target)) == Some(relation),
        Fact::Compositional {
            source,
            first,
            second,
            target,
        } => {
            w.table_of(source).and_then(|t| {
                t.resolve(source, first)
                    .and_then(|mid| t.resolve(mid, second))
            }) == Some(target)
        }
        Fact::Analogical { source, target } => w.functor.apply(source) == Some(target),
    }
}

/// Dump whose paired rows move linearly toward their midpoint: at layer `l`
/// the distance within each pair is scaled by `1 - l / (layers - 1)`.
pub fn collapsing_dump(pairs: usize, dim: usize, layers: usize, seed: u64) -> HiddenDump {
    let mut r = rng(seed);
    let a = gaussian_matrix(&mut r, pairs, dim);
    let b = gaussian_matrix(&mut r, pairs, dim);
    let text = (1..=2 * pairs)
        .map(|i| format!("<e{i}>"))
        .collect::<Vec<_>>()
        .join(" ");
    let entities = (0..2 * pairs)
        .map(|i| DumpEntity {
            label: format!("e{}", i + 1),
            token_spans: vec![[i, i + 1]],
        })
        .collect();
    let mut mats = Vec::new();
    for l in 0..layers {
        let s = 1.0 - l as f64 / (layers - 1) as f64;
        let mut m = Array2::<f32>::zeros((2 * pairs, dim));
        for p in 0..pairs {
            for c in 0..dim {
                let mid = 0.5 * (a[[p, c]] + b[[p, c]]);
                let half = 0.5 * (a[[p, c]] - b[[p, c]]) * s;
                m[[p, c]] = (mid + half) as f32;
                m[[pairs + p, c]] = (mid - half) as f32;
            }
        }
        mats.push(m);
    }
    let manifest = DumpManifest {
        format: DUMP_FORMAT.into(),
        model: "synthetic".into(),
        num_layers: layers,
        hidden_dim: dim,
        entity_count: 2 * pairs,
        entities,
        functor: (0..pairs).map(|p| [p, pairs + p]).collect(),
        logit_lens_prob: (0..layers)
            .map(|l| l as f64 / (layers - 1) as f64)
            .collect(),
        prompt_sha256: sha256_hex(text.as_bytes()),
        prompt_text: text,
        layer_indexing: Some("0 = embedding output".into()),
        notes: None,
    };
    HiddenDump {
        manifest,
        layers: mats,
    }
}

/// A random but feasible dataset configuration.
pub fn random_config(r: &mut ChaCha8Rng) -> DatasetConfig {
    let n = r.random_range(2..=12usize);
    let relations = if r.random_bool(0.5) {
        r.random_range(n - 1..=n + 5)
    } else {
        r.random_range(n..=10_000)
    };
    DatasetConfig {
        entities: 2 * n,
        relations,
        comp_ood: r.random_range(0.0..0.5),
        ana_ood: r.random_range(0.0..0.5),
        sparsity: if r.random_bool(0.25) {
            r.random_range(0.0..0.5)
        } else {
            0.0
        },
        include_cycles: r.random_bool(0.3),
        functor: if r.random_bool(0.8) {
            FunctorSampling::Uniform
        } else {
            FunctorSampling::IdentityOffset
        },
        seed: r.random(),
    }
}

/// Fixed batch of mixed-length sequences over a vocabulary of at least 20.
pub fn gradient_batch() -> (Vec<Vec<u32>>, Vec<u32>) {
    let inputs = vec![
        vec![1, 7],
        vec![3, 12, 9],
        vec![0, 19],
        vec![5, 4, 4],
        vec![2],
    ];
    let targets = vec![4, 11, 0, 19, 6];
    (inputs, targets)
}

pub fn loss_of(p: &ModelParams<f64>, inputs: &[Vec<u32>], targets: &[u32]) -> f64 {
    let refs: Vec<&[u32]> = inputs.iter().map(|v| v.as_slice()).collect();
    loss_and_grads(p, &refs, targets).unwrap().0
}

/// Central-difference oracle over every scalar parameter.
pub fn max_relative_error(cfg: &ModelConfig, seed: u64, h: f64) -> (f64, String) {
    let params: ModelParams<f64> = init_params(cfg, seed).unwrap();
    let (inputs, targets) = gradient_batch();
    let refs: Vec<&[u32]> = inputs.iter().map(|v| v.as_slice()).collect();
    let (_, grads) = loss_and_grads(&params, &refs, &targets).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, _, t)| (n, t.iter().copied().collect()))
        .collect();

    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let original = {
                let mut ts = probe.tensors_mut();
                let t = &mut ts[ti].2;
                let slot = t.iter_mut().nth(i).unwrap();
                let v = *slot;
                *slot = v + h;
                v
            };
            let plus = loss_of(&probe, &inputs, &targets);
            set(&mut probe, ti, i, original - h);
            let minus = loss_of(&probe, &inputs, &targets);
            set(&mut probe, ti, i, original);
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (
                    rel,
                    format!("{name}[{i}]: analytic {g:e} numeric {numeric:e}"),
                );
            }
        }
    }
    worst
}

fn set(p: &mut ModelParams<f64>, ti: usize, i: usize, v: f64) {
    let mut ts = p.tensors_mut();
    *ts[ti].2.iter_mut().nth(i).unwrap() = v;
}
