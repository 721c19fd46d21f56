//! Representation metrics: Dirichlet energy over functor pairs, the
//! functor-to-source attention probe, additive parallelism and PCA.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{last_logits, softmax, ForwardTrace, ModelParams};
use crate::scalar::Scalar;
use crate::taskgen::{tokenize, Fact, FactDataset, FactKind, FunctorMap};

/// Symmetric 0/1 adjacency with zero diagonal, stored as ordered pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    n: usize,
    /// Both orientations of every undirected edge.
    pairs: Vec<(usize, usize)>,
}

impl AdjacencyMatrix {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut pairs = Vec::with_capacity(edges.len() * 2);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Shape(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            if i == j {
                return Err(Error::Config(format!("self loop at {i}")));
            }
            pairs.push((i, j));
            pairs.push((j, i));
        }
        pairs.sort_unstable();
        pairs.dedup();
        Ok(Self { n, pairs })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.pairs.binary_search(&(i, j)).is_ok()
    }

    /// Ordered pairs `(i, j)` with `A_ij = 1`.
    pub fn ordered_pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn to_dense<T: Scalar>(&self) -> Array2<T> {
        let mut a = Array2::zeros((self.n, self.n));
        for &(i, j) in &self.pairs {
            a[[i, j]] = T::one();
        }
        a
    }
}

/// `A[e][F(e)] = A[F(e)][e] = 1` for every category-1 entity `e`.
pub fn functor_adjacency(functor: &FunctorMap, num_entities: usize) -> Result<AdjacencyMatrix> {
    if num_entities != 2 * functor.n() {
        return Err(Error::Shape(format!(
            "functor over {} pairs needs {} entities, got {num_entities}",
            functor.n(),
            2 * functor.n()
        )));
    }
    let edges: Vec<(usize, usize)> = functor
        .pairs()
        .map(|(s, t)| (s.index(), t.index()))
        .collect();
    AdjacencyMatrix::from_edges(num_entities, &edges)
}

/// Where an embedding snapshot came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ToyEmbedding,
    ToyUnembedding,
    LlmLayer,
}

/// Entity vectors at one training step or one layer; row `i` is entity `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSnapshot<T> {
    pub index: u64,
    pub matrix: Array2<T>,
    pub provenance: Provenance,
}

impl<T: Scalar> EmbeddingSnapshot<T> {
    pub fn new(index: u64, matrix: Array2<T>, provenance: Provenance) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Undefined(
                "snapshot contains non-finite values".into(),
            ));
        }
        Ok(Self {
            index,
            matrix,
            provenance,
        })
    }

    /// Entity rows of the token embedding.
    pub fn toy_embedding(params: &ModelParams<T>, num_entities: usize, step: u64) -> Self {
        Self {
            index: step,
            matrix: params.wte.slice(ndarray::s![..num_entities, ..]).to_owned(),
            provenance: Provenance::ToyEmbedding,
        }
    }

    /// Entity columns of the unembedding, as rows.
    pub fn toy_unembedding(params: &ModelParams<T>, num_entities: usize, step: u64) -> Self {
        Self {
            index: step,
            matrix: params
                .w_unembed
                .slice(ndarray::s![.., ..num_entities])
                .t()
                .to_owned(),
            provenance: Provenance::ToyUnembedding,
        }
    }
}

/// `sum_ij A_ij |h_i - h_j|^2` over ordered pairs, so each undirected edge
/// of a symmetric adjacency contributes twice.
pub fn dirichlet_energy<T: Scalar>(
    matrix: ArrayView2<'_, T>,
    adjacency: &AdjacencyMatrix,
) -> Result<T> {
    if matrix.nrows() != adjacency.len() {
        return Err(Error::Shape(format!(
            "{} rows but adjacency over {} nodes",
            matrix.nrows(),
            adjacency.len()
        )));
    }
    let mut energy = T::zero();
    for &(i, j) in adjacency.ordered_pairs() {
        energy += matrix
            .row(i)
            .iter()
            .zip(matrix.row(j))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>();
    }
    Ok(energy)
}

/// Post-softmax weight with the query at `functor_pos` and the key at `src_pos`.
pub fn attention_probe<T: Scalar>(
    trace: &ForwardTrace<T>,
    src_pos: usize,
    functor_pos: usize,
    layer: usize,
    head: usize,
) -> Result<T> {
    let att = trace
        .attention
        .get(layer)
        .ok_or_else(|| Error::Index(format!("layer {layer} out of range")))?;
    let (heads, len, _) = att.dim();
    if head >= heads {
        return Err(Error::Index(format!(
            "head {head} out of range ({heads} heads)"
        )));
    }
    if src_pos >= len || functor_pos >= len {
        return Err(Error::Index(format!(
            "positions ({src_pos}, {functor_pos}) outside sequence of length {len}"
        )));
    }
    if src_pos > functor_pos {
        return Err(Error::Index(format!(
            "source position {src_pos} is after the query position {functor_pos}"
        )));
    }
    Ok(att[[head, functor_pos, src_pos]])
}

/// Cosine between `unemb_tgt - emb_src` and `emb_functor`.
pub fn parallelism<T: Scalar>(
    emb_src: ArrayView1<'_, T>,
    emb_functor: ArrayView1<'_, T>,
    unemb_tgt: ArrayView1<'_, T>,
) -> Result<T> {
    if emb_src.len() != emb_functor.len() || emb_src.len() != unemb_tgt.len() {
        return Err(Error::Shape("parallelism vectors differ in length".into()));
    }
    let disp = &unemb_tgt - &emb_src;
    let (nd, nf) = (disp.dot(&disp).sqrt(), emb_functor.dot(&emb_functor).sqrt());
    if nd == T::zero() || nf == T::zero() {
        return Err(Error::Undefined("cosine with a zero vector".into()));
    }
    let c = disp.dot(&emb_functor) / (nd * nf);
    Ok(c.max(-T::one()).min(T::one()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca<T> {
    /// `(rows, k)` projections of the centered data.
    pub coordinates: Array2<T>,
    /// Sample variance (divisor `rows - 1`) along each component.
    pub explained_variance: Array1<T>,
    /// `(k, d)` unit principal directions; zero rows for null components.
    pub components: Array2<T>,
}

/// Projects centered rows onto the top-`k` principal directions.
///
/// Works through the `rows x rows` Gram matrix, which stays small for
/// entity sets even when `d` is an LLM hidden size. The sign of each
/// component is fixed so its largest-magnitude coordinate is positive.
pub fn pca_project<T: Scalar>(matrix: ArrayView2<'_, T>, k: usize) -> Result<Pca<T>> {
    let (m, d) = matrix.dim();
    if m < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 rows, got {m}")));
    }
    if k == 0 || k > m.min(d) {
        return Err(Error::Config(format!(
            "k = {k} components requested from a {m} x {d} matrix"
        )));
    }
    let mean = matrix.mean_axis(Axis(0)).unwrap();
    let centered = &matrix - &mean;
    let gram = centered.dot(&centered.t());
    let (values, vectors) = symmetric_eigen(gram);

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let top = values[order[0]].max(T::zero());
    let tol = top * T::of(m as f64) * T::epsilon() * T::of(16.0);

    let mut coordinates = Array2::zeros((m, k));
    let mut explained_variance = Array1::zeros(k);
    let mut components = Array2::zeros((k, d));
    for (c, &idx) in order.iter().take(k).enumerate() {
        let lambda = values[idx].max(T::zero());
        explained_variance[c] = lambda / T::of((m - 1) as f64);
        if lambda <= tol {
            continue;
        }
        let sigma = lambda.sqrt();
        let mut u = vectors.column(idx).to_owned();
        let pivot = u.iter().fold(
            T::zero(),
            |best, &v| if v.abs() > best.abs() { v } else { best },
        );
        if pivot < T::zero() {
            u.mapv_inplace(|v| -v);
        }
        coordinates.column_mut(c).assign(&u.mapv(|v| v * sigma));
        components
            .row_mut(c)
            .assign(&centered.t().dot(&u).mapv(|v| v / sigma));
    }
    Ok(Pca {
        coordinates,
        explained_variance,
        components,
    })
}

/// Cyclic Jacobi eigendecomposition; eigenvectors are the columns.
fn symmetric_eigen<T: Scalar>(mut a: Array2<T>) -> (Array1<T>, Array2<T>) {
    let n = a.nrows();
    let mut v = Array2::eye(n);
    let frob = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let tiny = T::epsilon() * frob;
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<T>()
            .sqrt();
        if off <= tiny {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for r in 0..n {
                    let (arp, arq) = (a[[r, p]], a[[r, q]]);
                    a[[r, p]] = c * arp - s * arq;
                    a[[r, q]] = s * arp + c * arq;
                }
                for r in 0..n {
                    let (apr, aqr) = (a[[p, r]], a[[q, r]]);
                    a[[p, r]] = c * apr - s * aqr;
                    a[[q, r]] = s * apr + c * aqr;
                }
                for r in 0..n {
                    let (vrp, vrq) = (v[[r, p]], v[[r, q]]);
                    v[[r, p]] = c * vrp - s * vrq;
                    v[[r, q]] = s * vrp + c * vrq;
                }
            }
        }
    }
    (a.diag().to_owned(), v)
}

/// One row of a metric stream, indexed by training step or by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub index: u64,
    pub energy: f64,
    pub attention: f64,
    pub parallelism_id: f64,
    pub parallelism_ood: f64,
    pub prob_id: f64,
    pub prob_ood: f64,
}

pub const METRIC_COLUMNS: [&str; 6] = [
    "energy",
    "attention",
    "parallelism_id",
    "parallelism_ood",
    "prob_id",
    "prob_ood",
];

/// Writes `records` as CSV whose first column is named `index_name`
/// (`step` or `layer`). Missing values are written as `NaN`.
pub fn write_metric_csv(path: &Path, index_name: &str, records: &[MetricRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(index_name);
    for c in METRIC_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.index,
            r.energy,
            r.attention,
            r.parallelism_id,
            r.parallelism_ood,
            r.prob_id,
            r.prob_ood
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes PCA coordinates, one row per entity, then an `explained_variance` row.
pub fn write_pca_csv<T: Scalar>(path: &Path, pca: &Pca<T>) -> Result<()> {
    let k = pca.explained_variance.len();
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from("label");
    for c in 1..=k {
        body.push_str(&format!(",pc{c}"));
    }
    body.push('\n');
    for (i, row) in pca.coordinates.axis_iter(Axis(0)).enumerate() {
        body.push_str(&format!("e{i}"));
        for v in row {
            body.push_str(&format!(",{v}"));
        }
        body.push('\n');
    }
    body.push_str("explained_variance");
    for v in &pca.explained_variance {
        body.push_str(&format!(",{v}"));
    }
    body.push('\n');
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// All metrics for the toy model at one step.
///
/// Energy is over the entity rows of the token embedding (or of the
/// unembedding when `use_unembedding`). The attention score is averaged over
/// every analogical prompt `(e_s, f)` and over the heads of the first layer.
/// Parallelism and target probability are averaged separately over trained
/// and held-out analogical facts.
pub fn toy_metrics<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &FactDataset,
    step: u64,
    use_unembedding: bool,
) -> Result<MetricRecord> {
    let num_entities = dataset.world.num_entities();
    let snapshot = if use_unembedding {
        EmbeddingSnapshot::toy_unembedding(params, num_entities, step)
    } else {
        EmbeddingSnapshot::toy_embedding(params, num_entities, step)
    };
    let adjacency = functor_adjacency(dataset.functor(), num_entities)?;
    let energy = dirichlet_energy(snapshot.matrix.view(), &adjacency)?.to_f64_lossy();

    let ana_id: Vec<Fact> = dataset
        .train_of_kind(FactKind::Analogical)
        .copied()
        .collect();
    let ana_ood = &dataset.ana_ood;

    let heads = params.config.n_heads;
    let mut attention = Vec::new();
    for fact in ana_id.iter().chain(ana_ood) {
        let tokens = tokenize(fact, &dataset.vocab)?;
        let trace = crate::model::forward(params, &tokens[..2])?;
        for h in 0..heads {
            attention.push(attention_probe(&trace, 0, 1, 0, h)?.to_f64_lossy());
        }
    }

    let functor_tok = dataset.vocab.functor_token() as usize;
    let emb_f = params.wte.row(functor_tok);
    let par = |facts: &[Fact]| -> Vec<f64> {
        facts
            .iter()
            .filter_map(|f| {
                let (s, t) = (f.source().index(), f.target().index());
                parallelism(params.wte.row(s), emb_f, params.w_unembed.column(t))
                    .ok()
                    .map(|v| v.to_f64_lossy())
            })
            .collect()
    };

    let prob = |facts: &[Fact]| -> Result<Vec<f64>> {
        if facts.is_empty() {
            return Ok(Vec::new());
        }
        let toks: Vec<Vec<u32>> = facts
            .iter()
            .map(|f| tokenize(f, &dataset.vocab))
            .collect::<Result<_>>()?;
        let inputs: Vec<&[u32]> = toks.iter().map(|t| &t[..t.len() - 1]).collect();
        let logits = last_logits(params, &inputs)?;
        Ok(logits
            .axis_iter(Axis(0))
            .zip(&toks)
            .map(|(row, t)| softmax(row)[*t.last().unwrap() as usize].to_f64_lossy())
            .collect())
    };

    Ok(MetricRecord {
        index: step,
        energy,
        attention: mean(&attention),
        parallelism_id: mean(&par(&ana_id)),
        parallelism_ood: mean(&par(ana_ood)),
        prob_id: mean(&prob(&ana_id)?),
        prob_ood: mean(&prob(ana_ood)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adjacency_of_single_pair() {
        let f = FunctorMap::identity_offset(1);
        let a = functor_adjacency(&f, 2).unwrap();
        assert_eq!(a.to_dense::<f64>(), array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn adjacency_rows_sum_to_one_and_symmetric() {
        for seed in 0..10 {
            let f = FunctorMap::sample(6, seed);
            let a: Array2<f64> = functor_adjacency(&f, 12).unwrap().to_dense();
            assert_eq!(a, a.t());
            assert!(a.sum_axis(Axis(1)).iter().all(|&s| s == 1.0));
            assert!(a.diag().iter().all(|&x| x == 0.0));
        }
        assert!(functor_adjacency(&FunctorMap::identity_offset(3), 5).is_err());
    }

    #[test]
    fn hand_energy() {
        let a = functor_adjacency(&FunctorMap::identity_offset(1), 2).unwrap();
        let h = array![[0.0, 0.0], [3.0, 4.0]];
        assert_eq!(dirichlet_energy(h.view(), &a).unwrap(), 50.0);
        let same = array![[1.0, 2.0], [1.0, 2.0]];
        assert_eq!(dirichlet_energy(same.view(), &a).unwrap(), 0.0);
        assert!(dirichlet_energy(array![[1.0]].view(), &a).is_err());
    }

    #[test]
    fn parallelism_cases() {
        let s: Array1<f64> = array![1.0, 2.0, 0.0];
        let f: Array1<f64> = array![0.5, -1.0, 2.0];
        let t = &s + &f;
        assert!((parallelism(s.view(), f.view(), t.view()).unwrap() - 1.0).abs() < 1e-12);
        let orth = &s + &array![2.0, 1.0, 0.0];
        assert!(parallelism(s.view(), f.view(), orth.view()).unwrap().abs() < 1e-12);
        let scaled = f.mapv(|v| v * 7.5);
        let a = parallelism(s.view(), f.view(), orth.view()).unwrap();
        let b = parallelism(s.view(), scaled.view(), orth.view()).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(
            parallelism(s.view(), f.view(), s.view()),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn collinear_points_have_one_component() {
        let x: Array2<f64> = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [-1.0, -2.0]];
        let p = pca_project(x.view(), 2).unwrap();
        let total = p.explained_variance.sum();
        assert!((p.explained_variance[0] / total - 1.0).abs() < 1e-12);
        assert!(pca_project(x.view(), 3).is_err());
        assert!(pca_project(array![[1.0f64, 2.0]].view(), 1).is_err());
    }

    #[test]
    fn sign_convention() {
        let x: Array2<f64> = array![
            [0.0, 0.0, 1.0],
            [5.0, 0.0, 0.0],
            [-1.0, 1.0, 0.0],
            [0.5, 0.2, -0.3]
        ];
        let p = pca_project(x.view(), 3).unwrap();
        for c in 0..3 {
            let col = p.coordinates.column(c);
            let pivot = col
                .iter()
                .fold(0.0f64, |b, &v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
        let shifted = &x + &array![10.0, -3.0, 2.0];
        let q = pca_project(shifted.view(), 3).unwrap();
        assert!(p
            .coordinates
            .iter()
            .zip(&q.coordinates)
            .all(|(a, b)| (a - b).abs() < 1e-9));
    }
}
