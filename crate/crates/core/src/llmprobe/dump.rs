use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::sha256_hex;
use crate::metrics::{dirichlet_energy, functor_adjacency, pca_project, MetricRecord, Pca};
use crate::taskgen::{EntityId, FunctorMap};

use super::prompt::PromptSpec;

pub const DUMP_FORMAT: &str = "analogy-hidden-dump/1";
pub const DUMP_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpEntity {
    pub label: String,
    /// Token index ranges `[start, end)` averaged into this entity's row.
    pub token_spans: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpManifest {
    pub format: String,
    pub model: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub entity_count: usize,
    /// Rows of every layer matrix, in order.
    pub entities: Vec<DumpEntity>,
    /// `(category-1 row, category-2 row)` functor pairs.
    pub functor: Vec<[usize; 2]>,
    /// Logit-lens probability of the target's first token at each layer.
    pub logit_lens_prob: Vec<f64>,
    pub prompt_text: String,
    pub prompt_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_indexing: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

/// Per-layer entity hidden states produced by an external model.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenDump {
    pub manifest: DumpManifest,
    /// `num_layers` matrices of shape `(entity_count, hidden_dim)`.
    pub layers: Vec<Array2<f32>>,
}

pub fn layer_file_name(layer: usize) -> String {
    format!("layer_{layer:03}.f32")
}

impl DumpManifest {
    fn validate(&self, path: &Path) -> Result<()> {
        let fail = |m: String| Err(Error::validation(path, m));
        if self.format != DUMP_FORMAT {
            return fail(format!(
                "unknown format {:?}, expected {DUMP_FORMAT:?}",
                self.format
            ));
        }
        if self.num_layers == 0 || self.hidden_dim == 0 {
            return fail("num_layers and hidden_dim must be positive".into());
        }
        if self.entity_count != self.entities.len() {
            return fail(format!(
                "entity_count {} but {} entities listed",
                self.entity_count,
                self.entities.len()
            ));
        }
        if self.logit_lens_prob.len() != self.num_layers {
            return fail(format!(
                "{} logit-lens probabilities for {} layers",
                self.logit_lens_prob.len(),
                self.num_layers
            ));
        }
        if let Some((l, p)) = self
            .logit_lens_prob
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return fail(format!(
                "logit-lens probability {p} at layer {l} is outside [0, 1]"
            ));
        }
        let hash = sha256_hex(self.prompt_text.as_bytes());
        if hash != self.prompt_sha256 {
            return fail(format!(
                "prompt hash mismatch: manifest says {} but the prompt text hashes to {hash}",
                self.prompt_sha256
            ));
        }
        self.functor_map()
            .map_err(|e| Error::validation(path, e.to_string()))?;
        Ok(())
    }

    /// The functor pairs as a map on row indices, category 1 first.
    pub fn functor_map(&self) -> Result<FunctorMap> {
        let n = self.entity_count / 2;
        if self.entity_count % 2 != 0 || self.functor.len() != n {
            return Err(Error::Config(format!(
                "{} functor pairs for {} entities",
                self.functor.len(),
                self.entity_count
            )));
        }
        let mut image = vec![None; n];
        for &[a, b] in &self.functor {
            if a >= n || !(n..2 * n).contains(&b) {
                return Err(Error::Config(format!(
                    "functor pair ({a}, {b}) must map rows 0..{n} onto {n}..{}",
                    2 * n
                )));
            }
            if image[a].replace(EntityId(b as u32)).is_some() {
                return Err(Error::Config(format!("row {a} has two functor images")));
            }
        }
        FunctorMap::new(image.into_iter().map(Option::unwrap).collect())
    }
}

/// Reads and validates a dump directory.
pub fn load_dump(dir: &Path) -> Result<HiddenDump> {
    let mpath = dir.join(DUMP_MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DumpManifest = serde_json::from_str(&text)
        .map_err(|e| Error::validation(&mpath, format!("malformed manifest: {e}")))?;
    manifest.validate(&mpath)?;

    let (rows, cols) = (manifest.entity_count, manifest.hidden_dim);
    let mut layers = Vec::with_capacity(manifest.num_layers);
    for l in 0..manifest.num_layers {
        let path = dir.join(layer_file_name(l));
        if !path.exists() {
            return Err(Error::validation(&path, format!("missing layer {l}")));
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = rows * cols * 4;
        if bytes.len() != expected {
            return Err(Error::validation(
                &path,
                format!(
                    "layer {l} has {} bytes, expected {expected} for a {rows} x {cols} matrix",
                    bytes.len()
                ),
            ));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                &path,
                format!(
                    "layer {l} has a non-finite value at row {}, column {}",
                    i / cols,
                    i % cols
                ),
            ));
        }
        layers.push(Array2::from_shape_vec((rows, cols), data).expect("length checked"));
    }
    let extra = dir.join(layer_file_name(manifest.num_layers));
    if extra.exists() {
        return Err(Error::validation(
            &extra,
            format!(
                "layer file beyond the declared {} layers",
                manifest.num_layers
            ),
        ));
    }
    Ok(HiddenDump { manifest, layers })
}

/// Writes `manifest.json` (two-space indented JSON plus newline) and one
/// little-endian row-major `f32` file per layer.
pub fn write_dump(dump: &HiddenDump, dir: &Path) -> Result<()> {
    let m = &dump.manifest;
    if dump.layers.len() != m.num_layers {
        return Err(Error::Shape(format!(
            "{} layer matrices for {} declared layers",
            dump.layers.len(),
            m.num_layers
        )));
    }
    for (l, layer) in dump.layers.iter().enumerate() {
        if layer.dim() != (m.entity_count, m.hidden_dim) {
            return Err(Error::Shape(format!(
                "layer {l} is {:?}, expected ({}, {})",
                layer.dim(),
                m.entity_count,
                m.hidden_dim
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join(DUMP_MANIFEST);
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::json("dump manifest", e))?;
    std::fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    for (l, layer) in dump.layers.iter().enumerate() {
        let bytes: Vec<u8> = layer.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(layer_file_name(l));
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

impl HiddenDump {
    /// Checks that the dump was produced from `prompt`.
    pub fn check_prompt(&self, prompt: &PromptSpec) -> Result<()> {
        if self.manifest.prompt_sha256 != prompt.sha256 {
            return Err(Error::Config(format!(
                "dump prompt hash {} does not match the prompt spec {}",
                self.manifest.prompt_sha256, prompt.sha256
            )));
        }
        if self.manifest.entity_count != prompt.entities.len() {
            return Err(Error::Config(format!(
                "dump has {} entities, prompt has {}",
                self.manifest.entity_count,
                prompt.entities.len()
            )));
        }
        Ok(())
    }
}

/// Dirichlet energy of every layer, paired with the manifest's logit-lens
/// probability (reported as `prob_id`; the other columns are `NaN`).
pub fn layer_energy_curve(dump: &HiddenDump, functor: &FunctorMap) -> Result<Vec<MetricRecord>> {
    let n = dump.manifest.entity_count;
    if 2 * functor.n() != n {
        return Err(Error::Config(format!(
            "functor over {} pairs does not fit a dump of {n} entities",
            functor.n()
        )));
    }
    let adjacency = functor_adjacency(functor, n)?;
    dump.layers
        .iter()
        .zip(&dump.manifest.logit_lens_prob)
        .enumerate()
        .map(|(l, (layer, &p))| {
            let energy = dirichlet_energy(layer.mapv(f64::from).view(), &adjacency)?;
            Ok(MetricRecord {
                index: l as u64,
                energy,
                attention: f64::NAN,
                parallelism_id: f64::NAN,
                parallelism_ood: f64::NAN,
                prob_id: p,
                prob_ood: f64::NAN,
            })
        })
        .collect()
}

/// PCA of one layer's entity matrix.
pub fn layer_pca(dump: &HiddenDump, layer: usize, k: usize) -> Result<Pca<f64>> {
    let m = dump.layers.get(layer).ok_or_else(|| {
        Error::Index(format!(
            "layer {layer} out of range ({} layers)",
            dump.manifest.num_layers
        ))
    })?;
    pca_project(m.mapv(f64::from).view(), k)
}
