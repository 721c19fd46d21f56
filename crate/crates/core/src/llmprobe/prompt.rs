use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::sha256_hex;
use crate::rng::{stream_rng, STREAM_PROMPT};

/// Rendering style of the in-context analogy prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PromptVariant {
    /// `<eN>` markers, letter relations, `~` functor, scrambled second category.
    Scrambled = 1,
    /// As `Scrambled` but the second category is numbered contiguously.
    Contiguous = 2,
    /// Synthetic-task style tokens `<r12>` and `<f>`.
    TaskTokens = 3,
    /// `Scrambled` with the `<e` `>` markers stripped.
    Bare = 4,
}

impl TryFrom<u8> for PromptVariant {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Self::Scrambled,
            2 => Self::Contiguous,
            3 => Self::TaskTokens,
            4 => Self::Bare,
            _ => {
                return Err(Error::Config(format!(
                    "prompt variant {v} is not one of 1..4"
                )))
            }
        })
    }
}

impl From<PromptVariant> for u8 {
    fn from(v: PromptVariant) -> u8 {
        v as u8
    }
}

/// One entity of the prompt. Rows `0..n` are category 1 in role order and
/// rows `n..2n` their functor images in the same order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntity {
    /// Number printed in the marker, e.g. `7` for `<e7>`.
    pub label: u32,
    pub category: u8,
    /// Character ranges `[start, end)` of every complete marker occurrence.
    pub spans: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub variant: PromptVariant,
    pub entities_per_category: usize,
    pub seed: u64,
    pub text: String,
    /// Expected continuation, e.g. `"7"`.
    pub target: String,
    pub entities: Vec<PromptEntity>,
    pub sha256: String,
}

impl PromptSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prompt serializes") + "\n"
    }
}

/// Second-category labels `F(e_1), ..., F(e_n)` of the fixed reference prompts.
fn reference_layout(n: usize) -> Option<Vec<u32>> {
    let n32 = n as u32;
    match n {
        3 => Some(vec![6, 4, 7]),
        4 | 5 | 7 => {
            let mut v = vec![n32 + 2, n32 + 1];
            v.extend((3..=n32).map(|k| n32 + k));
            Some(v)
        }
        _ => None,
    }
}

/// Seeded assignment of `n+1..=2n` to the second category in which the
/// label offset `F(e_k) - k` is not the same for every `k`.
fn shuffled_layout(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = stream_rng(seed, STREAM_PROMPT);
    let mut labels: Vec<u32> = (n as u32 + 1..=2 * n as u32).collect();
    loop {
        labels.shuffle(&mut rng);
        if !has_constant_offset(&labels) {
            return labels;
        }
    }
}

pub(crate) fn has_constant_offset(images: &[u32]) -> bool {
    let offset = |k: usize| images[k] as i64 - (k as i64 + 1);
    (1..images.len()).all(|k| offset(k) == offset(0))
}

/// Category-1 entities queried in the last section; the final one is the
/// incomplete query whose image is the answer.
fn query_order(n: usize) -> Vec<usize> {
    if n == 3 {
        vec![0, 2]
    } else {
        (0..n).collect()
    }
}

struct Writer {
    text: String,
    spans: Vec<Vec<[usize; 2]>>,
}

impl Writer {
    fn push(&mut self, s: &str) {
        self.text.push_str(s);
    }

    fn entity(&mut self, row: usize, marker: &str) {
        let start = self.text.len();
        self.text.push_str(marker);
        self.spans[row].push([start, self.text.len()]);
    }
}

/// Renders a prompt with `entities_per_category` entities in each category.
///
/// Category 1 is a hub `e1` with one relation to each other entity; category
/// 2 repeats that structure on the functor images. The last section lists
/// functor pairs and ends mid-way through the final pair.
pub fn gen_prompt(
    variant: PromptVariant,
    entities_per_category: usize,
    seed: u64,
) -> Result<PromptSpec> {
    let n = entities_per_category;
    if n < 3 {
        return Err(Error::Config(format!(
            "prompts need at least 3 entities per category, got {n}"
        )));
    }
    let uses_letters = variant != PromptVariant::TaskTokens;
    if uses_letters && n - 1 > 26 {
        return Err(Error::Config(format!(
            "{} relations exceed the 26 relation letters",
            n - 1
        )));
    }
    let images: Vec<u32> = match variant {
        PromptVariant::Contiguous => (1..=n as u32).map(|k| n as u32 + k).collect(),
        _ => reference_layout(n).unwrap_or_else(|| shuffled_layout(n, seed)),
    };
    let mut labels: Vec<u32> = (1..=n as u32).collect();
    labels.extend(&images);

    let entity = |label: u32| match variant {
        PromptVariant::Bare => label.to_string(),
        _ => format!("<e{label}>"),
    };
    let relation = |k: usize| match variant {
        PromptVariant::TaskTokens => format!("<r{}{}>", k + 1, k + 2),
        _ => ((b'a' + k as u8) as char).to_string(),
    };
    let functor = match variant {
        PromptVariant::TaskTokens => "<f>",
        _ => "~",
    };

    let mut w = Writer {
        text: String::new(),
        spans: vec![Vec::new(); 2 * n],
    };
    for cat in 0..2 {
        let base = cat * n;
        for k in 1..n {
            if k > 1 {
                w.push(", ");
            }
            w.entity(base, &entity(labels[base]));
            w.push(&relation(k - 1));
            w.entity(base + k, &entity(labels[base + k]));
        }
        w.push(". ");
    }
    let queries = query_order(n);
    for (i, &k) in queries.iter().enumerate() {
        if i > 0 {
            w.push(", ");
        }
        w.entity(k, &entity(labels[k]));
        w.push(functor);
        if i + 1 < queries.len() {
            w.entity(n + k, &entity(labels[n + k]));
        } else if variant != PromptVariant::Bare {
            w.push("<e");
        }
    }
    let last = *queries.last().unwrap();
    let target = labels[n + last].to_string();

    let entities = labels
        .iter()
        .zip(w.spans)
        .enumerate()
        .map(|(row, (&label, spans))| PromptEntity {
            label,
            category: if row < n { 1 } else { 2 },
            spans,
        })
        .collect();
    Ok(PromptSpec {
        variant,
        entities_per_category: n,
        seed,
        sha256: sha256_hex(w.text.as_bytes()),
        text: w.text,
        target,
        entities,
    })
}
