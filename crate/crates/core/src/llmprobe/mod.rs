//! In-context analogy prompts for pretrained models and analysis of the
//! per-layer hidden states an external extractor dumps for them.

mod dump;
mod prompt;

pub use dump::{
    layer_energy_curve, layer_file_name, layer_pca, load_dump, write_dump, DumpEntity,
    DumpManifest, HiddenDump, DUMP_FORMAT, DUMP_MANIFEST,
};
pub use prompt::{gen_prompt, PromptEntity, PromptSpec, PromptVariant};
