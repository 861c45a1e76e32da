//! Checkpoints: every named tensor in a flat archive, with the encoder
//! config, head mode and vocabulary in the manifest.

use std::path::Path;

use dpt_core::encoder::{EncoderConfig, EncoderParams, HeadMode};
use dpt_core::graph::ParamSet;
use dpt_core::vocab::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{IoError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    encoder: EncoderConfig,
    head_mode: HeadMode,
    tokens: Vec<String>,
    answers: Vec<String>,
}

pub fn save_checkpoint(stem: &Path, params: &EncoderParams<f32>, vocab: &Vocabulary) -> Result<()> {
    let meta = CheckpointMeta {
        encoder: params.config.clone(),
        head_mode: params.head_mode,
        tokens: vocab.tokens().to_vec(),
        answers: vocab.answers().to_vec(),
    };
    let meta = serde_json::to_value(meta).map_err(|e| IoError::format(stem, e.to_string()))?;
    archive::write_archive(stem, params.tensors.iter(), meta)
}

pub fn load_checkpoint(stem: &Path) -> Result<(EncoderParams<f32>, Vocabulary)> {
    let (tensors, meta) = archive::read_archive(stem)?;
    let json = stem.with_extension("json");
    let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| IoError::format(&json, e.to_string()))?;
    let vocab = Vocabulary::from_parts(meta.tokens, meta.answers)?;
    let mut set = ParamSet::new();
    for (name, m) in &tensors {
        set.insert(name, m.clone());
    }
    meta.encoder.validate()?;
    if vocab.len() != meta.encoder.vocab_size {
        return Err(dpt_core::Error::VocabMismatch(format!(
            "checkpoint vocabulary has {} tokens, encoder expects {}",
            vocab.len(),
            meta.encoder.vocab_size
        ))
        .into());
    }
    Ok((EncoderParams { config: meta.encoder, head_mode: meta.head_mode, tensors: set }, vocab))
}
