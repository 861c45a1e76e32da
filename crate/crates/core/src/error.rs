use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("question type {qtype} is not constructible on scene {scene_id}")]
    Infeasible { qtype: String, scene_id: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("text of {len} tokens exceeds max_text_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("non-finite values after layer {layer}")]
    NonFinite { layer: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("zero-shot initialization failed, answers without a vocabulary token: {0:?}")]
    MissingAnswerTokens(alloc::vec::Vec<String>),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}
