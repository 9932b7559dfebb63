//! Self-distilled vision-transformer embeddings and their two downstream
//! adaptations: distribution-calibrated few-shot classification and
//! metric-learning image retrieval.

pub mod codec;
pub mod config;
pub mod data;
pub mod distill;
pub mod fewshot;
pub mod retrieval;
pub mod tensor;
pub mod vit;
