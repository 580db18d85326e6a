//! Dataset files, checkpoints and run outputs.

pub mod checkpoint;
pub mod jsonl;
pub mod metrics;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use jsonl::{load_jsonl_dataset, write_jsonl_dataset};
pub use metrics::{emit_aggregate, emit_embeddings, emit_metrics};
