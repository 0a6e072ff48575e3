//! End-to-end glue: synthetic data, optimizer, training, ablations and
//! masking probes.

mod ablation;
mod catalog;
mod checkpoint;
mod data;
mod optim;
mod train;

pub use catalog::{Attributes, Catalog, ATTRIBUTE_SLOTS, DEFAULT_PALETTE};
pub use data::{
    color_rgb, describe, generate_dataset, images_from_bytes, images_to_bytes, render_attributes, Dataset,
    IdentityRecord, SyntheticSpec, IMAGE_MAGIC, IMAGE_VERSION,
};
pub use optim::{lamb_step, lr_schedule, LambConfig, LambState};
pub use train::{
    batch_objective, build_vocab, evaluate, evaluate_captions, evaluate_direction, init_model, initial_losses, train, Direction, EpochMetrics,
    LossBreakdown, LossWeights, Toggles, TrainBatch, TrainConfig, TrainOutcome,
};
pub use ablation::{
    ablation_tsv, mask_topk_nouns, mask_words, run_ablation, table_rows, top_nouns, AblationGrid, AblationResult,
    AblationRow, MaskedCaptions,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
