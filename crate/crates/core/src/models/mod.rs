//! Trainable toy transformers and their training loops.

pub mod lsa;
pub mod optim;
pub mod params;
pub mod train;
pub mod transformer;

pub use lsa::{forward_regression, params_from_construction, regression_loss_and_grad};
pub use optim::{adam_update, Adam, AdamConfig, OptimizerKind};
pub use params::{
    ArchSpec, AttentionKind, Checkpoint, FeedForward, Layer, LayerNorm, ModelIo, ParamKey, TokenIo,
    TransformerParams, UpdateScope,
};
pub use train::{
    demo_loss, gd_finetune, gd_finetune_with, icl_accuracy, icl_pretrain, icl_pretrain_with, icl_sequence,
    FinetuneRun, TaskFamilySpec, TrainConfig,
};
pub use transformer::{backward, forward, forward_distribution, label_loss, logits_at, loss_and_grad, ForwardCache};
