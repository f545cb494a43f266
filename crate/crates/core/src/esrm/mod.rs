//! Exercise representation model: a pooled-embedding text encoder, an image
//! projection into the same space, metadata heads, and the two training loops
//! (multi-modal multi-task pretraining and contrastive fine-tuning).

mod encoder;
mod loss;
mod train;

pub use encoder::{
    embed_text, project_image, Embedding, EncodeCache, EncoderParams, ImageCache, ModelShape,
    Pooling, INIT_SCALE,
};
pub use loss::{
    contrastive_loss, contrastive_with_negatives, cross_entropy, metadata_task_loss,
    ContrastiveOutput, MetadataLoss, NegativesOutput,
};
pub use train::{
    corpus_vocab, embed_all, encode_corpus, encode_exercise, export_embeddings, fine_tune, pretrain,
    pretrain_batch_loss, EncodedExercise, EpochLoss, FineTuneConfig, FineTuneOutcome, FineTuner,
    PretrainConfig, PretrainOutcome, TrainingPair,
};
