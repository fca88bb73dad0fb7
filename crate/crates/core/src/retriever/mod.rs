//! Dense retrieval: the passage index, exact top-K search and the retriever
//! training objectives.

mod index;
mod losses;
mod pretrain;

pub use self::index::{build_index, PassageIndex, RetrievalResult, ScoredPassage};
pub use self::losses::{
    candidate_distribution, kl_regularizer, nll_loss, retriever_finetune_loss, Distribution,
    RetrieverLoss,
};
pub use self::pretrain::{
    build_pretrain_instances, candidate_sets, pretrain, pretrain_loss, pretrain_loss_on_embeddings,
    EmbeddingPretrainLoss, HardNegativeMiner, PretrainConfig, PretrainInstance, PretrainLogEntry,
    PretrainOutput,
};
