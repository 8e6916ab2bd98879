//! Answering the reformulated question from retrieved text.

pub mod aggregate;
pub mod classify;
pub mod pipeline;
pub mod reader;
pub mod retrieve;

pub use aggregate::{mrc_mult, AttentionAggregator, MultRead};
pub use classify::{classify, AnswerClassifier, AnswerVocab, Aggregation, ConcatMlpFusion, Fusion};
pub use pipeline::{answer_pipeline, Mode, Models, PipelineOutput, Reformulation, Settings};
pub use reader::{finetune_reader, mrc_sing, read_span, Context, ReadSpan, Reader};
pub use retrieve::{Bm25Index, Bm25Params, ChainRetriever, RetrievalSource, Retrieved, Retriever};
