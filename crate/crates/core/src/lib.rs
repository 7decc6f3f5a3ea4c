//! Hierarchical token pruning for video token streams.
//!
//! The pipeline segments a video by inter-frame token overlap, merges
//! temporally static tokens, prunes by instruction relevance, and finally
//! keeps a diverse, relevant subset of each segment by greedy DPP MAP
//! inference, stage by stage through the LLM's layers. [`cost`] accounts
//! the resulting prefill FLOPs.

pub mod budget;
pub mod cost;
pub mod dpp;
pub mod io;
pub mod merge;
pub mod pipeline;
pub mod segmentation;
pub mod synth;
pub mod tensor;

pub use budget::{allocate_ratios, segment_budgets, BudgetVector, SegmentRatios};
pub use cost::{layer_flops, pipeline_flops, FlopsReport, ModelDims};
pub use dpp::{build_kernel, greedy_map, prune_tokens, relevance, DppKernel, Selection};
pub use io::{read_tensor_file, write_tensor_file, Tensor};
pub use merge::{apply_merge, plan_merge, MergePlan};
pub use pipeline::{
    baseline_random, baseline_relevance_only, run_pipeline, token_count_recurrence,
    EmbeddingProvider, PruneReport, PruneSchedule,
};
pub use segmentation::{global_topk_mask, overlap_ratio, segment, similarity_stack, SegmentMap};
pub use synth::{gen_synthetic, SyntheticConfig};
pub use tensor::{cosine_similarity, Embeddings, InstructionEmbedding, TokenGrid, VideoTokens};
