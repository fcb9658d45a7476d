//! Budgeted per-(layer, KV head) key/value storage, scoring policies and the
//! eviction engine.

mod cache;
mod evict;
mod policy;
mod score;

pub use cache::{HeadCache, KvCache, KvEntry};
pub use evict::{evict_to_budget, select_keep, EvictionOutcome};
pub use policy::{AttentionAccumulator, EvictionReport, Policy, PolicyKind};
pub use score::{
    score_knorm, score_oracle, score_qfilters, score_random, score_streaming, DROP_SENTINEL,
    KEEP_SENTINEL,
};
