//! Search over auxiliary structures: the token codec, an LSTM controller
//! with masked vocabularies, the geometric-mean reward, PPO updates and the
//! candidate loop.

mod codec;
mod controller;
mod driver;
mod ppo;
mod reward;

pub use codec::{
    decode_tokens, decode_tokens_with, encode_genotype, encode_genotype_with, loc_vocab, op_counts, op_names, role,
    seq_len, vocab, Role, CELL_TOKENS,
};
pub use controller::{Controller, Rollout, Sampled, EMBED_DIM, HIDDEN};
pub use driver::{
    candidate_seed, evaluate_candidate, opstats_csv, search_loop, threads_from_env, EvalContext, OpStats, RewardRecord,
    SearchConfig, SearchOutcome,
};
pub use ppo::{advantages, ppo_update, surrogate, Baseline, PpoConfig, Trajectory};
pub use reward::{compute_reward, metric_score};

#[cfg(test)]
mod tests;
