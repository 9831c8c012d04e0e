//! Everything between a parsed query and raw provider output: which keys
//! need values, how they are asked for, and how many tokens that costs.

mod batch;
mod keys;
mod prompt;
mod provider;
mod tokens;

pub use batch::{generate, BatchOutcome, GenerationOptions, GenerationRun};
pub use keys::{all_keys, plan_keys, KeyTuple, PlanMode};
pub(crate) use prompt::csv_row;
pub use prompt::{build_prompt, fewshot_prefix, Prompt, ValueListBlock, NO_EXPLANATION};
pub use provider::{
    invoke_provider, FixtureEntry, FixtureSet, LiveProvider, MeteredProvider, MockProvider,
    Provider, ProviderConfig, ProviderMode, ProviderResponse, API_KEY_ENV, FIXTURE_FORMAT_VERSION,
};
pub use tokens::estimate_tokens;
