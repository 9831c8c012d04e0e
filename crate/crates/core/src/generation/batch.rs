//! Batched, concurrent generation with a single split-in-half retry.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::catalog::VirtualTableSpec;
use crate::error::{Error, Result};
use crate::generation::{build_prompt, estimate_tokens, KeyTuple, Provider, ProviderResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationOptions {
    pub k: usize,
    pub batch_size: usize,
    pub concurrency: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            k: 0,
            batch_size: 20,
            concurrency: 4,
        }
    }
}

/// One provider request and its response.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub targets: Vec<KeyTuple>,
    pub prompt_hash: String,
    pub k: usize,
    pub response: ProviderResponse,
    pub input_tokens_estimated: usize,
    pub output_tokens_estimated: usize,
}

impl BatchOutcome {
    /// Truncated responses are kept for cost accounting only.
    pub fn usable(&self) -> bool {
        !self.response.truncated
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationRun {
    /// Every request made, in key order.
    pub outcomes: Vec<BatchOutcome>,
    /// Keys whose responses were still truncated after the retry.
    pub failed_keys: Vec<KeyTuple>,
}

impl GenerationRun {
    pub fn invocations(&self) -> usize {
        self.outcomes.len()
    }
}

/// Generates values for `keys` in sorted batches of `opts.batch_size`.
///
/// A batch that fails with a transport error or comes back truncated is
/// retried once as two halves. A half that is still truncated has its keys
/// reported in `failed_keys`; a transport error on the retry, and any other
/// error, fails the whole call.
pub fn generate(
    spec: &VirtualTableSpec,
    keys: &[KeyTuple],
    provider: &dyn Provider,
    opts: GenerationOptions,
) -> Result<GenerationRun> {
    let mut keys = keys.to_vec();
    keys.sort();
    keys.dedup();
    if keys.is_empty() {
        return Ok(GenerationRun::default());
    }
    // Fail on an oversized k before any request goes out.
    build_prompt(spec, &keys[..1], opts.k)?;

    let batches: Vec<&[KeyTuple]> = keys.chunks(opts.batch_size.max(1)).collect();
    let slots: Vec<Mutex<Option<Result<BatchResult>>>> =
        batches.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = opts.concurrency.clamp(1, batches.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(batch) = batches.get(i) else { break };
                let result = run_batch(spec, batch, provider, opts.k);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });

    let mut run = GenerationRun::default();
    for slot in slots {
        let result = slot.into_inner().unwrap().expect("every batch ran");
        let BatchResult { outcomes, failed } = result?;
        run.outcomes.extend(outcomes);
        run.failed_keys.extend(failed);
    }
    Ok(run)
}

struct BatchResult {
    outcomes: Vec<BatchOutcome>,
    failed: Vec<KeyTuple>,
}

fn request(
    spec: &VirtualTableSpec,
    targets: &[KeyTuple],
    provider: &dyn Provider,
    k: usize,
) -> (Result<ProviderResponse>, String, usize) {
    let prompt = match build_prompt(spec, targets, k) {
        Ok(p) => p,
        Err(e) => return (Err(e), String::new(), 0),
    };
    let rendered = prompt.render();
    (provider.complete(&prompt), prompt.hash(), estimate_tokens(&rendered))
}

fn outcome(targets: &[KeyTuple], hash: String, k: usize, input_est: usize, response: ProviderResponse) -> BatchOutcome {
    BatchOutcome {
        targets: targets.to_vec(),
        prompt_hash: hash,
        k,
        output_tokens_estimated: estimate_tokens(&response.raw_text),
        input_tokens_estimated: input_est,
        response,
    }
}

fn run_batch(spec: &VirtualTableSpec, batch: &[KeyTuple], provider: &dyn Provider, k: usize) -> Result<BatchResult> {
    let mut result = BatchResult {
        outcomes: Vec::new(),
        failed: Vec::new(),
    };
    let (first, hash, est) = request(spec, batch, provider, k);
    match first {
        Ok(r) if !r.truncated => {
            result.outcomes.push(outcome(batch, hash, k, est, r));
            return Ok(result);
        }
        Ok(r) => {
            tracing::warn!(spec = %spec.name, keys = batch.len(), "truncated response, retrying in halves");
            result.outcomes.push(outcome(batch, hash, k, est, r));
        }
        Err(Error::Transport(msg)) => {
            tracing::warn!(spec = %spec.name, error = %msg, "transport failure, retrying in halves");
        }
        Err(e) => return Err(e),
    }

    let mid = batch.len().div_ceil(2);
    let halves: Vec<&[KeyTuple]> = if batch.len() > 1 {
        vec![&batch[..mid], &batch[mid..]]
    } else {
        vec![batch]
    };
    for half in halves {
        let (retry, hash, est) = request(spec, half, provider, k);
        let r = retry?;
        if r.truncated {
            tracing::warn!(spec = %spec.name, keys = half.len(), "still truncated, marking keys failed");
            result.failed.extend_from_slice(half);
        }
        result.outcomes.push(outcome(half, hash, k, est, r));
    }
    Ok(result)
}
