//! Worker-thread budget and an order-preserving parallel map.
//!
//! `CAPFORGE_THREADS` caps the budget; unset or unparsable values fall
//! back to machine parallelism. Output order always follows input order,
//! so fan-out never changes what gets written.

use anyhow::{Context, Result};

pub const THREADS_ENV: &str = "CAPFORGE_THREADS";

fn parse_budget(raw: Option<&str>) -> Option<usize> {
    raw.and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
}

/// Thread budget: `CAPFORGE_THREADS` if set to a positive integer, else
/// machine parallelism, never 0.
pub fn thread_count() -> usize {
    let env = std::env::var(THREADS_ENV).ok();
    parse_budget(env.as_deref()).unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

/// Applies `f` to every item across `threads` workers and returns the
/// results in input order. The first error (by input index) wins, so
/// failures are deterministic too.
pub fn map_ordered<T, U, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items
            .iter()
            .enumerate()
            .map(|(i, item)| f(i, item).with_context(|| format!("item {i}")))
            .collect();
    }
    let mut slots: Vec<Option<Result<U>>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let f = &f;
        for (worker, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
            scope.spawn(move || {
                let base = worker * chunk;
                for (off, slot) in slot_chunk.iter_mut().enumerate() {
                    *slot = Some(f(base + off, &items[base + off]));
                }
            });
        }
    });
    slots
        .into_iter()
        .enumerate()
        .map(|(i, slot)| {
            slot.expect("worker filled every slot")
                .with_context(|| format!("item {i}"))
        })
        .collect()
}
