//! Minimal scoped fork-join helpers.
//!
//! Work is split into contiguous, deterministic ranges so that every output
//! element is owned by exactly one thread regardless of the thread count.

use std::ops::Range;

/// Returns the `part`-th of `parts` contiguous sub-ranges of `0..len`.
pub fn split_range(len: usize, parts: usize, part: usize) -> Range<usize> {
    let parts = parts.max(1);
    let base = len / parts;
    let rem = len % parts;
    let start = part * base + part.min(rem);
    let end = start + base + usize::from(part < rem);
    start.min(len)..end.min(len)
}

/// Runs `f` on `threads` contiguous chunks of `out`, splitting only at
/// multiples of `unit` elements. `f` receives the index of the first unit in
/// its chunk.
pub fn for_each_chunk_mut<F>(threads: usize, out: &mut [f32], unit: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    let unit = unit.max(1);
    let units = out.len() / unit;
    let threads = threads.clamp(1, units.max(1));
    if threads == 1 {
        f(0, out);
        return;
    }
    std::thread::scope(|s| {
        let mut rest = out;
        let mut chunks = Vec::with_capacity(threads);
        for t in 0..threads {
            let r = split_range(units, threads, t);
            let (head, tail) = rest.split_at_mut(r.len() * unit);
            rest = tail;
            chunks.push((r.start, head));
        }
        let f = &f;
        let mut iter = chunks.into_iter();
        let first = iter.next();
        for (start, chunk) in iter {
            s.spawn(move || f(start, chunk));
        }
        if let Some((start, chunk)) = first {
            f(start, chunk);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_covers_everything_once() {
        for len in 0..40 {
            for parts in 1..9 {
                let mut next = 0;
                for p in 0..parts {
                    let r = split_range(len, parts, p);
                    assert_eq!(r.start, next);
                    next = r.end;
                }
                assert_eq!(next, len);
            }
        }
    }

    #[test]
    fn chunks_visit_each_unit() {
        let mut v = vec![0.0f32; 3 * 17];
        for_each_chunk_mut(4, &mut v, 3, |u0, chunk| {
            for (i, x) in chunk.iter_mut().enumerate() {
                *x = (u0 * 3 + i) as f32;
            }
        });
        for (i, x) in v.iter().enumerate() {
            assert_eq!(*x, i as f32);
        }
    }
}
