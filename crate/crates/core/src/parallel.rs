//! Order-preserving scenario-level parallelism.
//!
//! Results are scattered back by index, so output order (and any reduction
//! over it) is independent of thread scheduling.

/// Map `f` over `items` with up to `jobs` worker threads. `f` receives the
/// item index; the result vector preserves input order.
pub fn parallel_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);

    std::thread::scope(|scope| {
        let f = &f;
        let mut handles = Vec::with_capacity(jobs);
        for worker in 0..jobs {
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut i = worker;
                while i < items.len() {
                    out.push((i, f(i, &items[i])));
                    i += jobs;
                }
                out
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("parallel_map worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let items: Vec<usize> = (0..97).collect();
        let seq = parallel_map(1, &items, |i, &x| i * 1000 + x * x);
        let par = parallel_map(8, &items, |i, &x| i * 1000 + x * x);
        assert_eq!(seq, par);
    }

    #[test]
    fn handles_empty_input() {
        let items: Vec<u32> = Vec::new();
        let out = parallel_map(4, &items, |_, &x| x);
        assert!(out.is_empty());
    }
}
