//! Post-hoc check of a concurrent queue run. Enqueue and dequeue events draw
//! from one counter, so an inversion is a precompute dequeue at stamp `d`
//! while some interactive task with `seq < d` was dequeued after `d`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volseg_server::queue::{Lane, TaskKind, TaskQueue};

#[derive(Debug, Clone, Copy)]
pub struct Record {
    pub kind: TaskKind,
    pub seq: u64,
    pub dequeued: u64,
}

pub fn check(records: &[Record], total: usize) -> Result<(), String> {
    if records.len() != total {
        return Err(format!("{} of {total} tasks dequeued", records.len()));
    }
    let mut by_dequeue = records.to_vec();
    by_dequeue.sort_by_key(|r| r.dequeued);
    let mut seqs: Vec<u64> = records.iter().map(|r| r.seq).collect();
    seqs.sort_unstable();
    seqs.dedup();
    if seqs.len() != total {
        return Err("a task was dequeued twice".into());
    }
    for kind in [TaskKind::InteractiveDecode, TaskKind::PrecomputeEncode] {
        let order: Vec<u64> = by_dequeue.iter().filter(|r| r.kind == kind).map(|r| r.seq).collect();
        if order.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("{kind:?} tasks left out of FIFO order"));
        }
    }
    // interactive tasks by enqueue time, with their dequeue stamps
    let mut interactive: Vec<(u64, u64)> =
        records.iter().filter(|r| r.kind == TaskKind::InteractiveDecode).map(|r| (r.seq, r.dequeued)).collect();
    interactive.sort_unstable();
    for p in records.iter().filter(|r| r.kind == TaskKind::PrecomputeEncode) {
        let pending = interactive.iter().take_while(|&&(seq, _)| seq < p.dequeued).any(|&(_, deq)| deq > p.dequeued);
        if pending {
            return Err(format!("precompute task {} dequeued at {} with interactive work pending", p.seq, p.dequeued));
        }
    }
    Ok(())
}

/// Two producers and three consumers (one interactive-only) race over
/// `total` randomly typed tasks.
pub fn concurrent_trial(seed: u64, total: usize) -> Result<(), String> {
    let q: TaskQueue<u64> = TaskQueue::new();
    let records = Arc::new(Mutex::new(Vec::with_capacity(total)));
    let consumed = Arc::new(AtomicUsize::new(0));
    let mut handles = Vec::new();
    for (i, lane) in [Lane::Interactive, Lane::Any, Lane::Any].into_iter().enumerate() {
        let (q, records, consumed) = (q.clone(), records.clone(), consumed.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x100 + i as u64));
        handles.push(thread::spawn(move || {
            while let Some(d) = q.next_task(lane) {
                records.lock().push(Record { kind: d.task.kind, seq: d.task.seq, dequeued: d.dequeue_seq });
                for _ in 0..rng.random_range(0..3) {
                    thread::yield_now();
                }
                drop(d);
                if consumed.fetch_add(1, Ordering::AcqRel) + 1 == total {
                    q.close();
                }
            }
        }));
    }
    let per_producer = [total / 2, total - total / 2];
    let producers: Vec<_> = per_producer
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let q = q.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            thread::spawn(move || {
                for k in 0..n {
                    let kind =
                        if rng.random_bool(0.3) { TaskKind::InteractiveDecode } else { TaskKind::PrecomputeEncode };
                    q.schedule(kind, i as u64, k as u64);
                    if rng.random_bool(0.2) {
                        thread::yield_now();
                    }
                }
            })
        })
        .collect();
    for p in producers {
        p.join().map_err(|_| "producer panicked".to_string())?;
    }
    if total == 0 {
        q.close();
    }
    for h in handles {
        h.join().map_err(|_| "consumer panicked".to_string())?;
    }
    let records = records.lock().clone();
    check(&records, total)
}
