//! Two-class task queue: interactive work always dequeues before precompute
//! work, each class is FIFO, and precompute work is held back while an
//! interactive task is running.

use std::collections::VecDeque;
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    InteractiveDecode,
    PrecomputeEncode,
}

/// Which tasks a consumer accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    /// Only interactive tasks. Keeps one consumer free for requests no
    /// matter how deep the precompute backlog is.
    Interactive,
    Any,
}

#[derive(Debug)]
pub struct Task<T> {
    pub kind: TaskKind,
    pub session_id: u64,
    pub seq: u64,
    pub payload: T,
}

/// A dequeued task. `dequeue_seq` is drawn from the same counter as
/// `Task::seq`, so enqueue and dequeue events are totally ordered.
pub struct Dequeued<T> {
    pub task: Task<T>,
    pub dequeue_seq: u64,
    _running: Option<RunningGuard<T>>,
}

struct State<T> {
    interactive: VecDeque<Task<T>>,
    precompute: VecDeque<Task<T>>,
    next_seq: u64,
    running_interactive: usize,
    closed: bool,
}

impl<T> State<T> {
    fn bump(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }
}

struct Inner<T> {
    state: Mutex<State<T>>,
    ready: Condvar,
}

pub struct TaskQueue<T> {
    inner: Arc<Inner<T>>,
}

impl<T> Clone for TaskQueue<T> {
    fn clone(&self) -> Self {
        TaskQueue { inner: self.inner.clone() }
    }
}

impl<T> Default for TaskQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Marks an interactive task as running until dropped.
struct RunningGuard<T> {
    inner: Arc<Inner<T>>,
}

impl<T> Drop for RunningGuard<T> {
    fn drop(&mut self) {
        let mut s = self.inner.state.lock();
        s.running_interactive -= 1;
        if s.running_interactive == 0 {
            self.inner.ready.notify_all();
        }
    }
}

impl<T> TaskQueue<T> {
    pub fn new() -> Self {
        TaskQueue {
            inner: Arc::new(Inner {
                state: Mutex::new(State {
                    interactive: VecDeque::new(),
                    precompute: VecDeque::new(),
                    next_seq: 0,
                    running_interactive: 0,
                    closed: false,
                }),
                ready: Condvar::new(),
            }),
        }
    }

    /// Enqueues a task and returns its sequence number. Tasks scheduled
    /// after `close` are dropped.
    pub fn schedule(&self, kind: TaskKind, session_id: u64, payload: T) -> Option<u64> {
        let mut s = self.inner.state.lock();
        if s.closed {
            return None;
        }
        let seq = s.bump();
        let task = Task { kind, session_id, seq, payload };
        match kind {
            TaskKind::InteractiveDecode => s.interactive.push_back(task),
            TaskKind::PrecomputeEncode => s.precompute.push_back(task),
        }
        drop(s);
        self.inner.ready.notify_all();
        Some(seq)
    }

    /// Blocks until a task for `lane` is available. `None` once the queue is
    /// closed.
    pub fn next_task(&self, lane: Lane) -> Option<Dequeued<T>> {
        let mut s = self.inner.state.lock();
        loop {
            if s.closed {
                return None;
            }
            if let Some(d) = self.take(&mut s, lane) {
                return Some(d);
            }
            self.inner.ready.wait(&mut s);
        }
    }

    pub fn try_next_task(&self, lane: Lane) -> Option<Dequeued<T>> {
        let mut s = self.inner.state.lock();
        if s.closed {
            return None;
        }
        self.take(&mut s, lane)
    }

    fn take(&self, s: &mut State<T>, lane: Lane) -> Option<Dequeued<T>> {
        if let Some(task) = s.interactive.pop_front() {
            s.running_interactive += 1;
            let dequeue_seq = s.bump();
            let guard = RunningGuard { inner: self.inner.clone() };
            return Some(Dequeued { task, dequeue_seq, _running: Some(guard) });
        }
        if lane == Lane::Any && s.running_interactive == 0 {
            if let Some(task) = s.precompute.pop_front() {
                let dequeue_seq = s.bump();
                return Some(Dequeued { task, dequeue_seq, _running: None });
            }
        }
        None
    }

    /// Removes every pending task matching `pred`. Returns how many.
    pub fn cancel(&self, pred: impl Fn(&Task<T>) -> bool) -> usize {
        let mut s = self.inner.state.lock();
        let before = s.interactive.len() + s.precompute.len();
        s.interactive.retain(|t| !pred(t));
        s.precompute.retain(|t| !pred(t));
        before - s.interactive.len() - s.precompute.len()
    }

    pub fn pending(&self, kind: TaskKind) -> usize {
        let s = self.inner.state.lock();
        match kind {
            TaskKind::InteractiveDecode => s.interactive.len(),
            TaskKind::PrecomputeEncode => s.precompute.len(),
        }
    }

    /// Drops all pending tasks and wakes every consumer.
    pub fn close(&self) {
        let mut s = self.inner.state.lock();
        s.closed = true;
        s.interactive.clear();
        s.precompute.clear();
        drop(s);
        self.inner.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.state.lock().closed
    }
}
