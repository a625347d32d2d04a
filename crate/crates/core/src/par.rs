//! Thin switch between rayon and sequential execution.

/// How independent work items are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecutionMode {
    /// `Parallel` only takes effect when the crate is built with the
    /// `parallel` feature.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") {
            self
        } else {
            ExecutionMode::Sequential
        }
    }
}

/// Run two closures, concurrently when possible.
pub fn join<A, B, RA, RB>(mode: ExecutionMode, a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecutionMode::Parallel => rayon::join(a, b),
        _ => (a(), b()),
    }
}

/// Map `f` over `items`, preserving order.
pub fn map<T, R, F>(mode: ExecutionMode, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecutionMode::Parallel => {
            use rayon::prelude::*;
            items.into_par_iter().map(f).collect()
        }
        _ => items.into_iter().map(f).collect(),
    }
}
