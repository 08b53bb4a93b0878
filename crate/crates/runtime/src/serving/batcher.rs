use super::ServingMode;

/// Batch-closing state machine. Continuous mode hands every item out as it
/// arrives; minibatch mode closes a batch at `max_size` items or
/// `max_delay_ms` after its first item, whichever comes first. Time is
/// passed in so the policy can be replayed deterministically.
#[derive(Debug)]
pub struct Batcher<T> {
    mode: ServingMode,
    max_size: usize,
    max_delay_ms: u64,
    pending: Vec<T>,
    opened_at: Option<u64>,
}

impl<T> Batcher<T> {
    pub fn new(mode: ServingMode, max_size: usize, max_delay_ms: u64) -> Self {
        Self {
            mode,
            max_size: max_size.max(1),
            max_delay_ms,
            pending: Vec::new(),
            opened_at: None,
        }
    }

    pub fn push(&mut self, item: T, now_ms: u64) -> Option<Vec<T>> {
        if self.mode == ServingMode::Continuous {
            return Some(vec![item]);
        }
        if self.pending.is_empty() {
            self.opened_at = Some(now_ms);
        }
        self.pending.push(item);
        if self.pending.len() >= self.max_size || self.max_delay_ms == 0 {
            return self.take();
        }
        None
    }

    /// Closes the open batch if its delay has elapsed.
    pub fn poll(&mut self, now_ms: u64) -> Option<Vec<T>> {
        match self.deadline() {
            Some(deadline) if now_ms >= deadline => self.take(),
            _ => None,
        }
    }

    /// When the open batch must close, if one is open.
    pub fn deadline(&self) -> Option<u64> {
        self.opened_at.map(|t| t + self.max_delay_ms)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn take(&mut self) -> Option<Vec<T>> {
        self.opened_at = None;
        if self.pending.is_empty() {
            None
        } else {
            Some(std::mem::take(&mut self.pending))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, MockClock};

    #[test]
    fn continuous_dispatches_immediately() {
        let mut b = Batcher::new(ServingMode::Continuous, 8, 100);
        assert_eq!(b.push(1, 0), Some(vec![1]));
        assert_eq!(b.deadline(), None);
    }

    #[test]
    fn partial_batch_closes_after_delay() {
        let clock = MockClock::new(0);
        let mut b = Batcher::new(ServingMode::Minibatch, 8, 100);
        for i in 0..3 {
            assert_eq!(b.push(i, clock.now_ms()), None);
            clock.advance(1);
        }
        clock.set(99);
        assert_eq!(b.poll(clock.now_ms()), None);
        clock.set(100);
        assert_eq!(b.poll(clock.now_ms()), Some(vec![0, 1, 2]));
        assert_eq!(b.deadline(), None);
    }

    #[test]
    fn back_to_back_requests_split_by_size() {
        let mut b = Batcher::new(ServingMode::Minibatch, 8, 100);
        let mut sizes = Vec::new();
        for i in 0..20 {
            if let Some(batch) = b.push(i, 0) {
                sizes.push(batch.len());
            }
        }
        if let Some(batch) = b.poll(100) {
            sizes.push(batch.len());
        }
        assert_eq!(sizes, [8, 8, 4]);
    }

    #[test]
    fn delay_restarts_with_next_batch() {
        let mut b = Batcher::new(ServingMode::Minibatch, 2, 50);
        b.push('a', 0);
        assert_eq!(b.push('b', 10), Some(vec!['a', 'b']));
        b.push('c', 30);
        assert_eq!(b.deadline(), Some(80));
    }
}
