//! Forward/backward pass accounting.

/// Counts full network evaluations (forward) and full reverse traversals
/// (backward). Attacks report these so their cost can be checked against the
/// closed-form complexity of each algorithm.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PassCounter {
    forward: u64,
    backward: u64,
}

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// One full network evaluation.
    pub fn record_forward(&mut self) {
        self.forward += 1;
    }

    /// One full reverse traversal.
    pub fn record_backward(&mut self) {
        self.backward += 1;
    }

    pub fn forward_count(&self) -> u64 {
        self.forward
    }

    pub fn backward_count(&self) -> u64 {
        self.backward
    }

    /// Fold another counter's totals into this one.
    pub fn absorb(&mut self, other: PassCounter) {
        self.forward += other.forward;
        self.backward += other.backward;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_are_monotone() {
        let mut c = PassCounter::new();
        let mut last = (0, 0);
        for _ in 0..5 {
            c.record_forward();
            c.record_backward();
            let now = (c.forward_count(), c.backward_count());
            assert!(now.0 >= last.0 && now.1 >= last.1);
            last = now;
        }
        assert_eq!(last, (5, 5));
    }
}
