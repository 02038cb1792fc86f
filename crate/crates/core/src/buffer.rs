//! FIFO buffer of terminal keys for empirical-distribution metrics.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::metrics::EmpiricalDistribution;

pub const DEFAULT_CAPACITY: usize = 200_000;

#[derive(Clone, Debug)]
pub struct FifoBuffer {
    capacity: usize,
    items: VecDeque<Vec<u8>>,
}

impl Default for FifoBuffer {
    fn default() -> Self {
        FifoBuffer::new(DEFAULT_CAPACITY)
    }
}

impl FifoBuffer {
    pub fn new(capacity: usize) -> Self {
        FifoBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, key: Vec<u8>) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(key);
    }

    pub fn push_batch(&mut self, keys: impl IntoIterator<Item = Vec<u8>>) {
        for k in keys {
            self.push(k);
        }
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<u8>> {
        self.items.iter()
    }

    pub fn empirical(&self) -> Result<EmpiricalDistribution> {
        if self.items.is_empty() {
            return Err(Error::Contract("empirical distribution of an empty buffer".into()));
        }
        Ok(EmpiricalDistribution::from_keys(self.items.iter()))
    }
}
