//! Buddy allocator backing each simulated device's memory pool.
//!
//! The pool manages a power-of-two capacity split into power-of-two blocks no
//! smaller than [`BuddyAllocator::min_block`]. Freeing a block repeatedly
//! merges it with its buddy (the neighbour at `offset ^ size`) while that
//! buddy is free, so a fully drained pool always returns to one block.
//! Allocation is deterministic: the lowest-offset free block of the smallest
//! sufficient order is always chosen.

use std::collections::{BTreeSet, HashMap};

use crate::error::{AllocError, ConfigError};

pub const DEFAULT_CAPACITY: usize = 1 << 26;
pub const DEFAULT_MIN_BLOCK: usize = 256;

/// A live allocation: `size` is the rounded power-of-two block size, which may
/// exceed the requested byte count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub size: usize,
}

#[derive(Debug)]
pub struct BuddyAllocator {
    capacity: usize,
    min_block: usize,
    /// Free block offsets per order; order 0 is `min_block`, each order doubles.
    free: Vec<BTreeSet<usize>>,
    /// Offset -> order of every live allocation.
    live: HashMap<usize, u32>,
    live_bytes: usize,
    peak_live_bytes: usize,
    total_allocated_bytes: u64,
}

impl BuddyAllocator {
    /// Pool with the default minimum block size of 256 bytes.
    pub fn new(capacity: usize) -> Result<Self, ConfigError> {
        Self::with_min_block(capacity, DEFAULT_MIN_BLOCK)
    }

    pub fn with_min_block(capacity: usize, min_block: usize) -> Result<Self, ConfigError> {
        if !capacity.is_power_of_two() {
            return Err(ConfigError::CapacityNotPowerOfTwo(capacity));
        }
        if !min_block.is_power_of_two() || min_block > capacity {
            return Err(ConfigError::InvalidMinBlock);
        }
        let orders = (capacity / min_block).trailing_zeros() as usize + 1;
        let mut free = vec![BTreeSet::new(); orders];
        free[orders - 1].insert(0);
        Ok(BuddyAllocator {
            capacity,
            min_block,
            free,
            live: HashMap::new(),
            live_bytes: 0,
            peak_live_bytes: 0,
            total_allocated_bytes: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn min_block(&self) -> usize {
        self.min_block
    }

    /// Sum of live block sizes.
    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    /// High-water mark of [`live_bytes`](Self::live_bytes).
    pub fn peak_live_bytes(&self) -> usize {
        self.peak_live_bytes
    }

    /// Cumulative block bytes handed out over the pool's lifetime.
    pub fn total_allocated_bytes(&self) -> u64 {
        self.total_allocated_bytes
    }

    fn block_size(&self, order: u32) -> usize {
        self.min_block << order
    }

    fn order_for(&self, bytes: usize) -> Option<u32> {
        if bytes > self.capacity {
            // Also guards next_power_of_two against overflow on huge requests.
            return None;
        }
        // Zero-byte requests still consume a minimum block.
        let size = bytes.max(1).next_power_of_two().max(self.min_block);
        Some((size / self.min_block).trailing_zeros())
    }

    /// Reserves a block of at least `bytes` bytes.
    pub fn allocate(&mut self, bytes: usize) -> Result<Block, AllocError> {
        let order = self.order_for(bytes).ok_or(AllocError::Exhausted { requested: bytes })?;
        // Smallest order with a free block, preferring an exact fit.
        let source = (order as usize..self.free.len())
            .find(|&o| !self.free[o].is_empty())
            .ok_or(AllocError::Exhausted { requested: bytes })? as u32;
        let offset = *self.free[source as usize].iter().next().expect("non-empty order");
        self.free[source as usize].remove(&offset);

        // Split halves off until the block is the requested order, keeping the
        // lower half each time.
        let mut current = source;
        while current > order {
            current -= 1;
            let buddy = offset + self.block_size(current);
            self.free[current as usize].insert(buddy);
        }

        let size = self.block_size(order);
        self.live.insert(offset, order);
        self.live_bytes += size;
        self.peak_live_bytes = self.peak_live_bytes.max(self.live_bytes);
        self.total_allocated_bytes += size as u64;
        Ok(Block { offset, size })
    }

    /// Releases the block at `offset`, merging buddies as far as possible.
    pub fn deallocate(&mut self, offset: usize) -> Result<(), AllocError> {
        let order = self.live.remove(&offset).ok_or(AllocError::UnknownBlock { offset })?;
        self.live_bytes -= self.block_size(order);

        let mut offset = offset;
        let mut order = order;
        while (order as usize) < self.free.len() - 1 {
            let buddy = offset ^ self.block_size(order);
            if !self.free[order as usize].remove(&buddy) {
                break;
            }
            offset = offset.min(buddy);
            order += 1;
        }
        self.free[order as usize].insert(offset);
        Ok(())
    }

    /// Live allocations as `(offset, size)`, sorted by offset.
    pub fn live_blocks(&self) -> Vec<(usize, usize)> {
        let mut blocks: Vec<_> =
            self.live.iter().map(|(&off, &ord)| (off, self.block_size(ord))).collect();
        blocks.sort_unstable();
        blocks
    }

    /// Free blocks as `(offset, size)`, sorted by offset.
    pub fn free_blocks(&self) -> Vec<(usize, usize)> {
        let mut blocks = Vec::new();
        for (order, set) in self.free.iter().enumerate() {
            for &off in set {
                blocks.push((off, self.block_size(order as u32)));
            }
        }
        blocks.sort_unstable();
        blocks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(matches!(
            BuddyAllocator::new(1000),
            Err(ConfigError::CapacityNotPowerOfTwo(1000))
        ));
        assert!(BuddyAllocator::with_min_block(1024, 100).is_err());
        assert!(BuddyAllocator::with_min_block(256, 512).is_err());
    }

    #[test]
    fn rounds_up_to_power_of_two_blocks() {
        let mut pool = BuddyAllocator::new(1 << 20).unwrap();
        let b = pool.allocate(400).unwrap();
        assert_eq!(b.size, 512);
        assert_eq!(b.offset, 0);
        assert_eq!(pool.live_bytes(), 512);
    }

    #[test]
    fn zero_byte_request_consumes_minimum_block() {
        let mut pool = BuddyAllocator::new(1 << 12).unwrap();
        let b = pool.allocate(0).unwrap();
        assert_eq!(b.size, 256);
        let c = pool.allocate(1).unwrap();
        assert_eq!(c.size, 256);
        assert_ne!(b.offset, c.offset);
    }

    #[test]
    fn whole_pool_allocation_then_exhaustion() {
        let mut pool = BuddyAllocator::new(1 << 20).unwrap();
        let b = pool.allocate(1 << 20).unwrap();
        assert_eq!(b, Block { offset: 0, size: 1 << 20 });
        assert!(matches!(pool.allocate(1), Err(AllocError::Exhausted { requested: 1 })));
        pool.deallocate(0).unwrap();
        assert!(pool.allocate(1).is_ok());
    }

    #[test]
    fn oversized_request_is_exhaustion_not_panic() {
        let mut pool = BuddyAllocator::new(1 << 12).unwrap();
        assert!(pool.allocate((1 << 12) + 1).is_err());
        assert!(pool.allocate(usize::MAX).is_err());
    }

    #[test]
    fn free_merges_buddies_back_to_one_block() {
        let mut pool = BuddyAllocator::new(1 << 12).unwrap();
        let a = pool.allocate(256).unwrap();
        let b = pool.allocate(256).unwrap();
        let c = pool.allocate(256).unwrap();
        assert_eq!((a.offset, b.offset, c.offset), (0, 256, 512));

        pool.deallocate(a.offset).unwrap();
        pool.deallocate(b.offset).unwrap();
        // 0 and 256 merged into a 512 block; 768 was already free.
        assert!(pool.free_blocks().contains(&(0, 512)));

        pool.deallocate(c.offset).unwrap();
        assert_eq!(pool.free_blocks(), vec![(0, 1 << 12)]);
        assert_eq!(pool.live_bytes(), 0);
    }

    #[test]
    fn buddy_is_offset_xor_size_not_adjacent_block() {
        let mut pool = BuddyAllocator::new(1 << 12).unwrap();
        let blocks: Vec<_> = (0..4).map(|_| pool.allocate(512).unwrap()).collect();
        // Freeing 512@512 and 512@1024 must NOT merge: they are adjacent but
        // belong to different parents (buddies are 0<->512 and 1024<->1536).
        pool.deallocate(blocks[1].offset).unwrap();
        pool.deallocate(blocks[2].offset).unwrap();
        // The untouched upper half of the pool is still one free 2048 block.
        assert_eq!(pool.free_blocks(), vec![(512, 512), (1024, 512), (2048, 2048)]);
    }

    #[test]
    fn double_free_and_unknown_offset_are_errors() {
        let mut pool = BuddyAllocator::new(1 << 12).unwrap();
        let b = pool.allocate(256).unwrap();
        pool.deallocate(b.offset).unwrap();
        assert!(matches!(pool.deallocate(b.offset), Err(AllocError::UnknownBlock { .. })));
        assert!(matches!(pool.deallocate(12345), Err(AllocError::UnknownBlock { .. })));
    }

    #[test]
    fn lowest_offset_block_is_always_preferred() {
        let mut pool = BuddyAllocator::new(1 << 12).unwrap();
        let blocks: Vec<_> = (0..4).map(|_| pool.allocate(256).unwrap()).collect();
        pool.deallocate(blocks[2].offset).unwrap();
        pool.deallocate(blocks[0].offset).unwrap();
        // Offsets 0 and 512 are free; a new request must take 0.
        assert_eq!(pool.allocate(256).unwrap().offset, 0);
        assert_eq!(pool.allocate(256).unwrap().offset, 512);
    }

    #[test]
    fn stats_track_live_peak_and_total() {
        let mut pool = BuddyAllocator::new(1 << 12).unwrap();
        let a = pool.allocate(300).unwrap(); // 512
        let b = pool.allocate(100).unwrap(); // 256
        assert_eq!(pool.live_bytes(), 768);
        assert_eq!(pool.peak_live_bytes(), 768);
        pool.deallocate(a.offset).unwrap();
        assert_eq!(pool.live_bytes(), 256);
        assert_eq!(pool.peak_live_bytes(), 768);
        pool.deallocate(b.offset).unwrap();
        assert_eq!(pool.total_allocated_bytes(), 768);
    }

    /// Interval oracle: live blocks never overlap, stay in bounds, and are
    /// aligned to their size; identical operation sequences yield identical
    /// placements.
    #[test]
    fn randomized_ops_respect_interval_and_alignment_invariants() {
        use rand::{Rng, SeedableRng};

        fn run(seed: u64) -> Vec<(usize, usize)> {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pool = BuddyAllocator::new(1 << 16).unwrap();
            let mut held: Vec<usize> = Vec::new();
            let mut trace = Vec::new();
            for _ in 0..1000 {
                if held.is_empty() || rng.random_bool(0.6) {
                    let bytes = rng.random_range(0..2048);
                    if let Ok(b) = pool.allocate(bytes) {
                        assert!(b.size >= bytes.max(1).min(256));
                        assert!(b.offset + b.size <= pool.capacity());
                        assert_eq!(b.offset % b.size, 0, "buddy blocks are size-aligned");
                        held.push(b.offset);
                        trace.push((b.offset, b.size));
                    }
                } else {
                    let idx = rng.random_range(0..held.len());
                    pool.deallocate(held.swap_remove(idx)).unwrap();
                }
                let live = pool.live_blocks();
                for pair in live.windows(2) {
                    assert!(pair[0].0 + pair[0].1 <= pair[1].0, "live blocks overlap: {live:?}");
                }
                let free: usize = pool.free_blocks().iter().map(|&(_, s)| s).sum();
                assert_eq!(free + pool.live_bytes(), pool.capacity(), "bytes leaked");
            }
            for off in held {
                pool.deallocate(off).unwrap();
            }
            assert_eq!(pool.free_blocks(), vec![(0, 1 << 16)]);
            trace
        }

        for seed in 0..8 {
            assert_eq!(run(seed), run(seed), "allocation must be deterministic");
        }
    }
}
