//! Streaming enumeration of set partitions and subsets of measurement
//! indices.
//!
//! Partitions are generated as restricted growth strings (RGS): element `i`
//! is labelled with a block number no larger than one plus the largest label
//! used by elements `0..i`. Labels therefore appear in order of the smallest
//! element of each block, which is exactly the canonical block order, and the
//! enumeration visits partitions in lexicographic RGS order. Only the current
//! string and per-block counts are kept, so memory is `O(m)` regardless of
//! the Bell number.
//!
//! Block-size and block-count limits are enforced while advancing, so pruned
//! subtrees are never visited.

use crate::error::{Error, Result};

/// A partition of `{0, …, m-1}` in canonical form: each block ascending,
/// blocks ordered by their smallest element.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
}

impl Partition {
    /// Builds a partition from arbitrary disjoint blocks, putting it in
    /// canonical form. Fails unless the blocks cover `0..m` exactly once.
    pub fn from_blocks(mut blocks: Vec<Vec<usize>>) -> Result<Self> {
        blocks.retain(|b| !b.is_empty());
        for b in &mut blocks {
            b.sort_unstable();
        }
        blocks.sort_by_key(|b| b[0]);
        let m: usize = blocks.iter().map(Vec::len).sum();
        let mut seen = vec![false; m];
        for &i in blocks.iter().flatten() {
            if i >= m || seen[i] {
                return Err(Error::Range(format!(
                    "blocks do not partition 0..{m}: index {i} repeated or out of range"
                )));
            }
            seen[i] = true;
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    /// Number of blocks, `|π|`.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Number of partitioned elements.
    pub fn num_elements(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn largest_block(&self) -> usize {
        self.blocks.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Checks every canonical-form invariant for a partition of `0..m`.
    pub fn is_canonical(&self, m: usize) -> bool {
        let mut seen = vec![false; m];
        let mut last_min = None;
        for b in &self.blocks {
            if b.is_empty() || !b.windows(2).all(|w| w[0] < w[1]) {
                return false;
            }
            if last_min.is_some_and(|prev| prev >= b[0]) {
                return false;
            }
            last_min = Some(b[0]);
            for &i in b {
                if i >= m || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Relabels every element `i` as `labels[i]`, e.g. to lift a partition of
    /// `0..|W|` to the measurement indices held in `W`.
    pub fn relabel(&self, labels: &[usize]) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .map(|b| b.iter().map(|&i| labels[i]).collect())
            .collect()
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{")?;
        for (k, b) in self.blocks.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{{")?;
            for (j, i) in b.iter().enumerate() {
                if j > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{i}")?;
            }
            write!(f, "}}")?;
        }
        write!(f, "}}")
    }
}

/// Streaming partition enumerator; see [`partitions`].
#[derive(Debug, Clone)]
pub struct Partitions {
    m: usize,
    max_block: usize,
    max_blocks: usize,
    rgs: Vec<usize>,
    prefix_max: Vec<usize>,
    counts: Vec<usize>,
    state: State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Fresh,
    Running,
    Done,
}

/// Enumerates every partition of `{0, …, m-1}` exactly once, in canonical
/// form, optionally restricted to blocks of at most `max_block` elements.
///
/// `m = 0` yields the single partition with no blocks.
///
/// # Panics
///
/// If `max_block == Some(0)`.
pub fn partitions(m: usize, max_block: Option<usize>) -> Partitions {
    if let Some(k) = max_block {
        assert!(k >= 1, "max_block must be at least 1");
    }
    Partitions {
        m,
        max_block: max_block.unwrap_or(m).min(m).max(1),
        max_blocks: m,
        rgs: vec![0; m],
        prefix_max: vec![0; m],
        counts: vec![0; m],
        state: State::Fresh,
    }
}

impl Partitions {
    /// Further restricts the stream to partitions with at most `k` blocks.
    pub fn max_blocks(mut self, k: usize) -> Self {
        assert_eq!(self.state, State::Fresh, "limits must be set before iterating");
        self.max_blocks = k.min(self.m);
        self
    }

    fn feasible(&self) -> bool {
        self.max_blocks.saturating_mul(self.max_block) >= self.m
    }

    /// Assigns positions `start..m` the smallest admissible labels.
    fn fill(&mut self, start: usize) {
        for j in start..self.m {
            let hi = if j == 0 {
                0
            } else {
                (self.prefix_max[j - 1] + 1).min(self.max_blocks - 1)
            };
            // Free capacity equals max_blocks * max_block - j >= m - j, so a
            // label with room always exists.
            let v = (0..=hi)
                .find(|&v| self.counts[v] < self.max_block)
                .expect("capacity checked up front");
            self.rgs[j] = v;
            self.counts[v] += 1;
            self.prefix_max[j] = if j == 0 { v } else { self.prefix_max[j - 1].max(v) };
        }
    }

    fn advance(&mut self) -> bool {
        for i in (1..self.m).rev() {
            let cur = self.rgs[i];
            self.counts[cur] -= 1;
            let hi = (self.prefix_max[i - 1] + 1).min(self.max_blocks - 1);
            if let Some(v) = (cur + 1..=hi).find(|&v| self.counts[v] < self.max_block) {
                self.rgs[i] = v;
                self.counts[v] += 1;
                self.prefix_max[i] = self.prefix_max[i - 1].max(v);
                self.fill(i + 1);
                return true;
            }
        }
        false
    }

    fn current(&self) -> Partition {
        if self.m == 0 {
            return Partition { blocks: Vec::new() };
        }
        let mut blocks = vec![Vec::new(); self.prefix_max[self.m - 1] + 1];
        for (i, &b) in self.rgs.iter().enumerate() {
            blocks[b].push(i);
        }
        Partition { blocks }
    }

    /// The restricted growth string of the most recently yielded partition.
    pub fn rgs(&self) -> &[usize] {
        &self.rgs
    }
}

impl Iterator for Partitions {
    type Item = Partition;

    fn next(&mut self) -> Option<Partition> {
        match self.state {
            State::Done => None,
            State::Fresh => {
                if self.m > 0 && !self.feasible() {
                    self.state = State::Done;
                    return None;
                }
                self.fill(0);
                self.state = if self.m == 0 { State::Done } else { State::Running };
                Some(self.current())
            }
            State::Running => {
                if self.advance() {
                    Some(self.current())
                } else {
                    self.state = State::Done;
                    None
                }
            }
        }
    }
}

/// A split of `{0, …, m-1}` into a kept subset `W` and its complement.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubsetSplit {
    pub mask: u64,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Streaming subset enumerator; see [`subsets`].
#[derive(Debug, Clone)]
pub struct Subsets {
    m: usize,
    next_mask: u64,
    end: u64,
}

/// Enumerates all `2^m` subset splits in increasing order of the kept-set
/// bitmask (bit `i` set means index `i` is kept).
///
/// # Panics
///
/// If `m > 63`.
pub fn subsets(m: usize) -> Subsets {
    assert!(m <= 63, "subset enumeration limited to m <= 63");
    Subsets {
        m,
        next_mask: 0,
        end: 1u64 << m,
    }
}

impl Iterator for Subsets {
    type Item = SubsetSplit;

    fn next(&mut self) -> Option<SubsetSplit> {
        if self.next_mask >= self.end {
            return None;
        }
        let mask = self.next_mask;
        self.next_mask += 1;
        let (kept, dropped) = (0..self.m).partition(|&i| mask >> i & 1 == 1);
        Some(SubsetSplit { mask, kept, dropped })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.end - self.next_mask) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Subsets {}

/// Bell number `B(m)` from the Bell triangle. Defined for `m <= 20`.
pub fn bell(m: usize) -> Result<u64> {
    if m > 20 {
        return Err(Error::Range(format!("bell({m}) not supported; m must be <= 20")));
    }
    let mut row = vec![1u64];
    for _ in 0..m {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().expect("rows are never empty"));
        for &x in &row {
            let prev = *next.last().expect("seeded above");
            next.push(prev.checked_add(x).ok_or_else(|| Error::Range("bell overflow".into()))?);
        }
        row = next;
    }
    Ok(row[0])
}
