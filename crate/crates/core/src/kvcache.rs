//! Per-layer key/value storage and the draft-side eviction policies.
//!
//! The cache has two segments. The committed segment holds K/V for tokens that
//! are part of the output (or the input prefix) and keeps `pos_ids` strictly
//! increasing. The speculative segment holds K/V for drafted tree nodes during
//! one draft/verify iteration; its positions may repeat (siblings share a
//! depth) and it is either committed selectively or discarded.
//!
//! Keys are stored after rotary encoding, so retained entries keep their
//! original positions across every eviction.

use std::sync::Arc;

use crate::error::{bail, Result};

/// Eviction policy applied to the draft model's cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    Full,
    Streaming { sink: usize, recent: usize },
    Retrieval {
        chunk_size: usize,
        top_k: usize,
        frequency: usize,
        /// Leading prefix slots kept next to the retrieved chunks.
        sink: usize,
    },
}

impl CachePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CachePolicy::Full => Ok(()),
            CachePolicy::Streaming { recent, .. } => {
                if recent < 1 {
                    bail!(Parameter, "streaming recent window must be >= 1");
                }
                Ok(())
            }
            CachePolicy::Retrieval {
                chunk_size,
                top_k,
                frequency,
                ..
            } => {
                if chunk_size < 1 || top_k < 1 || frequency < 1 {
                    bail!(
                        Parameter,
                        "retrieval needs chunk_size, top_k, frequency >= 1 (got {chunk_size}, {top_k}, {frequency})"
                    );
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CachePolicy::Full => "full",
            CachePolicy::Streaming { .. } => "streaming",
            CachePolicy::Retrieval { .. } => "retrieval",
        }
    }
}

/// New K/V rows for one layer, token-major: `[rows × n_heads × d_head]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerRows {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Segment {
    layers: Vec<LayerRows>,
    pos_ids: Vec<usize>,
}

impl Segment {
    fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerRows::default(); n_layers],
            pos_ids: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.pos_ids.len()
    }

    fn push(&mut self, rows: &[LayerRows], pos_ids: &[usize]) {
        for (dst, src) in self.layers.iter_mut().zip(rows) {
            dst.keys.extend_from_slice(&src.keys);
            dst.values.extend_from_slice(&src.values);
        }
        self.pos_ids.extend_from_slice(pos_ids);
    }

    /// Keeps the listed slots (ascending) in order.
    fn retain(&mut self, keep: &[usize], row_width: usize) {
        for layer in &mut self.layers {
            layer.keys = gather(&layer.keys, keep, row_width);
            layer.values = gather(&layer.values, keep, row_width);
        }
        self.pos_ids = keep.iter().map(|&i| self.pos_ids[i]).collect();
    }

    fn truncate(&mut self, len: usize, row_width: usize) {
        for layer in &mut self.layers {
            layer.keys.truncate(len * row_width);
            layer.values.truncate(len * row_width);
        }
        self.pos_ids.truncate(len);
    }

    fn clear(&mut self) {
        self.truncate(0, 0);
    }

    /// Copies slots `[start, end)` of `self` onto the end of `dst`.
    fn copy_range_into(&self, start: usize, end: usize, row_width: usize, dst: &mut Segment) {
        for (d, s) in dst.layers.iter_mut().zip(&self.layers) {
            d.keys
                .extend_from_slice(&s.keys[start * row_width..end * row_width]);
            d.values
                .extend_from_slice(&s.values[start * row_width..end * row_width]);
        }
        dst.pos_ids.extend_from_slice(&self.pos_ids[start..end]);
    }
}

fn gather(src: &[f64], keep: &[usize], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(keep.len() * width);
    for &i in keep {
        out.extend_from_slice(&src[i * width..(i + 1) * width]);
    }
    out
}

/// Key/value cache for every layer of one model.
#[derive(Debug, Clone)]
pub struct LayerKVCache {
    n_layers: usize,
    n_heads: usize,
    d_head: usize,
    committed: Segment,
    speculative: Segment,
    /// Number of input-prefix positions; positions below it are prefix.
    prefix_positions: Option<usize>,
    /// Complete input prefix, kept so retrieval can restore any chunk.
    archive: Option<Arc<Segment>>,
}

impl LayerKVCache {
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_head,
            committed: Segment::new(n_layers),
            speculative: Segment::new(n_layers),
            prefix_positions: None,
            archive: None,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    fn row_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Committed slot count.
    pub fn len(&self) -> usize {
        self.committed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.committed.len() == 0
    }

    pub fn pos_ids(&self) -> &[usize] {
        &self.committed.pos_ids
    }

    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.committed.layers[layer].keys
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.committed.layers[layer].values
    }

    pub fn speculative_len(&self) -> usize {
        self.speculative.len()
    }

    pub fn speculative_pos_ids(&self) -> &[usize] {
        &self.speculative.pos_ids
    }

    pub fn speculative_keys(&self, layer: usize) -> &[f64] {
        &self.speculative.layers[layer].keys
    }

    pub fn speculative_values(&self, layer: usize) -> &[f64] {
        &self.speculative.layers[layer].values
    }

    fn check_rows(&self, rows: &[LayerRows], n: usize) -> Result<()> {
        if rows.len() != self.n_layers {
            bail!(
                Dimension,
                "expected rows for {} layers, got {}",
                self.n_layers,
                rows.len()
            );
        }
        let w = n * self.row_width();
        if rows.iter().any(|r| r.keys.len() != w || r.values.len() != w) {
            bail!(Dimension, "each layer needs {w} key and value elements");
        }
        Ok(())
    }

    /// Appends committed rows. Positions must exceed every stored position.
    pub fn append(&mut self, rows: &[LayerRows], pos_ids: &[usize]) -> Result<()> {
        self.check_rows(rows, pos_ids.len())?;
        if !self.speculative.pos_ids.is_empty() {
            bail!(State, "cannot append committed rows while speculation is pending");
        }
        let mut last = self.committed.pos_ids.last().copied();
        for &p in pos_ids {
            if last.is_some_and(|l| p <= l) {
                bail!(Ordering, "position {p} after {}", last.unwrap_or(0));
            }
            last = Some(p);
        }
        self.committed.push(rows, pos_ids);
        Ok(())
    }

    /// Appends rows to the speculative segment; positions are unconstrained.
    pub fn push_speculative(&mut self, rows: &[LayerRows], pos_ids: &[usize]) -> Result<()> {
        self.check_rows(rows, pos_ids.len())?;
        self.speculative.push(rows, pos_ids);
        Ok(())
    }

    /// Moves the listed speculative slots into the committed segment, in the
    /// given order, and drops the rest of the speculation.
    pub fn commit_speculative(&mut self, slots: &[usize]) -> Result<()> {
        if let Some(&bad) = slots.iter().find(|&&s| s >= self.speculative.len()) {
            bail!(Parameter, "speculative slot {bad} out of range");
        }
        let mut last = self.committed.pos_ids.last().copied();
        for &s in slots {
            let p = self.speculative.pos_ids[s];
            if last.is_some_and(|l| p <= l) {
                bail!(Ordering, "committing position {p} after {}", last.unwrap_or(0));
            }
            last = Some(p);
        }
        let w = self.row_width();
        for &s in slots {
            self.speculative
                .copy_range_into(s, s + 1, w, &mut self.committed);
        }
        self.speculative.clear();
        Ok(())
    }

    /// Drops all speculative rows.
    pub fn rollback_speculative(&mut self) {
        self.speculative.clear();
    }

    /// Drops committed slots at and beyond `len`.
    pub fn truncate(&mut self, len: usize) {
        let w = self.row_width();
        self.committed.truncate(len, w);
    }

    /// Marks every current position as input prefix. Later slots are
    /// generated tokens and survive retrieval rebuilds.
    pub fn mark_prefix_end(&mut self) {
        let n = self.committed.pos_ids.last().map_or(0, |p| p + 1);
        self.prefix_positions = Some(n);
    }

    /// Number of input-prefix positions, once marked.
    pub fn prefix_positions(&self) -> Option<usize> {
        self.prefix_positions
    }

    /// First committed slot holding a generated token.
    pub fn generation_boundary(&self) -> usize {
        match self.prefix_positions {
            Some(n) => self.committed.pos_ids.partition_point(|&p| p < n),
            None => self.committed.len(),
        }
    }

    /// Committed slots that belong to the input prefix.
    pub fn prefix_len(&self) -> usize {
        self.generation_boundary()
    }

    fn require_quiescent(&self, what: &str) -> Result<()> {
        if self.speculative.len() > 0 {
            bail!(State, "{what} with pending speculation");
        }
        Ok(())
    }

    /// Keeps the first `sink` slots and the last `recent` of the rest.
    pub fn evict_streaming(&mut self, sink: usize, recent: usize) -> Result<()> {
        self.require_quiescent("streaming eviction")?;
        let len = self.len();
        if len <= sink + recent {
            return Ok(());
        }
        let keep: Vec<usize> = (0..sink).chain(len - recent..len).collect();
        let w = self.row_width();
        self.committed.retain(&keep, w);
        Ok(())
    }

    /// Rebuilds the prefix part of the cache from the selected chunks.
    pub fn rebuild_retrieval(&mut self, selected_chunks: &[usize], chunk_size: usize) -> Result<()> {
        self.rebuild_retrieval_with_sink(selected_chunks, chunk_size, 0)
    }

    /// Prefix becomes `sink` leading positions plus the selected chunks (in
    /// position order); generated slots are kept untouched.
    pub fn rebuild_retrieval_with_sink(
        &mut self,
        selected_chunks: &[usize],
        chunk_size: usize,
        sink: usize,
    ) -> Result<()> {
        self.require_quiescent("retrieval rebuild")?;
        if chunk_size == 0 {
            bail!(Parameter, "chunk_size must be >= 1");
        }
        let Some(prefix) = self.prefix_positions else {
            bail!(State, "prefix end not marked before retrieval rebuild");
        };
        let archive = self.ensure_archive(prefix)?;
        let n_chunks = prefix.div_ceil(chunk_size);
        if let Some(&bad) = selected_chunks.iter().find(|&&c| c >= n_chunks) {
            bail!(Parameter, "chunk {bad} out of range ({n_chunks} chunks)");
        }
        let mut chunks = selected_chunks.to_vec();
        chunks.sort_unstable();
        chunks.dedup();

        let mut keep = vec![false; prefix];
        keep[..sink.min(prefix)].fill(true);
        for c in chunks {
            let end = ((c + 1) * chunk_size).min(prefix);
            keep[c * chunk_size..end].fill(true);
        }

        let w = self.row_width();
        let mut rebuilt = Segment::new(self.n_layers);
        let mut start = None;
        for (i, &k) in keep.iter().chain(std::iter::once(&false)).enumerate() {
            match (k, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    archive.copy_range_into(s, i, w, &mut rebuilt);
                    start = None;
                }
                _ => {}
            }
        }
        let boundary = self.generation_boundary();
        self.committed
            .copy_range_into(boundary, self.committed.len(), w, &mut rebuilt);
        self.committed = rebuilt;
        Ok(())
    }

    fn ensure_archive(&mut self, prefix: usize) -> Result<Arc<Segment>> {
        if let Some(a) = &self.archive {
            return Ok(Arc::clone(a));
        }
        let boundary = self.generation_boundary();
        let complete = boundary == prefix
            && self.committed.pos_ids[..boundary]
                .iter()
                .enumerate()
                .all(|(i, &p)| i == p);
        if !complete {
            bail!(State, "input prefix was evicted before it could be archived");
        }
        let mut seg = Segment::new(self.n_layers);
        self.committed
            .copy_range_into(0, boundary, self.row_width(), &mut seg);
        let seg = Arc::new(seg);
        self.archive = Some(Arc::clone(&seg));
        Ok(seg)
    }

    /// Snapshot the full prefix now so later retrieval rebuilds can restore
    /// any chunk.
    pub fn archive_prefix(&mut self) -> Result<()> {
        let Some(prefix) = self.prefix_positions else {
            bail!(State, "prefix end not marked");
        };
        self.ensure_archive(prefix).map(|_| ())
    }

    /// Checks the structural invariants; used by tests and debug assertions.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.committed.len();
        let w = self.row_width();
        for (l, layer) in self.committed.layers.iter().enumerate() {
            if layer.keys.len() != n * w || layer.values.len() != n * w {
                bail!(Consistency, "layer {l} length differs from pos_ids");
            }
        }
        if self.committed.pos_ids.windows(2).any(|p| p[0] >= p[1]) {
            bail!(Consistency, "committed positions not strictly increasing");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_for(cache: &LayerKVCache, positions: &[usize]) -> Vec<LayerRows> {
        let w = cache.n_heads * cache.d_head;
        (0..cache.n_layers)
            .map(|l| LayerRows {
                keys: positions
                    .iter()
                    .flat_map(|&p| (0..w).map(move |i| (l * 1000 + p * 10 + i) as f64))
                    .collect(),
                values: positions
                    .iter()
                    .flat_map(|&p| (0..w).map(move |i| -((l * 1000 + p * 10 + i) as f64)))
                    .collect(),
            })
            .collect()
    }

    fn filled(n: usize) -> LayerKVCache {
        let mut c = LayerKVCache::new(2, 2, 3);
        let pos: Vec<usize> = (0..n).collect();
        let rows = rows_for(&c, &pos);
        c.append(&rows, &pos).unwrap();
        c
    }

    #[test]
    fn append_lengths_and_positions() {
        let mut c = LayerKVCache::new(1, 1, 2);
        c.append(&rows_for(&c, &[0]), &[0]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.pos_ids(), &[0]);

        let mut c = LayerKVCache::new(1, 1, 2);
        c.append(&rows_for(&c, &[0, 1, 2]), &[0, 1, 2]).unwrap();
        c.append(&rows_for(&c, &[3, 4]), &[3, 4]).unwrap();
        assert_eq!(c.len(), 5);
    }

    #[test]
    fn append_rejects_non_monotone() {
        let mut c = LayerKVCache::new(1, 1, 2);
        c.append(&rows_for(&c, &[7]), &[7]).unwrap();
        let err = c.append(&rows_for(&c, &[4]), &[4]).unwrap_err();
        assert!(matches!(err, crate::Error::Ordering(_)));
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn streaming_examples() {
        let mut c = filled(10);
        c.evict_streaming(2, 3).unwrap();
        assert_eq!(c.pos_ids(), &[0, 1, 7, 8, 9]);
        c.check_invariants().unwrap();
        // Rows moved with their positions.
        assert_eq!(c.keys(1)[2 * 6], (1000 + 7 * 10) as f64);

        let mut c = filled(5);
        c.evict_streaming(2, 3).unwrap();
        assert_eq!(c.pos_ids(), &[0, 1, 2, 3, 4]);

        let mut c = filled(5);
        c.evict_streaming(0, 1).unwrap();
        assert_eq!(c.pos_ids(), &[4]);
    }

    #[test]
    fn retrieval_examples() {
        let mut c = filled(12);
        c.mark_prefix_end();
        c.rebuild_retrieval(&[0, 2], 4).unwrap();
        assert_eq!(c.pos_ids(), &[0, 1, 2, 3, 8, 9, 10, 11]);

        c.rebuild_retrieval(&[0, 1, 2], 4).unwrap();
        let full = filled(12);
        assert_eq!(c.pos_ids(), full.pos_ids());
        assert_eq!(c.keys(0), full.keys(0));
        assert_eq!(c.values(1), full.values(1));

        let mut c = filled(10);
        c.mark_prefix_end();
        c.rebuild_retrieval(&[2], 4).unwrap();
        assert_eq!(c.pos_ids(), &[8, 9]);
        assert!(c.rebuild_retrieval(&[3], 4).is_err());
    }

    #[test]
    fn retrieval_keeps_generated_suffix() {
        let mut c = filled(12);
        c.mark_prefix_end();
        c.append(&rows_for(&c, &[12, 13]), &[12, 13]).unwrap();
        c.rebuild_retrieval(&[1], 4).unwrap();
        assert_eq!(c.pos_ids(), &[4, 5, 6, 7, 12, 13]);
        assert_eq!(c.generation_boundary(), 4);
        c.rebuild_retrieval_with_sink(&[2], 4, 1).unwrap();
        assert_eq!(c.pos_ids(), &[0, 8, 9, 10, 11, 12, 13]);
    }

    #[test]
    fn speculative_commit_and_rollback() {
        let mut c = filled(3);
        let spec_pos = [3, 4, 4, 5];
        c.push_speculative(&rows_for(&c, &spec_pos), &spec_pos).unwrap();
        assert!(c.evict_streaming(1, 1).is_err());
        c.commit_speculative(&[0, 2]).unwrap();
        assert_eq!(c.pos_ids(), &[0, 1, 2, 3, 4]);
        assert_eq!(c.speculative_len(), 0);

        c.push_speculative(&rows_for(&c, &[5, 6]), &[5, 6]).unwrap();
        c.rollback_speculative();
        assert_eq!(c.pos_ids(), &[0, 1, 2, 3, 4]);
        c.push_speculative(&rows_for(&c, &[2]), &[2]).unwrap();
        assert!(c.commit_speculative(&[0]).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(CachePolicy::Streaming { sink: 0, recent: 0 }.validate().is_err());
        assert!(CachePolicy::Retrieval { chunk_size: 32, top_k: 0, frequency: 4, sink: 0 }
            .validate()
            .is_err());
        assert!(CachePolicy::Retrieval { chunk_size: 32, top_k: 32, frequency: 4, sink: 0 }
            .validate()
            .is_ok());
    }
}
