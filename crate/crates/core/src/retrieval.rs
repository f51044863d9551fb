//! Cross-model retrieval: rank fixed-size chunks of the input prefix by the
//! target model's last-layer attention and keep only the best ones in the
//! draft cache.

use crate::error::{bail, Result};
use crate::kvcache::LayerKVCache;

/// Mean score of each `chunk_size` block of `s`; the trailing partial block
/// is averaged over its own length.
pub fn chunk_scores(s: &[f64], chunk_size: usize) -> Result<Vec<f64>> {
    if s.is_empty() {
        bail!(Parameter, "empty score vector");
    }
    if chunk_size == 0 {
        bail!(Parameter, "chunk_size must be >= 1");
    }
    Ok(s.chunks(chunk_size)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect())
}

/// Indices of the `top_k` largest scores in ascending index order. Equal
/// scores prefer the lower index.
pub fn select_top_k(scores: &[f64], top_k: usize) -> Result<Vec<usize>> {
    if top_k == 0 {
        bail!(Parameter, "top_k must be >= 1");
    }
    if scores.iter().any(|s| s.is_nan()) {
        bail!(Parameter, "NaN chunk score");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower indices first among ties
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(top_k);
    idx.sort_unstable();
    Ok(idx)
}

/// Update schedule and last decision of the retrieval controller.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalState {
    pub chunk_size: usize,
    pub top_k: usize,
    pub frequency: usize,
    /// Leading prefix slots always kept (0 keeps only the chunks).
    pub sink: usize,
    pub steps_since_update: usize,
    pub last_scores: Option<Vec<f64>>,
    pub last_selection: Vec<usize>,
    pub updates: usize,
}

impl RetrievalState {
    pub fn new(chunk_size: usize, top_k: usize, frequency: usize) -> Result<Self> {
        if chunk_size == 0 || top_k == 0 || frequency == 0 {
            bail!(Parameter, "chunk_size, top_k and frequency must be >= 1");
        }
        Ok(Self {
            chunk_size,
            top_k,
            frequency,
            sink: 0,
            steps_since_update: 0,
            last_scores: None,
            last_selection: Vec::new(),
            updates: 0,
        })
    }

    pub fn with_sink(mut self, sink: usize) -> Self {
        self.sink = sink;
        self
    }

    /// Whether the next call to [`maybe_update`](Self::maybe_update) will
    /// rebuild the cache.
    pub fn due(&self) -> bool {
        self.updates == 0 || self.steps_since_update + 1 >= self.frequency
    }

    /// Runs one scheduling tick. On an update tick, `s` (a distribution over
    /// the prefix positions) ranks the chunks and the draft cache is rebuilt
    /// from the winners. Returns whether an update happened.
    pub fn maybe_update(&mut self, s: Option<&[f64]>, cache: &mut LayerKVCache) -> Result<bool> {
        if !self.due() {
            self.steps_since_update += 1;
            return Ok(false);
        }
        let Some(s) = s else {
            bail!(State, "retrieval update without attention scores");
        };
        let prefix = cache.prefix_positions().unwrap_or(0);
        if s.len() != prefix {
            bail!(Dimension, "score vector covers {} positions, prefix has {prefix}", s.len());
        }
        let scores = chunk_scores(s, self.chunk_size)?;
        let selection = select_top_k(&scores, self.top_k)?;
        cache.rebuild_retrieval_with_sink(&selection, self.chunk_size, self.sink)?;
        self.last_scores = Some(s.to_vec());
        self.last_selection = selection;
        self.steps_since_update = 0;
        self.updates += 1;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::LayerRows;
    use proptest::prelude::*;

    fn cache_with_prefix(n: usize) -> LayerKVCache {
        let mut c = LayerKVCache::new(1, 1, 2);
        let rows = vec![LayerRows {
            keys: (0..2 * n).map(|i| i as f64).collect(),
            values: (0..2 * n).map(|i| -(i as f64)).collect(),
        }];
        c.append(&rows, &(0..n).collect::<Vec<_>>()).unwrap();
        c.mark_prefix_end();
        c
    }

    fn brute_top_k(scores: &[f64], k: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut taken = vec![false; scores.len()];
        for _ in 0..k.min(scores.len()) {
            let mut best: Option<usize> = None;
            for i in 0..scores.len() {
                if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            out.push(b);
        }
        out.sort();
        out
    }

    #[test]
    fn uniform_scores_give_equal_chunks() {
        let s = vec![0.125; 8];
        assert_eq!(chunk_scores(&s, 4).unwrap(), vec![0.125, 0.125]);
    }

    #[test]
    fn mass_in_second_chunk() {
        let s = [0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25];
        assert_eq!(chunk_scores(&s, 4).unwrap(), vec![0.0, 0.25]);
    }

    #[test]
    fn partial_chunk_uses_own_length() {
        let s = [0.1, 0.1, 0.1, 0.1, 0.3, 0.3];
        let c = chunk_scores(&s, 4).unwrap();
        assert!((c[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn means_match_explicit_loop() {
        let mut rng = crate::tensor::Rng::new(17);
        let raw: Vec<f64> = (0..100).map(|_| rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let s: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let got = chunk_scores(&s, 32).unwrap();
        assert_eq!(got.len(), 4);
        for (c, g) in got.iter().enumerate() {
            let lo = c * 32;
            let hi = (lo + 32).min(100);
            let mut sum = 0.0;
            for v in &s[lo..hi] {
                sum += v;
            }
            assert_eq!(*g, sum / (hi - lo) as f64);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(select_top_k(&[0.1, 0.4, 0.4, 0.1], 1).unwrap(), vec![1]);
    }

    #[test]
    fn saturated_top_k_takes_everything() {
        assert_eq!(select_top_k(&[0.3, 0.1, 0.2], 5).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn random_top_three_matches_brute_force() {
        let mut rng = crate::tensor::Rng::new(5);
        for _ in 0..50 {
            let s: Vec<f64> = (0..10).map(|_| (rng.below(5) as f64) / 4.0).collect();
            assert_eq!(select_top_k(&s, 3).unwrap(), brute_top_k(&s, 3));
        }
    }

    #[test]
    fn frequency_one_updates_every_step() {
        let mut st = RetrievalState::new(4, 1, 1).unwrap();
        let mut c = cache_with_prefix(12);
        let s = vec![1.0 / 12.0; 12];
        for _ in 0..5 {
            assert!(st.maybe_update(Some(&s), &mut c).unwrap());
        }
    }

    #[test]
    fn frequency_four_schedule() {
        let mut st = RetrievalState::new(4, 1, 4).unwrap();
        let mut c = cache_with_prefix(12);
        let s = vec![1.0 / 12.0; 12];
        let fired: Vec<usize> = (1..=12)
            .filter(|_| st.maybe_update(Some(&s), &mut c).unwrap())
            .collect();
        assert_eq!(fired, vec![1, 5, 9]);
        assert!(st.steps_since_update < st.frequency);
    }

    #[test]
    fn repeated_update_is_idempotent() {
        let mut st = RetrievalState::new(4, 2, 1).unwrap();
        let mut c = cache_with_prefix(12);
        let mut s = vec![0.0; 12];
        s[9] = 0.7;
        s[1] = 0.3;
        st.maybe_update(Some(&s), &mut c).unwrap();
        let first = c.clone();
        let sel = st.last_selection.clone();
        st.maybe_update(Some(&s), &mut c).unwrap();
        assert_eq!(st.last_selection, sel);
        assert_eq!(sel, vec![0, 2]);
        assert_eq!(c.pos_ids(), first.pos_ids());
        assert_eq!(c.keys(0), first.keys(0));
        assert_eq!(c.pos_ids(), &[0, 1, 2, 3, 8, 9, 10, 11]);
    }

    #[test]
    fn missing_scores_on_update_step() {
        let mut st = RetrievalState::new(4, 1, 2).unwrap();
        let mut c = cache_with_prefix(8);
        assert!(matches!(st.maybe_update(None, &mut c), Err(crate::Error::State(_))));
    }

    #[test]
    fn off_step_needs_no_scores() {
        let mut st = RetrievalState::new(4, 1, 2).unwrap();
        let mut c = cache_with_prefix(8);
        let s = vec![0.125; 8];
        assert!(st.maybe_update(Some(&s), &mut c).unwrap());
        assert!(!st.maybe_update(None, &mut c).unwrap());
    }

    proptest! {
        #[test]
        fn selection_is_permutation_consistent(
            scores in prop::collection::vec(0u8..6, 1..20),
            k in 1usize..8,
            seed in any::<u64>(),
        ) {
            // distinct scores so the argmax set is unique
            let s: Vec<f64> = scores.iter().enumerate().map(|(i, &v)| v as f64 + i as f64 * 1e-3).collect();
            let mut perm: Vec<usize> = (0..s.len()).collect();
            let mut rng = crate::tensor::Rng::new(seed);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.below(i + 1));
            }
            let permuted: Vec<f64> = perm.iter().map(|&p| s[p]).collect();
            let base = select_top_k(&s, k).unwrap();
            let mut mapped: Vec<usize> = select_top_k(&permuted, k).unwrap().iter().map(|&i| perm[i]).collect();
            mapped.sort();
            prop_assert_eq!(base, mapped);
        }

        #[test]
        fn prefix_bounded_after_update(n in 1usize..300, cs in 1usize..40, k in 1usize..6) {
            let mut st = RetrievalState::new(cs, k, 1).unwrap();
            let mut c = cache_with_prefix(n);
            let s = vec![1.0 / n as f64; n];
            st.maybe_update(Some(&s), &mut c).unwrap();
            prop_assert!(c.prefix_len() <= k * cs);
            prop_assert_eq!(st.last_selection.len(), k.min(n.div_ceil(cs)));
        }
    }
}
