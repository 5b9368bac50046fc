//! Preference scores, per-step credit assignment, the replay buffer and
//! contrastive pair construction.
//!
//! A trajectory scores `50·success - #invalid`. Each step inherits the
//! terminal success discounted by its distance to the end, minus its own
//! invalid-action penalty. Steps are grouped by a context key (task template
//! plus world-state fingerprint); any two steps under one key whose scores
//! differ by more than [`TIE_EPS`] form a (win, lose) pair.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::micropolicy::SequenceScore;
use crate::questworld::{compose_response, split_response, Lexicon, TaskCategory, TokenSeq, WorldError};

pub const SUCCESS_REWARD: f64 = 50.0;
/// Minimum score gap for two steps to be paired.
pub const TIE_EPS: f64 = 1e-9;
pub const DEFAULT_PER_KEY_CAP: usize = 8;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("gamma must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("buffer full ({0} records)")]
    Full(usize),
    #[error("not ready: {collected} of {required} samples collected")]
    NotReady { collected: u64, required: u64 },
    #[error("no preference pairs available")]
    NoPairs,
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `50·success - Σ invalid`.
pub fn trajectory_score(success: bool, invalid: &[bool]) -> f64 {
    let s = if success { SUCCESS_REWARD } else { 0.0 };
    s - invalid.iter().filter(|&&x| x).count() as f64
}

/// `score(t) = γ^(T-t)·50·success - invalid(t)` with `T` the last index.
pub fn step_scores(success: bool, invalid: &[bool], gamma: f64) -> Result<Vec<f64>, TrajectoryError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(TrajectoryError::Gamma(gamma));
    }
    let last = invalid.len().saturating_sub(1);
    Ok(invalid
        .iter()
        .enumerate()
        .map(|(t, &inv)| {
            let terminal = if success { gamma.powi((last - t) as i32) * SUCCESS_REWARD } else { 0.0 };
            terminal - if inv { 1.0 } else { 0.0 }
        })
        .collect())
}

/// Scores of a response cached at collection time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedScores {
    /// Under the parameters that sampled the response.
    pub behavior: SequenceScore,
    pub reference: SequenceScore,
}

/// One environment step as stored for pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub episode_id: u64,
    pub step: u32,
    pub category: TaskCategory,
    pub context_key: String,
    pub prompt: TokenSeq,
    /// `thought ACT action EOS`.
    pub response: TokenSeq,
    pub admissible: bool,
    /// Terminal success of the whole episode.
    pub success: bool,
    pub score: f64,
    pub cached: Option<CachedScores>,
}

/// `template_id|fingerprint`.
pub fn context_key(template_id: &str, fingerprint: &str) -> String {
    format!("{template_id}|{fingerprint}")
}

impl StepRecord {
    pub fn thought(&self) -> &[u16] {
        split_response(&self.response).map_or(&[], |(t, _)| t)
    }

    pub fn action(&self) -> &[u16] {
        split_response(&self.response).map_or(&[], |(_, a)| a)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let bad = |m: &str| Err(TrajectoryError::Malformed(format!("episode {} step {}: {m}", self.episode_id, self.step)));
        if !self.score.is_finite() {
            return bad("non-finite score");
        }
        if self.context_key.is_empty() {
            return bad("empty context key");
        }
        if split_response(&self.response).is_none() {
            return bad("response has no ACT marker");
        }
        if let Some(c) = &self.cached {
            let n = self.response.len();
            if c.behavior.token_logps.len() != n || c.reference.token_logps.len() != n {
                return bad("cached scores do not cover the response");
            }
        }
        Ok(())
    }
}

/// A (win, lose) pair under one context key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferencePair<'a> {
    pub win: &'a StepRecord,
    pub lose: &'a StepRecord,
    pub gap: f64,
}

/// All ordered pairs with `score(i) > score(j) + TIE_EPS`, in record order.
pub fn pairs_among<'a>(records: impl IntoIterator<Item = &'a StepRecord> + Clone) -> Vec<PreferencePair<'a>> {
    let mut out = Vec::new();
    for a in records.clone() {
        for b in records.clone() {
            if a.score > b.score + TIE_EPS {
                out.push(PreferencePair { win: a, lose: b, gap: a.score - b.score });
            }
        }
    }
    out
}

/// Records grouped by context key with per-key FIFO eviction.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    per_key_cap: usize,
    capacity: Option<usize>,
    by_key: BTreeMap<String, VecDeque<StepRecord>>,
    len: usize,
    inserted: u64,
    evicted: u64,
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_PER_KEY_CAP, None)
    }
}

impl ReplayBuffer {
    /// `capacity` bounds the total record count; inserts beyond it fail
    /// unless they evict within their own key.
    pub fn new(per_key_cap: usize, capacity: Option<usize>) -> Self {
        Self { per_key_cap: per_key_cap.max(1), capacity, by_key: BTreeMap::new(), len: 0, inserted: 0, evicted: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Records ever accepted, including evicted ones.
    pub fn total_inserted(&self) -> u64 {
        self.inserted
    }

    pub fn total_evicted(&self) -> u64 {
        self.evicted
    }

    pub fn key_count(&self) -> usize {
        self.by_key.len()
    }

    /// Accepts records that carry cached scores.
    pub fn insert(&mut self, record: StepRecord) -> Result<(), TrajectoryError> {
        record.validate()?;
        if record.cached.is_none() {
            return Err(TrajectoryError::Malformed("record without cached scores".into()));
        }
        let cap = self.per_key_cap;
        let evicts = self.by_key.get(&record.context_key).is_some_and(|q| q.len() >= cap);
        if !evicts && self.capacity.is_some_and(|c| self.len >= c) {
            return Err(TrajectoryError::Full(self.len));
        }
        let q = self.by_key.entry(record.context_key.clone()).or_default();
        q.push_back(record);
        self.len += 1;
        self.inserted += 1;
        while q.len() > cap {
            q.pop_front();
            self.len -= 1;
            self.evicted += 1;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&VecDeque<StepRecord>> {
        self.by_key.get(key)
    }

    pub fn records(&self) -> impl Iterator<Item = &StepRecord> + Clone {
        self.by_key.values().flatten()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.by_key.keys().map(String::as_str)
    }

    pub fn build_pairs(&self, key: &str) -> Vec<PreferencePair<'_>> {
        self.by_key.get(key).map_or_else(Vec::new, |q| pairs_among(q.iter()))
    }

    /// Pairs across all keys, keys in sorted order.
    pub fn all_pairs(&self) -> Vec<PreferencePair<'_>> {
        self.by_key.values().flat_map(|q| pairs_among(q.iter())).collect()
    }

    /// `n` pairs drawn uniformly without replacement (all of them if fewer
    /// exist). Refuses until `min_samples` records have been collected.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, min_samples: u64) -> Result<Vec<PreferencePair<'_>>, TrajectoryError> {
        if self.inserted < min_samples {
            return Err(TrajectoryError::NotReady { collected: self.inserted, required: min_samples });
        }
        let pairs = self.all_pairs();
        if pairs.is_empty() {
            return Err(TrajectoryError::NoPairs);
        }
        let k = n.min(pairs.len());
        Ok(rand::seq::index::sample(rng, pairs.len(), k).into_iter().map(|i| pairs[i]).collect())
    }

    pub fn save_jsonl<W: Write>(&self, out: W) -> Result<(), TrajectoryError> {
        write_jsonl(self.records(), out)
    }

    /// Rebuilds a buffer from [`ReplayBuffer::save_jsonl`] output.
    pub fn load_jsonl<R: BufRead>(input: R, per_key_cap: usize, capacity: Option<usize>) -> Result<Self, TrajectoryError> {
        let mut buf = Self::new(per_key_cap, capacity);
        for r in read_jsonl(input)? {
            buf.insert(r)?;
        }
        Ok(buf)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    episode_id: u64,
    step: u32,
    category: TaskCategory,
    context_key: String,
    prompt: String,
    thought: String,
    action: String,
    admissible: bool,
    success: bool,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cached: Option<CachedScores>,
}

impl RecordLine {
    fn from_record(r: &StepRecord) -> Self {
        let lex = Lexicon::standard();
        Self {
            episode_id: r.episode_id,
            step: r.step,
            category: r.category,
            context_key: r.context_key.clone(),
            prompt: lex.decode(&r.prompt),
            thought: lex.decode(r.thought()),
            action: lex.decode(r.action()),
            admissible: r.admissible,
            success: r.success,
            score: r.score,
            cached: r.cached.clone(),
        }
    }

    fn into_record(self) -> Result<StepRecord, TrajectoryError> {
        let lex = Lexicon::standard();
        let record = StepRecord {
            episode_id: self.episode_id,
            step: self.step,
            category: self.category,
            context_key: self.context_key,
            prompt: lex.encode(&self.prompt)?,
            response: compose_response(&lex.encode(&self.thought)?, &lex.encode(&self.action)?),
            admissible: self.admissible,
            success: self.success,
            score: self.score,
            cached: self.cached,
        };
        record.validate()?;
        Ok(record)
    }
}

/// One JSON object per line.
pub fn write_jsonl<'a, W: Write>(records: impl IntoIterator<Item = &'a StepRecord>, mut out: W) -> Result<(), TrajectoryError> {
    for r in records {
        serde_json::to_writer(&mut out, &RecordLine::from_record(r)).map_err(|e| TrajectoryError::Json { line: 0, source: e })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<StepRecord>, TrajectoryError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| TrajectoryError::Json { line: i + 1, source: e })?;
        out.push(parsed.into_record()?);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::questworld::{ACT, BOS, EOS};
    use crate::seed;

    pub(crate) fn cached(n: usize) -> CachedScores {
        let s = SequenceScore { token_logps: vec![-0.5; n], act_index: 1, thought_logp: -1.0, action_logp: -0.5 * (n as f64 - 2.0) };
        CachedScores { behavior: s.clone(), reference: s }
    }

    pub(crate) fn record(key: &str, score: f64, id: u64) -> StepRecord {
        let response = vec![25, ACT, 7, EOS];
        StepRecord {
            episode_id: id,
            step: 0,
            category: TaskCategory::Pick,
            context_key: key.to_string(),
            prompt: vec![BOS, 10, 11],
            cached: Some(cached(response.len())),
            response,
            admissible: true,
            success: score > 0.0,
            score,
        }
    }

    #[test]
    fn trajectory_score_cases() {
        assert_eq!(trajectory_score(true, &[false, false]), 50.0);
        assert_eq!(trajectory_score(false, &[false, true, false]), -1.0);
        assert_eq!(trajectory_score(true, &[true, false, true, true, false]), 47.0);
    }

    #[test]
    fn step_score_cases() {
        assert_eq!(step_scores(false, &[false; 5], 0.99).unwrap(), vec![0.0; 5]);
        let s = step_scores(true, &[false; 4], 0.99).unwrap();
        assert!((s[1] - 0.99 * 0.99 * 50.0).abs() < 1e-12);
        assert!((s[1] - 49.005).abs() < 1e-12);
        assert_eq!(s[3], 50.0);
        assert!(step_scores(true, &[false; 6], 1.0).unwrap().iter().all(|&x| x == 50.0));
        assert!(step_scores(true, &[], 0.99).unwrap().is_empty());
        assert!(matches!(step_scores(true, &[false], 0.0), Err(TrajectoryError::Gamma(_))));
    }

    #[test]
    fn insert_and_query() {
        let mut b = ReplayBuffer::default();
        b.insert(record("k", 1.0, 0)).unwrap();
        assert_eq!(b.get("k").unwrap().len(), 1);
        assert!(b.get("other").is_none());
        let mut no_cache = record("k", 1.0, 1);
        no_cache.cached = None;
        assert!(matches!(b.insert(no_cache), Err(TrajectoryError::Malformed(_))));
        let mut nan = record("k", f64::NAN, 1);
        nan.score = f64::NAN;
        assert!(b.insert(nan).is_err());
    }

    #[test]
    fn per_key_fifo_eviction() {
        let mut b = ReplayBuffer::new(8, None);
        for i in 0..10 {
            b.insert(record("k", i as f64, i)).unwrap();
        }
        let ids: Vec<u64> = b.get("k").unwrap().iter().map(|r| r.episode_id).collect();
        assert_eq!(ids, (2..10).collect::<Vec<_>>());
        assert_eq!((b.len(), b.total_inserted(), b.total_evicted()), (8, 10, 2));
    }

    #[test]
    fn global_capacity_is_enforced() {
        let mut b = ReplayBuffer::new(2, Some(3));
        for (i, k) in ["a", "a", "b"].iter().enumerate() {
            b.insert(record(k, 0.0, i as u64)).unwrap();
        }
        assert!(matches!(b.insert(record("c", 0.0, 9)), Err(TrajectoryError::Full(3))));
        // evicting within a full key is still allowed
        b.insert(record("a", 0.0, 10)).unwrap();
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn pair_cases() {
        let mut b = ReplayBuffer::default();
        for (i, s) in [50.0, 49.0, -1.0].into_iter().enumerate() {
            b.insert(record("k", s, i as u64)).unwrap();
        }
        let got: Vec<(f64, f64)> = b.build_pairs("k").iter().map(|p| (p.win.score, p.lose.score)).collect();
        assert_eq!(got, vec![(50.0, 49.0), (50.0, -1.0), (49.0, -1.0)]);

        let mut one = ReplayBuffer::default();
        one.insert(record("k", 3.0, 0)).unwrap();
        assert!(one.build_pairs("k").is_empty());

        let mut ties = ReplayBuffer::default();
        for i in 0..4 {
            ties.insert(record("k", 7.0, i)).unwrap();
        }
        ties.insert(record("k", 7.0 + 1e-10, 9)).unwrap();
        assert!(ties.build_pairs("k").is_empty());
    }

    #[test]
    fn sampling_gate_and_exhaustion() {
        let mut b = ReplayBuffer::default();
        for (i, s) in [2.0, 1.0, 0.0].into_iter().enumerate() {
            b.insert(record("k", s, i as u64)).unwrap();
        }
        let mut rng = seed::rng(1);
        assert!(matches!(b.sample_batch(&mut rng, 1, 1000), Err(TrajectoryError::NotReady { collected: 3, required: 1000 })));
        let all = b.sample_batch(&mut rng, 10, 0).unwrap();
        assert_eq!(all.len(), 3);
        let mut seen: Vec<(f64, f64)> = all.iter().map(|p| (p.win.score, p.lose.score)).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(seen, vec![(1.0, 0.0), (2.0, 0.0), (2.0, 1.0)]);

        let mut flat = ReplayBuffer::default();
        flat.insert(record("k", 0.0, 0)).unwrap();
        assert!(matches!(flat.sample_batch(&mut rng, 1, 0), Err(TrajectoryError::NoPairs)));
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::default();
        for (i, s) in [2.0, 1.0, 0.0].into_iter().enumerate() {
            b.insert(record("k", s, i as u64)).unwrap();
        }
        let mut rng = seed::rng(2);
        let mut counts = std::collections::HashMap::new();
        let n = 30_000;
        for _ in 0..n {
            let p = b.sample_batch(&mut rng, 1, 0).unwrap()[0];
            *counts.entry((p.win.episode_id, p.lose.episode_id)).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 3);
        for c in counts.values() {
            assert!((*c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn jsonl_round_trip_reproduces_pairs() {
        let mut b = ReplayBuffer::default();
        let mut rng = seed::rng(5);
        for i in 0..60u64 {
            let key = format!("pick:mug:cabinet|a{}", i % 7);
            let mut r = record(&key, (rng.random_range(0..4) as f64) * 12.5 - 1.0, i);
            r.cached.as_mut().unwrap().behavior.token_logps[0] = -rng.random::<f64>();
            b.insert(r).unwrap();
        }
        let mut bytes = Vec::new();
        b.save_jsonl(&mut bytes).unwrap();
        let first = std::str::from_utf8(&bytes).unwrap().lines().next().unwrap().to_string();
        for field in ["episode_id", "step", "context_key", "prompt", "thought", "action", "admissible", "success", "score", "cached"] {
            assert!(first.contains(&format!("\"{field}\"")), "{field}");
        }
        let back = ReplayBuffer::load_jsonl(&bytes[..], DEFAULT_PER_KEY_CAP, None).unwrap();
        assert_eq!(back.records().cloned().collect::<Vec<_>>(), b.records().cloned().collect::<Vec<_>>());
        let key = |p: &PreferencePair| (p.win.episode_id, p.lose.episode_id);
        assert_eq!(back.all_pairs().iter().map(key).collect::<Vec<_>>(), b.all_pairs().iter().map(key).collect::<Vec<_>>());
    }
}
