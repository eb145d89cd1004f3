use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{PairOrigin, TrainPair};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BufferError {
    #[error("iteration {got} cannot follow iteration {latest}")]
    NonContiguous { latest: u32, got: u32 },
    #[error("replay pairs must originate from revisions, got {0:?}")]
    Origin(PairOrigin),
    #[error("invalid pair: {0}")]
    Invalid(String),
}

type PairKey = (String, String);

/// Revised-code training pairs grouped by the iteration that produced them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<u32, Vec<TrainPair>>", into = "BTreeMap<u32, Vec<TrainPair>>")]
pub struct ReplayBuffer {
    iterations: BTreeMap<u32, BTreeMap<PairKey, TrainPair>>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Highest iteration present, 0 when empty.
    pub fn latest(&self) -> u32 {
        self.iterations.keys().next_back().copied().unwrap_or(0)
    }

    pub fn iterations(&self) -> impl Iterator<Item = u32> + '_ {
        self.iterations.keys().copied()
    }

    /// Make `iteration` present (possibly empty). Only the latest iteration or
    /// the one right after it may be opened.
    pub fn open_iteration(&mut self, iteration: u32) -> Result<(), BufferError> {
        let latest = self.latest();
        if iteration == 0 || iteration > latest + 1 || (iteration < latest && !self.iterations.contains_key(&iteration)) {
            return Err(BufferError::NonContiguous { latest, got: iteration });
        }
        self.iterations.entry(iteration).or_default();
        Ok(())
    }

    /// Add a pair; returns whether the iteration's set grew.
    pub fn insert(&mut self, iteration: u32, pair: TrainPair) -> Result<bool, BufferError> {
        if pair.origin != PairOrigin::Revision {
            return Err(BufferError::Origin(pair.origin));
        }
        pair.validate().map_err(BufferError::Invalid)?;
        self.open_iteration(iteration)?;
        let set = self.iterations.get_mut(&iteration).expect("opened above");
        let key = (pair.problem_id.clone(), pair.completion.clone());
        let pair = TrainPair { iteration, ..pair };
        match set.get_mut(&key) {
            // same (problem, completion): keep the smaller so insertion order is irrelevant
            Some(existing) => {
                if pair < *existing {
                    *existing = pair;
                }
                Ok(false)
            }
            None => {
                set.insert(key, pair);
                Ok(true)
            }
        }
    }

    pub fn pairs(&self, iteration: u32) -> Vec<TrainPair> {
        self.iterations
            .get(&iteration)
            .map(|s| s.values().cloned().collect())
            .unwrap_or_default()
    }
}

impl TryFrom<BTreeMap<u32, Vec<TrainPair>>> for ReplayBuffer {
    type Error = BufferError;

    fn try_from(raw: BTreeMap<u32, Vec<TrainPair>>) -> Result<Self, Self::Error> {
        let mut buf = ReplayBuffer::new();
        for (iteration, pairs) in raw {
            buf.open_iteration(iteration)?;
            for p in pairs {
                buf.insert(iteration, p)?;
            }
        }
        Ok(buf)
    }
}

impl From<ReplayBuffer> for BTreeMap<u32, Vec<TrainPair>> {
    fn from(buf: ReplayBuffer) -> Self {
        buf.iterations
            .into_iter()
            .map(|(i, s)| (i, s.into_values().collect()))
            .collect()
    }
}

/// Union of all pairs from iterations `1..=upto`. Byte-identical
/// `(problem_id, completion)` pairs appear once, attributed to the earliest
/// iteration; output is ordered by iteration, then problem id.
pub fn assemble_replay(buffer: &ReplayBuffer, upto: u32) -> Vec<TrainPair> {
    let mut seen: BTreeMap<PairKey, ()> = BTreeMap::new();
    let mut out = Vec::new();
    for (_, set) in buffer.iterations.range(1..=upto) {
        for (key, pair) in set {
            if seen.insert(key.clone(), ()).is_none() {
                out.push(pair.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn pair(pid: &str, completion: &str) -> TrainPair {
        TrainPair {
            prompt: format!("requirement of {pid}"),
            completion: completion.into(),
            origin: PairOrigin::Revision,
            problem_id: pid.into(),
            iteration: 0,
        }
    }

    #[test]
    fn union_examples() {
        let mut b = ReplayBuffer::new();
        b.insert(1, pair("p1", "A")).unwrap();
        b.insert(2, pair("p1", "A'")).unwrap();
        b.insert(2, pair("p2", "B")).unwrap();
        assert_eq!(assemble_replay(&b, 2).len(), 3);
        assert_eq!(assemble_replay(&b, 1).len(), 1);

        let mut b = ReplayBuffer::new();
        b.insert(1, pair("p1", "A")).unwrap();
        b.insert(2, pair("p1", "A")).unwrap();
        b.insert(2, pair("p2", "B")).unwrap();
        let all = assemble_replay(&b, 2);
        assert_eq!(all.len(), 2);
        assert_eq!((all[0].problem_id.as_str(), all[0].iteration), ("p1", 1));
        assert_eq!((all[1].problem_id.as_str(), all[1].iteration), ("p2", 2));

        assert!(assemble_replay(&ReplayBuffer::new(), 3).is_empty());
    }

    #[test]
    fn iterations_must_be_contiguous() {
        let mut b = ReplayBuffer::new();
        assert_eq!(b.open_iteration(2), Err(BufferError::NonContiguous { latest: 0, got: 2 }));
        b.open_iteration(1).unwrap();
        b.open_iteration(2).unwrap();
        assert!(b.insert(4, pair("p", "x")).is_err());
        b.insert(3, pair("p", "x")).unwrap();
        assert_eq!(b.iterations().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn only_revision_pairs_accepted() {
        let mut b = ReplayBuffer::new();
        let mut p = pair("p", "x");
        p.origin = PairOrigin::ReviseSeed;
        assert_eq!(b.insert(1, p), Err(BufferError::Origin(PairOrigin::ReviseSeed)));
        assert!(matches!(b.insert(1, pair("p", "")), Err(BufferError::Invalid(_))));
    }

    #[test]
    fn serde_roundtrip_revalidates() {
        let mut b = ReplayBuffer::new();
        b.insert(1, pair("p1", "A")).unwrap();
        b.open_iteration(2).unwrap();
        let text = serde_json::to_string(&b).unwrap();
        assert_eq!(serde_json::from_str::<ReplayBuffer>(&text).unwrap(), b);
        let gap = r#"{"1": [], "3": []}"#;
        assert!(serde_json::from_str::<ReplayBuffer>(gap).is_err());
    }

    fn arb_ops() -> impl Strategy<Value = Vec<(u32, String, String)>> {
        prop::collection::vec((1u32..=4, "p[0-5]", "[ab]{1,2}"), 0..40)
    }

    fn build(ops: &[(u32, String, String)]) -> ReplayBuffer {
        let mut b = ReplayBuffer::new();
        for l in 1..=4 {
            b.open_iteration(l).unwrap();
        }
        for (l, pid, c) in ops {
            b.insert(*l, pair(pid, c)).unwrap();
        }
        b
    }

    proptest! {
        #[test]
        fn union_is_monotone(ops in arb_ops()) {
            let b = build(&ops);
            for l in 2..=4 {
                let prev: BTreeSet<_> = assemble_replay(&b, l - 1).into_iter().collect();
                let cur: BTreeSet<_> = assemble_replay(&b, l).into_iter().collect();
                prop_assert!(prev.is_subset(&cur));
            }
        }

        #[test]
        fn byte_duplicates_collapse(ops in arb_ops()) {
            let b = build(&ops);
            let all = assemble_replay(&b, 4);
            let keys: BTreeSet<_> = all.iter().map(|p| (p.problem_id.clone(), p.completion.clone())).collect();
            prop_assert_eq!(keys.len(), all.len());
            let expected: BTreeSet<_> = ops.iter().map(|(_, p, c)| (p.clone(), c.clone())).collect();
            prop_assert_eq!(keys, expected);
        }

        #[test]
        fn insertion_order_independent(ops in arb_ops(), seed in any::<u64>()) {
            use rand::{SeedableRng, seq::SliceRandom};
            let mut shuffled = ops.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (a, b) = (build(&ops), build(&shuffled));
            prop_assert_eq!(&a, &b);
            for l in 1..=4 {
                prop_assert_eq!(assemble_replay(&a, l), assemble_replay(&b, l));
            }
        }

        #[test]
        fn assembly_is_idempotent(ops in arb_ops()) {
            let b = build(&ops);
            prop_assert_eq!(assemble_replay(&b, 4), assemble_replay(&b, 4));
        }
    }
}
