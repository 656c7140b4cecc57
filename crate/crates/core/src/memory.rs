//! Replay memory: per-task exemplar retention plus synthesized mixed
//! samples that pair semantic and acoustic events, excluding any pairing
//! reserved for the combined test tasks.

use crate::audio::corpus::CombinedMode;
use crate::audio::{overlay, splice, AudioClip, AudioError, EventKind};
use crate::rng::{derive_seed, Rng};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

/// Fraction of each finished task's train split that is retained.
pub const MEMORY_FRACTION: f64 = 0.10;
pub const MIN_PER_TASK: usize = 20;
pub const MAX_PER_TASK: usize = 100;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory: {0}")]
    State(String),
    #[error("mixed samples: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct MemoryEntry {
    pub clip: AudioClip,
    pub source_task: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ReplayMemory {
    entries: Vec<MemoryEntry>,
}

/// Retained exemplar count: 10% of the train split, clamped to [20, 100]
/// and never more than the split itself.
pub fn exemplar_count(task_train_size: usize) -> usize {
    let tenth = (task_train_size as f64 * MEMORY_FRACTION).ceil() as usize;
    tenth.max(MIN_PER_TASK).min(MAX_PER_TASK).min(task_train_size)
}

fn stratified_pick(
    clips: &[AudioClip],
    count: usize,
    seed: u64,
) -> Vec<usize> {
    // Group clip indices by their label-key set so selection is balanced
    // across the task's classes.
    let mut groups: BTreeMap<Vec<(EventKind, u32)>, Vec<usize>> = BTreeMap::new();
    for (i, clip) in clips.iter().enumerate() {
        let key: Vec<(EventKind, u32)> = clip.labels.iter().map(|l| l.key()).collect();
        groups.entry(key).or_default().push(i);
    }
    let mut pools: Vec<Vec<usize>> = Vec::new();
    for (gi, (_, mut idxs)) in groups.into_iter().enumerate() {
        let mut rng = Rng::seed_from(derive_seed(seed, "exemplar-group", &[gi as u64]));
        rng.shuffle(&mut idxs);
        pools.push(idxs);
    }
    // Round-robin across classes until the budget is spent; group sizes
    // may differ so exhausted pools simply drop out.
    let mut picked = Vec::with_capacity(count);
    let mut depth = 0;
    while picked.len() < count {
        let mut any = false;
        for pool in &pools {
            if let Some(&idx) = pool.get(depth) {
                any = true;
                picked.push(idx);
                if picked.len() == count {
                    break;
                }
            }
        }
        if !any {
            break;
        }
        depth += 1;
    }
    picked
}

fn take_exemplars(
    task_train: &[AudioClip],
    task_id: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<MemoryEntry>, MemoryError> {
    if task_train.is_empty() {
        return Err(MemoryError::State("empty train set".into()));
    }
    let picked = stratified_pick(task_train, count, seed);
    Ok(picked
        .into_iter()
        .map(|i| MemoryEntry { clip: task_train[i].clone(), source_task: task_id })
        .collect())
}

/// Seeded, class-stratified sample without replacement, sized by the
/// capacity policy.
pub fn select_exemplars(
    task_train: &[AudioClip],
    task_id: usize,
    seed: u64,
) -> Result<Vec<MemoryEntry>, MemoryError> {
    take_exemplars(task_train, task_id, exemplar_count(task_train.len()), seed)
}

/// Composes `count` mixed clips from the two pools, never producing a
/// (semantic, acoustic) class pairing in `forbidden_pairs`.
pub fn make_mixed_samples(
    semantic_pool: &[AudioClip],
    acoustic_pool: &[AudioClip],
    mode: CombinedMode,
    count: usize,
    seed: u64,
    forbidden_pairs: &BTreeSet<(u32, u32)>,
) -> Result<Vec<AudioClip>, MemoryError> {
    if semantic_pool.is_empty() || acoustic_pool.is_empty() {
        return Err(MemoryError::Infeasible("a pool is empty".into()));
    }
    let mode = match mode {
        CombinedMode::Splice => CombinedMode::Splice,
        CombinedMode::Overlay => CombinedMode::Overlay,
        CombinedMode::None => CombinedMode::Splice,
    };
    let mut feasible: Vec<(usize, usize)> = Vec::new();
    for (i, s) in semantic_pool.iter().enumerate() {
        let s_class = match s.label(EventKind::Semantic) {
            Some(l) => l.class_id,
            None => continue,
        };
        for (j, a) in acoustic_pool.iter().enumerate() {
            let a_class = match a.label(EventKind::Acoustic) {
                Some(l) => l.class_id,
                None => continue,
            };
            if !forbidden_pairs.contains(&(s_class, a_class)) {
                feasible.push((i, j));
            }
        }
    }
    if feasible.is_empty() {
        return Err(MemoryError::Infeasible(
            "every available pairing is reserved for the combined test set".into(),
        ));
    }
    let mut rng = Rng::seed_from(derive_seed(seed, "mixed-pick", &[]));
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let (i, j) = feasible[rng.below(feasible.len() as u64) as usize];
        let mut clip = match mode {
            CombinedMode::Splice => splice(&semantic_pool[i], &acoustic_pool[j])?,
            CombinedMode::Overlay => overlay(&semantic_pool[i], &acoustic_pool[j])?,
            CombinedMode::None => unreachable!(),
        };
        // Top bit marks synthesized memory clips so uids never collide with
        // corpus clips (which count up from 1).
        clip.uid = (1 << 63) | derive_seed(seed, "mixed-uid", &[k as u64]);
        out.push(clip);
    }
    Ok(out)
}

impl ReplayMemory {
    pub fn new() -> Self {
        ReplayMemory::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Retains exemplars for a finished task. Half the budget is plain
    /// exemplars, half is mixed samples pairing the task's own semantic and
    /// acoustic clips; tasks with only one kind fall back to all-plain so
    /// the per-task budget is exact either way.
    pub fn add_task(
        &mut self,
        task_id: usize,
        task_train: &[AudioClip],
        mode: CombinedMode,
        forbidden_pairs: &BTreeSet<(u32, u32)>,
        seed: u64,
    ) -> Result<(), MemoryError> {
        self.add_task_impl(task_id, task_train, mode, forbidden_pairs, seed, true)
    }

    /// Plain-exemplar variant with the same per-task budget, for replay
    /// methods that store experiences verbatim without mixed construction.
    pub fn add_task_plain(
        &mut self,
        task_id: usize,
        task_train: &[AudioClip],
        seed: u64,
    ) -> Result<(), MemoryError> {
        self.add_task_impl(task_id, task_train, CombinedMode::None, &BTreeSet::new(), seed, false)
    }

    fn add_task_impl(
        &mut self,
        task_id: usize,
        task_train: &[AudioClip],
        mode: CombinedMode,
        forbidden_pairs: &BTreeSet<(u32, u32)>,
        seed: u64,
        mix: bool,
    ) -> Result<(), MemoryError> {
        if task_train.is_empty() {
            return Err(MemoryError::State("empty train set".into()));
        }
        let budget = exemplar_count(task_train.len());
        let sem_pool: Vec<AudioClip> = task_train
            .iter()
            .filter(|c| c.label(EventKind::Semantic).is_some() && c.labels.len() == 1)
            .cloned()
            .collect();
        let ac_pool: Vec<AudioClip> = task_train
            .iter()
            .filter(|c| c.label(EventKind::Acoustic).is_some() && c.labels.len() == 1)
            .cloned()
            .collect();
        let mixable = mix && !sem_pool.is_empty() && !ac_pool.is_empty();
        let plain_count = if mixable { budget.div_ceil(2) } else { budget };
        let mixed_count = budget - plain_count;
        let mut added = take_exemplars(
            task_train,
            task_id,
            plain_count,
            derive_seed(seed, "plain", &[task_id as u64]),
        )?;
        if mixed_count > 0 {
            let mixed = make_mixed_samples(
                &sem_pool,
                &ac_pool,
                mode,
                mixed_count,
                derive_seed(seed, "mixed", &[task_id as u64]),
                forbidden_pairs,
            )?;
            added.extend(mixed.into_iter().map(|clip| MemoryEntry { clip, source_task: task_id }));
        }
        self.entries.extend(added);
        Ok(())
    }

    /// Uniform sample with replacement; deterministic per seed.
    pub fn sample_batch(&self, batch_size: usize, seed: u64) -> Result<Vec<&MemoryEntry>, MemoryError> {
        if self.entries.is_empty() {
            return Err(MemoryError::State("empty memory".into()));
        }
        let mut rng = Rng::seed_from(seed);
        Ok((0..batch_size)
            .map(|_| &self.entries[rng.below(self.entries.len() as u64) as usize])
            .collect())
    }

    pub fn manifest(&self) -> Vec<MemoryRecord> {
        self.entries
            .iter()
            .map(|e| MemoryRecord {
                path: format!("memory/clip{:016x}.wav", e.clip.uid),
                kinds: e.clip.labels.iter().map(|l| l.kind).collect(),
                class_ids: e.clip.labels.iter().map(|l| l.class_id).collect(),
                task_id: e.source_task,
                split: "memory".into(),
                source_task: e.source_task,
            })
            .collect()
    }
}

/// Corpus-manifest record shape plus the originating task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryRecord {
    pub path: String,
    pub kinds: Vec<EventKind>,
    pub class_ids: Vec<u32>,
    pub task_id: usize,
    pub split: String,
    pub source_task: usize,
}

pub fn write_memory_manifest(records: &[MemoryRecord], path: &Path) -> Result<(), MemoryError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_memory_manifest(path: &Path) -> Result<Vec<MemoryRecord>, MemoryError> {
    let s = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in s.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: MemoryRecord = serde_json::from_str(line).map_err(|e| {
            MemoryError::State(format!("manifest line {}: {e}", i + 1))
        })?;
        records.push(r);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::EventLabel;
    use proptest::prelude::*;

    fn dummy_clip(uid: u64, labels: Vec<EventLabel>) -> AudioClip {
        AudioClip { uid, samples: vec![0.05; 4000], sample_rate: 8000, labels }
    }

    fn class_clips(kind: EventKind, class: u32, task: usize, n: usize, uid0: u64) -> Vec<AudioClip> {
        (0..n)
            .map(|i| dummy_clip(uid0 + i as u64, vec![EventLabel::new(kind, class, task)]))
            .collect()
    }

    #[test]
    fn exemplar_counts_match_capacity_policy() {
        assert_eq!(exemplar_count(500), 50);
        assert_eq!(exemplar_count(50), 20);
        assert_eq!(exemplar_count(5000), 100);
        assert_eq!(exemplar_count(15), 15); // clamp can never exceed the split
        assert_eq!(exemplar_count(991), 100);
    }

    #[test]
    fn selection_is_stratified_and_without_replacement() {
        let mut train = Vec::new();
        for c in 0..3 {
            train.extend(class_clips(EventKind::Semantic, c, 0, 100, 1000 * (c as u64 + 1)));
        }
        let picked = select_exemplars(&train, 0, 7).unwrap();
        assert_eq!(picked.len(), 30);
        let mut uids = BTreeSet::new();
        let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
        for e in &picked {
            assert!(uids.insert(e.clip.uid), "duplicate pick");
            assert_eq!(e.source_task, 0);
            *per_class.entry(e.clip.labels[0].class_id).or_default() += 1;
        }
        assert_eq!(per_class.values().copied().collect::<Vec<_>>(), vec![10, 10, 10]);
    }

    #[test]
    fn selection_is_deterministic_per_seed() {
        let train = class_clips(EventKind::Acoustic, 0, 2, 60, 1);
        let a = select_exemplars(&train, 2, 9).unwrap();
        let b = select_exemplars(&train, 2, 9).unwrap();
        let c = select_exemplars(&train, 2, 10).unwrap();
        let uids = |v: &[MemoryEntry]| v.iter().map(|e| e.clip.uid).collect::<Vec<_>>();
        assert_eq!(uids(&a), uids(&b));
        assert_ne!(uids(&a), uids(&c));
    }

    #[test]
    fn empty_train_set_is_an_error() {
        assert!(select_exemplars(&[], 0, 1).is_err());
    }

    fn pools() -> (Vec<AudioClip>, Vec<AudioClip>) {
        let mut sem = Vec::new();
        let mut ac = Vec::new();
        for c in 0..2 {
            sem.extend(class_clips(EventKind::Semantic, c, 0, 3, 100 + 10 * c as u64));
            ac.extend(class_clips(EventKind::Acoustic, c, 0, 3, 200 + 10 * c as u64));
        }
        (sem, ac)
    }

    #[test]
    fn all_pairings_forbidden_is_infeasible() {
        let (sem, ac) = pools();
        let forbidden: BTreeSet<(u32, u32)> =
            (0..2).flat_map(|s| (0..2).map(move |a| (s, a))).collect();
        let err = make_mixed_samples(&sem, &ac, CombinedMode::Splice, 4, 1, &forbidden);
        assert!(matches!(err, Err(MemoryError::Infeasible(_))));
    }

    #[test]
    fn mixed_samples_carry_one_label_of_each_kind() {
        let (sem, ac) = pools();
        let out =
            make_mixed_samples(&sem, &ac, CombinedMode::Splice, 10, 3, &BTreeSet::new()).unwrap();
        assert_eq!(out.len(), 10);
        for clip in &out {
            assert_eq!(clip.labels.len(), 2);
            assert!(clip.label(EventKind::Semantic).is_some());
            assert!(clip.label(EventKind::Acoustic).is_some());
            assert!(clip.uid >> 63 == 1, "memory uid namespace");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn produced_pairings_never_intersect_forbidden(mask in 0u8..15, seed in 0u64..500) {
            let (sem, ac) = pools();
            let mut forbidden = BTreeSet::new();
            for (bit, pair) in [(0u8, (0u32, 0u32)), (1, (0, 1)), (2, (1, 0)), (3, (1, 1))] {
                if mask & (1 << bit) != 0 {
                    forbidden.insert(pair);
                }
            }
            let out = make_mixed_samples(&sem, &ac, CombinedMode::Overlay, 12, seed, &forbidden).unwrap();
            for clip in &out {
                let s = clip.label(EventKind::Semantic).unwrap().class_id;
                let a = clip.label(EventKind::Acoustic).unwrap().class_id;
                prop_assert!(!forbidden.contains(&(s, a)));
            }
        }
    }

    #[test]
    fn sample_batch_is_uniform_with_replacement() {
        let mut mem = ReplayMemory::new();
        let train: Vec<AudioClip> = class_clips(EventKind::Semantic, 0, 0, 5, 1);
        mem.entries = train
            .into_iter()
            .map(|clip| MemoryEntry { clip, source_task: 0 })
            .collect();
        let single = ReplayMemory {
            entries: vec![mem.entries[0].clone()],
        };
        let batch = single.sample_batch(4, 11).unwrap();
        assert!(batch.iter().all(|e| e.clip.uid == single.entries[0].clip.uid));

        let a = mem.sample_batch(8, 5).unwrap();
        let b = mem.sample_batch(8, 5).unwrap();
        let uids = |v: &[&MemoryEntry]| v.iter().map(|e| e.clip.uid).collect::<Vec<_>>();
        assert_eq!(uids(&a), uids(&b));

        // Frequency over 10k draws stays within 3 sigma of uniform.
        let mut counts = BTreeMap::new();
        for chunk_seed in 0..100u64 {
            for e in mem.sample_batch(100, 900 + chunk_seed).unwrap() {
                *counts.entry(e.clip.uid).or_insert(0usize) += 1;
            }
        }
        let n = 10_000.0f64;
        let p = 0.2;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for (_, c) in counts {
            assert!((c as f64 - n * p).abs() < 3.0 * sigma, "count {c}");
        }
        assert!(ReplayMemory::new().sample_batch(4, 1).is_err());
    }

    #[test]
    fn per_task_budget_is_exact_and_split_half_mixed() {
        let mut mem = ReplayMemory::new();
        let mut train = Vec::new();
        train.extend(class_clips(EventKind::Semantic, 0, 0, 120, 1));
        train.extend(class_clips(EventKind::Semantic, 1, 0, 120, 200));
        train.extend(class_clips(EventKind::Acoustic, 0, 0, 120, 400));
        // budget = clamp(ceil(0.1 * 360)) = 36 -> 18 plain + 18 mixed
        mem.add_task(0, &train, CombinedMode::Splice, &BTreeSet::new(), 5).unwrap();
        assert_eq!(mem.len(), 36);
        let mixed = mem.entries().iter().filter(|e| e.clip.labels.len() == 2).count();
        assert_eq!(mixed, 18);

        // A semantic-only task falls back to all-plain but keeps the budget.
        let solo = class_clips(EventKind::Semantic, 7, 1, 150, 9000);
        mem.add_task(1, &solo, CombinedMode::Splice, &BTreeSet::new(), 5).unwrap();
        assert_eq!(mem.len(), 36 + 20);
        for e in mem.entries() {
            assert!(e.source_task <= 1);
        }
    }

    #[test]
    fn memory_manifest_roundtrips() {
        let mut mem = ReplayMemory::new();
        let mut train = class_clips(EventKind::Semantic, 0, 0, 30, 1);
        train.extend(class_clips(EventKind::Acoustic, 2, 0, 30, 500));
        mem.add_task(0, &train, CombinedMode::Overlay, &BTreeSet::new(), 3).unwrap();
        let records = mem.manifest();
        assert_eq!(records.len(), mem.len());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.jsonl");
        write_memory_manifest(&records, &path).unwrap();
        assert_eq!(read_memory_manifest(&path).unwrap(), records);
    }
}
