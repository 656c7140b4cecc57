//! Corpus specification, task-stream assembly, and manifests.
//!
//! A [`CorpusSpec`] names the classes, their grouping into tasks, and the
//! per-class clip budget. [`build_task_stream`] synthesizes every clip
//! deterministically from the corpus seed, splits 80/10/10 per class, and,
//! when a combined mode is set, appends eval-only tasks of spliced/overlaid
//! clips whose (semantic, acoustic) pairings never occur in training.

use super::{overlay, splice, synth_clip, AudioClip, AudioError, EventKind, EventLabel};
use crate::rng::{derive_seed, Rng};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombinedMode {
    Splice,
    Overlay,
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskClasses {
    #[serde(default)]
    pub semantic: Vec<u32>,
    #[serde(default)]
    pub acoustic: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_semantic_classes: u32,
    pub num_acoustic_classes: u32,
    pub clips_per_class: usize,
    pub seed: u64,
    #[serde(default)]
    pub combined_mode: CombinedMode,
    pub tasks: Vec<TaskClasses>,
}

impl CorpusSpec {
    pub fn from_toml_str(s: &str) -> Result<Self, AudioError> {
        let spec: CorpusSpec =
            toml::from_str(s).map_err(|e| AudioError::Spec(format!("parse: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("CorpusSpec always serializes")
    }

    /// Every class id in range and assigned to exactly one task; enough
    /// clips per class for a non-degenerate 80/10/10 split.
    pub fn validate(&self) -> Result<(), AudioError> {
        if self.tasks.is_empty() {
            return Err(AudioError::Spec("no tasks".into()));
        }
        if self.clips_per_class < 10 {
            return Err(AudioError::Spec(
                "clips_per_class must be >= 10 for an 80/10/10 split".into(),
            ));
        }
        for (kind, total) in [
            (EventKind::Semantic, self.num_semantic_classes),
            (EventKind::Acoustic, self.num_acoustic_classes),
        ] {
            let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
            for (t, task) in self.tasks.iter().enumerate() {
                let ids = match kind {
                    EventKind::Semantic => &task.semantic,
                    EventKind::Acoustic => &task.acoustic,
                };
                for &c in ids {
                    if c >= total {
                        return Err(AudioError::Spec(format!(
                            "{kind} class {c} out of range (have {total})"
                        )));
                    }
                    if let Some(prev) = seen.insert(c, t) {
                        return Err(AudioError::Spec(format!(
                            "{kind} class {c} assigned to tasks {prev} and {t}"
                        )));
                    }
                }
            }
            if seen.len() != total as usize {
                return Err(AudioError::Spec(format!(
                    "{} {kind} classes declared but {} assigned to tasks",
                    total,
                    seen.len()
                )));
            }
        }
        if self.tasks.iter().any(|t| t.semantic.is_empty() && t.acoustic.is_empty()) {
            return Err(AudioError::Spec("a task has no classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    pub task_id: usize,
    pub train: Vec<AudioClip>,
    pub val: Vec<AudioClip>,
    pub test: Vec<AudioClip>,
}

impl Task {
    /// Combined-event tasks exist only for final evaluation.
    pub fn is_eval_only(&self) -> bool {
        self.train.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub label_universe: BTreeMap<usize, Vec<EventLabel>>,
    pub combined_mode: CombinedMode,
}

/// One manifest line per clip: where it (would) live on disk and what it is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub kinds: Vec<EventKind>,
    pub class_ids: Vec<u32>,
    pub task_id: usize,
    pub split: String,
}

impl ManifestRecord {
    fn for_clip(clip: &AudioClip, task_id: usize, split: &str) -> Self {
        ManifestRecord {
            path: format!("task{task_id:02}/{split}/clip{:06}.wav", clip.uid),
            kinds: clip.labels.iter().map(|l| l.kind).collect(),
            class_ids: clip.labels.iter().map(|l| l.class_id).collect(),
            task_id,
            split: split.to_string(),
        }
    }
}

impl TaskStream {
    pub fn training_tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.iter().filter(|t| !t.is_eval_only())
    }

    pub fn eval_only_tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.iter().filter(|t| t.is_eval_only())
    }

    /// The (semantic, acoustic) class pairings evaluated by the combined
    /// tasks. Replay memory must never construct these.
    pub fn combined_pairs(&self) -> BTreeSet<(u32, u32)> {
        let mut pairs = BTreeSet::new();
        for task in self.eval_only_tasks() {
            for clip in &task.test {
                let sem = clip.label(EventKind::Semantic).map(|l| l.class_id);
                let ac = clip.label(EventKind::Acoustic).map(|l| l.class_id);
                if let (Some(s), Some(a)) = (sem, ac) {
                    pairs.insert((s, a));
                }
            }
        }
        pairs
    }

    /// Pairs every clip with its manifest record, in manifest order.
    pub fn clips_and_records(&self) -> Vec<(&AudioClip, ManifestRecord)> {
        let mut out = Vec::new();
        for task in &self.tasks {
            for (split, clips) in [("train", &task.train), ("val", &task.val), ("test", &task.test)]
            {
                for clip in clips {
                    out.push((clip, ManifestRecord::for_clip(clip, task.task_id, split)));
                }
            }
        }
        out
    }

    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.clips_and_records().into_iter().map(|(_, r)| r).collect()
    }
}

fn kind_code(kind: EventKind) -> u64 {
    match kind {
        EventKind::Semantic => 0,
        EventKind::Acoustic => 1,
    }
}

fn synth_class_clip(
    spec_seed: u64,
    kind: EventKind,
    class: u32,
    index: usize,
    task_id: usize,
    uid: &mut u64,
) -> Result<AudioClip, AudioError> {
    let words = [kind_code(kind), u64::from(class), index as u64];
    let mut meta = Rng::seed_from(derive_seed(spec_seed, "clip-meta", &words));
    let duration = meta.range(1.0, 2.0);
    let synth_seed = derive_seed(spec_seed, "clip-synth", &words);
    let mut clip = match kind {
        EventKind::Semantic => synth_clip(Some(class), None, duration, synth_seed)?,
        EventKind::Acoustic => synth_clip(None, Some(class), duration, synth_seed)?,
    };
    for l in &mut clip.labels {
        l.task_id = task_id;
    }
    clip.uid = *uid;
    *uid += 1;
    Ok(clip)
}

/// 80/10/10 split boundaries for n clips (train gets the floor of 80%, val
/// the floor of 10%, test the remainder).
fn split_counts(n: usize) -> (usize, usize) {
    (n * 8 / 10, n / 10)
}

pub fn build_task_stream(spec: &CorpusSpec) -> Result<TaskStream, AudioError> {
    spec.validate()?;
    let mut uid = 1u64;
    let mut tasks = Vec::new();
    let mut label_universe: BTreeMap<usize, Vec<EventLabel>> = BTreeMap::new();
    for (t, grouping) in spec.tasks.iter().enumerate() {
        let mut task = Task {
            task_id: t,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        let mut labels = Vec::new();
        for (kind, ids) in [
            (EventKind::Semantic, &grouping.semantic),
            (EventKind::Acoustic, &grouping.acoustic),
        ] {
            for &class in ids {
                labels.push(EventLabel::new(kind, class, t));
                let mut clips = Vec::with_capacity(spec.clips_per_class);
                for i in 0..spec.clips_per_class {
                    clips.push(synth_class_clip(spec.seed, kind, class, i, t, &mut uid)?);
                }
                let mut order: Vec<usize> = (0..clips.len()).collect();
                let mut rng = Rng::seed_from(derive_seed(
                    spec.seed,
                    "split",
                    &[kind_code(kind), u64::from(class)],
                ));
                rng.shuffle(&mut order);
                let (n_train, n_val) = split_counts(clips.len());
                // Drain in shuffled order; clips are moved exactly once.
                let mut by_index: BTreeMap<usize, AudioClip> =
                    clips.into_iter().enumerate().collect();
                for (pos, idx) in order.iter().enumerate() {
                    let clip = by_index.remove(idx).expect("each index drained once");
                    if pos < n_train {
                        task.train.push(clip);
                    } else if pos < n_train + n_val {
                        task.val.push(clip);
                    } else {
                        task.test.push(clip);
                    }
                }
            }
        }
        labels.sort();
        label_universe.insert(t, labels);
        tasks.push(task);
    }

    if spec.combined_mode != CombinedMode::None {
        let base_count = spec.tasks.len();
        for k in 0..base_count {
            let sems = &spec.tasks[k].semantic;
            let partner = (k + 1) % base_count;
            let acs = &spec.tasks[partner].acoustic;
            if sems.is_empty() || acs.is_empty() {
                continue;
            }
            let combined_id = tasks.len();
            let per_pairing = (spec.clips_per_class / 2).max(6);
            let mut task = Task {
                task_id: combined_id,
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            };
            let mut labels = Vec::new();
            for &s in sems {
                for &a in acs {
                    labels.push(EventLabel::new(EventKind::Semantic, s, k));
                    labels.push(EventLabel::new(EventKind::Acoustic, a, partner));
                    for i in 0..per_pairing {
                        let words = [u64::from(s), u64::from(a), i as u64];
                        let mut meta =
                            Rng::seed_from(derive_seed(spec.seed, "combined-meta", &words));
                        let sem_clip = {
                            let mut c = synth_clip(
                                Some(s),
                                None,
                                meta.range(1.0, 2.0),
                                derive_seed(spec.seed, "combined-sem", &words),
                            )?;
                            c.labels[0].task_id = k;
                            c
                        };
                        let ac_clip = {
                            let mut c = synth_clip(
                                None,
                                Some(a),
                                meta.range(1.0, 2.0),
                                derive_seed(spec.seed, "combined-ac", &words),
                            )?;
                            c.labels[0].task_id = partner;
                            c
                        };
                        let mut combined = match spec.combined_mode {
                            CombinedMode::Splice => splice(&sem_clip, &ac_clip)?,
                            CombinedMode::Overlay => overlay(&sem_clip, &ac_clip)?,
                            CombinedMode::None => unreachable!(),
                        };
                        combined.uid = uid;
                        uid += 1;
                        task.test.push(combined);
                    }
                }
            }
            labels.sort();
            labels.dedup();
            label_universe.insert(combined_id, labels);
            tasks.push(task);
        }
    }

    let stream = TaskStream {
        tasks,
        label_universe,
        combined_mode: spec.combined_mode,
    };
    verify_stream(&stream.manifest())?;
    Ok(stream)
}

/// Structural checks over manifest records:
/// 1. per-task train label sets are pairwise disjoint;
/// 2. every train label of a task also occurs in that task's test split, so
///    the cumulative union of test splits 1..t covers all labels seen so far;
/// 3. combined (two-kind) test pairings never occur in any train split.
pub fn verify_stream(records: &[ManifestRecord]) -> Result<(), AudioError> {
    let mut train_labels: BTreeMap<usize, BTreeSet<(EventKind, u32)>> = BTreeMap::new();
    let mut test_labels: BTreeMap<usize, BTreeSet<(EventKind, u32)>> = BTreeMap::new();
    let mut train_pairs: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut test_pairs: BTreeSet<(u32, u32)> = BTreeSet::new();
    for r in records {
        if r.kinds.len() != r.class_ids.len() {
            return Err(AudioError::Manifest(format!(
                "{}: kinds/class_ids length mismatch",
                r.path
            )));
        }
        let keys: Vec<(EventKind, u32)> =
            r.kinds.iter().copied().zip(r.class_ids.iter().copied()).collect();
        let dest = match r.split.as_str() {
            "train" => &mut train_labels,
            "test" => &mut test_labels,
            "val" => {
                continue;
            }
            other => {
                return Err(AudioError::Manifest(format!(
                    "{}: unknown split {other:?}",
                    r.path
                )))
            }
        };
        dest.entry(r.task_id).or_default().extend(keys.iter().copied());
        let sem = keys.iter().find(|(k, _)| *k == EventKind::Semantic);
        let ac = keys.iter().find(|(k, _)| *k == EventKind::Acoustic);
        if let (Some((_, s)), Some((_, a))) = (sem, ac) {
            if r.split == "train" {
                train_pairs.insert((*s, *a));
            } else {
                test_pairs.insert((*s, *a));
            }
        }
    }
    let task_ids: Vec<usize> = train_labels.keys().copied().collect();
    for (i, &a) in task_ids.iter().enumerate() {
        for &b in &task_ids[i + 1..] {
            if let Some(shared) = train_labels[&a].intersection(&train_labels[&b]).next() {
                return Err(AudioError::Manifest(format!(
                    "train label {shared:?} appears in tasks {a} and {b}"
                )));
            }
        }
    }
    for (task, labels) in &train_labels {
        let tested = test_labels.get(task).cloned().unwrap_or_default();
        for l in labels {
            if !tested.contains(l) {
                return Err(AudioError::Manifest(format!(
                    "label {l:?} trained in task {task} but absent from its test split"
                )));
            }
        }
    }
    if let Some(p) = test_pairs.intersection(&train_pairs).next() {
        return Err(AudioError::Manifest(format!(
            "combined test pairing {p:?} occurs in a train split"
        )));
    }
    Ok(())
}

pub fn manifest_to_jsonl(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses line-delimited manifest records; blank lines are ignored.
pub fn manifest_from_jsonl(s: &str) -> Result<Vec<ManifestRecord>, AudioError> {
    let mut records = Vec::new();
    for (i, line) in s.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| AudioError::Manifest(format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    Ok(records)
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<(), AudioError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(manifest_to_jsonl(records).as_bytes())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, AudioError> {
    let f = std::fs::File::open(path)?;
    let mut s = String::new();
    let mut reader = std::io::BufReader::new(f);
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        s.push_str(&line);
    }
    manifest_from_jsonl(&s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(mode: CombinedMode) -> CorpusSpec {
        CorpusSpec {
            num_semantic_classes: 6,
            num_acoustic_classes: 3,
            clips_per_class: 10,
            seed: 7,
            combined_mode: mode,
            tasks: vec![
                TaskClasses {
                    semantic: vec![0, 1],
                    acoustic: vec![0],
                },
                TaskClasses {
                    semantic: vec![2, 3],
                    acoustic: vec![1],
                },
                TaskClasses {
                    semantic: vec![4, 5],
                    acoustic: vec![2],
                },
            ],
        }
    }

    #[test]
    fn train_label_sets_are_pairwise_disjoint() {
        let stream = build_task_stream(&small_spec(CombinedMode::None)).unwrap();
        let mut seen: BTreeSet<(EventKind, u32)> = BTreeSet::new();
        for task in stream.training_tasks() {
            for clip in &task.train {
                for l in &clip.labels {
                    assert!(
                        seen.insert(l.key()) || stream_label_in_task(&stream, l.key(), task.task_id),
                        "label {:?} leaked across tasks",
                        l.key()
                    );
                }
            }
        }
    }

    fn stream_label_in_task(stream: &TaskStream, key: (EventKind, u32), task: usize) -> bool {
        stream.label_universe[&task].iter().any(|l| l.key() == key)
    }

    #[test]
    fn same_spec_and_seed_give_identical_manifests_and_samples() {
        let a = build_task_stream(&small_spec(CombinedMode::Splice)).unwrap();
        let b = build_task_stream(&small_spec(CombinedMode::Splice)).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a.tasks[0].train[0].samples, b.tasks[0].train[0].samples);
        assert_eq!(a.tasks[2].test[1].samples, b.tasks[2].test[1].samples);
    }

    #[test]
    fn split_sizes_are_80_10_10() {
        let mut spec = small_spec(CombinedMode::None);
        spec.clips_per_class = 20;
        let stream = build_task_stream(&spec).unwrap();
        // Each task holds 3 classes (2 semantic + 1 acoustic) of 20 clips.
        let t = &stream.tasks[0];
        assert_eq!(t.train.len(), 16 * 3);
        assert_eq!(t.val.len(), 2 * 3);
        assert_eq!(t.test.len(), 2 * 3);
    }

    #[test]
    fn combined_tasks_are_eval_only_with_held_out_pairings() {
        let stream = build_task_stream(&small_spec(CombinedMode::Splice)).unwrap();
        let combined: Vec<&Task> = stream.eval_only_tasks().collect();
        assert_eq!(combined.len(), 3);
        for task in &combined {
            assert!(task.train.is_empty() && task.val.is_empty());
            assert!(!task.test.is_empty());
            for clip in &task.test {
                assert_eq!(clip.labels.len(), 2, "combined clips carry both kinds");
            }
        }
        // Task 0's semantic classes pair with task 1's acoustic class.
        let pairs = stream.combined_pairs();
        assert!(pairs.contains(&(0, 1)));
        assert!(pairs.contains(&(1, 1)));
        verify_stream(&stream.manifest()).unwrap();
    }

    #[test]
    fn class_in_two_tasks_is_a_spec_error() {
        let mut spec = small_spec(CombinedMode::None);
        spec.tasks[1].semantic = vec![0, 3]; // class 0 already in task 0
        assert!(matches!(
            build_task_stream(&spec),
            Err(AudioError::Spec(_))
        ));
    }

    #[test]
    fn unassigned_class_is_a_spec_error() {
        let mut spec = small_spec(CombinedMode::None);
        spec.num_acoustic_classes = 4; // class 3 never assigned
        assert!(matches!(spec.validate(), Err(AudioError::Spec(_))));
    }

    #[test]
    fn toml_roundtrip_preserves_spec() {
        let spec = small_spec(CombinedMode::Overlay);
        let s = spec.to_toml_string();
        let back = CorpusSpec::from_toml_str(&s).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn unknown_toml_field_is_rejected() {
        let mut s = small_spec(CombinedMode::None).to_toml_string();
        s.push_str("\nmystery_knob = 3\n");
        assert!(CorpusSpec::from_toml_str(&s).is_err());
    }

    #[test]
    fn manifest_jsonl_roundtrip() {
        let stream = build_task_stream(&small_spec(CombinedMode::Splice)).unwrap();
        let records = stream.manifest();
        let jsonl = manifest_to_jsonl(&records);
        let back = manifest_from_jsonl(&jsonl).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn manifest_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let stream = build_task_stream(&small_spec(CombinedMode::None)).unwrap();
        write_manifest(&stream.manifest(), &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), stream.manifest());
    }

    #[test]
    fn verify_stream_catches_cross_task_train_leak() {
        let stream = build_task_stream(&small_spec(CombinedMode::None)).unwrap();
        let mut records = stream.manifest();
        // Claim a task-0 class also trains in task 1.
        let leak = records
            .iter()
            .position(|r| r.task_id == 0 && r.split == "train")
            .unwrap();
        let mut bad = records[leak].clone();
        bad.task_id = 1;
        records.push(bad);
        assert!(verify_stream(&records).is_err());
    }

    #[test]
    fn verify_stream_catches_missing_test_coverage() {
        let stream = build_task_stream(&small_spec(CombinedMode::None)).unwrap();
        let records: Vec<ManifestRecord> = stream
            .manifest()
            .into_iter()
            .filter(|r| !(r.task_id == 1 && r.split == "test" && r.class_ids == vec![2]))
            .collect();
        assert!(verify_stream(&records).is_err());
    }

    #[test]
    fn malformed_manifest_line_reports_line_number() {
        let err = manifest_from_jsonl("{\"path\": 3}\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
