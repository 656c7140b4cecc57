//! Experiment orchestration: a TOML-described run (corpus, method, training
//! settings, seeds) executed over a task curriculum, writing per-seed
//! artifacts to a run directory, plus a cross-run summary report.
//!
//! One run directory holds a `config.toml` snapshot and one `seed<k>/`
//! subdirectory per seed containing exactly `r_matrix.csv`, `metrics.json`,
//! `train_log.jsonl`, and `plot_data.csv`. Identical configuration and seed
//! reproduce identical artifact bytes.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::corpus::{build_task_stream, CombinedMode, CorpusSpec, Task, TaskStream};
use crate::audio::{AudioError, EventLabel};
use crate::baselines::{estimate_fisher, FisherEstimate, LAMBDA_EWC, LWF_ALPHA, LWF_TEMP};
use crate::memory::{MemoryError, ReplayMemory};
use crate::metrics::{MetricsError, ResultMatrix};
use crate::model::{ModelConfig, ModelError, MoeDecoderModel};
use crate::rng::derive_seed;
use crate::trainer::{
    append_train_log, evaluate, train_task, EncoderCache, MethodHooks, TaskRecord, TrainConfig,
    TrainError,
};

/// Clips sampled per task when estimating a diagonal Fisher.
pub const FISHER_SAMPLES: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which continual-learning method drives a run. The serialized names are
/// the tokens accepted in config files and on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DoubleMixture,
    DoubleMixtureNoExperts,
    DoubleMixtureNoMemory,
    Ft,
    Mtl,
    Er,
    Agem,
    Ewc,
    Lwf,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::DoubleMixture,
        Method::DoubleMixtureNoExperts,
        Method::DoubleMixtureNoMemory,
        Method::Ft,
        Method::Mtl,
        Method::Er,
        Method::Agem,
        Method::Ewc,
        Method::Lwf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DoubleMixture => "double_mixture",
            Method::DoubleMixtureNoExperts => "double_mixture_no_experts",
            Method::DoubleMixtureNoMemory => "double_mixture_no_memory",
            Method::Ft => "ft",
            Method::Mtl => "mtl",
            Method::Er => "er",
            Method::Agem => "agem",
            Method::Ewc => "ewc",
            Method::Lwf => "lwf",
        }
    }

    pub fn from_name(s: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == s)
    }

    /// One expert per task, earlier experts frozen as the next one arrives.
    /// Every other method trains a single always-active adapter.
    fn grows_experts(self) -> bool {
        matches!(self, Method::DoubleMixture | Method::DoubleMixtureNoMemory)
    }

    /// Replay term in the data loss, drawn from mixed memory.
    fn replays_mixed(self) -> bool {
        matches!(self, Method::DoubleMixture | Method::DoubleMixtureNoExperts)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Curriculum order: `"default"` keeps corpus order, a list permutes the
/// training tasks into new positions. Combined eval-only tasks stay last
/// either way.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum TaskOrder {
    #[default]
    Default,
    Permutation(Vec<usize>),
}

impl Serialize for TaskOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TaskOrder::Default => s.serialize_str("default"),
            TaskOrder::Permutation(p) => p.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for TaskOrder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Named(String),
            Permutation(Vec<usize>),
        }
        match Repr::deserialize(d)? {
            Repr::Named(n) if n == "default" => Ok(TaskOrder::Default),
            Repr::Named(n) => Err(serde::de::Error::custom(format!(
                "unknown task_order {n:?}, expected \"default\" or a permutation"
            ))),
            Repr::Permutation(p) => Ok(TaskOrder::Permutation(p)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub output_dir: PathBuf,
    /// Each seed becomes both the model init seed and the training seed of
    /// one full curriculum pass; `train.seed` is overridden per run.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub task_order: TaskOrder,
    #[serde(default)]
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| ExperimentError::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config always serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must be non-empty".into()));
        }
        // Seed directories are named after the seed value.
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(ExperimentError::Config("duplicate seeds".into()));
        }
        if let TaskOrder::Permutation(p) = &self.task_order {
            check_permutation(p, self.corpus.tasks.len())?;
        }
        Ok(())
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<(), ExperimentError> {
    if perm.len() != n {
        return Err(ExperimentError::Config(format!(
            "task_order lists {} positions, corpus has {n} training tasks",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(ExperimentError::Config(format!(
                "task_order is not a permutation of 0..{n}"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reorders the training tasks of a stream. Tasks keep their original ids,
/// so logs show the permuted id sequence; the result matrix stays indexed by
/// position in the new order.
pub fn permute_order(stream: &TaskStream, perm: &[usize]) -> Result<TaskStream, ExperimentError> {
    let training: Vec<&Task> = stream.training_tasks().collect();
    check_permutation(perm, training.len())?;
    let mut tasks: Vec<Task> = perm.iter().map(|&i| training[i].clone()).collect();
    tasks.extend(stream.eval_only_tasks().cloned());
    Ok(TaskStream {
        tasks,
        label_universe: stream.label_universe.clone(),
        combined_mode: stream.combined_mode,
    })
}

/// The numbers that land in `metrics.json`. `avg_forgetting` is null for the
/// multitask upper bound, which has no sequential checkpoints to forget from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub avg_acc: f64,
    pub avg_forgetting: Option<f64>,
    /// Final-checkpoint accuracy per training task, in curriculum order.
    pub per_task: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub combined_per_task: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combined_avg_acc: Option<f64>,
}

/// Outcome of one seed's pass over the curriculum.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub matrix: ResultMatrix,
    pub summary: RunSummary,
    pub task_records: Vec<TaskRecord>,
    pub model: MoeDecoderModel,
}

pub fn run_curriculum(
    stream: &TaskStream,
    method: Method,
    train: &TrainConfig,
) -> Result<SeedRun, ExperimentError> {
    run_curriculum_with(stream, method, train, |_, _| {})
}

/// As `run_curriculum`, invoking `after_task(position, &model)` once per
/// finished training phase (before that phase's evaluation row).
pub fn run_curriculum_with<F>(
    stream: &TaskStream,
    method: Method,
    train: &TrainConfig,
    mut after_task: F,
) -> Result<SeedRun, ExperimentError>
where
    F: FnMut(usize, &MoeDecoderModel),
{
    train.validate()?;
    let training: Vec<&Task> = stream.training_tasks().collect();
    if training.is_empty() {
        return Err(ExperimentError::Config("stream has no training tasks".into()));
    }
    let model_cfg = ModelConfig { init_seed: train.seed, ..ModelConfig::default() };
    let mut model = MoeDecoderModel::new(model_cfg)?;
    let mut cache = EncoderCache::new();
    let mut records: Vec<TaskRecord> = Vec::new();
    let t_count = training.len();
    let mut matrix = ResultMatrix::new(t_count);

    if method == Method::Mtl {
        // One phase over the union of every task's data. The union is
        // canonicalized (sorted clips, sorted labels, fixed task id) so the
        // upper bound is invariant to curriculum order by construction.
        let union = union_task(&training);
        let mut labels: Vec<EventLabel> = Vec::new();
        for task in &training {
            labels.extend(universe(stream, task.task_id)?.iter().cloned());
        }
        labels.sort();
        model.ensure_label_tokens(&labels);
        model.add_expert(union.task_id)?;
        let record =
            train_task(&mut model, &union, None, train, &mut cache, &mut MethodHooks::Standard)?;
        records.push(record);
        after_task(0, &model);
        // Only the final checkpoint exists, so only the final row is
        // recorded and forgetting stays undefined.
        for (i, task) in training.iter().enumerate() {
            let acc = evaluate(&model, &task.test, &mut cache)?;
            matrix.record(t_count - 1, i, acc)?;
        }
        return finish(stream, method, train.seed, model, cache, matrix, records);
    }

    let forbidden = stream.combined_pairs();
    let mut memory = ReplayMemory::new();
    let mut fishers: Vec<FisherEstimate> = Vec::new();

    for (pos, task) in training.iter().enumerate() {
        // Distillation compares logits over the token columns that existed
        // before this task; the teacher is cloned after registration so it
        // can embed new-task prefixes, but its new columns are never read.
        let old_token_end = model.vocab().size();
        model.ensure_label_tokens(universe(stream, task.task_id)?);
        if method.grows_experts() || pos == 0 {
            model.add_expert(task.task_id)?;
        }
        let teacher = if method == Method::Lwf && pos > 0 {
            Some((model.clone(), old_token_end))
        } else {
            None
        };
        let replay = if (method.replays_mixed() || method == Method::Er) && !memory.is_empty() {
            Some(&memory)
        } else {
            None
        };
        let mut hooks = match (method, &teacher) {
            (Method::Agem, _) if !memory.is_empty() => MethodHooks::Agem { memory: &memory },
            (Method::Ewc, _) if !fishers.is_empty() => MethodHooks::Ewc { penalties: &fishers },
            (Method::Lwf, Some((teacher, old_token_end))) => MethodHooks::Lwf {
                teacher,
                alpha: LWF_ALPHA,
                temp: LWF_TEMP,
                old_token_end: *old_token_end,
            },
            _ => MethodHooks::Standard,
        };
        let record = train_task(&mut model, task, replay, train, &mut cache, &mut hooks)?;
        records.push(record);

        let mem_seed = derive_seed(train.seed, "memory", &[task.task_id as u64]);
        if method.replays_mixed() {
            memory.add_task(task.task_id, &task.train, stream.combined_mode, &forbidden, mem_seed)?;
        } else if matches!(method, Method::Er | Method::Agem) {
            memory.add_task_plain(task.task_id, &task.train, mem_seed)?;
        }
        if method == Method::Ewc {
            let fisher_seed = derive_seed(train.seed, "fisher", &[task.task_id as u64]);
            fishers.push(estimate_fisher(
                &model,
                &task.train,
                &mut cache,
                FISHER_SAMPLES,
                fisher_seed,
                LAMBDA_EWC,
            )?);
        }
        after_task(pos, &model);
        for (i, seen) in training.iter().take(pos + 1).enumerate() {
            let acc = evaluate(&model, &seen.test, &mut cache)?;
            matrix.record(pos, i, acc)?;
        }
    }
    finish(stream, method, train.seed, model, cache, matrix, records)
}

fn universe(stream: &TaskStream, task_id: usize) -> Result<&Vec<EventLabel>, ExperimentError> {
    stream
        .label_universe
        .get(&task_id)
        .ok_or_else(|| ExperimentError::Config(format!("no label universe for task {task_id}")))
}

fn union_task(training: &[&Task]) -> Task {
    let mut union = Task { task_id: 0, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for t in training {
        union.train.extend(t.train.iter().cloned());
        union.val.extend(t.val.iter().cloned());
        union.test.extend(t.test.iter().cloned());
    }
    union.train.sort_by_key(|c| c.uid);
    union.val.sort_by_key(|c| c.uid);
    union.test.sort_by_key(|c| c.uid);
    union
}

fn finish(
    stream: &TaskStream,
    method: Method,
    seed: u64,
    model: MoeDecoderModel,
    mut cache: EncoderCache,
    matrix: ResultMatrix,
    task_records: Vec<TaskRecord>,
) -> Result<SeedRun, ExperimentError> {
    let avg_acc = matrix.avg_accuracy()?;
    let avg_forgetting =
        if method == Method::Mtl { None } else { Some(matrix.avg_forgetting()?) };
    let t = matrix.tasks();
    let per_task: Vec<f64> = (0..t)
        .map(|i| matrix.get(t - 1, i).expect("final row is fully recorded"))
        .collect();
    let mut combined_per_task = Vec::new();
    for task in stream.eval_only_tasks() {
        combined_per_task.push(evaluate(&model, &task.test, &mut cache)?);
    }
    let combined_avg_acc = if combined_per_task.is_empty() {
        None
    } else {
        Some(combined_per_task.iter().sum::<f64>() / combined_per_task.len() as f64)
    };
    Ok(SeedRun {
        seed,
        matrix,
        summary: RunSummary {
            method,
            seed,
            avg_acc,
            avg_forgetting,
            per_task,
            combined_per_task,
            combined_avg_acc,
        },
        task_records,
        model,
    })
}

/// Executes every seed of a configured experiment and writes the run
/// directory. The corpus is built once, so all seeds see identical data and
/// differ only in model initialization and training randomness.
pub fn run(config: &ExperimentConfig) -> Result<Vec<SeedRun>, ExperimentError> {
    config.validate()?;
    let base = build_task_stream(&config.corpus)?;
    let stream = match &config.task_order {
        TaskOrder::Default => base,
        TaskOrder::Permutation(p) => permute_order(&base, p)?,
    };
    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join("config.toml"), config.to_toml_string())?;
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let mut train = config.train.clone();
        train.seed = seed;
        let run = run_curriculum(&stream, config.method, &train)?;
        write_seed_dir(&config.output_dir.join(format!("seed{seed}")), &run)?;
        runs.push(run);
    }
    Ok(runs)
}

fn write_seed_dir(dir: &Path, run: &SeedRun) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("r_matrix.csv"), run.matrix.to_csv())?;
    let json =
        serde_json::to_string_pretty(&run.summary).expect("run summary always serializes");
    fs::write(dir.join("metrics.json"), json + "\n")?;
    let log_path = dir.join("train_log.jsonl");
    // The epoch log appends, so clear any previous run's file first.
    if log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    for record in &run.task_records {
        append_train_log(&log_path, &record.epochs)?;
    }
    let mut plot = String::from("checkpoint,task,accuracy\n");
    for t in 0..run.matrix.tasks() {
        for i in 0..=t {
            if let Some(acc) = run.matrix.get(t, i) {
                plot.push_str(&format!("after_task{t},task{i},{:.2}\n", acc * 100.0));
            }
        }
    }
    fs::write(dir.join("plot_data.csv"), plot)?;
    Ok(())
}

/// Checks that a finished run directory contains exactly the expected
/// entries: the config snapshot at the top and the four artifact files in
/// each seed directory, nothing more or less.
pub fn verify_run_dir(dir: &Path, seeds: &[u64]) -> Result<(), ExperimentError> {
    let mut expected: BTreeSet<String> = seeds.iter().map(|s| format!("seed{s}")).collect();
    expected.insert("config.toml".to_string());
    let found = dir_names(dir)?;
    if found != expected {
        return Err(ExperimentError::Config(format!(
            "{}: expected entries {expected:?}, found {found:?}",
            dir.display()
        )));
    }
    let per_seed: BTreeSet<String> =
        ["metrics.json", "plot_data.csv", "r_matrix.csv", "train_log.jsonl"]
            .map(String::from)
            .into();
    for s in seeds {
        let seed_dir = dir.join(format!("seed{s}"));
        let found = dir_names(&seed_dir)?;
        if found != per_seed {
            return Err(ExperimentError::Config(format!(
                "{}: expected files {per_seed:?}, found {found:?}",
                seed_dir.display()
            )));
        }
    }
    Ok(())
}

fn dir_names(dir: &Path) -> Result<BTreeSet<String>, ExperimentError> {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        names.insert(entry?.file_name().to_string_lossy().into_owned());
    }
    Ok(names)
}

/// One line of the cross-run report: a method on a dataset, aggregated over
/// that run's seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub avg_acc_mean: f64,
    pub avg_acc_std: f64,
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
    pub seeds: usize,
}

/// Reads each run directory's snapshot and per-seed metrics into one row,
/// sorted by dataset then method.
pub fn collect_report(run_dirs: &[PathBuf]) -> Result<Vec<ReportRow>, ExperimentError> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let text = fs::read_to_string(dir.join("config.toml"))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", dir.display())))?;
        let mut accs = Vec::new();
        let mut forgets = Vec::new();
        for &seed in &cfg.seeds {
            let path = dir.join(format!("seed{seed}")).join("metrics.json");
            let text = fs::read_to_string(&path)?;
            let summary: RunSummary = serde_json::from_str(&text)
                .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
            accs.push(summary.avg_acc);
            if let Some(f) = summary.avg_forgetting {
                forgets.push(f);
            }
        }
        let (acc_mean, acc_std) = mean_std(&accs);
        let (forgetting_mean, forgetting_std) = if forgets.len() == accs.len() {
            let (m, s) = mean_std(&forgets);
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        rows.push(ReportRow {
            method: cfg.method.name().to_string(),
            dataset: corpus_label(&cfg.corpus),
            avg_acc_mean: acc_mean,
            avg_acc_std: acc_std,
            forgetting_mean,
            forgetting_std,
            seeds: accs.len(),
        });
    }
    rows.sort_by(|a, b| (&a.dataset, &a.method).cmp(&(&b.dataset, &b.method)));
    Ok(rows)
}

/// Report rows as CSV, values in percent with two decimals; forgetting
/// fields are empty for runs where it is undefined.
pub fn report_to_csv(rows: &[ReportRow]) -> String {
    let mut out =
        String::from("method,dataset,avg_acc_mean,avg_acc_std,forgetting_mean,forgetting_std,seeds\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{},{},{}\n",
            r.method,
            r.dataset,
            r.avg_acc_mean * 100.0,
            r.avg_acc_std * 100.0,
            opt(r.forgetting_mean),
            opt(r.forgetting_std),
            r.seeds
        ));
    }
    out
}

/// Population standard deviation; a single sample reports 0.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Short dataset label derived from the corpus shape, such as
/// `sem6_ac3_t3_splice`.
pub fn corpus_label(spec: &CorpusSpec) -> String {
    let mut label = format!(
        "sem{}_ac{}_t{}",
        spec.num_semantic_classes,
        spec.num_acoustic_classes,
        spec.tasks.len()
    );
    match spec.combined_mode {
        CombinedMode::Splice => label.push_str("_splice"),
        CombinedMode::Overlay => label.push_str("_overlay"),
        CombinedMode::None => {}
    }
    label
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::corpus::TaskClasses;

    fn tiny_spec(tasks: usize, clips: usize, mode: CombinedMode) -> CorpusSpec {
        let task_list = (0..tasks)
            .map(|t| TaskClasses {
                semantic: vec![2 * t as u32, 2 * t as u32 + 1],
                acoustic: vec![t as u32],
            })
            .collect();
        CorpusSpec {
            num_semantic_classes: 2 * tasks as u32,
            num_acoustic_classes: tasks as u32,
            clips_per_class: clips,
            seed: 11,
            combined_mode: mode,
            tasks: task_list,
        }
    }

    fn fast_train(seed: u64) -> TrainConfig {
        TrainConfig { epochs_per_task: 2, batch_size: 8, seed, ..TrainConfig::default() }
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::from_name(m.name()), Some(m));
        }
        assert_eq!(Method::from_name("gradient_descent_into_madness"), None);
        let json = serde_json::to_string(&Method::DoubleMixtureNoExperts).unwrap();
        assert_eq!(json, "\"double_mixture_no_experts\"");
    }

    #[test]
    fn config_defaults_fill_in() {
        let text = r#"
method = "double_mixture"
output_dir = "/tmp/run"

[corpus]
num_semantic_classes = 2
num_acoustic_classes = 1
clips_per_class = 10
seed = 7

[[corpus.tasks]]
semantic = [0, 1]
acoustic = [0]
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.task_order, TaskOrder::Default);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.method, Method::DoubleMixture);
    }

    #[test]
    fn config_toml_roundtrips() {
        let cfg = ExperimentConfig {
            method: Method::Er,
            output_dir: PathBuf::from("/tmp/er-run"),
            seeds: vec![5, 9],
            task_order: TaskOrder::Permutation(vec![1, 0]),
            train: TrainConfig { epochs_per_task: 3, ..TrainConfig::default() },
            corpus: tiny_spec(2, 10, CombinedMode::Splice),
        };
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn task_order_accepts_both_forms() {
        #[derive(Deserialize)]
        struct Wrap {
            task_order: TaskOrder,
        }
        let w: Wrap = toml::from_str("task_order = \"default\"").unwrap();
        assert_eq!(w.task_order, TaskOrder::Default);
        let w: Wrap = toml::from_str("task_order = [2, 0, 1]").unwrap();
        assert_eq!(w.task_order, TaskOrder::Permutation(vec![2, 0, 1]));
        assert!(toml::from_str::<Wrap>("task_order = \"shuffled\"").is_err());
    }

    #[test]
    fn config_rejects_bad_input() {
        let good = ExperimentConfig {
            method: Method::Ft,
            output_dir: PathBuf::from("/tmp/x"),
            seeds: vec![1],
            task_order: TaskOrder::Default,
            train: TrainConfig::default(),
            corpus: tiny_spec(2, 10, CombinedMode::None),
        };
        let mut empty_seeds = good.clone();
        empty_seeds.seeds.clear();
        assert!(empty_seeds.validate().is_err());
        let mut dup_seeds = good.clone();
        dup_seeds.seeds = vec![1, 1];
        assert!(dup_seeds.validate().is_err());
        let mut short_perm = good.clone();
        short_perm.task_order = TaskOrder::Permutation(vec![0]);
        assert!(short_perm.validate().is_err());
        let mut repeat_perm = good.clone();
        repeat_perm.task_order = TaskOrder::Permutation(vec![0, 0]);
        assert!(repeat_perm.validate().is_err());
        let mut out_of_range = good.clone();
        out_of_range.task_order = TaskOrder::Permutation(vec![0, 2]);
        assert!(out_of_range.validate().is_err());
        assert!(good.validate().is_ok());
        let unknown = "method = \"ft\"\noutput_dir = \"/tmp/x\"\nextra = 1\n";
        assert!(ExperimentConfig::from_toml_str(unknown).is_err());
    }

    #[test]
    fn permute_reorders_training_tasks_and_keeps_eval_last() {
        let stream = build_task_stream(&tiny_spec(2, 10, CombinedMode::Splice)).unwrap();
        let ids = |s: &TaskStream| s.tasks.iter().map(|t| t.task_id).collect::<Vec<_>>();
        let base_ids = ids(&stream);
        let identity = permute_order(&stream, &[0, 1]).unwrap();
        assert_eq!(ids(&identity), base_ids);
        let reversed = permute_order(&stream, &[1, 0]).unwrap();
        let rev_ids = ids(&reversed);
        assert_eq!(rev_ids[0], base_ids[1]);
        assert_eq!(rev_ids[1], base_ids[0]);
        // The combined eval-only task stays in final position.
        assert!(reversed.tasks.last().unwrap().is_eval_only());
        assert_eq!(rev_ids[2..], base_ids[2..]);
        assert!(permute_order(&stream, &[0]).is_err());
        assert!(permute_order(&stream, &[1, 1]).is_err());
    }

    #[test]
    fn single_task_run_has_zero_forgetting() {
        let stream = build_task_stream(&tiny_spec(1, 10, CombinedMode::None)).unwrap();
        let run = run_curriculum(&stream, Method::Ft, &fast_train(3)).unwrap();
        assert_eq!(run.summary.avg_forgetting, Some(0.0));
        assert_eq!(run.summary.per_task.len(), 1);
        assert!(run.summary.combined_avg_acc.is_none());
        assert_eq!(run.model.num_experts(), 1);
    }

    #[test]
    fn mtl_reports_null_forgetting_and_only_a_final_row() {
        let stream = build_task_stream(&tiny_spec(2, 10, CombinedMode::None)).unwrap();
        let run = run_curriculum(&stream, Method::Mtl, &fast_train(3)).unwrap();
        assert!(run.summary.avg_forgetting.is_none());
        assert_eq!(run.summary.per_task.len(), 2);
        assert!(run.matrix.get(0, 0).is_none());
        assert!(run.matrix.get(1, 0).is_some());
        let json = serde_json::to_string(&run.summary).unwrap();
        assert!(json.contains("\"avg_forgetting\":null"), "{json}");
    }

    #[test]
    fn mtl_is_invariant_to_task_order() {
        let stream = build_task_stream(&tiny_spec(2, 10, CombinedMode::None)).unwrap();
        let reversed = permute_order(&stream, &[1, 0]).unwrap();
        let a = run_curriculum(&stream, Method::Mtl, &fast_train(5)).unwrap();
        let b = run_curriculum(&reversed, Method::Mtl, &fast_train(5)).unwrap();
        // The canonicalized union makes the upper bound exactly order-free.
        assert_eq!(a.summary.avg_acc, b.summary.avg_acc);
        assert_eq!(a.summary.per_task[0], b.summary.per_task[1]);
        assert_eq!(a.summary.per_task[1], b.summary.per_task[0]);
    }

    #[test]
    fn sequential_methods_complete_with_expected_expert_counts() {
        let stream = build_task_stream(&tiny_spec(2, 10, CombinedMode::Splice)).unwrap();
        for (method, experts) in [
            (Method::DoubleMixture, 2),
            (Method::DoubleMixtureNoExperts, 1),
            (Method::DoubleMixtureNoMemory, 2),
            (Method::Er, 1),
            (Method::Agem, 1),
            (Method::Ewc, 1),
            (Method::Lwf, 1),
        ] {
            let run = run_curriculum(&stream, method, &fast_train(2)).unwrap();
            assert_eq!(run.model.num_experts(), experts, "{method}");
            assert!(run.summary.avg_forgetting.is_some(), "{method}");
            assert_eq!(run.summary.per_task.len(), 2, "{method}");
            // One combined eval-only task is built per base task.
            assert_eq!(run.summary.combined_per_task.len(), 2, "{method}");
        }
    }

    #[test]
    fn run_writes_exactly_the_artifact_set() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = ExperimentConfig {
            method: Method::Ft,
            output_dir: out.clone(),
            seeds: vec![1],
            task_order: TaskOrder::Default,
            train: fast_train(1),
            corpus: tiny_spec(1, 10, CombinedMode::None),
        };
        run(&cfg).unwrap();
        verify_run_dir(&out, &cfg.seeds).unwrap();
        fs::write(out.join("seed1").join("stray.txt"), "x").unwrap();
        assert!(verify_run_dir(&out, &cfg.seeds).is_err());
        fs::remove_file(out.join("seed1").join("stray.txt")).unwrap();
        fs::remove_file(out.join("seed1").join("plot_data.csv")).unwrap();
        assert!(verify_run_dir(&out, &cfg.seeds).is_err());
    }

    #[test]
    fn reruns_are_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let make = |name: &str| ExperimentConfig {
            method: Method::Ft,
            output_dir: dir.path().join(name),
            seeds: vec![4],
            task_order: TaskOrder::Default,
            train: fast_train(1),
            corpus: tiny_spec(1, 10, CombinedMode::None),
        };
        let a = make("a");
        let b = make("b");
        run(&a).unwrap();
        run(&b).unwrap();
        for file in ["r_matrix.csv", "metrics.json", "train_log.jsonl", "plot_data.csv"] {
            let left = fs::read(a.output_dir.join("seed4").join(file)).unwrap();
            let right = fs::read(b.output_dir.join("seed4").join(file)).unwrap();
            assert_eq!(left, right, "{file} differs between identical runs");
        }
    }

    #[test]
    fn report_aggregates_with_population_std() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("ft_run");
        fs::create_dir_all(run_dir.join("seed1")).unwrap();
        fs::create_dir_all(run_dir.join("seed2")).unwrap();
        let cfg = ExperimentConfig {
            method: Method::Ft,
            output_dir: run_dir.clone(),
            seeds: vec![1, 2],
            task_order: TaskOrder::Default,
            train: TrainConfig::default(),
            corpus: tiny_spec(2, 10, CombinedMode::Overlay),
        };
        fs::write(run_dir.join("config.toml"), cfg.to_toml_string()).unwrap();
        for (seed, acc, forget) in [(1u64, 0.4, 0.1), (2, 0.6, 0.3)] {
            let summary = RunSummary {
                method: Method::Ft,
                seed,
                avg_acc: acc,
                avg_forgetting: Some(forget),
                per_task: vec![acc],
                combined_per_task: Vec::new(),
                combined_avg_acc: None,
            };
            fs::write(
                run_dir.join(format!("seed{seed}")).join("metrics.json"),
                serde_json::to_string_pretty(&summary).unwrap(),
            )
            .unwrap();
        }
        let rows = collect_report(&[run_dir]).unwrap();
        assert_eq!(rows.len(), 1);
        let row = &rows[0];
        assert_eq!(row.method, "ft");
        assert_eq!(row.dataset, "sem4_ac2_t2_overlay");
        assert!((row.avg_acc_mean - 0.5).abs() < 1e-12);
        assert!((row.avg_acc_std - 0.1).abs() < 1e-12);
        assert!((row.forgetting_mean.unwrap() - 0.2).abs() < 1e-12);
        assert!((row.forgetting_std.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(row.seeds, 2);
        let csv = report_to_csv(&rows);
        assert!(csv.starts_with("method,dataset,avg_acc_mean"));
        assert!(csv.contains("ft,sem4_ac2_t2_overlay,50.00,10.00,20.00,10.00,2"), "{csv}");
    }

    #[test]
    fn report_leaves_forgetting_empty_when_undefined() {
        let rows = vec![ReportRow {
            method: "mtl".into(),
            dataset: "sem4_ac2_t2".into(),
            avg_acc_mean: 0.75,
            avg_acc_std: 0.0,
            forgetting_mean: None,
            forgetting_std: None,
            seeds: 3,
        }];
        let csv = report_to_csv(&rows);
        assert!(csv.contains("mtl,sem4_ac2_t2,75.00,0.00,,,3"), "{csv}");
    }
}
