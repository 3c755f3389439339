//! Generation and pass@k evaluation: retrieve a graph for each task
//! description, turn it into a soft prompt, sample code from the frozen
//! language model, and run each task's external syntax and functional
//! checkers on every sample.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use wait_timeout::ChildExt;

use crate::embeddings::EmbeddingTable;
use crate::lm::{prompt_ids, sample, EmbeddingLm};
use crate::netlist::{parse_str, sim::check_equivalent};
use crate::retriever::{retrieve, DualEncoder, RetrievalIndex, VectorSearch};
use crate::tensor::Mat;
use crate::text::stable_hash;
use crate::veriformer::VeriFormer;
use crate::{seeded_rng, Error, Exec, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Placeholder replaced by the candidate file path in checker templates.
pub const CODE_FILE: &str = "{code_file}";
/// Directories prepended to `PATH` when checkers run.
pub const CHECKER_PATH_ENV: &str = "VERIGRAG_CHECKER_PATH";

/// Probability that at least one of `k` draws without replacement from `n`
/// samples, `c` of them correct, is correct: `1 − C(n−c, k) / C(n, k)`,
/// evaluated as `1 − Π_{i=n−c+1}^{n} (1 − k/i)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(Error::Domain(format!("pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub timeout_s: u64,
}

/// One benchmark task directory: `description.txt`, `check_syntax.cmd`,
/// `check_function.cmd` and `meta.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkTask {
    pub task_id: String,
    pub description: String,
    pub check_syntax: String,
    pub check_function: String,
    pub timeout: Duration,
    /// Working directory for checker commands.
    pub dir: PathBuf,
}

fn read_trimmed(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?.trim().to_string())
}

impl BenchmarkTask {
    pub fn load(dir: &Path) -> Result<Self> {
        let task_id = dir.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::Schema(format!("bad task dir {}", dir.display())))?;
        let meta: TaskMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let task = BenchmarkTask {
            task_id: task_id.to_string(),
            description: read_trimmed(&dir.join("description.txt"))?,
            check_syntax: read_trimmed(&dir.join("check_syntax.cmd"))?,
            check_function: read_trimmed(&dir.join("check_function.cmd"))?,
            timeout: Duration::from_secs(meta.timeout_s.max(1)),
            dir: dir.to_path_buf(),
        };
        for t in [&task.check_syntax, &task.check_function] {
            if !t.contains(CODE_FILE) {
                return Err(Error::Schema(format!("{}: checker `{t}` lacks {CODE_FILE}", task.task_id)));
            }
        }
        Ok(task)
    }

    /// Writes a task directory.
    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(&self.task_id);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("description.txt"), format!("{}\n", self.description))?;
        fs::write(dir.join("check_syntax.cmd"), format!("{}\n", self.check_syntax))?;
        fs::write(dir.join("check_function.cmd"), format!("{}\n", self.check_function))?;
        fs::write(dir.join("meta.json"), serde_json::to_string(&TaskMeta { timeout_s: self.timeout.as_secs() })? + "\n")?;
        Ok(dir)
    }
}

/// Every task under `dir` (subdirectories holding a `meta.json`), sorted by id.
pub fn load_benchmark(dir: &Path) -> Result<Vec<BenchmarkTask>> {
    let mut tasks = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() && p.join("meta.json").is_file() {
                tasks.push(BenchmarkTask::load(&p)?);
            }
        }
    }
    if tasks.is_empty() {
        return Err(Error::NoTasks(dir.display().to_string()));
    }
    tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(tasks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckOutcome {
    pub passed: bool,
    pub timed_out: bool,
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn checker_path() -> Option<std::ffi::OsString> {
    let extra = std::env::var_os(CHECKER_PATH_ENV)?;
    let mut dirs: Vec<PathBuf> = std::env::split_paths(&extra).collect();
    if let Some(p) = std::env::var_os("PATH") {
        dirs.extend(std::env::split_paths(&p));
    }
    std::env::join_paths(dirs).ok()
}

/// Runs a checker template through `sh -c` with `{code_file}` substituted.
/// Exit 0 passes; exit 127 (command not found) is an environment problem.
pub fn run_checker(template: &str, code_file: &Path, timeout: Duration, cwd: &Path) -> Result<CheckOutcome> {
    let cmd = template.replace(CODE_FILE, &shell_quote(&code_file.to_string_lossy()));
    let mut command = Command::new("sh");
    command.arg("-c").arg(&cmd).current_dir(cwd).stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::null());
    if let Some(path) = checker_path() {
        command.env("PATH", path);
    }
    let mut child = command.spawn().map_err(|e| Error::CheckerUnavailable(format!("cannot start sh: {e}")))?;
    match child.wait_timeout(timeout)? {
        Some(status) if status.code() == Some(127) => Err(Error::CheckerUnavailable(cmd)),
        Some(status) => Ok(CheckOutcome { passed: status.success(), timed_out: false }),
        None => {
            let _ = child.kill();
            let _ = child.wait();
            Ok(CheckOutcome { passed: false, timed_out: true })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub task_id: String,
    pub sample_index: usize,
    pub temperature: f64,
    pub code: String,
    pub syntax_pass: bool,
    pub function_pass: bool,
    /// Generated without a soft prompt because retrieval found nothing.
    #[serde(default)]
    pub no_prompt: bool,
    #[serde(default)]
    pub timed_out: bool,
}

/// Syntax check, then (only on a pass) the functional check.
pub fn check_sample(record: &SampleRecord, task: &BenchmarkTask) -> Result<SampleRecord> {
    let tmp = tempfile::tempdir()?;
    let file = tmp.path().join("candidate.v");
    fs::write(&file, &record.code)?;
    let mut out = record.clone();
    let syn = run_checker(&task.check_syntax, &file, task.timeout, &task.dir)?;
    out.syntax_pass = syn.passed;
    out.function_pass = false;
    out.timed_out = syn.timed_out;
    if syn.passed {
        let fun = run_checker(&task.check_function, &file, task.timeout, &task.dir)?;
        out.function_pass = fun.passed;
        out.timed_out = fun.timed_out;
    }
    Ok(out)
}

/// The bundled syntax checker: the candidate parses as at least one module
/// of the supported Verilog subset.
pub fn structural_syntax_check(code: &str) -> bool {
    parse_str(code).is_ok_and(|m| !m.is_empty())
}

/// The bundled functional checker: the candidate's first module matches the
/// reference module's outputs on seeded random stimulus.
pub fn simulated_function_check(reference: &str, candidate: &str, cycles: usize, seed: u64) -> std::result::Result<(), String> {
    let r = parse_str(reference).map_err(|e| format!("reference: {e}"))?;
    let c = parse_str(candidate).map_err(|e| format!("candidate: {e}"))?;
    match (r.first(), c.first()) {
        (Some(r), Some(c)) => check_equivalent(r, c, cycles, seed),
        _ => Err("no module".into()),
    }
}

/// Everything generation needs. `embeddings` maps index ids to the graph
/// embeddings VeriFormer consumes.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub student: &'a DualEncoder,
    pub index: &'a RetrievalIndex,
    pub embeddings: &'a EmbeddingTable,
    pub veriformer: &'a VeriFormer,
    pub lm: &'a dyn EmbeddingLm,
}

impl Pipeline<'_> {
    /// Checks that every component agrees on its interface dimensions.
    pub fn validate(&self) -> Result<()> {
        let (s, v) = (&self.student.config, &self.veriformer.config);
        let mut problems = Vec::new();
        if s.graph_dim != v.graph_dim {
            problems.push(format!("retriever graph_dim {} != VeriFormer graph_dim {}", s.graph_dim, v.graph_dim));
        }
        if !self.embeddings.is_empty() && self.embeddings.dim != v.graph_dim {
            problems.push(format!("embedding dim {} != VeriFormer graph_dim {}", self.embeddings.dim, v.graph_dim));
        }
        if !self.index.is_empty() && self.index.dim != s.out_dim {
            problems.push(format!("index dim {} != retriever out_dim {}", self.index.dim, s.out_dim));
        }
        if v.lm_dim != self.lm.embed_dim() {
            problems.push(format!("VeriFormer lm_dim {} != language model width {}", v.lm_dim, self.lm.embed_dim()));
        }
        let known: std::collections::HashSet<&str> = self.embeddings.ids.iter().map(String::as_str).collect();
        if let Some(id) = self.index.ids.iter().find(|id| !known.contains(id.as_str())) {
            problems.push(format!("index id `{id}` has no graph embedding"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::PipelineConfig(problems.join("; ")))
        }
    }

    fn embedding_of(&self, id: &str) -> Option<Vec<f64>> {
        self.embeddings.ids.iter().position(|x| x == id).map(|i| self.embeddings.row(i))
    }

    /// The soft prompt for `description`: top-`top_k` retrieval, one
    /// VeriFormer prompt per hit, stacked. `None` when the index is empty.
    pub fn soft_prompt(&self, description: &str, top_k: usize) -> Result<Option<(Mat, Vec<String>)>> {
        let hits = retrieve(self.index, description, self.student, top_k)?;
        if hits.is_empty() {
            return Ok(None);
        }
        let parts = hits
            .iter()
            .map(|h| {
                let g = self.embedding_of(&h.id).ok_or_else(|| Error::PipelineConfig(format!("no embedding for `{}`", h.id)))?;
                self.veriformer.soft_prompt(&g)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some((Mat::stack_rows(&parts), hits.into_iter().map(|h| h.id).collect())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n: usize,
    /// Sample `i` uses `temperatures[i % len]`.
    pub temperatures: Vec<f64>,
    pub seed: u64,
    pub max_new_tokens: usize,
    /// Retrieved graphs per task. Values above 1 stack several soft prompts
    /// and are experimental.
    pub top_k: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { n: 20, temperatures: vec![0.2, 0.5, 0.8], seed: 0, max_new_tokens: 128, top_k: 1 }
    }
}

impl GenerationConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.temperatures.is_empty() || self.top_k == 0 {
            return Err(Error::Config("generation needs n >= 1, at least one temperature and top_k >= 1".into()));
        }
        if self.temperatures.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Config(format!("temperatures must be finite and non-negative: {:?}", self.temperatures)));
        }
        Ok(())
    }

    pub fn temperature(&self, sample_index: usize) -> f64 {
        self.temperatures[sample_index % self.temperatures.len()]
    }
}

/// Unchecked samples for one description plus the warnings raised.
pub fn generate_samples(
    task_id: &str,
    description: &str,
    pipeline: &Pipeline,
    cfg: &GenerationConfig,
    exec: Exec,
) -> Result<(Vec<SampleRecord>, Vec<String>)> {
    cfg.validate()?;
    pipeline.validate()?;
    let mut warnings = Vec::new();
    let soft = pipeline.soft_prompt(description, cfg.top_k)?;
    if soft.is_none() {
        let msg = format!("{task_id}: retrieval index is empty; generating without a soft prompt");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let soft = soft.map(|s| s.0);
    let lm = pipeline.lm;
    let prompt = prompt_ids(lm.vocab(), description);
    let used = soft.as_ref().map_or(0, |m| m.rows) + prompt.len();
    if used >= lm.max_len() {
        return Err(Error::PipelineConfig(format!("{task_id}: prompt of {used} rows leaves no room in a context of {}", lm.max_len())));
    }
    let base = stable_hash(cfg.seed, task_id.as_bytes());
    let records = exec.map_range(cfg.n, |i| {
        let temperature = cfg.temperature(i);
        let ids = sample(lm, soft.as_ref(), &prompt, temperature, cfg.max_new_tokens, &mut seeded_rng(base, i as u64));
        SampleRecord {
            task_id: task_id.to_string(),
            sample_index: i,
            temperature,
            code: lm.vocab().decode(&ids),
            syntax_pass: false,
            function_pass: false,
            no_prompt: soft.is_none(),
            timed_out: false,
        }
    });
    Ok((records, warnings))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub generation: GenerationConfig,
    pub k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { generation: GenerationConfig::default(), k: vec![1, 5] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub n: usize,
    pub c_syntax: usize,
    pub c_function: usize,
}

impl Counts {
    fn add(&mut self, r: &SampleRecord) {
        self.n += 1;
        self.c_syntax += r.syntax_pass as usize;
        self.c_function += r.function_pass as usize;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: String,
    pub n: usize,
    pub c_syntax: usize,
    pub c_function: usize,
    /// Keyed by the temperature's decimal form.
    pub per_temperature: BTreeMap<String, Counts>,
    pub no_prompt: bool,
    pub timed_out: usize,
}

/// `"pass@k"` → mean over tasks, for the syntax and function criteria.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub syntax: BTreeMap<String, f64>,
    pub function: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub tasks: Vec<TaskReport>,
    pub metrics: Metrics,
    /// The same metrics restricted to each temperature's samples, for `k`
    /// no larger than that temperature's sample count.
    pub metrics_per_temperature: BTreeMap<String, Metrics>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn temp_key(t: f64) -> String {
    format!("{t}")
}

fn metrics(counts: &[&Counts], ks: &[usize]) -> Result<Metrics> {
    let mut m = Metrics::default();
    for &k in ks {
        if counts.iter().any(|c| k > c.n) {
            continue;
        }
        let mean = |f: &dyn Fn(&Counts) -> usize| -> Result<f64> {
            let s = counts.iter().map(|c| pass_at_k(c.n, f(c), k)).sum::<Result<f64>>()?;
            Ok(s / counts.len() as f64)
        };
        m.syntax.insert(format!("pass@{k}"), mean(&|c| c.c_syntax)?);
        m.function.insert(format!("pass@{k}"), mean(&|c| c.c_function)?);
    }
    Ok(m)
}

/// Generates and checks `n` samples for every task under `benchmark`, then
/// averages pass@k over tasks. Returns the report and all checked samples.
pub fn evaluate(benchmark: &Path, pipeline: &Pipeline, cfg: &EvalConfig, exec: Exec) -> Result<(EvalReport, Vec<SampleRecord>)> {
    cfg.generation.validate()?;
    if cfg.k.is_empty() || cfg.k.iter().any(|&k| k == 0 || k > cfg.generation.n) {
        return Err(Error::Domain(format!("every k must lie in 1..={}, got {:?}", cfg.generation.n, cfg.k)));
    }
    pipeline.validate()?;
    let tasks = load_benchmark(benchmark)?;
    let per_task = exec.map(&tasks, |task| -> Result<(Vec<SampleRecord>, Vec<String>)> {
        let (raw, warnings) = generate_samples(&task.task_id, &task.description, pipeline, &cfg.generation, Exec::Sequential)?;
        let checked = raw.iter().map(|r| check_sample(r, task)).collect::<Result<Vec<_>>>()?;
        Ok((checked, warnings))
    });
    let mut reports = Vec::with_capacity(tasks.len());
    let mut all = Vec::new();
    let mut warnings = Vec::new();
    for (task, res) in tasks.iter().zip(per_task) {
        let (records, w) = res?;
        warnings.extend(w);
        let mut total = Counts::default();
        let mut per_temperature: BTreeMap<String, Counts> = BTreeMap::new();
        for r in &records {
            total.add(r);
            per_temperature.entry(temp_key(r.temperature)).or_default().add(r);
        }
        reports.push(TaskReport {
            task_id: task.task_id.clone(),
            n: total.n,
            c_syntax: total.c_syntax,
            c_function: total.c_function,
            per_temperature,
            no_prompt: records.iter().any(|r| r.no_prompt),
            timed_out: records.iter().filter(|r| r.timed_out).count(),
        });
        all.extend(records);
    }
    let totals: Vec<Counts> = reports.iter().map(|t| Counts { n: t.n, c_syntax: t.c_syntax, c_function: t.c_function }).collect();
    let overall = metrics(&totals.iter().collect::<Vec<_>>(), &cfg.k)?;
    let mut metrics_per_temperature = BTreeMap::new();
    let mut temps: Vec<f64> = cfg.generation.temperatures.clone();
    temps.dedup();
    for t in temps {
        let key = temp_key(t);
        let counts: Vec<&Counts> = reports.iter().filter_map(|r| r.per_temperature.get(&key)).collect();
        if counts.len() == reports.len() {
            metrics_per_temperature.insert(key, metrics(&counts, &cfg.k)?);
        }
    }
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        tasks: reports,
        metrics: overall,
        metrics_per_temperature,
        warnings,
    };
    Ok((report, all))
}

fn schema_err(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

fn count_field(task: &Value, name: &str) -> Result<u64> {
    task.get(name).and_then(Value::as_u64).ok_or_else(|| schema_err(format!("task field `{name}` missing or not a count")))
}

fn check_metric_map(v: Option<&Value>, name: &str) -> Result<()> {
    let map = v.and_then(Value::as_object).ok_or_else(|| schema_err(format!("metrics.{name} must be an object")))?;
    for (key, val) in map {
        let ok = key.strip_prefix("pass@").and_then(|k| k.parse::<usize>().ok()).is_some_and(|k| k >= 1);
        let x = val.as_f64().ok_or_else(|| schema_err(format!("metrics.{name}.{key} is not a number")))?;
        if !ok || !(0.0..=1.0).contains(&x) {
            return Err(schema_err(format!("metrics.{name}: bad entry {key} = {x}")));
        }
    }
    Ok(())
}

/// Structural validation of a report document.
pub fn validate_report(doc: &Value) -> Result<()> {
    if doc.get("schema_version").and_then(Value::as_u64) != Some(REPORT_SCHEMA_VERSION as u64) {
        return Err(schema_err("schema_version must be 1"));
    }
    if !doc.get("config").is_some_and(Value::is_object) {
        return Err(schema_err("config must be an object"));
    }
    let tasks = doc.get("tasks").and_then(Value::as_array).ok_or_else(|| schema_err("tasks must be an array"))?;
    for t in tasks {
        if !t.get("task_id").is_some_and(Value::is_string) {
            return Err(schema_err("task_id must be a string"));
        }
        let (n, cs, cf) = (count_field(t, "n")?, count_field(t, "c_syntax")?, count_field(t, "c_function")?);
        if cs > n || cf > cs {
            return Err(schema_err(format!("counts violate c_function <= c_syntax <= n: {cf}, {cs}, {n}")));
        }
        let per = t.get("per_temperature").and_then(Value::as_object).ok_or_else(|| schema_err("per_temperature must be an object"))?;
        let sum: u64 = per.values().map(|c| count_field(c, "n")).sum::<Result<u64>>()?;
        if sum != n {
            return Err(schema_err(format!("per-temperature counts sum to {sum}, task n is {n}")));
        }
    }
    let metrics = doc.get("metrics").ok_or_else(|| schema_err("metrics missing"))?;
    check_metric_map(metrics.get("syntax"), "syntax")?;
    check_metric_map(metrics.get("function"), "function")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_at_k_spot_values() {
        assert_eq!(pass_at_k(20, 20, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(20, 0, 5).unwrap(), 0.0);
        assert!((pass_at_k(5, 2, 2).unwrap() - 0.7).abs() < 1e-12);
        assert!(matches!(pass_at_k(3, 4, 1), Err(Error::Domain(_))));
        assert!(matches!(pass_at_k(3, 1, 0), Err(Error::Domain(_))));
        assert!(matches!(pass_at_k(3, 1, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn round_robin_temperatures() {
        let cfg = GenerationConfig::default();
        let mut counts = BTreeMap::new();
        for i in 0..20 {
            *counts.entry(temp_key(cfg.temperature(i))).or_insert(0) += 1;
        }
        assert_eq!(counts.into_values().collect::<Vec<_>>(), [7, 7, 6]);
    }

    #[test]
    fn checker_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.v");
        fs::write(&f, "module m; endmodule").unwrap();
        let t = Duration::from_secs(5);
        assert!(run_checker("grep -q endmodule {code_file}", &f, t, dir.path()).unwrap().passed);
        assert!(!run_checker("grep -q always {code_file}", &f, t, dir.path()).unwrap().passed);
        assert!(matches!(run_checker("no-such-checker-xyz {code_file}", &f, t, dir.path()), Err(Error::CheckerUnavailable(_))));
        let slow = run_checker("sleep 5; true {code_file}", &f, Duration::from_millis(200), dir.path()).unwrap();
        assert_eq!(slow, CheckOutcome { passed: false, timed_out: true });
    }

    #[test]
    fn paths_with_quotes_survive() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("it's here.v");
        fs::write(&f, "x").unwrap();
        assert!(run_checker("test -f {code_file}", &f, Duration::from_secs(5), dir.path()).unwrap().passed);
    }
}
