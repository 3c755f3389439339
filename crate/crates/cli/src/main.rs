use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use verigrag::checkpoint::Checkpoint;
use verigrag::embeddings::EmbeddingTable;
use verigrag::encoder::{self, train_encoder, EncoderConfig, EncoderTrainConfig, GraphEncoder};
use verigrag::harness::{
    evaluate, generate_samples, simulated_function_check, structural_syntax_check, EvalConfig, GenerationConfig, Pipeline,
};
use verigrag::lm::{self, train_lm, CodeExample, LmConfig, LmTrainConfig, TinyLm};
use verigrag::netlist::corpus::{extract_dir, graph_dedup_text, read_graphs, read_jsonl, write_graphs, write_jsonl, PairRecord};
use verigrag::netlist::dedup::{dedup_indices, DedupConfig};
use verigrag::netlist::DataPathGraph;
use verigrag::retriever::{
    build_index, distill_student, retrieve, train_teacher, CrossAttentionEncoder, DualEncoder, PairSet, RetrievalIndex, RetrieverConfig,
    RetrieverTrainConfig, STUDENT_KIND, TEACHER_KIND,
};
use verigrag::veriformer::{
    stage1_train, stage2_train, Stage1Config, Stage2Config, Stage2Sample, VeriFormer, VeriFormerConfig, STAGE1_KIND, STAGE2_KIND,
};
use verigrag::Exec;

#[derive(Parser)]
#[command(name = "verigrag", version, about = "Graph-retrieval-augmented Verilog generation")]
struct Cli {
    /// Run data-parallel stages on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and elaborate every `.v` file under a directory into graphs.
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Description/graph pairs; defaults to `pairs.jsonl` beside `--out`.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long, default_value_t = 256)]
        num_hashes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Drop near-duplicate graphs from a corpus file.
    Dedup {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long, default_value_t = 256)]
        num_hashes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Contrastive graph encoder training.
    TrainGnn {
        #[arg(long)]
        graphs: PathBuf,
        /// JSON with optional `model` and `train` objects overriding defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Encode every graph and write the embedding container.
    Embed {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher or distilled student retriever training.
    TrainRetriever {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_enum)]
        mode: RetrieverMode,
        /// Teacher checkpoint, required for `--mode student`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        mse_weight: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build or query the retrieval index.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Train the small frozen decoder used for generation.
    TrainLm {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 1 (graph-code alignment) or stage 2 (soft-prompt tuning).
    TrainVeriformer {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        pairs: PathBuf,
        /// Stage 1: graph corpus the pairs refer to.
        #[arg(long)]
        graphs: Option<PathBuf>,
        /// Stage 1: trained graph encoder.
        #[arg(long)]
        gnn: Option<PathBuf>,
        /// Stage 2: embedding container from `embed`.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Stage 2: stage-1 checkpoint.
        #[arg(long)]
        vf1: Option<PathBuf>,
        /// Stage 2: frozen language model.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample code for one description.
    Generate {
        #[arg(long)]
        desc_file: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.5, 0.8])]
        temperatures: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        top_k: usize,
        #[arg(long, default_value_t = 128)]
        max_new_tokens: usize,
        #[command(flatten)]
        artifacts: Artifacts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, check and score every task of a benchmark directory.
    Eval {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 5])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.5, 0.8])]
        temperatures: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        top_k: usize,
        #[arg(long, default_value_t = 128)]
        max_new_tokens: usize,
        #[command(flatten)]
        artifacts: Artifacts,
        #[arg(long)]
        out: PathBuf,
        /// Also write every checked sample.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Exit 0 when the file parses in the supported Verilog subset.
    CheckSyntax { file: PathBuf },
    /// Exit 0 when the file simulates identically to a reference module.
    CheckFunction {
        #[arg(long)]
        reference: PathBuf,
        file: PathBuf,
        #[arg(long, default_value_t = 64)]
        cycles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic toy corpus (`.v` plus `.txt` descriptions).
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrieverMode {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum IndexAction {
    Build {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Query {
        #[arg(long)]
        index: PathBuf,
        /// Student checkpoint; defaults to `student.ckpt` beside the index.
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
}

/// Trained components for generation. Unset paths resolve inside `--artifacts`.
#[derive(clap::Args)]
struct Artifacts {
    #[arg(long, default_value = ".")]
    artifacts: PathBuf,
    #[arg(long)]
    student: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    vf2: Option<PathBuf>,
    #[arg(long)]
    lm: Option<PathBuf>,
}

struct Loaded {
    student: DualEncoder,
    index: RetrievalIndex,
    table: EmbeddingTable,
    vf: VeriFormer,
    lm: TinyLm,
}

impl Artifacts {
    fn path(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.artifacts.join(name))
    }

    fn load(&self) -> Result<Loaded> {
        let p = self.path(&self.student, "student.ckpt");
        let student = DualEncoder::from_checkpoint(&Checkpoint::load(&p, STUDENT_KIND)?).with_context(|| p.display().to_string())?;
        let p = self.path(&self.index, "index.bin");
        let index = RetrievalIndex::load(&p).with_context(|| p.display().to_string())?;
        let p = self.path(&self.embeddings, "embeddings.f32");
        let table = EmbeddingTable::load(&p).with_context(|| p.display().to_string())?;
        let p = self.path(&self.vf2, "vf2.ckpt");
        let vf = VeriFormer::load(&p).with_context(|| p.display().to_string())?;
        let p = self.path(&self.lm, "lm.ckpt");
        let lm = TinyLm::from_checkpoint(&Checkpoint::load(&p, lm::CHECKPOINT_KIND)?).with_context(|| p.display().to_string())?;
        Ok(Loaded { student, index, table, vf, lm })
    }
}

impl Loaded {
    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline { student: &self.student, index: &self.index, embeddings: &self.table, veriformer: &self.vf, lm: &self.lm }
    }
}

/// Defaults for `model` and `train`, each overlaid with the matching object
/// of the config file when one is given.
fn load_config<M, T>(path: Option<&Path>, model: M, train: T) -> Result<(M, T)>
where
    M: Serialize + DeserializeOwned,
    T: Serialize + DeserializeOwned,
{
    let Some(path) = path else { return Ok((model, train)) };
    let doc: Value = serde_json::from_str(&fs::read_to_string(path)?).with_context(|| path.display().to_string())?;
    let overlay = |base: Value, key: &str| -> Result<Value> {
        let mut base = base;
        if let Some(obj) = doc.get(key) {
            let Value::Object(fields) = obj else { bail!("config `{key}` must be an object") };
            for (k, v) in fields {
                if base.get(k).is_none() {
                    bail!("unknown config key {key}.{k}");
                }
                base[k] = v.clone();
            }
        }
        Ok(base)
    };
    let model = serde_json::from_value(overlay(serde_json::to_value(model)?, "model")?)?;
    let train = serde_json::from_value(overlay(serde_json::to_value(train)?, "train")?)?;
    Ok((model, train))
}

/// Pairs joined to their graph's row in `table`, in pair order.
fn pair_rows(pairs: &[PairRecord], table: &EmbeddingTable) -> Result<Vec<(usize, usize)>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| match table.ids.iter().position(|id| *id == p.graph_id) {
            Some(r) => Ok((i, r)),
            None => bail!("pair {i} refers to graph {} which has no embedding", p.graph_id),
        })
        .collect()
}

fn pair_set(pairs: &[PairRecord], table: &EmbeddingTable) -> Result<PairSet> {
    let rows = pair_rows(pairs, table)?;
    let embs: Vec<Vec<f64>> = rows.iter().map(|&(_, r)| table.row(r)).collect();
    let descriptions = rows.iter().map(|&(i, _)| pairs[i].description.clone()).collect();
    Ok(PairSet::new(descriptions, verigrag::tensor::Mat::from_rows(&embs))?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Extract { input, out, manifest, pairs, threshold, num_hashes, seed } => {
            let dedup = DedupConfig { threshold, num_hashes, seed };
            let ex = extract_dir(&input, &dedup, exec)?;
            write_graphs(&out, &ex.graphs)?;
            ex.manifest.save(&manifest)?;
            let pairs = pairs.unwrap_or_else(|| out.with_file_name("pairs.jsonl"));
            write_jsonl(&pairs, &ex.pairs)?;
            eprintln!(
                "{} graphs, {} near duplicates removed, {} skipped, w_max {}",
                ex.graphs.len(),
                ex.duplicates,
                ex.skipped.len(),
                ex.manifest.w_max
            );
        }
        Command::Dedup { input, out, threshold, num_hashes, seed } => {
            let graphs = read_graphs(&input)?;
            let texts: Vec<String> = graphs.iter().map(graph_dedup_text).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let kept = dedup_indices(&refs, &DedupConfig { threshold, num_hashes, seed }, exec);
            let kept_graphs: Vec<DataPathGraph> = kept.iter().map(|&i| graphs[i].clone()).collect();
            write_graphs(&out, &kept_graphs)?;
            eprintln!("kept {} of {} graphs", kept.len(), graphs.len());
        }
        Command::TrainGnn { graphs, config, out, seed } => {
            let graphs = read_graphs(&graphs)?;
            let (model, mut train) = load_config(config.as_deref(), EncoderConfig::default(), EncoderTrainConfig::default())?;
            train.seed = seed;
            let (enc, trace) = train_encoder(&graphs, model, &train, exec)?;
            enc.to_checkpoint().with_trace("loss", trace.clone()).save(&out)?;
            eprintln!("loss {:.4} -> {:.4}", trace[0], trace[trace.len() - 1]);
        }
        Command::Embed { graphs, ckpt, out } => {
            let graphs = read_graphs(&graphs)?;
            let enc = GraphEncoder::from_checkpoint(&Checkpoint::load(&ckpt, encoder::CHECKPOINT_KIND)?)?;
            let rows = enc.encode_all(&graphs, exec)?;
            let ids = graphs.iter().map(DataPathGraph::graph_id).collect();
            EmbeddingTable::from_rows(ids, &rows, enc.out_dim())?.save(&out)?;
        }
        Command::TrainRetriever { pairs, embeddings, mode, teacher, mse_weight, config, out, seed } => {
            let records: Vec<PairRecord> = read_jsonl(&pairs)?;
            let table = EmbeddingTable::load(&embeddings)?;
            let set = pair_set(&records, &table)?;
            let defaults = match mode {
                RetrieverMode::Teacher => RetrieverTrainConfig::teacher(),
                RetrieverMode::Student => RetrieverTrainConfig::student(),
            };
            let (model, mut train) = load_config(config.as_deref(), RetrieverConfig::default(), defaults)?;
            train.seed = seed;
            if let Some(w) = mse_weight {
                train.mse_weight = w;
            }
            match mode {
                RetrieverMode::Teacher => {
                    let (t, trace) = train_teacher(&set, model, &train)?;
                    for w in &trace.warnings {
                        log::warn!("{w}");
                    }
                    t.to_checkpoint().with_trace("loss", trace.loss).save(&out)?;
                }
                RetrieverMode::Student => {
                    let path = teacher.context("--mode student needs --teacher")?;
                    let t = CrossAttentionEncoder::from_checkpoint(&Checkpoint::load(&path, TEACHER_KIND)?)?;
                    let (s, trace) = distill_student(&set, &t, model, &train, exec)?;
                    s.to_checkpoint().with_trace("loss", trace.loss).with_trace("nce", trace.nce).with_trace("mse", trace.mse).save(&out)?;
                }
            }
        }
        Command::Index { action } => match action {
            IndexAction::Build { embeddings, student, out } => {
                let table = EmbeddingTable::load(&embeddings)?;
                let s = DualEncoder::from_checkpoint(&Checkpoint::load(&student, STUDENT_KIND)?)?;
                build_index(&table.entries(), &s)?.save(&out)?;
            }
            IndexAction::Query { index, student, query, k } => {
                let student = student.unwrap_or_else(|| index.with_file_name("student.ckpt"));
                let s = DualEncoder::from_checkpoint(&Checkpoint::load(&student, STUDENT_KIND)?)?;
                let idx = RetrievalIndex::load(&index)?;
                for hit in retrieve(&idx, &query, &s, k)? {
                    println!("{}\t{:.6}", hit.id, hit.score);
                }
            }
        },
        Command::TrainLm { pairs, config, out, seed } => {
            let records: Vec<PairRecord> = read_jsonl(&pairs)?;
            let examples: Vec<CodeExample> =
                records.into_iter().map(|p| CodeExample { description: p.description, code: p.code }).collect();
            let (model, mut train) = load_config(config.as_deref(), LmConfig::default(), LmTrainConfig::default())?;
            train.seed = seed;
            let (lm, trace) = train_lm(&examples, model, &train)?;
            lm.to_checkpoint().with_trace("loss", trace).save(&out)?;
        }
        Command::TrainVeriformer { stage, pairs, graphs, gnn, embeddings, vf1, lm, alpha, config, out, seed } => {
            let records: Vec<PairRecord> = read_jsonl(&pairs)?;
            match stage {
                1 => {
                    let graphs = read_graphs(&graphs.context("stage 1 needs --graphs")?)?;
                    let gnn = gnn.context("stage 1 needs --gnn")?;
                    let enc = GraphEncoder::from_checkpoint(&Checkpoint::load(&gnn, encoder::CHECKPOINT_KIND)?)?;
                    let mut ordered = Vec::with_capacity(records.len());
                    for p in &records {
                        let g = graphs.iter().find(|g| g.graph_id() == p.graph_id).with_context(|| format!("no graph {}", p.graph_id))?;
                        ordered.push(g.clone());
                    }
                    let codes: Vec<String> = records.iter().map(|p| p.code.clone()).collect();
                    let (model, mut train) = load_config(config.as_deref(), VeriFormerConfig::default(), Stage1Config::default())?;
                    train.seed = seed;
                    let (vf, trace) = stage1_train(&enc, &ordered, &codes, model, &train, exec)?;
                    vf.to_checkpoint(STAGE1_KIND)
                        .with_trace("total", trace.total)
                        .with_trace("gcc", trace.gcc)
                        .with_trace("gcm", trace.gcm)
                        .with_trace("gcg", trace.gcg)
                        .save(&out)?;
                }
                2 => {
                    let table = EmbeddingTable::load(&embeddings.context("stage 2 needs --embeddings")?)?;
                    let vf = VeriFormer::load(&vf1.context("stage 2 needs --vf1")?)?;
                    let lm_path = lm.context("stage 2 needs --lm")?;
                    let lm = TinyLm::from_checkpoint(&Checkpoint::load(&lm_path, lm::CHECKPOINT_KIND)?)?;
                    let samples: Vec<Stage2Sample> = pair_rows(&records, &table)?
                        .into_iter()
                        .map(|(i, r)| Stage2Sample {
                            description: records[i].description.clone(),
                            g_emb: table.row(r),
                            code: records[i].code.clone(),
                        })
                        .collect();
                    let (_, mut train) = load_config(config.as_deref(), Value::Object(Default::default()), Stage2Config::default())?;
                    train.seed = seed;
                    if let Some(a) = alpha {
                        train.alpha = a;
                    }
                    let (tuned, trace) = stage2_train(&vf, &lm, &samples, &train)?;
                    eprintln!("best epoch {}, stopped early {}", trace.best_epoch, trace.stopped_early);
                    tuned
                        .to_checkpoint(STAGE2_KIND)
                        .with_trace("train", trace.train_loss)
                        .with_trace("gen", trace.gen)
                        .with_trace("dist", trace.dist)
                        .with_trace("val", trace.val_loss)
                        .save(&out)?;
                }
                s => bail!("--stage must be 1 or 2, got {s}"),
            }
        }
        Command::Generate { desc_file, n, temperatures, seed, top_k, max_new_tokens, artifacts, out } => {
            let description = fs::read_to_string(&desc_file)?.trim().to_string();
            let task_id = desc_file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let loaded = artifacts.load()?;
            let cfg = GenerationConfig { n, temperatures, seed, top_k, max_new_tokens };
            let (records, warnings) = generate_samples(&task_id, &description, &loaded.pipeline(), &cfg, exec)?;
            for w in warnings {
                log::warn!("{w}");
            }
            write_jsonl(&out, &records)?;
        }
        Command::Eval { benchmark, k, n, temperatures, seed, top_k, max_new_tokens, artifacts, out, samples } => {
            let loaded = artifacts.load()?;
            let cfg = EvalConfig { generation: GenerationConfig { n, temperatures, seed, top_k, max_new_tokens }, k };
            let (report, records) = evaluate(&benchmark, &loaded.pipeline(), &cfg, exec)?;
            fs::write(&out, report.to_json()?)?;
            if let Some(path) = samples {
                write_jsonl(&path, &records)?;
            }
            for (name, v) in &report.metrics.function {
                eprintln!("function {name} = {v:.4}");
            }
        }
        Command::CheckSyntax { file } => {
            let code = fs::read_to_string(&file)?;
            return Ok(if structural_syntax_check(&code) { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::CheckFunction { reference, file, cycles, seed } => {
            let (r, c) = (fs::read_to_string(&reference)?, fs::read_to_string(&file)?);
            return Ok(match simulated_function_check(&r, &c, cycles, seed) {
                Ok(()) => ExitCode::SUCCESS,
                Err(why) => {
                    eprintln!("{why}");
                    ExitCode::FAILURE
                }
            });
        }
        Command::ToyCorpus { out, n, seed } => {
            fs::create_dir_all(&out)?;
            verigrag::toy::write_corpus(&out, &verigrag::toy::toy_corpus(n, seed))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
