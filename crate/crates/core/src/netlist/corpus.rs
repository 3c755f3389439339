//! Corpus extraction: read a directory of Verilog, deduplicate, parse,
//! elaborate and normalise widths against the corpus-wide maximum.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::dedup::{jaccard_minhash_dedup, DedupConfig};
use super::elaborate::{elaborate_raw, elaborate_with_library, max_edge_width};
use super::{module_text, parse_verilog, DataPathGraph, Direction, ModuleAst, VerilogSource};
use crate::{Error, Exec, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub w_max: u32,
    pub num_graphs: usize,
    pub dedup: DedupConfig,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: CorpusManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Schema(format!("unknown manifest schema_version {}", m.schema_version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Description/graph training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub description: String,
    pub graph_id: String,
    /// Module source text, the generation target.
    #[serde(default)]
    pub code: String,
    /// True when no description accompanied the module and one was built
    /// from its port list.
    #[serde(default)]
    pub synthesized: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipKind {
    Syntax,
    Unsupported,
    Elaboration,
    Io,
}

#[derive(Clone, Debug, Serialize)]
pub struct Skipped {
    pub path: PathBuf,
    pub module: Option<String>,
    pub kind: SkipKind,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Extraction {
    pub graphs: Vec<DataPathGraph>,
    pub pairs: Vec<PairRecord>,
    pub manifest: CorpusManifest,
    pub skipped: Vec<Skipped>,
    /// Sources removed as near duplicates.
    pub duplicates: usize,
}

/// Every `.v` file under `dir`, sorted by path. Empty files are reported as
/// skipped rather than returned.
pub fn read_sources(dir: &Path) -> Result<(Vec<VerilogSource>, Vec<Skipped>)> {
    let mut paths: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "v"))
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    let mut sources = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        match VerilogSource::read(&p) {
            Ok(s) => sources.push(s),
            Err(e) => skipped.push(Skipped { path: p, module: None, kind: SkipKind::Io, reason: e.to_string() }),
        }
    }
    Ok((sources, skipped))
}

/// Description text for a source: the contents of a sibling `<stem>.txt`.
fn sidecar_description(path: &Path) -> Option<String> {
    let text = fs::read_to_string(path.with_extension("txt")).ok()?;
    let text = text.trim();
    (!text.is_empty()).then(|| text.to_string())
}

/// Fallback description listing the module's ports.
pub fn synthesize_description(m: &ModuleAst) -> String {
    let list = |dir: Direction| {
        m.ports
            .iter()
            .filter(|p| p.direction == dir)
            .map(|p| if p.width == 1 { p.name.clone() } else { format!("{} ({} bits)", p.name, p.width) })
            .collect::<Vec<_>>()
            .join(", ")
    };
    let (ins, outs) = (list(Direction::Input), list(Direction::Output));
    let mut s = format!("Module {}", m.name);
    if !ins.is_empty() {
        s += &format!(" with inputs {ins}");
    }
    if !outs.is_empty() {
        s += &format!(" and outputs {outs}");
    }
    s + "."
}

struct Elaborated {
    graphs: Vec<(DataPathGraph, PairRecord)>,
    skipped: Vec<Skipped>,
}

fn elaborate_source(src: &VerilogSource) -> Elaborated {
    let mut out = Elaborated { graphs: Vec::new(), skipped: Vec::new() };
    let modules = match parse_verilog(src) {
        Ok(m) => m,
        Err(e) => {
            let kind = if e.is_unsupported() { SkipKind::Unsupported } else { SkipKind::Syntax };
            out.skipped.push(Skipped { path: src.path.clone(), module: None, kind, reason: e.to_string() });
            return out;
        }
    };
    let sidecar = if modules.len() == 1 { sidecar_description(&src.path) } else { None };
    for m in &modules {
        match elaborate_raw(m, &modules) {
            Ok(g) => {
                let (description, synthesized) = match &sidecar {
                    Some(d) => (d.clone(), false),
                    None => (synthesize_description(m), true),
                };
                let pair = PairRecord { description, graph_id: g.graph_id(), code: module_text(&src.text, m).to_string(), synthesized };
                out.graphs.push((g, pair));
            }
            Err(e) => out.skipped.push(Skipped {
                path: src.path.clone(),
                module: Some(m.name.clone()),
                kind: SkipKind::Elaboration,
                reason: e.to_string(),
            }),
        }
    }
    out
}

/// Deduplicates `sources`, elaborates every module and normalises edge
/// widths by the corpus maximum. Per-file failures are collected in
/// [`Extraction::skipped`] and never abort the batch.
pub fn extract(sources: &[VerilogSource], dedup: &DedupConfig, exec: Exec) -> Extraction {
    let kept = if sources.is_empty() { Vec::new() } else { jaccard_minhash_dedup(sources, dedup, exec) };
    let duplicates = sources.len() - kept.len();
    let results = exec.map(&kept, elaborate_source);
    let mut raw = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        raw.extend(r.graphs);
        skipped.extend(r.skipped);
    }
    let w_max = raw.iter().map(|(g, _)| max_edge_width(g)).max().unwrap_or(1);
    let mut graphs = Vec::with_capacity(raw.len());
    let mut pairs = Vec::with_capacity(raw.len());
    for (g, p) in raw {
        graphs.push(normalize_graph(g, w_max));
        pairs.push(p);
    }
    for s in &skipped {
        log::warn!("skipped {}{}: {}", s.path.display(), s.module.as_ref().map(|m| format!(" ({m})")).unwrap_or_default(), s.reason);
    }
    let manifest = CorpusManifest { schema_version: MANIFEST_SCHEMA_VERSION, w_max, num_graphs: graphs.len(), dedup: *dedup };
    Extraction { graphs, pairs, manifest, skipped, duplicates }
}

fn normalize_graph(mut g: DataPathGraph, w_max: u32) -> DataPathGraph {
    for e in &mut g.edges {
        e.width_norm = super::graph::canonical_f64(e.width as f64 / w_max as f64);
    }
    g
}

/// Reads a directory and runs [`extract`] on it; unreadable files join the
/// skipped list.
pub fn extract_dir(dir: &Path, dedup: &DedupConfig, exec: Exec) -> Result<Extraction> {
    let (sources, io_skipped) = read_sources(dir)?;
    let mut ex = extract(&sources, dedup, exec);
    ex.skipped.splice(0..0, io_skipped);
    Ok(ex)
}

/// Re-elaborates a single module against a known corpus `w_max`.
pub fn elaborate_for_corpus(m: &ModuleAst, library: &[ModuleAst], w_max: u32) -> Result<DataPathGraph> {
    Ok(elaborate_with_library(m, library, w_max)?)
}

pub fn write_graphs(path: &Path, graphs: &[DataPathGraph]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for g in graphs {
        f.write_all(g.to_json().as_bytes())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_graphs(path: &Path) -> Result<Vec<DataPathGraph>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(DataPathGraph::from_json(&line).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("{}:{}: {m}", path.display(), i + 1)),
            other => other,
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Text used when deduplicating already extracted graphs: the canonical JSON
/// with the source hash blanked, so identical structure from different files
/// compares equal.
pub fn graph_dedup_text(g: &DataPathGraph) -> String {
    DataPathGraph { source_sha256: String::new(), ..g.clone() }.to_json()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_wide_width_normalisation() {
        let a = VerilogSource::new("a.v", "module a(input [31:0] x, output [31:0] y); assign y = ~x; endmodule").unwrap();
        let b = VerilogSource::new("b.v", "module b(input [7:0] p, output [7:0] q); assign q = p; endmodule").unwrap();
        let bad = VerilogSource::new("c.v", "module c(input x, output y); assign y = x * x; endmodule").unwrap();
        let ex = extract(&[a, b, bad], &DedupConfig::default(), Exec::Sequential);
        assert_eq!(ex.manifest.w_max, 32);
        assert_eq!(ex.graphs.len(), 2);
        assert_eq!(ex.graphs[1].edges[0].width_norm, 0.25);
        assert_eq!(ex.skipped.len(), 1);
        assert_eq!(ex.skipped[0].kind, SkipKind::Unsupported);
        assert!(ex.pairs.iter().all(|p| p.synthesized));
        assert_eq!(ex.pairs[1].description, "Module b with inputs p (8 bits) and outputs q (8 bits).");
    }

    #[test]
    fn empty_input_gives_empty_manifest() {
        let ex = extract(&[], &DedupConfig::default(), Exec::Sequential);
        assert_eq!((ex.manifest.num_graphs, ex.manifest.w_max), (0, 1));
    }
}
