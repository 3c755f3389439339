//! Verilog front end: parsing, elaboration into data-path graphs, corpus
//! deduplication and the canonical graph JSON format.
//!
//! The accepted language is a small synthesizable subset:
//!
//! * `module ... endmodule` with ANSI or non-ANSI port lists;
//! * `input`/`output`/`inout` ports, `wire`/`reg` nets with descending
//!   constant ranges;
//! * `assign` with `~ & | ^ + - == ?:`, concatenation and constant selects;
//! * `always @(posedge clk) q <= expr;`, optionally wrapped in `begin`/`end`;
//! * module instances with named or positional connections.
//!
//! Valid Verilog outside the subset is reported as
//! [`ParseError::Unsupported`] so corpus ingestion can skip and log it;
//! malformed text is [`ParseError::Syntax`].

pub mod ast;
pub mod corpus;
pub mod dedup;
mod elaborate;
mod graph;
mod lexer;
mod parser;
pub mod sim;

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use ast::{Direction, ModuleAst, Span};
pub use elaborate::{elaborate_module, elaborate_to_graph, elaborate_with_library, max_edge_width};
pub use graph::{format_g6, DataPathGraph, GraphEdge, GraphNode, NodeKind, GRAPH_SCHEMA_VERSION};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at {line}:{col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("unsupported construct at {line}:{col}: {construct}")]
    Unsupported { line: usize, col: usize, construct: String },
}

impl ParseError {
    pub(crate) fn syntax(span: Span, message: impl Into<String>) -> Self {
        ParseError::Syntax { line: span.line, col: span.col, message: message.into() }
    }

    pub(crate) fn unsupported(span: Span, construct: impl Into<String>) -> Self {
        ParseError::Unsupported { line: span.line, col: span.col, construct: construct.into() }
    }

    pub fn is_unsupported(&self) -> bool {
        matches!(self, ParseError::Unsupported { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ElaborationError {
    #[error("module `{module}`: output `{port}` is never driven")]
    UndrivenOutput { module: String, port: String },
    #[error("module `{module}`: `{net}` is read but never driven")]
    UndrivenNet { module: String, net: String },
    #[error("module `{module}`: `{net}` has more than one driver")]
    MultiplyDriven { module: String, net: String },
    #[error("module `{module}`: input `{port}` is driven inside the module")]
    DrivesInput { module: String, port: String },
    #[error("module `{module}`: combinational loop")]
    CombinationalLoop { module: String },
    #[error("module `{module}`: instance `{instance}` does not match the ports of `{target}`")]
    PortMismatch { module: String, instance: String, target: String },
    #[error("module `{module}`: unsupported during elaboration: {construct}")]
    Unsupported { module: String, construct: String },
    #[error("module `{module}` has no ports and no logic")]
    Empty { module: String },
    #[error("edge width {width} exceeds w_max {w_max}")]
    WidthExceedsMax { width: u32, w_max: u32 },
}

/// One Verilog file as read from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerilogSource {
    pub path: PathBuf,
    pub text: String,
    /// Lower-case hex SHA-256 of `text`.
    pub sha256: String,
}

impl VerilogSource {
    pub fn new(path: impl Into<PathBuf>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let path = path.into();
        if text.is_empty() {
            return Err(Error::DegenerateInput(format!("{} is empty", path.display())));
        }
        let sha256 = sha256_hex(text.as_bytes());
        Ok(VerilogSource { path, text, sha256 })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(path, text)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses every module in `source`, tagging each with the source hash.
pub fn parse_verilog(source: &VerilogSource) -> std::result::Result<Vec<ModuleAst>, ParseError> {
    let mut modules = parser::parse_modules(&source.text)?;
    for m in &mut modules {
        m.source_sha256 = source.sha256.clone();
    }
    Ok(modules)
}

/// Parses a bare string; modules carry an empty source hash.
pub fn parse_str(text: &str) -> std::result::Result<Vec<ModuleAst>, ParseError> {
    parser::parse_modules(text)
}

/// `width / w_max`, the edge feature fed to the graph encoder.
pub fn normalize_edge_width(width: u32, w_max: u32) -> Result<f64> {
    if width == 0 || w_max == 0 || width > w_max {
        return Err(Error::Domain(format!("edge width {width} must lie in 1..={w_max}")));
    }
    Ok(width as f64 / w_max as f64)
}

/// Source text of one module, from `module` through `endmodule`.
pub fn module_text<'a>(text: &'a str, m: &ModuleAst) -> &'a str {
    let offset = |s: Span| {
        let line_start: usize = text.split_inclusive('\n').take(s.line - 1).map(str::len).sum();
        (line_start + s.col - 1).min(text.len())
    };
    &text[offset(m.span)..offset(m.end)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_edge_width(64, 64).unwrap(), 1.0);
        assert_eq!(normalize_edge_width(1, 64).unwrap(), 0.015625);
        assert_eq!(normalize_edge_width(8, 32).unwrap(), 0.25);
        assert!(matches!(normalize_edge_width(65, 64), Err(Error::Domain(_))));
        assert!(matches!(normalize_edge_width(0, 64), Err(Error::Domain(_))));
    }

    #[test]
    fn source_hash_is_of_exact_bytes() {
        let s = VerilogSource::new("a.v", "module m; endmodule\n").unwrap();
        assert_eq!(s.sha256, sha256_hex(b"module m; endmodule\n"));
        assert_ne!(s.sha256, VerilogSource::new("a.v", "module m; endmodule").unwrap().sha256);
        assert!(VerilogSource::new("e.v", "").is_err());
    }

    #[test]
    fn module_text_slices_each_module() {
        let text = "// lead\nmodule a(input x, output y);\n  assign y = x;\nendmodule\nmodule b(input x, output y); assign y = ~x; endmodule\n";
        let ms = parse_str(text).unwrap();
        assert_eq!(module_text(text, &ms[0]), "module a(input x, output y);\n  assign y = x;\nendmodule");
        assert_eq!(module_text(text, &ms[1]), "module b(input x, output y); assign y = ~x; endmodule");
    }
}
