use std::fmt::Write as _;

use serde::Deserialize;

use crate::{Error, Result};

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    PortIn,
    PortOut,
    Cell,
    Const,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::PortIn => "port_in",
            NodeKind::PortOut => "port_out",
            NodeKind::Cell => "cell",
            NodeKind::Const => "const",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "port_in" => NodeKind::PortIn,
            "port_out" => NodeKind::PortOut,
            "cell" => NodeKind::Cell,
            "const" => NodeKind::Const,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: usize,
    pub kind: NodeKind,
    pub op_type: String,
    pub io_type: Option<String>,
    pub port_names: Vec<String>,
    pub params: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub width: u32,
    pub width_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataPathGraph {
    pub module_name: String,
    pub source_sha256: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Formats like C's `%.6g`: six significant digits, trailing zeros dropped,
/// exponent form outside `1e-4 ..< 1e6`.
pub fn format_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds to the value the canonical JSON text will read back as.
pub(crate) fn canonical_f64(x: f64) -> f64 {
    format_g6(x).parse().expect("formatted float parses")
}

fn json_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serialises"));
}

#[derive(Deserialize)]
struct RawGraph {
    module_name: String,
    source_sha256: String,
    nodes: Vec<RawNode>,
    edges: Vec<RawEdge>,
}

#[derive(Deserialize)]
struct RawNode {
    id: usize,
    kind: String,
    op_type: String,
    io_type: Option<String>,
    port_names: Vec<String>,
    params: Vec<(String, String)>,
}

#[derive(Deserialize)]
struct RawEdge {
    src: usize,
    dst: usize,
    width: u32,
    width_norm: f64,
}

impl DataPathGraph {
    /// Stable identifier: module name plus the first eight hex digits of the
    /// source hash.
    pub fn graph_id(&self) -> String {
        let n = self.source_sha256.len().min(8);
        format!("{}@{}", self.module_name, &self.source_sha256[..n])
    }

    /// Canonical single-line JSON with a fixed key order.
    pub fn to_json(&self) -> String {
        let mut s = String::with_capacity(128 + 96 * self.nodes.len() + 48 * self.edges.len());
        s.push_str("{\"schema_version\":");
        write!(s, "{GRAPH_SCHEMA_VERSION}").unwrap();
        s.push_str(",\"module_name\":");
        json_str(&mut s, &self.module_name);
        s.push_str(",\"source_sha256\":");
        json_str(&mut s, &self.source_sha256);
        s.push_str(",\"nodes\":[");
        for (i, n) in self.nodes.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{{\"id\":{},\"kind\":\"{}\",\"op_type\":", n.id, n.kind.as_str()).unwrap();
            json_str(&mut s, &n.op_type);
            s.push_str(",\"io_type\":");
            match &n.io_type {
                Some(t) => json_str(&mut s, t),
                None => s.push_str("null"),
            }
            s.push_str(",\"port_names\":[");
            for (j, p) in n.port_names.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                json_str(&mut s, p);
            }
            s.push_str("],\"params\":[");
            for (j, (k, v)) in n.params.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                s.push('[');
                json_str(&mut s, k);
                s.push(',');
                json_str(&mut s, v);
                s.push(']');
            }
            s.push_str("]}");
        }
        s.push_str("],\"edges\":[");
        for (i, e) in self.edges.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{{\"src\":{},\"dst\":{},\"width\":{},\"width_norm\":{}}}", e.src, e.dst, e.width, format_g6(e.width_norm))
                .unwrap();
        }
        s.push_str("]}");
        s
    }

    /// Parses and validates one graph record.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == GRAPH_SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(Error::Schema(format!("unknown graph schema_version {v}"))),
            None => return Err(Error::Schema("graph record lacks schema_version".into())),
        }
        let raw: RawGraph = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
        let mut nodes = Vec::with_capacity(raw.nodes.len());
        for n in raw.nodes {
            let kind = NodeKind::parse(&n.kind).ok_or_else(|| Error::Schema(format!("unknown node kind `{}`", n.kind)))?;
            nodes.push(GraphNode { id: n.id, kind, op_type: n.op_type, io_type: n.io_type, port_names: n.port_names, params: n.params });
        }
        let edges = raw.edges.into_iter().map(|e| GraphEdge { src: e.src, dst: e.dst, width: e.width, width_norm: e.width_norm }).collect();
        let g = DataPathGraph { module_name: raw.module_name, source_sha256: raw.source_sha256, nodes, edges };
        g.validate()?;
        Ok(g)
    }

    /// Checks the structural invariants every stored graph must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Schema(format!("node ids must be 0..{} in order; found {} at position {i}", self.nodes.len(), n.id)));
            }
        }
        for e in &self.edges {
            if e.src >= self.nodes.len() || e.dst >= self.nodes.len() {
                return Err(Error::Schema(format!("edge {}->{} references a missing node", e.src, e.dst)));
            }
            if self.nodes[e.dst].kind == NodeKind::PortIn {
                return Err(Error::Schema(format!("edge {}->{} enters an input port", e.src, e.dst)));
            }
            if self.nodes[e.src].kind == NodeKind::PortOut {
                return Err(Error::Schema(format!("edge {}->{} leaves an output port", e.src, e.dst)));
            }
            if e.width == 0 || !(e.width_norm > 0.0 && e.width_norm <= 1.0) {
                return Err(Error::Schema(format!("edge {}->{} has width {} / width_norm {}", e.src, e.dst, e.width, e.width_norm)));
            }
        }
        Ok(())
    }

    /// In-neighbour lists, in edge order.
    pub fn in_edges(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (k, e) in self.edges.iter().enumerate() {
            out[e.dst].push(k);
        }
        out
    }

    /// Renumbers nodes so old node `i` becomes `perm[i]`; edges keep their order.
    pub fn relabel(&self, perm: &[usize]) -> DataPathGraph {
        assert_eq!(perm.len(), self.nodes.len(), "permutation length");
        let mut nodes = self.nodes.clone();
        for (old, n) in self.nodes.iter().enumerate() {
            nodes[perm[old]] = GraphNode { id: perm[old], ..n.clone() };
        }
        let edges = self.edges.iter().map(|e| GraphEdge { src: perm[e.src], dst: perm[e.dst], ..e.clone() }).collect();
        DataPathGraph { nodes, edges, ..self.clone() }
    }

    /// True when removing every edge out of a `dff` cell leaves no cycle.
    pub fn is_acyclic_without_registers(&self) -> bool {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &self.edges {
            if self.nodes[e.src].kind == NodeKind::Cell && self.nodes[e.src].op_type == "dff" {
                continue;
            }
            indeg[e.dst] += 1;
            out[e.src].push(e.dst);
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = ready.pop() {
            seen += 1;
            for &j in &out[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(j);
                }
            }
        }
        seen == n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g6_matches_printf() {
        let cases = [
            (1.0, "1"),
            (0.015625, "0.015625"),
            (0.25, "0.25"),
            (1.0 / 3.0, "0.333333"),
            (2.0 / 3.0, "0.666667"),
            (1.0 / 65536.0, "1.52588e-05"),
            (0.0001, "0.0001"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.9999999, "1"),
            (0.00012345678, "0.000123457"),
        ];
        for (x, want) in cases {
            assert_eq!(format_g6(x), want, "{x}");
        }
    }

    #[test]
    fn schema_version_is_checked() {
        let err = DataPathGraph::from_json(r#"{"schema_version":99,"module_name":"m","source_sha256":"","nodes":[],"edges":[]}"#);
        assert!(matches!(err, Err(Error::Schema(_))));
        let err = DataPathGraph::from_json(r#"{"schema_version":1,"module_name":"m","nodes":[],"edges":[]}"#);
        assert!(matches!(err, Err(Error::Schema(_))));
    }
}
