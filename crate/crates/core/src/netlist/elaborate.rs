//! Elaboration of one module into a data-path graph.
//!
//! Node order: ports in declaration order, then items in source order. Within
//! an item, operator cells appear in post-order (operands before the cell
//! that consumes them), then the item's own cell (`dff` or instance).
//!
//! Nets are not nodes. Reading a net produces an edge from whichever node
//! drives it, following `assign` aliases, so `assign y = a;` becomes a single
//! `a → y` edge.

use std::collections::{HashMap, HashSet};

use super::ast::*;
use super::graph::{canonical_f64, DataPathGraph, GraphEdge, GraphNode, NodeKind};
use super::ElaborationError;

/// Elaborates `ast` and normalises edge widths by `w_max`.
pub fn elaborate_to_graph(ast: &ModuleAst, w_max: u32) -> Result<DataPathGraph, ElaborationError> {
    elaborate_with_library(ast, &[], w_max)
}

/// Like [`elaborate_to_graph`], resolving instance port directions against
/// the modules in `library` when the instantiated module is among them.
pub fn elaborate_with_library(ast: &ModuleAst, library: &[ModuleAst], w_max: u32) -> Result<DataPathGraph, ElaborationError> {
    let mut g = elaborate_raw(ast, library)?;
    for e in &mut g.edges {
        if e.width > w_max {
            return Err(ElaborationError::WidthExceedsMax { width: e.width, w_max });
        }
        e.width_norm = canonical_f64(e.width as f64 / w_max as f64);
    }
    Ok(g)
}

/// Elaborates with `w_max` set to the module's own widest edge.
pub fn elaborate_module(ast: &ModuleAst, library: &[ModuleAst]) -> Result<DataPathGraph, ElaborationError> {
    let raw = elaborate_raw(ast, library)?;
    elaborate_with_library(ast, library, max_edge_width(&raw))
}

/// Widest edge of a graph, at least 1.
pub fn max_edge_width(g: &DataPathGraph) -> u32 {
    g.edges.iter().map(|e| e.width).max().unwrap_or(1).max(1)
}

#[derive(Clone, Debug)]
enum Src {
    Node(usize, u32),
    Signal(String, u32),
}

impl Src {
    fn width(&self) -> u32 {
        match self {
            Src::Node(_, w) | Src::Signal(_, w) => *w,
        }
    }
}

struct PendingEdge {
    src: Src,
    dst: usize,
    /// Width of the net the value lands in, when the sink is a named net.
    cap: Option<u32>,
}

struct Builder<'a> {
    ast: &'a ModuleAst,
    library: &'a [ModuleAst],
    nodes: Vec<GraphNode>,
    edges: Vec<PendingEdge>,
    drivers: HashMap<String, Src>,
    inputs: HashMap<String, usize>,
    procedural_or_assigned: HashSet<String>,
}

pub(crate) fn elaborate_raw(ast: &ModuleAst, library: &[ModuleAst]) -> Result<DataPathGraph, ElaborationError> {
    let module = ast.name.clone();
    if ast.ports.is_empty() && ast.items.is_empty() {
        return Err(ElaborationError::Empty { module });
    }
    let mut b = Builder {
        ast,
        library,
        nodes: Vec::new(),
        edges: Vec::new(),
        drivers: HashMap::new(),
        inputs: HashMap::new(),
        procedural_or_assigned: HashSet::new(),
    };
    for item in &ast.items {
        match item {
            Item::Assign(a) => b.procedural_or_assigned.insert(a.target.clone()),
            Item::Always(a) => b.procedural_or_assigned.insert(a.target.clone()),
            Item::Instance(_) => false,
        };
    }

    let mut outputs = Vec::new();
    for p in &ast.ports {
        let (kind, io) = match p.direction {
            Direction::Input => (NodeKind::PortIn, "input"),
            Direction::Output => (NodeKind::PortOut, "output"),
            Direction::Inout => {
                return Err(ElaborationError::Unsupported { module, construct: format!("inout port `{}`", p.name) });
            }
        };
        let id = b.push_node(kind, "port", Some(io), vec![p.name.clone()], vec![("WIDTH".into(), p.width.to_string())]);
        match p.direction {
            Direction::Input => {
                b.inputs.insert(p.name.clone(), id);
            }
            _ => outputs.push((p.name.clone(), p.width, id)),
        }
    }

    for item in &ast.items {
        match item {
            Item::Assign(a) => {
                let src = b.expr(&a.expr);
                b.drive(&a.target, src)?;
            }
            Item::Always(a) => {
                let d = b.expr(&a.expr);
                let width = ast.width_of(&a.target).unwrap_or(1);
                let clk = b.signal(&a.clock);
                let dff = b.push_node(
                    NodeKind::Cell,
                    "dff",
                    None,
                    vec!["CLK".into(), "D".into(), "Q".into()],
                    vec![("WIDTH".into(), width.to_string()), ("CLK_POLARITY".into(), "1".into())],
                );
                b.edges.push(PendingEdge { src: clk, dst: dff, cap: None });
                b.edges.push(PendingEdge { src: d, dst: dff, cap: Some(width) });
                b.drive(&a.target, Src::Node(dff, width))?;
            }
            Item::Instance(inst) => b.instance(inst)?,
        }
    }

    for (name, width, id) in &outputs {
        if !b.drivers.contains_key(name) {
            return Err(ElaborationError::UndrivenOutput { module: ast.name.clone(), port: name.clone() });
        }
        b.edges.push(PendingEdge { src: Src::Signal(name.clone(), *width), dst: *id, cap: None });
    }

    let mut edges = Vec::with_capacity(b.edges.len());
    for pe in &b.edges {
        let width = pe.cap.map_or(pe.src.width(), |c| c.min(pe.src.width()));
        let src = b.resolve(&pe.src)?;
        edges.push(GraphEdge { src, dst: pe.dst, width, width_norm: 1.0 });
    }
    let g = DataPathGraph { module_name: ast.name.clone(), source_sha256: ast.source_sha256.clone(), nodes: b.nodes, edges };
    if !g.is_acyclic_without_registers() {
        return Err(ElaborationError::CombinationalLoop { module: ast.name.clone() });
    }
    Ok(g)
}

impl Builder<'_> {
    fn push_node(
        &mut self,
        kind: NodeKind,
        op: &str,
        io: Option<&str>,
        port_names: Vec<String>,
        params: Vec<(String, String)>,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(GraphNode { id, kind, op_type: op.into(), io_type: io.map(String::from), port_names, params });
        id
    }

    fn signal(&self, name: &str) -> Src {
        Src::Signal(name.into(), self.ast.width_of(name).unwrap_or(1))
    }

    fn drive(&mut self, name: &str, src: Src) -> Result<(), ElaborationError> {
        if self.inputs.contains_key(name) {
            return Err(ElaborationError::DrivesInput { module: self.ast.name.clone(), port: name.into() });
        }
        if self.drivers.insert(name.into(), src).is_some() {
            return Err(ElaborationError::MultiplyDriven { module: self.ast.name.clone(), net: name.into() });
        }
        Ok(())
    }

    fn resolve(&self, src: &Src) -> Result<usize, ElaborationError> {
        let mut seen = HashSet::new();
        let mut cur = src;
        loop {
            match cur {
                Src::Node(id, _) => return Ok(*id),
                Src::Signal(name, _) => {
                    if let Some(&id) = self.inputs.get(name) {
                        return Ok(id);
                    }
                    if !seen.insert(name.as_str()) {
                        return Err(ElaborationError::CombinationalLoop { module: self.ast.name.clone() });
                    }
                    cur = self
                        .drivers
                        .get(name)
                        .ok_or_else(|| ElaborationError::UndrivenNet { module: self.ast.name.clone(), net: name.clone() })?;
                }
            }
        }
    }

    fn binary_cell(&mut self, op: &str, a: Src, b: Src, y_width: u32) -> Src {
        let params = vec![
            ("A_WIDTH".into(), a.width().to_string()),
            ("B_WIDTH".into(), b.width().to_string()),
            ("Y_WIDTH".into(), y_width.to_string()),
        ];
        let id = self.push_node(NodeKind::Cell, op, None, vec!["A".into(), "B".into(), "Y".into()], params);
        self.edges.push(PendingEdge { src: a, dst: id, cap: None });
        self.edges.push(PendingEdge { src: b, dst: id, cap: None });
        Src::Node(id, y_width)
    }

    fn expr(&mut self, e: &Expr) -> Src {
        match e {
            Expr::Ident { name, .. } => self.signal(name),
            Expr::Literal(l) => {
                let id = self.push_node(
                    NodeKind::Const,
                    "const",
                    None,
                    vec!["Y".into()],
                    vec![("VALUE".into(), l.text.clone()), ("WIDTH".into(), l.width.to_string())],
                );
                Src::Node(id, l.width)
            }
            Expr::Unary { op: UnaryOp::Not, arg } => {
                let a = self.expr(arg);
                let w = a.width();
                let params = vec![("A_WIDTH".into(), w.to_string()), ("Y_WIDTH".into(), w.to_string())];
                let id = self.push_node(NodeKind::Cell, "not", None, vec!["A".into(), "Y".into()], params);
                self.edges.push(PendingEdge { src: a, dst: id, cap: None });
                Src::Node(id, w)
            }
            Expr::Binary { op, lhs, rhs } => {
                let a = self.expr(lhs);
                let b = self.expr(rhs);
                let w = if *op == BinaryOp::Eq { 1 } else { a.width().max(b.width()) };
                self.binary_cell(op.cell_type(), a, b, w)
            }
            Expr::Ternary { cond, then, otherwise } => {
                let s = self.expr(cond);
                let t = self.expr(then);
                let f = self.expr(otherwise);
                let w = t.width().max(f.width());
                let id = self.push_node(
                    NodeKind::Cell,
                    "mux",
                    None,
                    vec!["A".into(), "B".into(), "S".into(), "Y".into()],
                    vec![("WIDTH".into(), w.to_string())],
                );
                self.edges.push(PendingEdge { src: f, dst: id, cap: None });
                self.edges.push(PendingEdge { src: t, dst: id, cap: None });
                self.edges.push(PendingEdge { src: s, dst: id, cap: None });
                Src::Node(id, w)
            }
            Expr::Concat(parts) => {
                let srcs: Vec<Src> = parts.iter().map(|p| self.expr(p)).collect();
                let w: u32 = srcs.iter().map(Src::width).sum();
                let mut ports: Vec<String> = (0..srcs.len()).map(|i| format!("IN{i}")).collect();
                ports.push("Y".into());
                let id = self.push_node(NodeKind::Cell, "concat", None, ports, vec![("Y_WIDTH".into(), w.to_string())]);
                for s in srcs {
                    self.edges.push(PendingEdge { src: s, dst: id, cap: None });
                }
                Src::Node(id, w)
            }
            Expr::Select { name, msb, lsb, .. } => {
                let base = self.ast.port(name).map(|p| p.lsb).or_else(|| self.ast.net(name).map(|n| n.lsb)).unwrap_or(0);
                let a = self.signal(name);
                let w = msb - lsb + 1;
                let params = vec![
                    ("OFFSET".into(), (lsb - base).to_string()),
                    ("A_WIDTH".into(), a.width().to_string()),
                    ("Y_WIDTH".into(), w.to_string()),
                ];
                let id = self.push_node(NodeKind::Cell, "slice", None, vec!["A".into(), "Y".into()], params);
                self.edges.push(PendingEdge { src: a, dst: id, cap: None });
                Src::Node(id, w)
            }
        }
    }

    fn instance(&mut self, inst: &Instance) -> Result<(), ElaborationError> {
        let target = self.library.iter().find(|m| m.name == inst.module);
        let mismatch = || ElaborationError::PortMismatch {
            module: self.ast.name.clone(),
            instance: inst.name.clone(),
            target: inst.module.clone(),
        };
        // (port name, expression, is_output)
        let mut conns: Vec<(String, &Expr, bool)> = Vec::new();
        match &inst.connections {
            Connections::Named(named) => {
                for c in named {
                    let Some(expr) = &c.expr else { continue };
                    let out = match target {
                        Some(t) => t.port(&c.port).ok_or_else(mismatch)?.direction == Direction::Output,
                        None => self.looks_like_output(expr),
                    };
                    conns.push((c.port.clone(), expr, out));
                }
            }
            Connections::Positional(exprs) => {
                if let Some(t) = target {
                    if t.ports.len() != exprs.len() {
                        return Err(mismatch());
                    }
                }
                for (i, expr) in exprs.iter().enumerate() {
                    let (port, out) = match target {
                        Some(t) => (t.ports[i].name.clone(), t.ports[i].direction == Direction::Output),
                        None => (format!("P{i}"), self.looks_like_output(expr)),
                    };
                    conns.push((port, expr, out));
                }
            }
        }
        if target.is_some_and(|t| t.ports.iter().any(|p| p.direction == Direction::Inout)) {
            return Err(ElaborationError::Unsupported { module: self.ast.name.clone(), construct: format!("inout port on `{}`", inst.module) });
        }

        let mut inputs = Vec::new();
        for (_, expr, out) in &conns {
            if !out {
                inputs.push(self.expr(expr));
            }
        }
        let ports = conns.iter().map(|c| c.0.clone()).collect();
        let id = self.push_node(NodeKind::Cell, &inst.module, None, ports, Vec::new());
        for src in inputs {
            self.edges.push(PendingEdge { src, dst: id, cap: None });
        }
        for (port, expr, out) in &conns {
            if !out {
                continue;
            }
            let Expr::Ident { name, .. } = expr else {
                return Err(ElaborationError::Unsupported {
                    module: self.ast.name.clone(),
                    construct: format!("instance `{}` output `{port}` must connect to a whole net", inst.name),
                });
            };
            let w = self.ast.width_of(name).unwrap_or(1);
            self.drive(name, Src::Node(id, w))?;
        }
        Ok(())
    }

    /// Direction guess for instances of modules outside the library: a bare
    /// net that nothing else in this module drives must be driven by the
    /// instance.
    fn looks_like_output(&self, expr: &Expr) -> bool {
        let Expr::Ident { name, .. } = expr else { return false };
        !self.inputs.contains_key(name)
            && !self.ast.port(name).is_some_and(|p| p.direction == Direction::Input)
            && !self.procedural_or_assigned.contains(name)
            && !self.drivers.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse_str;
    use super::*;

    fn graph(src: &str) -> DataPathGraph {
        let ms = parse_str(src).unwrap();
        elaborate_module(ms.last().unwrap(), &ms).unwrap()
    }

    fn err(src: &str) -> ElaborationError {
        let ms = parse_str(src).unwrap();
        elaborate_module(ms.last().unwrap(), &ms).unwrap_err()
    }

    fn pairs(g: &DataPathGraph) -> Vec<(usize, usize)> {
        g.edges.iter().map(|e| (e.src, e.dst)).collect()
    }

    #[test]
    fn flip_flop() {
        let ms = parse_str("module flip_flop(input clk, input d, output reg q);\n  always @(posedge clk) q <= d;\nendmodule").unwrap();
        let g = elaborate_to_graph(&ms[0], 1).unwrap();
        let kinds: Vec<_> = g.nodes.iter().map(|n| (n.kind, n.op_type.as_str())).collect();
        assert_eq!(
            kinds,
            vec![(NodeKind::PortIn, "port"), (NodeKind::PortIn, "port"), (NodeKind::PortOut, "port"), (NodeKind::Cell, "dff")]
        );
        assert_eq!(pairs(&g), vec![(0, 3), (1, 3), (3, 2)]);
        assert!(g.edges.iter().all(|e| e.width_norm == 1.0));
    }

    #[test]
    fn plain_alias() {
        let ms = parse_str("module m(input [7:0] a, output [7:0] y); assign y = a; endmodule").unwrap();
        let g = elaborate_to_graph(&ms[0], 8).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(pairs(&g), vec![(0, 1)]);
        assert_eq!((g.edges[0].width, g.edges[0].width_norm), (8, 1.0));
    }

    #[test]
    fn operators_in_post_order() {
        let g = graph("module m(input [3:0] a, b, input s, output [3:0] y);\n wire [3:0] t;\n assign t = a + b;\n assign y = s ? ~t : 4'd3;\nendmodule");
        let ops: Vec<_> = g.nodes.iter().map(|n| n.op_type.as_str()).collect();
        assert_eq!(ops, vec!["port", "port", "port", "port", "add", "not", "const", "mux"]);
        // mux inputs arrive in port order A (else), B (then), S.
        let mux_in: Vec<_> = g.edges.iter().filter(|e| e.dst == 7).map(|e| e.src).collect();
        assert_eq!(mux_in, vec![6, 5, 2]);
        assert_eq!(g.edges.last().map(|e| (e.src, e.dst)), Some((7, 3)));
    }

    #[test]
    fn counter_feedback_is_allowed() {
        let g = graph("module c(input clk, output reg [7:0] q); always @(posedge clk) q <= q + 8'd1; endmodule");
        assert!(g.is_acyclic_without_registers());
        let dff = g.nodes.iter().position(|n| n.op_type == "dff").unwrap();
        assert!(g.edges.iter().any(|e| e.src == dff && g.nodes[e.dst].op_type == "add"));
    }

    #[test]
    fn driver_errors() {
        assert!(matches!(err("module m(input a, output y, output z); assign y = a; endmodule"), ElaborationError::UndrivenOutput { .. }));
        assert!(matches!(
            err("module m(input a, output y); assign y = a; assign y = ~a; endmodule"),
            ElaborationError::MultiplyDriven { .. }
        ));
        assert!(matches!(err("module m(input a, output y); wire w; assign y = w; endmodule"), ElaborationError::UndrivenNet { .. }));
        assert!(matches!(
            err("module m(input a, output y); wire w; assign w = y & a; assign y = w; endmodule"),
            ElaborationError::CombinationalLoop { .. }
        ));
        assert!(matches!(err("module m(input a, output y); assign a = 1'b0; assign y = a; endmodule"), ElaborationError::DrivesInput { .. }));
    }

    #[test]
    fn instances_use_library_directions() {
        let g = graph(
            "module inv(input a, output y); assign y = ~a; endmodule\n\
             module top(input x, output z); wire w; inv u0(.a(x), .y(w)); inv u1(w, z); endmodule",
        );
        let ops: Vec<_> = g.nodes.iter().map(|n| n.op_type.as_str()).collect();
        assert_eq!(ops, vec!["port", "port", "inv", "inv"]);
        assert_eq!(pairs(&g), vec![(0, 2), (2, 3), (3, 1)]);
        assert_eq!(g.nodes[3].port_names, vec!["a", "y"]);
    }

    #[test]
    fn unknown_instance_guesses_outputs() {
        let g = graph("module top(input x, output z); wire w; blackbox u(.i(x), .o(w)); assign z = w; endmodule");
        assert_eq!(pairs(&g), vec![(0, 2), (2, 1)]);
    }

    #[test]
    fn widths_exceeding_w_max_are_rejected() {
        let ms = parse_str("module m(input [7:0] a, output [7:0] y); assign y = a; endmodule").unwrap();
        assert!(matches!(elaborate_to_graph(&ms[0], 4), Err(ElaborationError::WidthExceedsMax { .. })));
    }
}
