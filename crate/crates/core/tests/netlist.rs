use proptest::prelude::*;
use rand::Rng;
use verigrag::netlist::corpus::extract;
use verigrag::netlist::dedup::DedupConfig;
use verigrag::netlist::{elaborate_module, parse_str, DataPathGraph, NodeKind, VerilogSource};
use verigrag::{seeded_rng, Exec};

/// Random expression over `signals`, at most `depth` operators deep.
fn expr(rng: &mut impl Rng, signals: &[String], depth: u32) -> String {
    if depth == 0 || rng.random_bool(0.3) {
        return if rng.random_bool(0.85) {
            signals[rng.random_range(0..signals.len())].clone()
        } else {
            format!("4'd{}", rng.random_range(0..16))
        };
    }
    let op = rng.random_range(0..9);
    let mut sub = || expr(rng, signals, depth - 1);
    match op {
        0 => format!("~({})", sub()),
        1 => format!("({} & {})", sub(), sub()),
        2 => format!("({} | {})", sub(), sub()),
        3 => format!("({} ^ {})", sub(), sub()),
        4 => format!("({} + {})", sub(), sub()),
        5 => format!("({} - {})", sub(), sub()),
        6 => format!("(({} == {}) ? {} : {})", sub(), sub(), sub(), sub()),
        7 => format!("{{{}, {}}}", sub(), sub()),
        _ => format!("({} & {})", sub(), sub()),
    }
}

/// A random module in the supported subset: wires defined only from earlier
/// signals, registers that may read anything including themselves.
fn program(seed: u64) -> String {
    let mut rng = seeded_rng(seed, 0);
    let inputs = rng.random_range(1..4);
    let mut header = vec!["input clk".to_string()];
    let mut signals = Vec::new();
    for i in 0..inputs {
        let w = rng.random_range(1..9);
        header.push(format!("input [{}:0] a{i}", w - 1));
        signals.push(format!("a{i}"));
    }
    header.push(format!("output [{}:0] y", rng.random_range(1..9) - 1));
    let mut body = Vec::new();
    let regs = rng.random_range(0..3);
    let reg_names: Vec<String> = (0..regs).map(|i| format!("r{i}")).collect();
    for r in &reg_names {
        body.push(format!("  reg [{}:0] {r};", rng.random_range(1..9) - 1));
    }
    signals.extend(reg_names.iter().cloned());
    for i in 0..rng.random_range(0..4) {
        let e = expr(&mut rng, &signals, 3);
        body.push(format!("  wire [{}:0] w{i};\n  assign w{i} = {e};", rng.random_range(1..9) - 1));
        signals.push(format!("w{i}"));
    }
    for r in &reg_names {
        let e = expr(&mut rng, &signals, 2);
        body.push(format!("  always @(posedge clk) {r} <= {e};"));
    }
    let e = expr(&mut rng, &signals, 3);
    body.push(format!("  assign y = {e};"));
    format!("module m{seed}({});\n{}\nendmodule\n", header.join(", "), body.join("\n"))
}

fn elaborate(text: &str) -> DataPathGraph {
    let mods = parse_str(text).unwrap_or_else(|e| panic!("{e:?}\n{text}"));
    elaborate_module(&mods[0], &[]).unwrap_or_else(|e| panic!("{e:?}\n{text}"))
}

/// Kahn's algorithm on the graph with every edge out of a `dff` removed.
fn acyclic_without_registers(g: &DataPathGraph) -> bool {
    let n = g.nodes.len();
    let edges: Vec<_> = g.edges.iter().filter(|e| g.nodes[e.src].op_type != "dff").collect();
    let mut indeg = vec![0usize; n];
    for e in &edges {
        indeg[e.dst] += 1;
    }
    let mut ready: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = ready.pop() {
        seen += 1;
        for e in edges.iter().filter(|e| e.src == v) {
            indeg[e.dst] -= 1;
            if indeg[e.dst] == 0 {
                ready.push(e.dst);
            }
        }
    }
    seen == n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn elaborated_graphs_keep_their_invariants(seed in any::<u64>()) {
        let text = program(seed);
        let g = elaborate(&text);
        prop_assert_eq!(&DataPathGraph::from_json(&g.to_json()).unwrap(), &g);
        prop_assert_eq!(elaborate(&text).to_json(), g.to_json());
        for e in &g.edges {
            prop_assert!(g.nodes[e.dst].kind != NodeKind::PortIn, "edge into an input port\n{}", text);
            prop_assert!(g.nodes[e.src].kind != NodeKind::PortOut, "edge out of an output port\n{}", text);
            prop_assert!(e.width_norm > 0.0 && e.width_norm <= 1.0);
        }
        prop_assert!(acyclic_without_registers(&g), "combinational cycle\n{}", text);
    }
}

#[test]
fn combinational_loops_are_rejected() {
    let text = "module l(input a, output y);\n  wire p;\n  wire q;\n  assign p = q ^ a;\n  assign q = p;\n  assign y = q;\nendmodule\n";
    let mods = parse_str(text).unwrap();
    assert!(elaborate_module(&mods[0], &[]).is_err());
}

#[test]
fn a_malformed_file_does_not_disturb_the_rest_of_the_batch() {
    let good: Vec<VerilogSource> = (0..4).map(|s| VerilogSource::new(format!("g{s}.v"), program(s)).unwrap()).collect();
    let bad = VerilogSource::new("bad.v", "module bad(input a, output y; assign y = ;").unwrap();
    let mut mixed = good.clone();
    mixed.insert(2, bad);
    let cfg = DedupConfig { threshold: 1.01, ..Default::default() };
    let clean = extract(&good, &cfg, Exec::Sequential);
    let noisy = extract(&mixed, &cfg, Exec::Parallel);
    assert_eq!(noisy.skipped.len(), 1);
    assert_eq!(noisy.graphs, clean.graphs);
    assert_eq!(noisy.pairs, clean.pairs);
}
