//! Synthetic corpus of small, structurally distinct modules with matching
//! descriptions. Used by the tests, the benches and the `toy-corpus` command.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::{seeded_rng, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyModule {
    pub name: String,
    pub description: String,
    pub code: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Family {
    Register,
    EnableRegister,
    Adder,
    Subtractor,
    AddSub,
    And,
    Or,
    Xor,
    AndOr,
    Inverter,
    Mux,
    Comparator,
    Accumulator,
    Counter,
    Swap,
    RegisteredAdder,
}

const FAMILIES: [Family; 16] = [
    Family::Register,
    Family::EnableRegister,
    Family::Adder,
    Family::Subtractor,
    Family::AddSub,
    Family::And,
    Family::Or,
    Family::Xor,
    Family::AndOr,
    Family::Inverter,
    Family::Mux,
    Family::Comparator,
    Family::Accumulator,
    Family::Counter,
    Family::Swap,
    Family::RegisteredAdder,
];

const WIDTHS: [u32; 6] = [1, 2, 4, 8, 16, 32];

/// Alternative port spellings: (first operand, second operand, output).
const NAMES: [(&str, &str, &str); 4] = [("a", "b", "y"), ("x", "w", "z"), ("in0", "in1", "out"), ("lhs", "rhs", "res")];

fn range(w: u32) -> String {
    if w == 1 {
        String::new()
    } else {
        format!("[{}:0] ", w - 1)
    }
}

fn bits(w: u32) -> String {
    if w == 1 {
        "1-bit".into()
    } else {
        format!("{w}-bit")
    }
}

fn build(family: Family, w: u32, names: (&str, &str, &str), name: &str) -> Option<ToyModule> {
    let (a, b, y) = names;
    let r = range(w);
    let bw = bits(w);
    let (ports, body, desc) = match family {
        Family::Register => (
            format!("input clk, input {r}{a}, output reg {r}{y}"),
            format!("  always @(posedge clk) {y} <= {a};"),
            format!("A {bw} register that captures input {a} on every rising edge of clk and drives it on output {y}."),
        ),
        Family::EnableRegister => (
            format!("input clk, input en, input {r}{a}, output reg {r}{y}"),
            format!("  always @(posedge clk) {y} <= en ? {a} : {y};"),
            format!("A {bw} register with enable: on the rising clock edge {y} loads {a} when en is high and holds otherwise."),
        ),
        Family::Adder => (
            format!("input {r}{a}, input {r}{b}, output {r}{y}"),
            format!("  assign {y} = {a} + {b};"),
            format!("A combinational {bw} adder producing the sum {y} of inputs {a} and {b}."),
        ),
        Family::Subtractor => (
            format!("input {r}{a}, input {r}{b}, output {r}{y}"),
            format!("  assign {y} = {a} - {b};"),
            format!("A combinational {bw} subtractor whose output {y} is the difference {a} minus {b}."),
        ),
        Family::AddSub => (
            format!("input sub, input {r}{a}, input {r}{b}, output {r}{y}"),
            format!("  assign {y} = sub ? {a} - {b} : {a} + {b};"),
            format!("A {bw} adder-subtractor: {y} is {a} minus {b} when sub is set, otherwise the sum of {a} and {b}."),
        ),
        Family::And => (
            format!("input {r}{a}, input {r}{b}, output {r}{y}"),
            format!("  assign {y} = {a} & {b};"),
            format!("A {bw} bitwise AND gate: output {y} is {a} and {b}."),
        ),
        Family::Or => (
            format!("input {r}{a}, input {r}{b}, output {r}{y}"),
            format!("  assign {y} = {a} | {b};"),
            format!("A {bw} bitwise OR gate: output {y} is {a} or {b}."),
        ),
        Family::Xor => (
            format!("input {r}{a}, input {r}{b}, output {r}{y}"),
            format!("  assign {y} = {a} ^ {b};"),
            format!("A {bw} bitwise XOR gate: output {y} is {a} xor {b}."),
        ),
        Family::AndOr => (
            format!("input {r}{a}, input {r}{b}, input {r}mask, output {r}{y}"),
            format!("  assign {y} = ({a} & {b}) | mask;"),
            format!("A {bw} and-or stage: {y} is the AND of {a} and {b}, ORed with mask."),
        ),
        Family::Inverter => (
            format!("input {r}{a}, output {r}{y}"),
            format!("  assign {y} = ~{a};"),
            format!("A {bw} inverter: output {y} is the bitwise NOT of {a}."),
        ),
        Family::Mux => (
            format!("input sel, input {r}{a}, input {r}{b}, output {r}{y}"),
            format!("  assign {y} = sel ? {a} : {b};"),
            format!("A {bw} two-to-one multiplexer: {y} selects {a} when sel is high and {b} otherwise."),
        ),
        Family::Comparator => (
            format!("input {r}{a}, input {r}{b}, output {y}"),
            format!("  assign {y} = {a} == {b};"),
            format!("A {bw} equality comparator: output {y} is high when {a} equals {b}."),
        ),
        Family::Accumulator => (
            format!("input clk, input {r}{a}, output reg {r}{y}"),
            format!("  always @(posedge clk) {y} <= {y} + {a};"),
            format!("A {bw} accumulator that adds input {a} to register {y} on every rising clock edge."),
        ),
        Family::Counter => (
            format!("input clk, output reg {r}{y}"),
            format!("  always @(posedge clk) {y} <= {y} + {w}'d1;"),
            format!("A {bw} counter: register {y} increments by one on each rising edge of clk."),
        ),
        Family::Swap => {
            if w < 2 {
                return None;
            }
            let h = w / 2;
            (
                format!("input {r}{a}, output {r}{y}"),
                format!("  assign {y} = {{{a}[{}:0], {a}[{}:{}]}};", h - 1, w - 1, h),
                format!("A {bw} half swapper: output {y} is {a} with its upper and lower halves exchanged."),
            )
        }
        Family::RegisteredAdder => (
            format!("input clk, input {r}{a}, input {r}{b}, output reg {r}{y}"),
            format!("  always @(posedge clk) {y} <= {a} + {b};"),
            format!("A {bw} registered adder: on each rising clock edge {y} stores the sum of {a} and {b}."),
        ),
    };
    let code = format!("module {name}({ports});\n{body}\nendmodule\n");
    Some(ToyModule { name: name.into(), description: desc, code })
}

/// `n` distinct modules chosen deterministically by `seed`. Families are
/// interleaved so any prefix is structurally varied. Panics if `n` exceeds
/// the number of distinct combinations (several hundred).
pub fn toy_corpus(n: usize, seed: u64) -> Vec<ToyModule> {
    let mut combos = Vec::new();
    for (fi, f) in FAMILIES.iter().enumerate() {
        for &w in &WIDTHS {
            for (ni, names) in NAMES.iter().enumerate() {
                combos.push((fi, *f, w, ni, *names));
            }
        }
    }
    let mut rng = seeded_rng(seed, 0x70);
    combos.shuffle(&mut rng);
    // Round-robin over families so small corpora stay varied.
    let mut by_family: Vec<Vec<_>> = vec![Vec::new(); FAMILIES.len()];
    for c in combos {
        by_family[c.0].push(c);
    }
    let mut out = Vec::with_capacity(n);
    let mut round = 0;
    while out.len() < n {
        let mut progressed = false;
        for fam in &by_family {
            if out.len() == n {
                break;
            }
            let Some(&(_, f, w, ni, names)) = fam.get(round) else { continue };
            progressed = true;
            let name = format!("{}_w{w}_{ni}", format!("{f:?}").to_lowercase());
            if let Some(m) = build(f, w, names, &name) {
                out.push(m);
            }
        }
        assert!(progressed, "toy corpus has fewer than {n} distinct modules");
        round += 1;
    }
    out
}

/// Writes `<name>.v` and `<name>.txt` for every module.
pub fn write_corpus(dir: &Path, modules: &[ToyModule]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for m in modules {
        fs::write(dir.join(format!("{}.v", m.name)), &m.code)?;
        fs::write(dir.join(format!("{}.txt", m.name)), format!("{}\n", m.description))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlist::{elaborate_module, parse_str};
    use std::collections::HashSet;

    #[test]
    fn every_toy_module_elaborates() {
        let mods = toy_corpus(300, 1);
        assert_eq!(mods.len(), 300);
        let names: HashSet<_> = mods.iter().map(|m| m.name.clone()).collect();
        assert_eq!(names.len(), 300);
        for m in &mods {
            let ast = parse_str(&m.code).unwrap_or_else(|e| panic!("{}: {e}", m.code));
            elaborate_module(&ast[0], &ast).unwrap_or_else(|e| panic!("{}: {e}", m.code));
        }
    }

    #[test]
    fn seed_changes_selection_but_not_validity() {
        assert_eq!(toy_corpus(16, 3), toy_corpus(16, 3));
        assert_ne!(toy_corpus(16, 3), toy_corpus(16, 4));
        let families: HashSet<_> = toy_corpus(16, 3).iter().map(|m| m.name.split('_').next().unwrap().to_string()).collect();
        assert!(families.len() >= 15);
    }
}
