//! Two-state cycle simulator for the supported subset, used by the bundled
//! functional checker to compare a candidate module against a reference on
//! random stimulus.

use std::collections::HashMap;

use rand::Rng;

use super::ast::*;
use crate::seeded_rng;

const MAX_WIDTH: u32 = 128;

fn mask(v: u128, width: u32) -> u128 {
    if width >= 128 {
        v
    } else {
        v & ((1u128 << width) - 1)
    }
}

/// Flat single-module simulator. Registers start at zero.
pub struct Simulator<'a> {
    m: &'a ModuleAst,
    assigns: HashMap<&'a str, &'a Expr>,
    regs: HashMap<&'a str, u128>,
    always: Vec<&'a Always>,
}

impl<'a> Simulator<'a> {
    pub fn new(m: &'a ModuleAst) -> Result<Self, String> {
        let mut assigns = HashMap::new();
        let mut regs = HashMap::new();
        let mut always = Vec::new();
        for p in &m.ports {
            if p.width > MAX_WIDTH {
                return Err(format!("port `{}` is wider than {MAX_WIDTH} bits", p.name));
            }
            if p.direction == Direction::Inout {
                return Err(format!("inout port `{}`", p.name));
            }
        }
        for item in &m.items {
            match item {
                Item::Assign(a) => {
                    if assigns.insert(a.target.as_str(), &a.expr).is_some() {
                        return Err(format!("`{}` has more than one driver", a.target));
                    }
                }
                Item::Always(a) => {
                    if regs.insert(a.target.as_str(), 0).is_some() {
                        return Err(format!("`{}` has more than one driver", a.target));
                    }
                    always.push(a);
                }
                Item::Instance(i) => return Err(format!("instance `{}` cannot be simulated", i.name)),
            }
        }
        Ok(Simulator { m, assigns, regs, always })
    }

    fn width(&self, name: &str) -> u32 {
        self.m.width_of(name).unwrap_or(1)
    }

    pub fn clocks(&self) -> Vec<&'a str> {
        let mut c: Vec<&str> = self.always.iter().map(|a| a.clock.as_str()).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Value of `name` under the given input assignment and current state.
    pub fn read(&self, name: &str, inputs: &HashMap<String, u128>) -> Result<u128, String> {
        let mut visiting = Vec::new();
        self.net(name, inputs, &mut visiting)
    }

    fn net<'b>(&'b self, name: &'b str, inputs: &HashMap<String, u128>, visiting: &mut Vec<&'b str>) -> Result<u128, String> {
        if let Some(v) = inputs.get(name) {
            return Ok(mask(*v, self.width(name)));
        }
        if let Some(v) = self.regs.get(name) {
            return Ok(*v);
        }
        let Some(expr) = self.assigns.get(name) else {
            return Err(format!("`{name}` is never driven"));
        };
        if visiting.contains(&name) {
            return Err(format!("combinational loop through `{name}`"));
        }
        visiting.push(name);
        let w = self.width(name);
        let ctx = w.max(self.self_width(expr));
        let v = self.eval(expr, ctx, inputs, visiting)?;
        visiting.pop();
        Ok(mask(v, w))
    }

    fn self_width(&self, e: &Expr) -> u32 {
        match e {
            Expr::Ident { name, .. } => self.width(name),
            Expr::Literal(l) => l.width,
            Expr::Unary { arg, .. } => self.self_width(arg),
            Expr::Binary { op: BinaryOp::Eq, .. } => 1,
            Expr::Binary { lhs, rhs, .. } => self.self_width(lhs).max(self.self_width(rhs)),
            Expr::Ternary { then, otherwise, .. } => self.self_width(then).max(self.self_width(otherwise)),
            Expr::Concat(parts) => parts.iter().map(|p| self.self_width(p)).sum(),
            Expr::Select { msb, lsb, .. } => msb - lsb + 1,
        }
        .min(MAX_WIDTH)
    }

    fn eval<'b>(&'b self, e: &'b Expr, ctx: u32, inputs: &HashMap<String, u128>, visiting: &mut Vec<&'b str>) -> Result<u128, String> {
        let v = match e {
            Expr::Ident { name, .. } => self.net(name, inputs, visiting)?,
            Expr::Literal(l) => l.value.ok_or("literal wider than 128 bits")?,
            Expr::Unary { arg, .. } => !self.eval(arg, ctx, inputs, visiting)?,
            Expr::Binary { op, lhs, rhs } => {
                if *op == BinaryOp::Eq {
                    let w = self.self_width(lhs).max(self.self_width(rhs));
                    let a = self.eval(lhs, w, inputs, visiting)?;
                    let b = self.eval(rhs, w, inputs, visiting)?;
                    u128::from(a == b)
                } else {
                    let a = self.eval(lhs, ctx, inputs, visiting)?;
                    let b = self.eval(rhs, ctx, inputs, visiting)?;
                    match op {
                        BinaryOp::And => a & b,
                        BinaryOp::Or => a | b,
                        BinaryOp::Xor => a ^ b,
                        BinaryOp::Add => a.wrapping_add(b),
                        BinaryOp::Sub => a.wrapping_sub(b),
                        BinaryOp::Eq => unreachable!(),
                    }
                }
            }
            Expr::Ternary { cond, then, otherwise } => {
                let cw = self.self_width(cond);
                if self.eval(cond, cw, inputs, visiting)? != 0 {
                    self.eval(then, ctx, inputs, visiting)?
                } else {
                    self.eval(otherwise, ctx, inputs, visiting)?
                }
            }
            Expr::Concat(parts) => {
                let mut acc: u128 = 0;
                for p in parts {
                    let w = self.self_width(p);
                    let v = self.eval(p, w, inputs, visiting)?;
                    acc = if w >= 128 { v } else { (acc << w) | v };
                }
                acc
            }
            Expr::Select { name, msb, lsb, .. } => {
                let base = self.m.port(name).map(|p| p.lsb).or_else(|| self.m.net(name).map(|n| n.lsb)).unwrap_or(0);
                let v = self.net(name, inputs, visiting)?;
                mask(v >> (lsb - base), msb - lsb + 1)
            }
        };
        Ok(mask(v, ctx))
    }

    /// Applies one rising edge of every clock: all registers load together.
    pub fn tick(&mut self, inputs: &HashMap<String, u128>) -> Result<(), String> {
        let mut next = Vec::with_capacity(self.always.len());
        for a in &self.always {
            let w = self.width(&a.target);
            let ctx = w.max(self.self_width(&a.expr));
            let mut visiting = Vec::new();
            next.push((a.target.as_str(), mask(self.eval(&a.expr, ctx, inputs, &mut visiting)?, w)));
        }
        for (name, v) in next {
            self.regs.insert(name, v);
        }
        Ok(())
    }
}

/// Drives both modules with identical random inputs for `cycles` clock
/// cycles and compares every output before each edge. Port lists must agree
/// in names, directions and widths.
pub fn check_equivalent(reference: &ModuleAst, candidate: &ModuleAst, cycles: usize, seed: u64) -> Result<(), String> {
    let mut rp: Vec<_> = reference.ports.iter().map(|p| (p.name.as_str(), p.direction, p.width)).collect();
    let mut cp: Vec<_> = candidate.ports.iter().map(|p| (p.name.as_str(), p.direction, p.width)).collect();
    rp.sort_by_key(|p| p.0);
    cp.sort_by_key(|p| p.0);
    if rp != cp {
        return Err("port lists differ from the reference".into());
    }
    let mut r = Simulator::new(reference)?;
    let mut c = Simulator::new(candidate)?;
    let mut clocks = r.clocks();
    clocks.extend(c.clocks());
    let mut rng = seeded_rng(seed, 0x51);
    for cycle in 0..cycles.max(1) {
        let mut inputs = HashMap::new();
        for p in reference.ports.iter().filter(|p| p.direction == Direction::Input) {
            let v = if clocks.contains(&p.name.as_str()) { 0 } else { mask(rng.random::<u128>(), p.width) };
            inputs.insert(p.name.clone(), v);
        }
        for p in reference.ports.iter().filter(|p| p.direction == Direction::Output) {
            let want = r.read(&p.name, &inputs)?;
            let got = c.read(&p.name, &inputs)?;
            if want != got {
                return Err(format!("cycle {cycle}: output `{}` is {got:#x}, expected {want:#x}", p.name));
            }
        }
        r.tick(&inputs)?;
        c.tick(&inputs)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::parse_str;
    use super::*;

    fn module(src: &str) -> ModuleAst {
        parse_str(src).unwrap().remove(0)
    }

    #[test]
    fn adder_carry_follows_the_target_width() {
        let m = module("module a(input [7:0] x, y, output [8:0] s); assign s = x + y; endmodule");
        let sim = Simulator::new(&m).unwrap();
        let inputs = HashMap::from([("x".to_string(), 200), ("y".to_string(), 100)]);
        assert_eq!(sim.read("s", &inputs).unwrap(), 300);
    }

    #[test]
    fn counter_counts() {
        let m = module("module c(input clk, output reg [3:0] q); always @(posedge clk) q <= q + 4'd1; endmodule");
        let mut sim = Simulator::new(&m).unwrap();
        let inputs = HashMap::from([("clk".to_string(), 0)]);
        for _ in 0..18 {
            sim.tick(&inputs).unwrap();
        }
        assert_eq!(sim.read("q", &inputs).unwrap(), 2);
    }

    #[test]
    fn concat_select_and_compare() {
        let m = module("module m(input [3:0] a, output [7:0] y, output e); assign y = {a[1:0], a, 2'b10}; assign e = ~a == 4'b0000; endmodule");
        let sim = Simulator::new(&m).unwrap();
        let inputs = HashMap::from([("a".to_string(), 0b1111)]);
        assert_eq!(sim.read("y", &inputs).unwrap(), 0b1111_1110);
        assert_eq!(sim.read("e", &inputs).unwrap(), 1);
    }

    #[test]
    fn equivalence_detects_differences() {
        let r = module("module m(input [3:0] a, b, output [3:0] y); assign y = a ^ b; endmodule");
        let same = module("module m(input [3:0] a, input [3:0] b, output [3:0] y); assign y = (a | b) & ~(a & b); endmodule");
        let diff = module("module m(input [3:0] a, b, output [3:0] y); assign y = a | b; endmodule");
        assert!(check_equivalent(&r, &same, 32, 0).is_ok());
        assert!(check_equivalent(&r, &diff, 32, 0).is_err());
    }
}
