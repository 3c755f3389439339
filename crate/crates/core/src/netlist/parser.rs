use std::collections::HashSet;

use super::ast::*;
use super::lexer::{lex, Tok, Token};
use super::ParseError;

/// Keywords of full Verilog that fall outside the supported subset. Meeting
/// one where a module item is expected is an unsupported construct, not a
/// syntax error.
const UNSUPPORTED_KEYWORDS: &[&str] = &[
    "parameter", "localparam", "defparam", "integer", "real", "realtime", "time", "function", "task", "generate",
    "genvar", "initial", "case", "casez", "casex", "if", "for", "while", "repeat", "forever", "specify", "supply0",
    "supply1", "tri", "tri0", "tri1", "wand", "wor", "event", "primitive", "table", "always_ff", "always_comb",
    "always_latch", "logic", "signed", "fork", "assert", "property",
];

const RESERVED: &[&str] = &[
    "module", "endmodule", "input", "output", "inout", "wire", "reg", "assign", "always", "posedge", "negedge",
    "begin", "end", "or", "else", "endcase", "endfunction", "endtask", "endgenerate", "default",
];

fn is_keyword(s: &str) -> bool {
    RESERVED.contains(&s) || UNSUPPORTED_KEYWORDS.contains(&s)
}

/// Parses every module declaration in `text`, in source order.
pub fn parse_modules(text: &str) -> Result<Vec<ModuleAst>, ParseError> {
    let tokens = lex(text)?;
    let mut p = Parser { toks: tokens, pos: 0 };
    let mut modules = Vec::new();
    loop {
        match p.peek().clone() {
            Tok::Eof => break,
            Tok::Ident(k) if k == "module" => modules.push(p.module()?),
            Tok::Ident(k) if k == "macromodule" => return Err(ParseError::unsupported(p.span(), "macromodule")),
            Tok::Directive(d) => return Err(ParseError::unsupported(p.span(), format!("compiler directive `{d}"))),
            Tok::Sym("(*") => return Err(ParseError::unsupported(p.span(), "attribute instance")),
            other => return Err(ParseError::syntax(p.span(), format!("expected `module`, found {}", describe(&other)))),
        }
    }
    if modules.is_empty() {
        return Err(ParseError::syntax(p.span(), "no module declaration found"));
    }
    Ok(modules)
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Number(l) => format!("number `{}`", l.text),
        Tok::Sym(s) => format!("`{s}`"),
        Tok::Str => "string literal".into(),
        Tok::Directive(d) => format!("directive `{d}"),
        Tok::Eof => "end of input".into(),
    }
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

/// Port declared in a non-ANSI header, waiting for its direction.
struct PendingPort {
    name: String,
    span: Span,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn span(&self) -> Span {
        self.toks[self.pos].span
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(x) if *x == s)
    }

    fn is_kw(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Ident(x) if x == s)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<Span, ParseError> {
        if self.is_sym(s) {
            Ok(self.bump().span)
        } else {
            Err(ParseError::syntax(self.span(), format!("expected `{s}`, found {}", describe(self.peek()))))
        }
    }

    fn expect_kw(&mut self, s: &str) -> Result<Span, ParseError> {
        if self.is_kw(s) {
            Ok(self.bump().span)
        } else {
            Err(ParseError::syntax(self.span(), format!("expected `{s}`, found {}", describe(self.peek()))))
        }
    }

    fn ident(&mut self) -> Result<(String, Span), ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) if UNSUPPORTED_KEYWORDS.contains(&s.as_str()) => {
                Err(ParseError::unsupported(self.span(), format!("`{s}`")))
            }
            Tok::Ident(s) if !is_keyword(&s) && !s.starts_with('$') => {
                let sp = self.bump().span;
                Ok((s, sp))
            }
            Tok::Ident(s) if s.starts_with('$') => Err(ParseError::unsupported(self.span(), format!("system task `{s}`"))),
            other => Err(ParseError::syntax(self.span(), format!("expected identifier, found {}", describe(&other)))),
        }
    }

    fn const_int(&mut self) -> Result<u32, ParseError> {
        match self.peek().clone() {
            Tok::Number(l) => {
                let sp = self.bump().span;
                l.value.and_then(|v| u32::try_from(v).ok()).ok_or_else(|| ParseError::syntax(sp, "index out of range"))
            }
            Tok::Ident(_) => Err(ParseError::unsupported(self.span(), "non-constant range or index expression")),
            other => Err(ParseError::syntax(self.span(), format!("expected integer, found {}", describe(&other)))),
        }
    }

    /// `[msb:lsb]` → (width, lsb).
    fn range(&mut self) -> Result<Option<(u32, u32)>, ParseError> {
        if !self.is_sym("[") {
            return Ok(None);
        }
        let sp = self.bump().span;
        let msb = self.const_int()?;
        if !self.is_sym(":") {
            return Err(ParseError::unsupported(self.span(), "array or non-range dimension"));
        }
        self.bump();
        let lsb = self.const_int()?;
        self.expect_sym("]")?;
        if msb < lsb {
            return Err(ParseError::unsupported(sp, "ascending bit range"));
        }
        Ok(Some((msb - lsb + 1, lsb)))
    }

    fn module(&mut self) -> Result<ModuleAst, ParseError> {
        let span = self.expect_kw("module")?;
        let (name, _) = self.ident()?;
        if self.is_sym("#") {
            return Err(ParseError::unsupported(self.span(), "module parameter list"));
        }
        let mut ports: Vec<Port> = Vec::new();
        let mut pending: Vec<PendingPort> = Vec::new();
        if self.eat_sym("(") {
            if !self.is_sym(")") {
                if matches!(self.peek(), Tok::Ident(k) if k == "input" || k == "output" || k == "inout") {
                    self.ansi_ports(&mut ports)?;
                } else {
                    loop {
                        let (n, sp) = self.ident()?;
                        pending.push(PendingPort { name: n, span: sp });
                        if !self.eat_sym(",") {
                            break;
                        }
                    }
                }
            }
            self.expect_sym(")")?;
        }
        self.expect_sym(";")?;
        let ansi = !ports.is_empty();

        let mut nets: Vec<Net> = Vec::new();
        let mut items = Vec::new();
        let end;
        loop {
            let sp = self.span();
            match self.peek().clone() {
                Tok::Ident(k) if k == "endmodule" => {
                    end = Span { line: sp.line, col: sp.col + "endmodule".len() };
                    self.bump();
                    break;
                }
                Tok::Ident(k) if k == "input" || k == "output" || k == "inout" => {
                    if ansi {
                        return Err(ParseError::syntax(sp, "port declaration in body of a module with an ANSI header"));
                    }
                    self.body_port_decl(&mut pending, &mut ports)?;
                }
                Tok::Ident(k) if k == "wire" || k == "reg" => self.net_decl(&mut ports, &mut nets, &mut items)?,
                Tok::Ident(k) if k == "assign" => self.assign(&mut items)?,
                Tok::Ident(k) if k == "always" => items.push(Item::Always(self.always()?)),
                Tok::Ident(k) if k == "module" => return Err(ParseError::syntax(sp, "nested module declaration")),
                Tok::Ident(k) if UNSUPPORTED_KEYWORDS.contains(&k.as_str()) => {
                    return Err(ParseError::unsupported(sp, format!("`{k}`")));
                }
                Tok::Ident(k) if !is_keyword(&k) && !k.starts_with('$') => items.push(Item::Instance(self.instance()?)),
                Tok::Ident(k) if k.starts_with('$') => return Err(ParseError::unsupported(sp, format!("system task `{k}`"))),
                Tok::Directive(d) => return Err(ParseError::unsupported(sp, format!("compiler directive `{d}"))),
                Tok::Sym("(*") => return Err(ParseError::unsupported(sp, "attribute instance")),
                Tok::Eof => return Err(ParseError::syntax(sp, "missing `endmodule`")),
                other => return Err(ParseError::syntax(sp, format!("unexpected {} in module body", describe(&other)))),
            }
        }
        if let Some(p) = pending.first() {
            return Err(ParseError::syntax(p.span, format!("port `{}` has no direction declaration", p.name)));
        }
        let m = ModuleAst { name, ports, nets, items, span, end, source_sha256: String::new() };
        check_declarations(&m)?;
        Ok(m)
    }

    fn ansi_ports(&mut self, ports: &mut Vec<Port>) -> Result<(), ParseError> {
        let mut dir = Direction::Input;
        let mut width = (1, 0);
        let mut is_reg = false;
        loop {
            if let Tok::Ident(k) = self.peek().clone() {
                let d = match k.as_str() {
                    "input" => Some(Direction::Input),
                    "output" => Some(Direction::Output),
                    "inout" => Some(Direction::Inout),
                    _ => None,
                };
                if let Some(d) = d {
                    self.bump();
                    dir = d;
                    is_reg = false;
                    if self.is_kw("wire") {
                        self.bump();
                    } else if self.is_kw("reg") {
                        self.bump();
                        is_reg = true;
                    }
                    if self.is_kw("signed") {
                        return Err(ParseError::unsupported(self.span(), "signed port"));
                    }
                    width = self.range()?.unwrap_or((1, 0));
                }
            }
            let (name, span) = self.ident()?;
            if ports.iter().any(|p| p.name == name) {
                return Err(ParseError::syntax(span, format!("duplicate port `{name}`")));
            }
            ports.push(Port { name, direction: dir, width: width.0, lsb: width.1, is_reg, span });
            if !self.eat_sym(",") {
                return Ok(());
            }
        }
    }

    fn body_port_decl(&mut self, pending: &mut Vec<PendingPort>, ports: &mut Vec<Port>) -> Result<(), ParseError> {
        let dir = match self.bump().tok {
            Tok::Ident(k) if k == "input" => Direction::Input,
            Tok::Ident(k) if k == "output" => Direction::Output,
            _ => Direction::Inout,
        };
        let mut is_reg = false;
        if self.is_kw("wire") {
            self.bump();
        } else if self.is_kw("reg") {
            self.bump();
            is_reg = true;
        }
        if self.is_kw("signed") {
            return Err(ParseError::unsupported(self.span(), "signed port"));
        }
        let (width, lsb) = self.range()?.unwrap_or((1, 0));
        loop {
            let (name, span) = self.ident()?;
            let Some(i) = pending.iter().position(|p| p.name == name) else {
                let msg = if ports.iter().any(|p| p.name == name) {
                    format!("port `{name}` declared twice")
                } else {
                    format!("`{name}` is not in the module port list")
                };
                return Err(ParseError::syntax(span, msg));
            };
            pending.remove(i);
            ports.push(Port { name, direction: dir, width, lsb, is_reg, span });
            if !self.eat_sym(",") {
                break;
            }
        }
        self.expect_sym(";")?;
        Ok(())
    }

    fn net_decl(&mut self, ports: &mut [Port], nets: &mut Vec<Net>, items: &mut Vec<Item>) -> Result<(), ParseError> {
        let is_reg = matches!(self.bump().tok, Tok::Ident(k) if k == "reg");
        if self.is_kw("signed") {
            return Err(ParseError::unsupported(self.span(), "signed net"));
        }
        let (width, lsb) = self.range()?.unwrap_or((1, 0));
        loop {
            let (name, span) = self.ident()?;
            if self.is_sym("[") {
                return Err(ParseError::unsupported(self.span(), "memory array"));
            }
            if let Some(p) = ports.iter_mut().find(|p| p.name == name) {
                // `output q; reg q;` style: the net declaration types the port.
                if p.width != width || p.lsb != lsb {
                    return Err(ParseError::syntax(span, format!("range of `{name}` disagrees with its port declaration")));
                }
                if is_reg {
                    p.is_reg = true;
                }
            } else if nets.iter().any(|n| n.name == name) {
                return Err(ParseError::syntax(span, format!("duplicate declaration of `{name}`")));
            } else {
                nets.push(Net { name: name.clone(), width, lsb, is_reg, span });
            }
            if self.eat_sym("=") {
                if is_reg {
                    return Err(ParseError::unsupported(span, "register initialiser"));
                }
                let expr = self.expr()?;
                items.push(Item::Assign(Assign { target: name, expr, span }));
            }
            if !self.eat_sym(",") {
                break;
            }
        }
        self.expect_sym(";")?;
        Ok(())
    }

    fn assign(&mut self, items: &mut Vec<Item>) -> Result<(), ParseError> {
        self.bump();
        if self.is_sym("#") {
            return Err(ParseError::unsupported(self.span(), "assignment delay"));
        }
        loop {
            if self.is_sym("{") {
                return Err(ParseError::unsupported(self.span(), "concatenation on assignment left-hand side"));
            }
            let (target, span) = self.ident()?;
            if self.is_sym("[") {
                return Err(ParseError::unsupported(self.span(), "partial assignment to a bit or part select"));
            }
            self.expect_sym("=")?;
            let expr = self.expr()?;
            items.push(Item::Assign(Assign { target, expr, span }));
            if !self.eat_sym(",") {
                break;
            }
        }
        self.expect_sym(";")?;
        Ok(())
    }

    fn always(&mut self) -> Result<Always, ParseError> {
        let span = self.bump().span;
        if !self.is_sym("@") {
            return Err(ParseError::unsupported(self.span(), "always block without event control"));
        }
        self.bump();
        if self.is_sym("*") || self.is_sym("(*") {
            return Err(ParseError::unsupported(self.span(), "combinational always block"));
        }
        self.expect_sym("(")?;
        if self.is_sym("*") {
            return Err(ParseError::unsupported(self.span(), "combinational always block"));
        }
        if self.is_kw("negedge") {
            return Err(ParseError::unsupported(self.span(), "negedge clocking"));
        }
        if !self.is_kw("posedge") {
            return Err(ParseError::unsupported(self.span(), "level-sensitive always block"));
        }
        self.bump();
        let (clock, _) = self.ident()?;
        if self.is_kw("or") || self.is_sym(",") {
            return Err(ParseError::unsupported(self.span(), "multiple sensitivity events"));
        }
        self.expect_sym(")")?;

        let wrapped = self.is_kw("begin");
        if wrapped {
            self.bump();
            if self.is_sym(":") {
                self.bump();
                self.ident()?;
            }
        }
        let (target, expr) = self.nonblocking_stmt()?;
        if wrapped {
            if !self.is_kw("end") {
                return Err(ParseError::unsupported(self.span(), "multiple statements in always block"));
            }
            self.bump();
        }
        Ok(Always { clock, target, expr, span })
    }

    fn nonblocking_stmt(&mut self) -> Result<(String, Expr), ParseError> {
        let sp = self.span();
        match self.peek().clone() {
            Tok::Ident(k) if UNSUPPORTED_KEYWORDS.contains(&k.as_str()) || k == "begin" => {
                return Err(ParseError::unsupported(sp, format!("`{k}` statement in always block")));
            }
            Tok::Sym("{") => return Err(ParseError::unsupported(sp, "concatenation on assignment left-hand side")),
            Tok::Sym("#") => return Err(ParseError::unsupported(sp, "delay control")),
            _ => {}
        }
        let (target, _) = self.ident()?;
        if self.is_sym("[") {
            return Err(ParseError::unsupported(self.span(), "partial register assignment"));
        }
        if self.is_sym("=") {
            return Err(ParseError::unsupported(self.span(), "blocking assignment in always block"));
        }
        self.expect_sym("<=")?;
        let expr = self.expr()?;
        self.expect_sym(";")?;
        Ok((target, expr))
    }

    fn instance(&mut self) -> Result<Instance, ParseError> {
        let (module, span) = self.ident()?;
        if self.is_sym("#") {
            return Err(ParseError::unsupported(self.span(), "instance parameter override"));
        }
        let (name, _) = self.ident()?;
        if self.is_sym("[") {
            return Err(ParseError::unsupported(self.span(), "instance array"));
        }
        self.expect_sym("(")?;
        let connections = if self.is_sym(".") {
            let mut named = Vec::new();
            let mut seen = HashSet::new();
            loop {
                self.expect_sym(".")?;
                let (port, psp) = self.ident()?;
                if !seen.insert(port.clone()) {
                    return Err(ParseError::syntax(psp, format!("port `{port}` connected twice")));
                }
                if !self.is_sym("(") {
                    return Err(ParseError::unsupported(self.span(), "implicit named port connection"));
                }
                self.bump();
                let expr = if self.is_sym(")") { None } else { Some(self.expr()?) };
                self.expect_sym(")")?;
                named.push(NamedConnection { port, expr });
                if !self.eat_sym(",") {
                    break;
                }
            }
            Connections::Named(named)
        } else if self.is_sym(")") {
            Connections::Positional(Vec::new())
        } else {
            let mut pos = vec![self.expr()?];
            while self.eat_sym(",") {
                pos.push(self.expr()?);
            }
            Connections::Positional(pos)
        };
        self.expect_sym(")")?;
        if self.is_sym(",") {
            return Err(ParseError::unsupported(self.span(), "multiple instances in one statement"));
        }
        self.expect_sym(";")?;
        Ok(Instance { module, name, connections, span })
    }

    // Expressions, lowest precedence first.

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let cond = self.binary(1)?;
        if self.eat_sym("?") {
            let then = self.expr()?;
            self.expect_sym(":")?;
            let otherwise = self.expr()?;
            return Ok(Expr::Ternary { cond: Box::new(cond), then: Box::new(then), otherwise: Box::new(otherwise) });
        }
        Ok(cond)
    }

    fn binary_op(&self) -> Result<Option<(BinaryOp, u8)>, ParseError> {
        let Tok::Sym(s) = self.peek() else { return Ok(None) };
        let op = match *s {
            "|" => (BinaryOp::Or, 1),
            "^" => (BinaryOp::Xor, 2),
            "&" => (BinaryOp::And, 3),
            "==" => (BinaryOp::Eq, 4),
            "+" => (BinaryOp::Add, 5),
            "-" => (BinaryOp::Sub, 5),
            "*" | "/" | "%" | "**" | "<<" | ">>" | "<<<" | ">>>" | "<" | ">" | "<=" | ">=" | "!=" | "===" | "!=="
            | "&&" | "||" | "~^" | "^~" => {
                return Err(ParseError::unsupported(self.span(), format!("operator `{s}`")));
            }
            _ => return Ok(None),
        };
        Ok(Some(op))
    }

    fn binary(&mut self, min_prec: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some((op, prec)) = self.binary_op()? {
            if prec < min_prec {
                break;
            }
            self.bump();
            let rhs = self.binary(prec + 1)?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.is_sym("~") {
            self.bump();
            let arg = self.unary()?;
            return Ok(Expr::Unary { op: UnaryOp::Not, arg: Box::new(arg) });
        }
        if let Tok::Sym(s) = self.peek() {
            if matches!(*s, "!" | "-" | "+" | "&" | "|" | "^" | "~&" | "~|" | "~^" | "^~") {
                return Err(ParseError::unsupported(self.span(), format!("unary operator `{s}`")));
            }
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let sp = self.span();
        match self.peek().clone() {
            Tok::Number(l) => {
                self.bump();
                Ok(Expr::Literal(l))
            }
            Tok::Sym("(") => {
                self.bump();
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Tok::Sym("{") => {
                self.bump();
                let first = self.expr()?;
                if self.is_sym("{") {
                    return Err(ParseError::unsupported(sp, "replication"));
                }
                let mut parts = vec![first];
                while self.eat_sym(",") {
                    parts.push(self.expr()?);
                }
                self.expect_sym("}")?;
                Ok(Expr::Concat(parts))
            }
            Tok::Str => Err(ParseError::unsupported(sp, "string literal")),
            Tok::Ident(_) => {
                let (name, span) = self.ident()?;
                if self.is_sym("(") {
                    return Err(ParseError::unsupported(span, "function call"));
                }
                if self.eat_sym("[") {
                    let msb = self.const_int()?;
                    let lsb = if self.eat_sym(":") {
                        self.const_int()?
                    } else if self.is_sym("+:") || self.is_sym("-:") {
                        return Err(ParseError::unsupported(self.span(), "indexed part select"));
                    } else {
                        msb
                    };
                    self.expect_sym("]")?;
                    if msb < lsb {
                        return Err(ParseError::unsupported(span, "ascending part select"));
                    }
                    return Ok(Expr::Select { name, msb, lsb, span });
                }
                Ok(Expr::Ident { name, span })
            }
            other => Err(ParseError::syntax(sp, format!("expected expression, found {}", describe(&other)))),
        }
    }
}

/// Every identifier an item touches must be a declared port or net, and
/// procedural/continuous targets must have the matching net kind.
fn check_declarations(m: &ModuleAst) -> Result<(), ParseError> {
    fn walk(m: &ModuleAst, e: &Expr) -> Result<(), ParseError> {
        match e {
            Expr::Ident { name, span } => declared(m, name, *span),
            Expr::Select { name, msb, lsb, span } => {
                declared(m, name, *span)?;
                let (width, base) = m
                    .port(name)
                    .map(|p| (p.width, p.lsb))
                    .or_else(|| m.net(name).map(|n| (n.width, n.lsb)))
                    .unwrap_or((1, 0));
                if *lsb < base || *msb >= base + width {
                    return Err(ParseError::syntax(*span, format!("select [{msb}:{lsb}] is outside the range of `{name}`")));
                }
                Ok(())
            }
            Expr::Literal(_) => Ok(()),
            Expr::Unary { arg, .. } => walk(m, arg),
            Expr::Binary { lhs, rhs, .. } => {
                walk(m, lhs)?;
                walk(m, rhs)
            }
            Expr::Ternary { cond, then, otherwise } => {
                walk(m, cond)?;
                walk(m, then)?;
                walk(m, otherwise)
            }
            Expr::Concat(parts) => parts.iter().try_for_each(|p| walk(m, p)),
        }
    }
    fn declared(m: &ModuleAst, name: &str, span: Span) -> Result<(), ParseError> {
        if m.width_of(name).is_some() {
            Ok(())
        } else {
            Err(ParseError::syntax(span, format!("undeclared identifier `{name}`")))
        }
    }
    for item in &m.items {
        match item {
            Item::Assign(a) => {
                declared(m, &a.target, a.span)?;
                if m.is_reg(&a.target) {
                    return Err(ParseError::syntax(a.span, format!("continuous assignment to register `{}`", a.target)));
                }
                walk(m, &a.expr)?;
            }
            Item::Always(a) => {
                declared(m, &a.clock, a.span)?;
                declared(m, &a.target, a.span)?;
                if !m.is_reg(&a.target) {
                    return Err(ParseError::syntax(a.span, format!("procedural assignment to non-register `{}`", a.target)));
                }
                walk(m, &a.expr)?;
            }
            Item::Instance(inst) => match &inst.connections {
                Connections::Named(c) => c.iter().filter_map(|c| c.expr.as_ref()).try_for_each(|e| walk(m, e))?,
                Connections::Positional(c) => c.iter().try_for_each(|e| walk(m, e))?,
            },
        }
    }
    Ok(())
}
