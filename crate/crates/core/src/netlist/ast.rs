//! Syntax tree for the supported Verilog subset.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Span {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Input,
    Output,
    Inout,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Input => "input",
            Direction::Output => "output",
            Direction::Inout => "inout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Port {
    pub name: String,
    pub direction: Direction,
    pub width: u32,
    /// Index of the least significant bit in the declared range.
    pub lsb: u32,
    pub is_reg: bool,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    pub name: String,
    pub width: u32,
    pub lsb: u32,
    pub is_reg: bool,
    pub span: Span,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Not,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    And,
    Or,
    Xor,
    Add,
    Sub,
    Eq,
}

impl BinaryOp {
    /// Cell type emitted for this operator.
    pub fn cell_type(self) -> &'static str {
        match self {
            BinaryOp::And => "and",
            BinaryOp::Or => "or",
            BinaryOp::Xor => "xor",
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Eq => "eq",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Literal {
    /// Source spelling with underscores removed.
    pub text: String,
    pub width: u32,
    /// `None` when the value does not fit in 128 bits.
    pub value: Option<u128>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Ident { name: String, span: Span },
    Literal(Literal),
    Unary { op: UnaryOp, arg: Box<Expr> },
    Binary { op: BinaryOp, lhs: Box<Expr>, rhs: Box<Expr> },
    Ternary { cond: Box<Expr>, then: Box<Expr>, otherwise: Box<Expr> },
    Concat(Vec<Expr>),
    /// Constant bit or part select, `name[msb:lsb]` or `name[bit]`.
    Select { name: String, msb: u32, lsb: u32, span: Span },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assign {
    pub target: String,
    pub expr: Expr,
    pub span: Span,
}

/// `always @(posedge clock) target <= expr;`
#[derive(Clone, Debug, PartialEq)]
pub struct Always {
    pub clock: String,
    pub target: String,
    pub expr: Expr,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedConnection {
    pub port: String,
    pub expr: Option<Expr>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Connections {
    Named(Vec<NamedConnection>),
    Positional(Vec<Expr>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub module: String,
    pub name: String,
    pub connections: Connections,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Item {
    Assign(Assign),
    Always(Always),
    Instance(Instance),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleAst {
    pub name: String,
    pub ports: Vec<Port>,
    pub nets: Vec<Net>,
    pub items: Vec<Item>,
    /// Position of the `module` keyword.
    pub span: Span,
    /// Position just past `endmodule`.
    pub end: Span,
    /// Hash of the file this module came from; empty when parsed from a bare string.
    pub source_sha256: String,
}

impl ModuleAst {
    pub fn port(&self, name: &str) -> Option<&Port> {
        self.ports.iter().find(|p| p.name == name)
    }

    pub fn net(&self, name: &str) -> Option<&Net> {
        self.nets.iter().find(|n| n.name == name)
    }

    /// Declared width of a port or net.
    pub fn width_of(&self, name: &str) -> Option<u32> {
        self.port(name).map(|p| p.width).or_else(|| self.net(name).map(|n| n.width))
    }

    pub fn is_reg(&self, name: &str) -> bool {
        self.port(name).map(|p| p.is_reg).or_else(|| self.net(name).map(|n| n.is_reg)).unwrap_or(false)
    }
}
