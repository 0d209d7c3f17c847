//! Scalar coefficient functions of the slow and fast values.
//!
//! Reaction coefficients are entered as expression text over the variables
//! `u` (slow value) and `v` (fast value), e.g. `"sin(u) + 0.5*cos(v)"`.
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | NUMBER | 'u' | 'v' | IDENT '(' expr ')' | '(' expr ')'
//! ```
//!
//! with `IDENT` one of `sin`, `cos`, `tanh`, `atan`, `exp_neg_sq`
//! (`exp_neg_sq(t) = exp(-t^2)`). Numbers are unsigned decimals with an
//! optional fraction and exponent; unary minus comes from `factor`.
//!
//! A parsed [`ScalarFn`] evaluates pointwise and on whole collocation grids
//! (the Nemytskii action), differentiates symbolically, and carries a
//! boundedness lint that flags bare-variable subtrees whose supremum over
//! R^2 is provably infinite. The lint warns and never rejects.

use crate::error::{Error, Result};

/// Library functions available inside expressions. All have bounded range
/// and bounded derivatives of every order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Sin,
    Cos,
    Tanh,
    Atan,
    ExpNegSq,
}

impl UnaryFn {
    fn name(self) -> &'static str {
        match self {
            UnaryFn::Sin => "sin",
            UnaryFn::Cos => "cos",
            UnaryFn::Tanh => "tanh",
            UnaryFn::Atan => "atan",
            UnaryFn::ExpNegSq => "exp_neg_sq",
        }
    }

    fn apply(self, t: f64) -> f64 {
        match self {
            UnaryFn::Sin => t.sin(),
            UnaryFn::Cos => t.cos(),
            UnaryFn::Tanh => t.tanh(),
            UnaryFn::Atan => t.atan(),
            UnaryFn::ExpNegSq => (-t * t).exp(),
        }
    }
}

/// Variable of differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    U,
    V,
}

#[derive(Debug, Clone)]
enum Expr {
    Const(f64),
    U,
    V,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Call(UnaryFn, Box<Node>),
}

/// Expression node; `offset` is the byte position in the source text the
/// node came from (synthetic nodes produced by differentiation inherit the
/// offset of their source node).
#[derive(Debug, Clone)]
struct Node {
    expr: Expr,
    offset: usize,
}

impl Node {
    fn new(expr: Expr, offset: usize) -> Self {
        Self { expr, offset }
    }
}

// ---------------------------------------------------------------------------
// Lexer / parser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
}

struct Lexer<'a> {
    text: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(text: &'a str) -> Result<Vec<(Tok, usize)>> {
        let mut lx = Lexer { text: text.as_bytes(), pos: 0 };
        let mut out = Vec::new();
        loop {
            lx.skip_ws();
            if lx.pos >= lx.text.len() {
                return Ok(out);
            }
            let start = lx.pos;
            let c = lx.text[lx.pos];
            let tok = match c {
                b'+' => {
                    lx.pos += 1;
                    Tok::Plus
                }
                b'-' => {
                    lx.pos += 1;
                    Tok::Minus
                }
                b'*' => {
                    lx.pos += 1;
                    Tok::Star
                }
                b'/' => {
                    lx.pos += 1;
                    Tok::Slash
                }
                b'(' => {
                    lx.pos += 1;
                    Tok::LParen
                }
                b')' => {
                    lx.pos += 1;
                    Tok::RParen
                }
                b'0'..=b'9' => lx.number(start)?,
                b'a'..=b'z' | b'A'..=b'Z' | b'_' => lx.ident(start),
                other => {
                    return Err(Error::Parse {
                        offset: start,
                        message: format!("unexpected character '{}'", other as char),
                    })
                }
            };
            out.push((tok, start));
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn number(&mut self, start: usize) -> Result<Tok> {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos < self.text.len() && self.text[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < self.text.len() && self.text[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if self.pos < self.text.len() && (self.text[self.pos] | 0x20) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.text.len() && (self.text[self.pos] == b'+' || self.text[self.pos] == b'-')
            {
                self.pos += 1;
            }
            if self.pos < self.text.len() && self.text[self.pos].is_ascii_digit() {
                while self.pos < self.text.len() && self.text[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                // The 'e' was not an exponent after all.
                self.pos = mark;
            }
        }
        let s = std::str::from_utf8(&self.text[start..self.pos]).unwrap();
        s.parse::<f64>().map(Tok::Num).map_err(|_| Error::Parse {
            offset: start,
            message: format!("malformed number '{s}'"),
        })
    }

    fn ident(&mut self, start: usize) -> Tok {
        while self.pos < self.text.len()
            && (self.text[self.pos].is_ascii_alphanumeric() || self.text[self.pos] == b'_')
        {
            self.pos += 1;
        }
        Tok::Ident(std::str::from_utf8(&self.text[start..self.pos]).unwrap().to_owned())
    }
}

struct Parser {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map(|(_, o)| *o).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    let (_, off) = self.bump().unwrap();
                    let rhs = self.term()?;
                    lhs = Node::new(Expr::Add(Box::new(lhs), Box::new(rhs)), off);
                }
                Some(Tok::Minus) => {
                    let (_, off) = self.bump().unwrap();
                    let rhs = self.term()?;
                    lhs = Node::new(Expr::Sub(Box::new(lhs), Box::new(rhs)), off);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    let (_, off) = self.bump().unwrap();
                    let rhs = self.factor()?;
                    lhs = Node::new(Expr::Mul(Box::new(lhs), Box::new(rhs)), off);
                }
                Some(Tok::Slash) => {
                    let (_, off) = self.bump().unwrap();
                    let rhs = self.factor()?;
                    lhs = Node::new(Expr::Div(Box::new(lhs), Box::new(rhs)), off);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Node> {
        let offset = self.offset();
        match self.bump() {
            Some((Tok::Minus, off)) => {
                let inner = self.factor()?;
                Ok(Node::new(Expr::Neg(Box::new(inner)), off))
            }
            Some((Tok::Num(x), off)) => Ok(Node::new(Expr::Const(x), off)),
            Some((Tok::Ident(name), off)) => match name.as_str() {
                "u" => Ok(Node::new(Expr::U, off)),
                "v" => Ok(Node::new(Expr::V, off)),
                _ => {
                    let func = match name.as_str() {
                        "sin" => UnaryFn::Sin,
                        "cos" => UnaryFn::Cos,
                        "tanh" => UnaryFn::Tanh,
                        "atan" => UnaryFn::Atan,
                        "exp_neg_sq" => UnaryFn::ExpNegSq,
                        _ => {
                            return Err(Error::Parse {
                                offset: off,
                                message: format!(
                                    "unknown identifier '{name}' (variables: u, v; functions: sin, cos, tanh, atan, exp_neg_sq)"
                                ),
                            })
                        }
                    };
                    self.expect(Tok::LParen)?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen)?;
                    Ok(Node::new(Expr::Call(func, Box::new(arg)), off))
                }
            },
            Some((Tok::LParen, _)) => {
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Some((tok, off)) => Err(Error::Parse {
                offset: off,
                message: format!("unexpected token {tok:?}, expected a factor"),
            }),
            None => Err(Error::Parse { offset, message: "unexpected end of input, expected a factor".into() }),
        }
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        let offset = self.offset();
        match self.bump() {
            Some((tok, _)) if tok == want => Ok(()),
            Some((tok, off)) => Err(Error::Parse {
                offset: off,
                message: format!("expected {want:?}, found {tok:?}"),
            }),
            None => Err(Error::Parse { offset, message: format!("expected {want:?}, found end of input") }),
        }
    }
}

// ---------------------------------------------------------------------------
// Compiled postfix program (grid evaluation)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Instr {
    Const(f64),
    U,
    V,
    Neg,
    Add,
    Sub,
    Mul,
    Div { offset: usize },
    Call(UnaryFn),
}

#[derive(Debug, Clone)]
struct Program {
    code: Vec<Instr>,
    max_depth: usize,
}

impl Program {
    fn compile(node: &Node) -> Self {
        let mut code = Vec::new();
        let mut max_depth = 0;
        let mut depth = 0usize;
        fn walk(n: &Node, code: &mut Vec<Instr>, depth: &mut usize, max: &mut usize) {
            match &n.expr {
                Expr::Const(x) => {
                    code.push(Instr::Const(*x));
                    *depth += 1;
                }
                Expr::U => {
                    code.push(Instr::U);
                    *depth += 1;
                }
                Expr::V => {
                    code.push(Instr::V);
                    *depth += 1;
                }
                Expr::Neg(a) => {
                    walk(a, code, depth, max);
                    code.push(Instr::Neg);
                }
                Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                    walk(a, code, depth, max);
                    walk(b, code, depth, max);
                    code.push(match &n.expr {
                        Expr::Add(..) => Instr::Add,
                        Expr::Sub(..) => Instr::Sub,
                        Expr::Mul(..) => Instr::Mul,
                        Expr::Div(..) => Instr::Div { offset: n.offset },
                        _ => unreachable!(),
                    });
                    *depth -= 1;
                }
                Expr::Call(f, a) => {
                    walk(a, code, depth, max);
                    code.push(Instr::Call(*f));
                }
            }
            *max = (*max).max(*depth);
        }
        walk(node, &mut code, &mut depth, &mut max_depth);
        Program { code, max_depth }
    }
}

/// Reusable buffers for grid evaluation. One workspace per worker thread;
/// buffers grow to the largest (depth, grid) combination seen.
#[derive(Debug, Default, Clone)]
pub struct EvalWorkspace {
    stack: Vec<Vec<f64>>,
}

impl EvalWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn prepare(&mut self, depth: usize, len: usize) {
        if self.stack.len() < depth {
            self.stack.resize_with(depth, Vec::new);
        }
        for buf in self.stack.iter_mut().take(depth) {
            if buf.len() != len {
                buf.resize(len, 0.0);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// ScalarFn
// ---------------------------------------------------------------------------

/// Lint finding: a subtree that is provably unbounded over R^2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LintWarning {
    /// Byte offset of the offending subtree in the source text.
    pub offset: usize,
    /// Pretty-printed offending subtree.
    pub subtree: String,
    pub message: String,
}

/// A parsed, compiled scalar function of `(u, v)`.
#[derive(Debug, Clone)]
pub struct ScalarFn {
    source: String,
    ast: Node,
    program: Program,
}

impl ScalarFn {
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = Lexer::tokens(text)?;
        let mut parser = Parser { tokens, pos: 0, end: text.len() };
        let ast = parser.expr()?;
        if parser.pos < parser.tokens.len() {
            let (tok, off) = parser.tokens[parser.pos].clone();
            return Err(Error::Parse {
                offset: off,
                message: format!("trailing input starting with {tok:?}"),
            });
        }
        Ok(Self::from_node(text.to_owned(), ast))
    }

    /// The constant function `c`.
    pub fn constant(c: f64) -> Self {
        let node = Node::new(Expr::Const(c), 0);
        Self::from_node(format_const(c), node)
    }

    fn from_node(source: String, ast: Node) -> Self {
        let program = Program::compile(&ast);
        Self { source, ast, program }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Pretty-printed form (parses back to an equivalent function).
    pub fn pretty(&self) -> String {
        pretty(&self.ast, 0)
    }

    /// Pointwise evaluation.
    pub fn eval(&self, u: f64, v: f64) -> Result<f64> {
        eval_node(&self.ast, u, v)
    }

    /// Nemytskii action on grids: `out[j] = f(u[j], v[j])`.
    ///
    /// All three slices must share one length. Uses the compiled postfix
    /// program with workspace buffers, so repeated calls do not allocate.
    pub fn eval_grid(
        &self,
        u: &[f64],
        v: &[f64],
        ws: &mut EvalWorkspace,
        out: &mut [f64],
    ) -> Result<()> {
        let len = out.len();
        debug_assert_eq!(u.len(), len);
        debug_assert_eq!(v.len(), len);
        ws.prepare(self.program.max_depth, len);
        let mut sp = 0usize;
        for instr in &self.program.code {
            match instr {
                Instr::Const(x) => {
                    ws.stack[sp].fill(*x);
                    sp += 1;
                }
                Instr::U => {
                    ws.stack[sp].copy_from_slice(u);
                    sp += 1;
                }
                Instr::V => {
                    ws.stack[sp].copy_from_slice(v);
                    sp += 1;
                }
                Instr::Neg => {
                    for x in ws.stack[sp - 1].iter_mut() {
                        *x = -*x;
                    }
                }
                Instr::Add | Instr::Sub | Instr::Mul => {
                    let (lo, hi) = ws.stack.split_at_mut(sp - 1);
                    let a = lo[sp - 2].as_mut_slice();
                    let b = hi[0].as_slice();
                    match instr {
                        Instr::Add => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                        Instr::Sub => a.iter_mut().zip(b).for_each(|(x, y)| *x -= y),
                        _ => a.iter_mut().zip(b).for_each(|(x, y)| *x *= y),
                    }
                    sp -= 1;
                }
                Instr::Div { offset } => {
                    let (lo, hi) = ws.stack.split_at_mut(sp - 1);
                    let a = lo[sp - 2].as_mut_slice();
                    let b = hi[0].as_slice();
                    for (x, y) in a.iter_mut().zip(b) {
                        if *y == 0.0 {
                            return Err(Error::Eval {
                                offset: *offset,
                                message: "division by zero".into(),
                            });
                        }
                        *x /= y;
                    }
                    sp -= 1;
                }
                Instr::Call(f) => {
                    for x in ws.stack[sp - 1].iter_mut() {
                        *x = f.apply(*x);
                    }
                }
            }
        }
        debug_assert_eq!(sp, 1);
        out.copy_from_slice(&ws.stack[0]);
        Ok(())
    }

    /// Symbolic partial derivative. Closed over the node set, so repeated
    /// application yields derivatives of any order; orders one and two stay
    /// compact under the built-in simplifier.
    pub fn differentiate(&self, var: Var) -> ScalarFn {
        let d = diff_node(&self.ast, var);
        let source = pretty(&d, 0);
        Self::from_node(source, d)
    }

    /// Central finite-difference derivative of mixed order `(du, dv)` with
    /// step `1e-4`, the fallback used for order-3 and order-4 probes.
    pub fn derivative_fd(&self, du: usize, dv: usize, u: f64, v: f64) -> Result<f64> {
        const H: f64 = 1e-4;
        let wu = stencil(du)?;
        let wv = stencil(dv)?;
        let mut acc = 0.0;
        for (ou, cu) in wu {
            for (ov, cv) in wv {
                if *cu == 0.0 || *cv == 0.0 {
                    continue;
                }
                acc += cu * cv * self.eval(u + *ou as f64 * H, v + *ov as f64 * H)?;
            }
        }
        Ok(acc / H.powi(du as i32) / H.powi(dv as i32))
    }

    /// Constant value if the expression contains no variables and evaluates
    /// without faults.
    pub fn as_constant(&self) -> Option<f64> {
        fn has_var(n: &Node) -> bool {
            match &n.expr {
                Expr::U | Expr::V => true,
                Expr::Const(_) => false,
                Expr::Neg(a) | Expr::Call(_, a) => has_var(a),
                Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                    has_var(a) || has_var(b)
                }
            }
        }
        if has_var(&self.ast) {
            return None;
        }
        self.eval(0.0, 0.0).ok()
    }

    /// True when the expression is identically zero by constant folding.
    pub fn is_zero(&self) -> bool {
        self.as_constant() == Some(0.0)
    }

    /// `(c0, cu, cv)` when the expression is affine,
    /// `f(u, v) = c0 + cu*u + cv*v`, detected by both symbolic partial
    /// derivatives simplifying to constants. Sound but conservative: an
    /// affine expression written so the simplifier cannot fold its
    /// derivatives is reported as `None`, never the reverse.
    pub fn affine_parts(&self) -> Option<(f64, f64, f64)> {
        let cu = self.differentiate(Var::U).as_constant()?;
        let cv = self.differentiate(Var::V).as_constant()?;
        let c0 = self.eval(0.0, 0.0).ok()?;
        Some((c0, cu, cv))
    }

    /// Flags every bare-variable occurrence outside a bounded library
    /// wrapper. Such subtrees are provably unbounded over R^2; compounds of
    /// them are reported through their atoms (e.g. `u*tanh(v)` flags the
    /// factor `u`). Advisory only.
    pub fn lint_boundedness(&self) -> Vec<LintWarning> {
        let mut out = Vec::new();
        fn walk(n: &Node, out: &mut Vec<LintWarning>) {
            match &n.expr {
                Expr::U | Expr::V => {
                    let name = if matches!(n.expr, Expr::U) { "u" } else { "v" };
                    out.push(LintWarning {
                        offset: n.offset,
                        subtree: name.into(),
                        message: format!(
                            "bare '{name}' is unbounded over R^2; outside the bounded-smooth coefficient class, averaged quantities may fail to exist"
                        ),
                    });
                }
                Expr::Const(_) => {}
                // Library functions have bounded range: anything inside is fine.
                Expr::Call(..) => {}
                Expr::Neg(a) => walk(a, out),
                Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        walk(&self.ast, &mut out);
        out
    }
}

/// The four scalar coefficient functions of the coupled system: `f` and
/// `sigma` shape the slow reaction and noise amplitude, `b` the singular
/// coupling drift, `g` the fast reaction. Any of them may be the zero
/// function.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub f: ScalarFn,
    pub b: ScalarFn,
    pub g: ScalarFn,
    pub sigma: ScalarFn,
}

impl CoefficientSet {
    pub fn new(f: ScalarFn, b: ScalarFn, g: ScalarFn, sigma: ScalarFn) -> Self {
        Self { f, b, g, sigma }
    }

    /// Parses all four from source text.
    pub fn parse(f: &str, b: &str, g: &str, sigma: &str) -> Result<Self> {
        Ok(Self {
            f: ScalarFn::parse(f)?,
            b: ScalarFn::parse(b)?,
            g: ScalarFn::parse(g)?,
            sigma: ScalarFn::parse(sigma)?,
        })
    }

    /// Boundedness warnings across all four coefficients, labeled by slot.
    pub fn lint_all(&self) -> Vec<(String, LintWarning)> {
        let mut out = Vec::new();
        for (name, f) in [("f", &self.f), ("b", &self.b), ("g", &self.g), ("sigma", &self.sigma)] {
            for w in f.lint_boundedness() {
                out.push((name.to_string(), w));
            }
        }
        out
    }
}

/// Pointwise application of a scalar function to two grid vectors:
/// `out_j = fn(x_j, y_j)`. This is how the abstract reaction operators act
/// on fields: value at a grid point depends only on the field values there.
pub fn nemytskii_apply(
    f: &ScalarFn,
    x_grid: &[f64],
    y_grid: &[f64],
    ws: &mut EvalWorkspace,
) -> Result<Vec<f64>> {
    if x_grid.len() != y_grid.len() {
        return Err(Error::Config(format!(
            "grid size mismatch: {} vs {}",
            x_grid.len(),
            y_grid.len()
        )));
    }
    let mut out = vec![0.0; x_grid.len()];
    f.eval_grid(x_grid, y_grid, ws, &mut out)?;
    Ok(out)
}

/// Extrema of `f` over the square `[-half_width, half_width]^2` sampled on
/// an `n x n` lattice. Used to estimate derivative bounds for step-size
/// and dissipativity validation.
pub fn grid_extrema(f: &ScalarFn, half_width: f64, n: usize) -> Result<(f64, f64)> {
    if n < 2 || !(half_width > 0.0) {
        return Err(Error::InvalidSpec("extrema scan needs n >= 2 and a positive box".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let u = -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64;
        for j in 0..n {
            let v = -half_width + 2.0 * half_width * j as f64 / (n - 1) as f64;
            let val = f.eval(u, v)?;
            lo = lo.min(val);
            hi = hi.max(val);
        }
    }
    Ok((lo, hi))
}

fn stencil(order: usize) -> Result<&'static [(i32, f64)]> {
    const S0: &[(i32, f64)] = &[(0, 1.0)];
    const S1: &[(i32, f64)] = &[(-1, -0.5), (1, 0.5)];
    const S2: &[(i32, f64)] = &[(-1, 1.0), (0, -2.0), (1, 1.0)];
    const S3: &[(i32, f64)] = &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)];
    const S4: &[(i32, f64)] = &[(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)];
    match order {
        0 => Ok(S0),
        1 => Ok(S1),
        2 => Ok(S2),
        3 => Ok(S3),
        4 => Ok(S4),
        _ => Err(Error::InvalidSpec(format!("finite-difference order {order} > 4 unsupported"))),
    }
}

fn eval_node(n: &Node, u: f64, v: f64) -> Result<f64> {
    Ok(match &n.expr {
        Expr::Const(x) => *x,
        Expr::U => u,
        Expr::V => v,
        Expr::Neg(a) => -eval_node(a, u, v)?,
        Expr::Add(a, b) => eval_node(a, u, v)? + eval_node(b, u, v)?,
        Expr::Sub(a, b) => eval_node(a, u, v)? - eval_node(b, u, v)?,
        Expr::Mul(a, b) => eval_node(a, u, v)? * eval_node(b, u, v)?,
        Expr::Div(a, b) => {
            let den = eval_node(b, u, v)?;
            if den == 0.0 {
                return Err(Error::Eval { offset: n.offset, message: "division by zero".into() });
            }
            eval_node(a, u, v)? / den
        }
        Expr::Call(f, a) => f.apply(eval_node(a, u, v)?),
    })
}

// ---------------------------------------------------------------------------
// Symbolic differentiation with light simplification
// ---------------------------------------------------------------------------

fn is_const(n: &Node, x: f64) -> bool {
    matches!(n.expr, Expr::Const(c) if c == x)
}

fn cnst(x: f64, off: usize) -> Node {
    Node::new(Expr::Const(x), off)
}

fn add(a: Node, b: Node) -> Node {
    let off = a.offset;
    match (&a.expr, &b.expr) {
        (Expr::Const(x), Expr::Const(y)) => cnst(x + y, off),
        _ if is_const(&a, 0.0) => b,
        _ if is_const(&b, 0.0) => a,
        _ => Node::new(Expr::Add(Box::new(a), Box::new(b)), off),
    }
}

fn sub(a: Node, b: Node) -> Node {
    let off = a.offset;
    match (&a.expr, &b.expr) {
        (Expr::Const(x), Expr::Const(y)) => cnst(x - y, off),
        _ if is_const(&b, 0.0) => a,
        _ if is_const(&a, 0.0) => neg(b),
        _ => Node::new(Expr::Sub(Box::new(a), Box::new(b)), off),
    }
}

fn mul(a: Node, b: Node) -> Node {
    let off = a.offset;
    match (&a.expr, &b.expr) {
        (Expr::Const(x), Expr::Const(y)) => cnst(x * y, off),
        _ if is_const(&a, 0.0) || is_const(&b, 0.0) => cnst(0.0, off),
        _ if is_const(&a, 1.0) => b,
        _ if is_const(&b, 1.0) => a,
        _ => Node::new(Expr::Mul(Box::new(a), Box::new(b)), off),
    }
}

fn div(a: Node, b: Node) -> Node {
    let off = a.offset;
    if is_const(&a, 0.0) && !is_const(&b, 0.0) {
        return cnst(0.0, off);
    }
    if is_const(&b, 1.0) {
        return a;
    }
    Node::new(Expr::Div(Box::new(a), Box::new(b)), off)
}

fn neg(a: Node) -> Node {
    let off = a.offset;
    match a.expr {
        Expr::Const(x) => cnst(-x, off),
        Expr::Neg(inner) => *inner,
        _ => Node::new(Expr::Neg(Box::new(a)), off),
    }
}

fn call(f: UnaryFn, a: Node) -> Node {
    let off = a.offset;
    Node::new(Expr::Call(f, Box::new(a)), off)
}

fn diff_node(n: &Node, var: Var) -> Node {
    let off = n.offset;
    match &n.expr {
        Expr::Const(_) => cnst(0.0, off),
        Expr::U => cnst(if var == Var::U { 1.0 } else { 0.0 }, off),
        Expr::V => cnst(if var == Var::V { 1.0 } else { 0.0 }, off),
        Expr::Neg(a) => neg(diff_node(a, var)),
        Expr::Add(a, b) => add(diff_node(a, var), diff_node(b, var)),
        Expr::Sub(a, b) => sub(diff_node(a, var), diff_node(b, var)),
        Expr::Mul(a, b) => add(
            mul(diff_node(a, var), (**b).clone()),
            mul((**a).clone(), diff_node(b, var)),
        ),
        Expr::Div(a, b) => {
            // (a' b - a b') / b^2
            let num = sub(
                mul(diff_node(a, var), (**b).clone()),
                mul((**a).clone(), diff_node(b, var)),
            );
            let den = mul((**b).clone(), (**b).clone());
            div(num, den)
        }
        Expr::Call(f, a) => {
            let inner = diff_node(a, var);
            let outer = match f {
                UnaryFn::Sin => call(UnaryFn::Cos, (**a).clone()),
                UnaryFn::Cos => neg(call(UnaryFn::Sin, (**a).clone())),
                UnaryFn::Tanh => {
                    let t = call(UnaryFn::Tanh, (**a).clone());
                    sub(cnst(1.0, off), mul(t.clone(), t))
                }
                UnaryFn::Atan => div(
                    cnst(1.0, off),
                    add(cnst(1.0, off), mul((**a).clone(), (**a).clone())),
                ),
                UnaryFn::ExpNegSq => mul(
                    mul(cnst(-2.0, off), (**a).clone()),
                    call(UnaryFn::ExpNegSq, (**a).clone()),
                ),
            };
            mul(outer, inner)
        }
    }
}

// ---------------------------------------------------------------------------
// Pretty printer
// ---------------------------------------------------------------------------

fn format_const(x: f64) -> String {
    if x < 0.0 {
        format!("-{}", fmt_abs(-x))
    } else {
        fmt_abs(x)
    }
}

fn fmt_abs(x: f64) -> String {
    // Shortest round-trip formatting; integral values keep a trailing ".0"
    // removed so "2" stays "2".
    let s = format!("{x}");
    s
}

/// Precedence: additive 1, multiplicative 2, unary 3, atoms 4.
fn pretty(n: &Node, parent_prec: u8) -> String {
    let (s, prec) = match &n.expr {
        Expr::Const(x) => {
            if *x < 0.0 {
                (format!("-{}", fmt_abs(-*x)), 3)
            } else {
                (fmt_abs(*x), 4)
            }
        }
        Expr::U => ("u".into(), 4),
        Expr::V => ("v".into(), 4),
        Expr::Neg(a) => (format!("-{}", pretty(a, 4)), 3),
        Expr::Add(a, b) => (format!("{} + {}", pretty(a, 1), pretty(b, 2)), 1),
        Expr::Sub(a, b) => (format!("{} - {}", pretty(a, 1), pretty(b, 2)), 1),
        Expr::Mul(a, b) => (format!("{}*{}", pretty(a, 2), pretty(b, 3)), 2),
        Expr::Div(a, b) => (format!("{}/{}", pretty(a, 2), pretty(b, 3)), 2),
        Expr::Call(f, a) => (format!("{}({})", f.name(), pretty(a, 0)), 4),
    };
    if prec < parent_prec {
        format!("({s})")
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn parses_and_evaluates_reference_expressions() {
        let f = ScalarFn::parse("sin(u) + 0.5*cos(v)").unwrap();
        assert_relative_eq!(f.eval(0.0, 0.0).unwrap(), 0.5, max_relative = 1e-15);

        let g = ScalarFn::parse("-(u*v)/2").unwrap();
        assert_relative_eq!(g.eval(2.0, 3.0).unwrap(), -3.0, max_relative = 1e-15);
    }

    #[test]
    fn syntax_error_carries_byte_offset() {
        let err = ScalarFn::parse("sin(u").unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        let err = ScalarFn::parse("2 +* v").unwrap_err();
        match err {
            // The unexpected '*' sits at byte 3.
            Error::Parse { offset, .. } => assert_eq!(offset, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(ScalarFn::parse("foo(u)").is_err());
        assert!(ScalarFn::parse("u v").is_err());
    }

    #[test]
    fn evaluation_against_high_precision_constants() {
        // atan(1) + tanh(1) = pi/4 + tanh(1); digits frozen from an
        // independent high-precision computation.
        let f = ScalarFn::parse("atan(1) + tanh(1)").unwrap();
        let expect = 1.5469923193532132;
        assert!((f.eval(7.0, -3.0).unwrap() - expect).abs() < 1e-15);

        let g = ScalarFn::parse("exp_neg_sq(2)").unwrap();
        let expect = 0.01831563888873418; // exp(-4)
        assert!((g.eval(0.0, 0.0).unwrap() - expect).abs() < 1e-17);
    }

    #[test]
    fn division_by_zero_is_reported_with_location() {
        let f = ScalarFn::parse("1/(u - 1)").unwrap();
        assert_relative_eq!(f.eval(3.0, 0.0).unwrap(), 0.5, max_relative = 1e-15);
        match f.eval(1.0, 0.0).unwrap_err() {
            Error::Eval { offset, .. } => assert_eq!(offset, 1),
            other => panic!("expected eval error, got {other:?}"),
        }
        // Grid path reports the same fault.
        let mut ws = EvalWorkspace::new();
        let mut out = vec![0.0; 2];
        assert!(f.eval_grid(&[0.0, 1.0], &[0.0, 0.0], &mut ws, &mut out).is_err());
    }

    #[test]
    fn grid_evaluation_matches_pointwise() {
        let f = ScalarFn::parse("sin(u)*cos(v) - v/(2 + exp_neg_sq(u))").unwrap();
        let u: Vec<f64> = (0..33).map(|i| (i as f64) * 0.17 - 2.0).collect();
        let v: Vec<f64> = (0..33).map(|i| (i as f64) * -0.05 + 1.0).collect();
        let mut ws = EvalWorkspace::new();
        let mut out = vec![0.0; u.len()];
        f.eval_grid(&u, &v, &mut ws, &mut out).unwrap();
        for i in 0..u.len() {
            assert_relative_eq!(out[i], f.eval(u[i], v[i]).unwrap(), max_relative = 1e-14);
        }
    }

    #[test]
    fn symbolic_derivatives_of_library_functions() {
        let f = ScalarFn::parse("sin(u)").unwrap();
        let df = f.differentiate(Var::U);
        for &u in &[0.0, 0.7, -1.3, 2.9] {
            assert_relative_eq!(df.eval(u, 0.0).unwrap(), u.cos(), max_relative = 1e-14);
        }
        // d/dv of a u-only expression is identically zero.
        let dv = f.differentiate(Var::V);
        assert!(dv.is_zero());
    }

    #[test]
    fn derivatives_agree_with_finite_differences() {
        let cases = [
            "u*tanh(v)",
            "sin(u) + 0.5*cos(v)",
            "exp_neg_sq(u - v)",
            "atan(u*v)",
            "v/(2 + exp_neg_sq(u))",
        ];
        let points = [(2.0, 0.5), (-0.3, 1.1), (0.9, -0.7)];
        for src in cases {
            let f = ScalarFn::parse(src).unwrap();
            for var in [Var::U, Var::V] {
                let df = f.differentiate(var);
                let d2f = df.differentiate(var);
                for &(u, v) in &points {
                    let h = 1e-5;
                    let (fp, fm) = match var {
                        Var::U => (f.eval(u + h, v).unwrap(), f.eval(u - h, v).unwrap()),
                        Var::V => (f.eval(u, v + h).unwrap(), f.eval(u, v - h).unwrap()),
                    };
                    let fd = (fp - fm) / (2.0 * h);
                    let sym = df.eval(u, v).unwrap();
                    assert!(
                        (fd - sym).abs() <= 1e-6 * (1.0 + sym.abs()),
                        "{src} d{var:?} at ({u},{v}): sym {sym} vs fd {fd}"
                    );
                    // Second-order: symbolic twice vs. 3-point stencil.
                    let f0 = f.eval(u, v).unwrap();
                    let fd2 = (fp - 2.0 * f0 + fm) / (h * h);
                    let sym2 = d2f.eval(u, v).unwrap();
                    assert!(
                        (fd2 - sym2).abs() <= 1e-4 * (1.0 + sym2.abs()),
                        "{src} d2{var:?} at ({u},{v}): sym {sym2} vs fd {fd2}"
                    );
                }
            }
        }
    }

    #[test]
    fn high_order_fd_fallback_is_sane() {
        // d^3/du^3 sin(u) = -cos(u). At step 1e-4 the order-3 stencil
        // carries roundoff of order eps_mach/h^3 ~ 1e-3 absolute, so the
        // claim here is the normalization, not high accuracy.
        let f = ScalarFn::parse("sin(u)").unwrap();
        let d3 = f.derivative_fd(3, 0, 0.6, 0.0).unwrap();
        assert!((d3 + 0.6f64.cos()).abs() < 5e-3, "d3 = {d3}");
        // Order 4 at the same step is noise-dominated (eps_mach/h^4 ~ 10
        // absolute); u^4 has zero truncation error, so |d4 - 24| large
        // would only come from a mis-normalized stencil (off by factors
        // of h or worse).
        let q = ScalarFn::parse("u*u*u*u").unwrap();
        let d4 = q.derivative_fd(4, 0, 0.6, 0.0).unwrap();
        assert!((d4 - 24.0).abs() < 10.0, "d4 = {d4}");
        // Mixed order (2,1) of u*tanh(v): d2/du2 annihilates the factor u.
        let g = ScalarFn::parse("u*tanh(v)").unwrap();
        let m = g.derivative_fd(2, 1, 0.4, 0.3).unwrap();
        assert!(m.abs() < 1e-3, "mixed = {m}");
        assert!(f.derivative_fd(5, 0, 0.0, 0.0).is_err());
    }

    #[test]
    fn nemytskii_application_is_pointwise() {
        let mut ws = EvalWorkspace::new();
        // Constant function maps any grids to the all-ones vector.
        let one = ScalarFn::parse("1").unwrap();
        let x = vec![0.3, -2.0, 5.5];
        let y = vec![9.0, 0.0, -1.0];
        assert_eq!(nemytskii_apply(&one, &x, &y, &mut ws).unwrap(), vec![1.0; 3]);

        // Identity in v returns the second grid unchanged.
        let idv = ScalarFn::parse("v").unwrap();
        assert_eq!(nemytskii_apply(&idv, &x, &y, &mut ws).unwrap(), y);

        // Size mismatch is a configuration error.
        assert!(nemytskii_apply(&idv, &x, &y[..2], &mut ws).is_err());

        // sin(u) applied to the first eigenfunction on the L = pi grid
        // matches the pointwise oracle sin(sqrt(2/pi) sin(xi_j)).
        let op = crate::spectral::OperatorSpec::dirichlet_laplacian(4, std::f64::consts::PI)
            .unwrap();
        let tf = crate::spectral::SineTransform::default_for(&op);
        let e1 = crate::spectral::SpectralField::unit_mode(&op, 1, 1.0).unwrap();
        let e1g = tf.to_grid(&e1);
        let sinu = ScalarFn::parse("sin(u)").unwrap();
        let zeros = vec![0.0; e1g.len()];
        let applied = nemytskii_apply(&sinu, &e1g, &zeros, &mut ws).unwrap();
        let amp = (2.0 / std::f64::consts::PI).sqrt();
        for (j, xi) in tf.grid_points().iter().enumerate() {
            let oracle = (amp * xi.sin()).sin();
            assert!((applied[j] - oracle).abs() < 1e-12, "point {j}");
        }
    }

    #[test]
    fn grid_extrema_brackets_known_ranges() {
        let f = ScalarFn::parse("tanh(v)").unwrap();
        let (lo, hi) = grid_extrema(&f, 4.0, 33).unwrap();
        assert!(lo < -0.999 && lo >= -1.0);
        assert!(hi > 0.999 && hi <= 1.0);
        let g = ScalarFn::parse("u - v").unwrap();
        let (lo, hi) = grid_extrema(&g, 2.0, 9).unwrap();
        assert_relative_eq!(lo, -4.0, max_relative = 1e-14);
        assert_relative_eq!(hi, 4.0, max_relative = 1e-14);
    }

    #[test]
    fn lint_flags_bare_variables_outside_wrappers() {
        let f = ScalarFn::parse("u*tanh(v)").unwrap();
        let warnings = f.lint_boundedness();
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].subtree, "u");
        assert_eq!(warnings[0].offset, 0);

        let clean = ScalarFn::parse("cos(v) + tanh(u)").unwrap();
        assert!(clean.lint_boundedness().is_empty());

        let linear = ScalarFn::parse("0.5*v").unwrap();
        assert_eq!(linear.lint_boundedness().len(), 1);

        let wrapped = ScalarFn::parse("exp_neg_sq(u*v)").unwrap();
        assert!(wrapped.lint_boundedness().is_empty());
    }

    #[test]
    fn constant_detection() {
        assert_eq!(ScalarFn::parse("0").unwrap().as_constant(), Some(0.0));
        assert!(ScalarFn::parse("0").unwrap().is_zero());
        assert_eq!(ScalarFn::parse("2*atan(1)").unwrap().as_constant(), Some(std::f64::consts::FRAC_PI_2));
        assert_eq!(ScalarFn::parse("0.2").unwrap().as_constant(), Some(0.2));
        assert_eq!(ScalarFn::parse("v").unwrap().as_constant(), None);
        assert!(!ScalarFn::parse("u").unwrap().is_zero());
    }

    #[test]
    fn affine_detection() {
        let f = ScalarFn::parse("0.3*u - 0.7*v + 1.5").unwrap();
        let (c0, cu, cv) = f.affine_parts().unwrap();
        assert!((c0 - 1.5).abs() < 1e-15);
        assert!((cu - 0.3).abs() < 1e-15);
        assert!((cv + 0.7).abs() < 1e-15);
        assert_eq!(ScalarFn::parse("-v").unwrap().affine_parts(), Some((0.0, 0.0, -1.0)));
        assert_eq!(ScalarFn::parse("2").unwrap().affine_parts(), Some((2.0, 0.0, 0.0)));
        assert_eq!(ScalarFn::parse("tanh(v)").unwrap().affine_parts(), None);
        assert_eq!(ScalarFn::parse("-(1 + 0.5*tanh(u))*v").unwrap().affine_parts(), None);
        assert_eq!(ScalarFn::parse("u*v").unwrap().affine_parts(), None);
    }

    // Random expression trees for the print/parse round trip.
    fn arb_expr() -> impl Strategy<Value = String> {
        let leaf = prop_oneof![
            Just("u".to_string()),
            Just("v".to_string()),
            (0u32..40).prop_map(|n| format!("{}", n as f64 * 0.25)),
        ];
        leaf.prop_recursive(4, 48, 3, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) + ({b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) - ({b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a})*({b})")),
                inner.clone().prop_map(|a| format!("-({a})")),
                inner.clone().prop_map(|a| format!("sin({a})")),
                inner.clone().prop_map(|a| format!("tanh({a})")),
                inner.clone().prop_map(|a| format!("exp_neg_sq({a})")),
                inner.prop_map(|a| format!("atan({a})")),
            ]
        })
    }

    proptest! {
        #[test]
        fn pretty_print_round_trip(src in arb_expr(), u in -3.0f64..3.0, v in -3.0f64..3.0) {
            let f = ScalarFn::parse(&src).unwrap();
            let g = ScalarFn::parse(&f.pretty()).unwrap();
            let a = f.eval(u, v).unwrap();
            let b = g.eval(u, v).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{src}: {a} vs {b}");
        }

        #[test]
        fn grid_eval_equals_scalar_eval(src in arb_expr(), pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..24)) {
            let f = ScalarFn::parse(&src).unwrap();
            let u: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let v: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let mut ws = EvalWorkspace::new();
            let mut out = vec![0.0; u.len()];
            f.eval_grid(&u, &v, &mut ws, &mut out).unwrap();
            for i in 0..u.len() {
                let direct = f.eval(u[i], v[i]).unwrap();
                prop_assert!((out[i] - direct).abs() <= 1e-13 * (1.0 + direct.abs()));
            }
        }
    }
}
