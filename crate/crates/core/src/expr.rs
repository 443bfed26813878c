//! Complex-valued expressions in the variables z1, z2, ... and their
//! conjugates: parsing, evaluation, d/d(conj z_j) derivatives, and a
//! sum-of-separable-products normal form used by the tensor quadrature.
//!
//! Grammar (whitespace-insensitive):
//!   expr    := term (('+' | '-') term)*
//!   term    := factor ('*' factor)*
//!   factor  := '-' factor | primary ('^' integer)?
//!   primary := number | 'i' | 'pi' | 'z' index | 'conj' '(' expr ')'
//!            | 'exp' '(' expr ')' | '(' expr ')'
//! Variable indices are 1-based (`z1` or `z_1`).

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum CExpr {
    Const(Complex64),
    /// z_{j}, 0-based slot.
    Var(usize),
    /// conj(z_{j}), 0-based slot.
    ConjVar(usize),
    Add(Box<CExpr>, Box<CExpr>),
    Mul(Box<CExpr>, Box<CExpr>),
    Neg(Box<CExpr>),
    Exp(Box<CExpr>),
    Pow(Box<CExpr>, u32),
}

impl CExpr {
    pub fn constant(c: Complex64) -> Self {
        CExpr::Const(c)
    }

    pub fn real(x: f64) -> Self {
        CExpr::Const(Complex64::new(x, 0.0))
    }

    pub fn zero() -> Self {
        CExpr::real(0.0)
    }

    pub fn eval(&self, z: &[Complex64]) -> Complex64 {
        match self {
            CExpr::Const(c) => *c,
            CExpr::Var(j) => z[*j],
            CExpr::ConjVar(j) => z[*j].conj(),
            CExpr::Add(a, b) => a.eval(z) + b.eval(z),
            CExpr::Mul(a, b) => a.eval(z) * b.eval(z),
            CExpr::Neg(a) => -a.eval(z),
            CExpr::Exp(a) => a.eval(z).exp(),
            CExpr::Pow(a, n) => a.eval(z).powu(*n),
        }
    }

    /// Evaluate an expression that references only slot `j`.
    pub fn eval_single(&self, j: usize, w: Complex64) -> Complex64 {
        match self {
            CExpr::Const(c) => *c,
            CExpr::Var(k) => {
                debug_assert_eq!(*k, j);
                w
            }
            CExpr::ConjVar(k) => {
                debug_assert_eq!(*k, j);
                w.conj()
            }
            CExpr::Add(a, b) => a.eval_single(j, w) + b.eval_single(j, w),
            CExpr::Mul(a, b) => a.eval_single(j, w) * b.eval_single(j, w),
            CExpr::Neg(a) => -a.eval_single(j, w),
            CExpr::Exp(a) => a.eval_single(j, w).exp(),
            CExpr::Pow(a, n) => a.eval_single(j, w).powu(*n),
        }
    }

    /// d(self)/d(conj z_j).  The Wirtinger chain and product rules apply
    /// verbatim; z_k is independent of conj(z_j).
    pub fn wirtinger_bar(&self, j: usize) -> CExpr {
        match self {
            CExpr::Const(_) | CExpr::Var(_) => CExpr::zero(),
            CExpr::ConjVar(k) => {
                if *k == j {
                    CExpr::real(1.0)
                } else {
                    CExpr::zero()
                }
            }
            CExpr::Add(a, b) => add(a.wirtinger_bar(j), b.wirtinger_bar(j)),
            CExpr::Mul(a, b) => add(
                mul(a.wirtinger_bar(j), (**b).clone()),
                mul((**a).clone(), b.wirtinger_bar(j)),
            ),
            CExpr::Neg(a) => neg(a.wirtinger_bar(j)),
            CExpr::Exp(a) => mul(CExpr::Exp(a.clone()), a.wirtinger_bar(j)),
            CExpr::Pow(a, n) => {
                if *n == 0 {
                    CExpr::zero()
                } else {
                    mul(
                        mul(CExpr::real(*n as f64), CExpr::Pow(a.clone(), n - 1)),
                        a.wirtinger_bar(j),
                    )
                }
            }
        }
    }

    /// Highest referenced slot + 1 (0 for constants).
    pub fn num_vars(&self) -> usize {
        match self {
            CExpr::Const(_) => 0,
            CExpr::Var(j) | CExpr::ConjVar(j) => j + 1,
            CExpr::Add(a, b) | CExpr::Mul(a, b) => a.num_vars().max(b.num_vars()),
            CExpr::Neg(a) | CExpr::Exp(a) | CExpr::Pow(a, _) => a.num_vars(),
        }
    }

    fn vars_used(&self, set: &mut Vec<usize>) {
        match self {
            CExpr::Const(_) => {}
            CExpr::Var(j) | CExpr::ConjVar(j) => {
                if !set.contains(j) {
                    set.push(*j);
                }
            }
            CExpr::Add(a, b) | CExpr::Mul(a, b) => {
                a.vars_used(set);
                b.vars_used(set);
            }
            CExpr::Neg(a) | CExpr::Exp(a) | CExpr::Pow(a, _) => a.vars_used(set),
        }
    }

    fn as_const(&self) -> Option<Complex64> {
        match self {
            CExpr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// Whether slot `j` appears anywhere in the expression.
    pub fn uses_var(&self, j: usize) -> bool {
        let mut set = Vec::new();
        self.vars_used(&mut set);
        set.contains(&j)
    }

    /// Expand as a polynomial in (z_v, conj z_v) with coefficients free of
    /// slot v: pairs ((a, b), coeff) standing for coeff * z_v^a * conj(z_v)^b.
    /// Errs when slot v appears under an exponential (not polynomial in v).
    pub fn expand_in_var(&self, v: usize) -> Result<Vec<((u32, u32), CExpr)>> {
        fn merge(acc: &mut Vec<((u32, u32), CExpr)>, key: (u32, u32), e: CExpr) {
            for (k, c) in acc.iter_mut() {
                if *k == key {
                    *c = add(c.clone(), e);
                    return;
                }
            }
            acc.push((key, e));
        }
        let out = match self {
            CExpr::Const(_) => vec![((0, 0), self.clone())],
            CExpr::Var(j) => {
                if *j == v {
                    vec![((1, 0), CExpr::real(1.0))]
                } else {
                    vec![((0, 0), self.clone())]
                }
            }
            CExpr::ConjVar(j) => {
                if *j == v {
                    vec![((0, 1), CExpr::real(1.0))]
                } else {
                    vec![((0, 0), self.clone())]
                }
            }
            CExpr::Add(a, b) => {
                let mut out = a.expand_in_var(v)?;
                for (k, c) in b.expand_in_var(v)? {
                    merge(&mut out, k, c);
                }
                out
            }
            CExpr::Mul(a, b) => {
                let ea = a.expand_in_var(v)?;
                let eb = b.expand_in_var(v)?;
                let mut out = Vec::new();
                for ((pa, qa), ca) in &ea {
                    for ((pb, qb), cb) in &eb {
                        merge(&mut out, (pa + pb, qa + qb), mul(ca.clone(), cb.clone()));
                    }
                }
                out
            }
            CExpr::Neg(a) => a
                .expand_in_var(v)?
                .into_iter()
                .map(|(k, c)| (k, neg(c)))
                .collect(),
            CExpr::Exp(a) => {
                if a.uses_var(v) {
                    return Err(Error::Config(format!(
                        "expression is not polynomial in z{}: variable under exp",
                        v + 1
                    )));
                }
                vec![((0, 0), self.clone())]
            }
            CExpr::Pow(a, n) => {
                let base = a.expand_in_var(v)?;
                let mut out = vec![((0u32, 0u32), CExpr::real(1.0))];
                for _ in 0..*n {
                    let mut next = Vec::new();
                    for ((pa, qa), ca) in &out {
                        for ((pb, qb), cb) in &base {
                            merge(&mut next, (pa + pb, qa + qb), mul(ca.clone(), cb.clone()));
                        }
                    }
                    out = next;
                }
                out
            }
        };
        Ok(out
            .into_iter()
            .map(|(k, c)| (k, c.simplify()))
            .filter(|(_, c)| c.as_const() != Some(Complex64::new(0.0, 0.0)))
            .collect())
    }

    /// Constant folding and identity elimination; keeps derivative trees
    /// from ballooning.
    pub fn simplify(&self) -> CExpr {
        match self {
            CExpr::Const(_) | CExpr::Var(_) | CExpr::ConjVar(_) => self.clone(),
            CExpr::Add(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (a.as_const(), b.as_const()) {
                    (Some(x), Some(y)) => CExpr::Const(x + y),
                    (Some(x), None) if x == Complex64::new(0.0, 0.0) => b,
                    (None, Some(y)) if y == Complex64::new(0.0, 0.0) => a,
                    _ => CExpr::Add(Box::new(a), Box::new(b)),
                }
            }
            CExpr::Mul(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                let zero = Complex64::new(0.0, 0.0);
                let one = Complex64::new(1.0, 0.0);
                match (a.as_const(), b.as_const()) {
                    (Some(x), Some(y)) => CExpr::Const(x * y),
                    (Some(x), _) if x == zero => CExpr::zero(),
                    (_, Some(y)) if y == zero => CExpr::zero(),
                    (Some(x), None) if x == one => b,
                    (None, Some(y)) if y == one => a,
                    _ => CExpr::Mul(Box::new(a), Box::new(b)),
                }
            }
            CExpr::Neg(a) => {
                let a = a.simplify();
                match a.as_const() {
                    Some(x) => CExpr::Const(-x),
                    None => CExpr::Neg(Box::new(a)),
                }
            }
            CExpr::Exp(a) => {
                let a = a.simplify();
                match a.as_const() {
                    Some(x) => CExpr::Const(x.exp()),
                    None => CExpr::Exp(Box::new(a)),
                }
            }
            CExpr::Pow(a, n) => {
                let a = a.simplify();
                match (*n, a.as_const()) {
                    (0, _) => CExpr::real(1.0),
                    (1, _) => a,
                    (n, Some(x)) => CExpr::Const(x.powu(n)),
                    _ => CExpr::Pow(Box::new(a), *n),
                }
            }
        }
    }
}

fn add(a: CExpr, b: CExpr) -> CExpr {
    CExpr::Add(Box::new(a), Box::new(b)).simplify()
}

fn mul(a: CExpr, b: CExpr) -> CExpr {
    CExpr::Mul(Box::new(a), Box::new(b)).simplify()
}

fn neg(a: CExpr) -> CExpr {
    CExpr::Neg(Box::new(a)).simplify()
}

pub fn parse_expr(input: &str) -> Result<CExpr> {
    let mut p = Parser {
        chars: input.chars().collect(),
        pos: 0,
        input,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.chars.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e.simplify())
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    input: &'a str,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse(format!(
            "{msg} at offset {} in {:?}",
            self.pos, self.input
        ))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(&format!("expected '{c}'")))
        }
    }

    fn expr(&mut self) -> Result<CExpr> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some('+') => {
                    self.pos += 1;
                    acc = CExpr::Add(Box::new(acc), Box::new(self.term()?));
                }
                Some('-') => {
                    self.pos += 1;
                    acc = CExpr::Add(
                        Box::new(acc),
                        Box::new(CExpr::Neg(Box::new(self.term()?))),
                    );
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<CExpr> {
        let mut acc = self.factor()?;
        while self.peek() == Some('*') {
            self.pos += 1;
            acc = CExpr::Mul(Box::new(acc), Box::new(self.factor()?));
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<CExpr> {
        // '^' binds tighter than unary minus: -z1^2 is -(z1^2).
        if self.peek() == Some('-') {
            self.pos += 1;
            return Ok(CExpr::Neg(Box::new(self.factor()?)));
        }
        let base = self.primary()?;
        if self.peek() == Some('^') {
            self.pos += 1;
            let n = self.integer()?;
            if n > 32 {
                return Err(self.err("exponent larger than 32"));
            }
            return Ok(CExpr::Pow(Box::new(base), n));
        }
        Ok(base)
    }

    fn integer(&mut self) -> Result<u32> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected an integer"));
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        s.parse().map_err(|_| self.err("integer out of range"))
    }

    fn primary(&mut self) -> Result<CExpr> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(_) => Err(self.err("expected a value")),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<CExpr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len()
            && (self.chars[self.pos].is_ascii_digit() || self.chars[self.pos] == '.')
        {
            self.pos += 1;
        }
        // Scientific notation: 1.5e-3.
        if self.pos < self.chars.len() && (self.chars[self.pos] == 'e' || self.chars[self.pos] == 'E')
        {
            let mut probe = self.pos + 1;
            if probe < self.chars.len() && (self.chars[probe] == '+' || self.chars[probe] == '-') {
                probe += 1;
            }
            if probe < self.chars.len() && self.chars[probe].is_ascii_digit() {
                self.pos = probe;
                while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        let x: f64 = s
            .parse()
            .map_err(|_| self.err(&format!("bad number literal {s:?}")))?;
        Ok(CExpr::real(x))
    }

    fn ident(&mut self) -> Result<CExpr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_alphabetic() {
            self.pos += 1;
        }
        let name: String = self.chars[start..self.pos].iter().collect();
        match name.as_str() {
            "i" => Ok(CExpr::Const(Complex64::new(0.0, 1.0))),
            "pi" => Ok(CExpr::real(std::f64::consts::PI)),
            "z" => {
                self.eat('_');
                let n = self.integer()?;
                if n == 0 || n > 9 {
                    return Err(self.err("variable index must be 1..=9"));
                }
                Ok(CExpr::Var(n as usize - 1))
            }
            "conj" => {
                self.expect('(')?;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(conjugate(&e))
            }
            "exp" => {
                self.expect('(')?;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(CExpr::Exp(Box::new(e)))
            }
            other => Err(self.err(&format!("unknown identifier {other:?}"))),
        }
    }
}

/// Push conjugation down to the leaves (conjugation is additive and
/// multiplicative, and commutes with exp and powers).
fn conjugate(e: &CExpr) -> CExpr {
    match e {
        CExpr::Const(c) => CExpr::Const(c.conj()),
        CExpr::Var(j) => CExpr::ConjVar(*j),
        CExpr::ConjVar(j) => CExpr::Var(*j),
        CExpr::Add(a, b) => CExpr::Add(Box::new(conjugate(a)), Box::new(conjugate(b))),
        CExpr::Mul(a, b) => CExpr::Mul(Box::new(conjugate(a)), Box::new(conjugate(b))),
        CExpr::Neg(a) => CExpr::Neg(Box::new(conjugate(a))),
        CExpr::Exp(a) => CExpr::Exp(Box::new(conjugate(a))),
        CExpr::Pow(a, n) => CExpr::Pow(Box::new(conjugate(a)), *n),
    }
}

/// Sum of separable products: f(z) = sum_t c_t * prod_j phi_{t,j}(z_j).
/// Slots without a factor are the constant 1.
#[derive(Clone, Debug)]
pub struct TensorForm {
    pub nvars: usize,
    pub terms: Vec<TensorTerm>,
}

#[derive(Clone, Debug)]
pub struct TensorTerm {
    pub coeff: Complex64,
    pub factors: Vec<Option<CExpr>>,
}

const MAX_TENSOR_TERMS: usize = 512;

impl TensorForm {
    /// Expand `e` into separable form; None when a subexpression genuinely
    /// couples variables (for example exp(z1*z2)).
    pub fn from_expr(e: &CExpr, nvars: usize) -> Option<TensorForm> {
        let terms = split(e, nvars)?;
        Some(TensorForm { nvars, terms })
    }

    pub fn eval(&self, z: &[Complex64]) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for t in &self.terms {
            let mut prod = t.coeff;
            for (j, f) in t.factors.iter().enumerate() {
                if let Some(f) = f {
                    prod *= f.eval_single(j, z[j]);
                }
            }
            acc += prod;
        }
        acc
    }

    /// Tabulate factor j of every term at the given points; constant factors
    /// become the constant 1 table.  Term coefficients are NOT folded in.
    pub fn factor_tables(&self, j: usize, points: &[Complex64]) -> Vec<Vec<Complex64>> {
        self.terms
            .iter()
            .map(|t| match &t.factors[j] {
                Some(f) => points.iter().map(|&w| f.eval_single(j, w)).collect(),
                None => vec![Complex64::new(1.0, 0.0); points.len()],
            })
            .collect()
    }
}

fn split(e: &CExpr, nvars: usize) -> Option<Vec<TensorTerm>> {
    let one = |coeff: Complex64| TensorTerm {
        coeff,
        factors: vec![None; nvars],
    };
    match e {
        CExpr::Const(c) => Some(vec![one(*c)]),
        CExpr::Var(j) | CExpr::ConjVar(j) => {
            if *j >= nvars {
                return None;
            }
            let mut t = one(Complex64::new(1.0, 0.0));
            t.factors[*j] = Some(e.clone());
            Some(vec![t])
        }
        CExpr::Neg(a) => {
            let mut ts = split(a, nvars)?;
            for t in &mut ts {
                t.coeff = -t.coeff;
            }
            Some(ts)
        }
        CExpr::Add(a, b) => {
            let mut ts = split(a, nvars)?;
            ts.extend(split(b, nvars)?);
            (ts.len() <= MAX_TENSOR_TERMS).then_some(ts)
        }
        CExpr::Mul(a, b) => {
            let ta = split(a, nvars)?;
            let tb = split(b, nvars)?;
            let mut out = Vec::with_capacity(ta.len() * tb.len());
            for x in &ta {
                for y in &tb {
                    let mut t = one(x.coeff * y.coeff);
                    for j in 0..nvars {
                        t.factors[j] = match (&x.factors[j], &y.factors[j]) {
                            (None, None) => None,
                            (Some(f), None) | (None, Some(f)) => Some(f.clone()),
                            (Some(f), Some(g)) => Some(CExpr::Mul(
                                Box::new(f.clone()),
                                Box::new(g.clone()),
                            )),
                        };
                    }
                    out.push(t);
                }
            }
            (out.len() <= MAX_TENSOR_TERMS).then_some(out)
        }
        CExpr::Pow(a, n) => {
            let mut acc = split(&CExpr::real(1.0), nvars)?;
            for _ in 0..*n {
                let ta = acc;
                let tb = split(a, nvars)?;
                let mut out = Vec::new();
                for x in &ta {
                    for y in &tb {
                        let mut t = one(x.coeff * y.coeff);
                        for j in 0..nvars {
                            t.factors[j] = match (&x.factors[j], &y.factors[j]) {
                                (None, None) => None,
                                (Some(f), None) | (None, Some(f)) => Some(f.clone()),
                                (Some(f), Some(g)) => Some(CExpr::Mul(
                                    Box::new(f.clone()),
                                    Box::new(g.clone()),
                                )),
                            };
                        }
                        out.push(t);
                    }
                }
                if out.len() > MAX_TENSOR_TERMS {
                    return None;
                }
                acc = out;
            }
            Some(acc)
        }
        CExpr::Exp(g) => {
            // exp separates only across a sum of single-variable pieces.
            let mut summands = Vec::new();
            flatten_sum(g, false, &mut summands);
            let mut coeff = Complex64::new(1.0, 0.0);
            let mut factors: Vec<Option<CExpr>> = vec![None; nvars];
            for (negated, s) in summands {
                let piece = if negated {
                    CExpr::Neg(Box::new(s.clone()))
                } else {
                    s.clone()
                };
                let mut used = Vec::new();
                piece.vars_used(&mut used);
                match used.len() {
                    0 => coeff *= piece.eval(&[]).exp(),
                    1 => {
                        let j = used[0];
                        if j >= nvars {
                            return None;
                        }
                        let expf = CExpr::Exp(Box::new(piece));
                        factors[j] = Some(match factors[j].take() {
                            Some(prev) => CExpr::Mul(Box::new(prev), Box::new(expf)),
                            None => expf,
                        });
                    }
                    _ => return None,
                }
            }
            Some(vec![TensorTerm { coeff, factors }])
        }
    }
}

fn flatten_sum(e: &CExpr, negated: bool, out: &mut Vec<(bool, CExpr)>) {
    match e {
        CExpr::Add(a, b) => {
            flatten_sum(a, negated, out);
            flatten_sum(b, negated, out);
        }
        CExpr::Neg(a) => flatten_sum(a, !negated, out),
        other => out.push((negated, other.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Wirtinger derivative by central differences:
    /// d/d(conj z) = ((d/dx) + i (d/dy)) / 2.
    fn fd_wirtinger_bar(
        f: &CExpr,
        z: &[Complex64],
        j: usize,
        h: f64,
    ) -> Complex64 {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[j] += c(h, 0.0);
        zm[j] -= c(h, 0.0);
        let dx = (f.eval(&zp) - f.eval(&zm)) / (2.0 * h);
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[j] += c(0.0, h);
        zm[j] -= c(0.0, h);
        let dy = (f.eval(&zp) - f.eval(&zm)) / (2.0 * h);
        (dx + c(0.0, 1.0) * dy) / 2.0
    }

    #[test]
    fn parse_and_eval() {
        let f = parse_expr("conj(z1)*conj(z2) + exp(z1)*conj(z2)^2").unwrap();
        let z = [c(1.0, 1.0), c(2.0, 0.0)];
        let expected = z[0].conj() * z[1].conj() + z[0].exp() * z[1].conj().powu(2);
        assert_relative_eq!(f.eval(&z).re, expected.re, epsilon = 1e-14);
        assert_relative_eq!(f.eval(&z).im, expected.im, epsilon = 1e-14);
    }

    #[test]
    fn parse_constants_and_precedence() {
        let f = parse_expr("1 - 2*3").unwrap();
        assert_eq!(f.eval(&[]), c(-5.0, 0.0));
        let g = parse_expr("-z1^2").unwrap();
        let z = [c(0.0, 2.0)];
        assert_relative_eq!(g.eval(&z).re, 4.0, epsilon = 1e-14);
        let h = parse_expr("i*pi + 2.5e-1").unwrap();
        assert_relative_eq!(h.eval(&[]).im, std::f64::consts::PI, epsilon = 1e-14);
        assert_relative_eq!(h.eval(&[]).re, 0.25, epsilon = 1e-14);
        assert!(parse_expr("z0").is_err());
        assert!(parse_expr("(z1").is_err());
        assert!(parse_expr("foo(z1)").is_err());
        assert!(parse_expr("z1 z2").is_err());
    }

    #[test]
    fn conjugation_pushes_to_leaves() {
        let f = parse_expr("conj(z1*z2 + i)").unwrap();
        let z = [c(1.0, 2.0), c(-0.5, 0.25)];
        let expected = (z[0] * z[1] + c(0.0, 1.0)).conj();
        assert_relative_eq!(f.eval(&z).re, expected.re, epsilon = 1e-14);
        assert_relative_eq!(f.eval(&z).im, expected.im, epsilon = 1e-14);
    }

    #[test]
    fn wirtinger_bar_product_rule() {
        // d/d(conj z1) of conj(z1)*conj(z2) is conj(z2).
        let f = parse_expr("conj(z1)*conj(z2)").unwrap();
        let d = f.wirtinger_bar(0);
        let z = [c(0.3, -0.4), c(0.7, 0.2)];
        assert_relative_eq!(d.eval(&z).re, z[1].conj().re, epsilon = 1e-14);
        assert_relative_eq!(d.eval(&z).im, z[1].conj().im, epsilon = 1e-14);
        // Holomorphic pieces are annihilated.
        let g = parse_expr("exp(z1)").unwrap();
        assert_eq!(g.wirtinger_bar(0), CExpr::zero());
    }

    #[test]
    fn wirtinger_bar_matches_finite_differences() {
        let exprs = [
            "conj(z1)*conj(z2) + exp(z1)*conj(z2)^2",
            "conj(z1)^3 - i*z2*conj(z1)",
            "exp(conj(z1) + z2)*z1",
            "(z1 + conj(z2))^2",
        ];
        let z = [c(0.31, -0.42), c(-0.2, 0.55)];
        for s in exprs {
            let f = parse_expr(s).unwrap();
            for j in 0..2 {
                let sym = f.wirtinger_bar(j).eval(&z);
                let num = fd_wirtinger_bar(&f, &z, j, 1e-5);
                assert_relative_eq!(sym.re, num.re, epsilon = 1e-8, max_relative = 1e-8);
                assert_relative_eq!(sym.im, num.im, epsilon = 1e-8, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn second_wirtinger_derivatives_compose() {
        let f = parse_expr("conj(z1)^2*conj(z2)").unwrap();
        let d12 = f.wirtinger_bar(0).wirtinger_bar(1);
        let z = [c(0.4, 0.1), c(-0.3, 0.2)];
        let expected = 2.0 * z[0].conj();
        assert_relative_eq!(d12.eval(&z).re, expected.re, epsilon = 1e-13);
        assert_relative_eq!(d12.eval(&z).im, expected.im, epsilon = 1e-13);
    }

    #[test]
    fn tensor_form_separates() {
        let f = parse_expr("conj(z1)*conj(z2) + exp(z1)*conj(z2)^2").unwrap();
        let tf = TensorForm::from_expr(&f, 2).unwrap();
        assert_eq!(tf.terms.len(), 2);
        let pts = [
            [c(0.3, 0.2), c(-0.1, 0.5)],
            [c(-0.7, 0.1), c(0.2, -0.2)],
        ];
        for z in pts {
            let direct = f.eval(&z);
            let tensored = tf.eval(&z);
            assert_relative_eq!(direct.re, tensored.re, epsilon = 1e-13);
            assert_relative_eq!(direct.im, tensored.im, epsilon = 1e-13);
        }
    }

    #[test]
    fn tensor_form_splits_exp_of_sum() {
        let f = parse_expr("exp(z1 + conj(z2) - 1)").unwrap();
        let tf = TensorForm::from_expr(&f, 2).unwrap();
        assert_eq!(tf.terms.len(), 1);
        let z = [c(0.2, 0.3), c(0.5, -0.1)];
        let expected = (z[0] + z[1].conj() - 1.0).exp();
        let got = tf.eval(&z);
        assert_relative_eq!(got.re, expected.re, epsilon = 1e-13);
        assert_relative_eq!(got.im, expected.im, epsilon = 1e-13);
    }

    #[test]
    fn tensor_form_rejects_coupled_exp() {
        let f = parse_expr("exp(z1*z2)").unwrap();
        assert!(TensorForm::from_expr(&f, 2).is_none());
    }

    #[test]
    fn polynomial_expansion_in_one_variable() {
        let e = parse_expr("(z1 + conj(z2))^2 + exp(z2)*conj(z1)").unwrap();
        let terms = e.expand_in_var(0).unwrap();
        // Monomials in slot 0: z1^2, z1 (coeff 2 conj z2), conj(z1), 1.
        assert_eq!(terms.len(), 4);
        let z = [c(0.2, 0.3), c(-0.4, 0.15)];
        let direct = e.eval(&z);
        let rebuilt: Complex64 = terms
            .iter()
            .map(|((a, b), cf)| cf.eval(&z) * z[0].powu(*a) * z[0].conj().powu(*b))
            .sum();
        assert_relative_eq!(rebuilt.re, direct.re, epsilon = 1e-13);
        assert_relative_eq!(rebuilt.im, direct.im, epsilon = 1e-13);
        // Coefficients must be free of the expanded slot.
        for (_, cf) in &terms {
            assert!(!cf.uses_var(0));
        }
        // Variables under an exponential are not polynomial.
        let bad = parse_expr("exp(conj(z1))").unwrap();
        assert!(bad.expand_in_var(0).is_err());
        assert!(bad.expand_in_var(1).is_ok());
    }

    #[test]
    fn factor_tables_match_direct_eval() {
        let f = parse_expr("exp(z1)*conj(z2)^2").unwrap();
        let tf = TensorForm::from_expr(&f, 2).unwrap();
        let pts = [c(0.1, 0.2), c(-0.4, 0.3)];
        let tab0 = tf.factor_tables(0, &pts);
        let tab1 = tf.factor_tables(1, &pts);
        for (a, w) in tab0[0].iter().zip(&pts) {
            assert_relative_eq!(a.re, w.exp().re, epsilon = 1e-14);
        }
        for (b, w) in tab1[0].iter().zip(&pts) {
            let e = w.conj().powu(2);
            assert_relative_eq!(b.re, e.re, epsilon = 1e-14);
            assert_relative_eq!(b.im, e.im, epsilon = 1e-14);
        }
    }
}
