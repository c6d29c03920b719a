//! Multivariate polynomials in the density vector `h`.
//!
//! Rate functions are written as plain arithmetic strings such as
//! `"2 - h1 - 0.5*h2^2"`. The parser expands them into a sparse monomial
//! map, which gives exact derivatives and cheap affine re-centering.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::ModelError;

/// Sparse polynomial: exponent vector -> coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct Poly {
    nvars: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Self { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        if c != 0.0 {
            p.terms.insert(vec![0; nvars], c);
        }
        p
    }

    /// The coordinate function `h_{k+1}` (zero-based `k`).
    pub fn var(nvars: usize, k: usize) -> Self {
        let mut e = vec![0; nvars];
        e[k] = 1;
        let mut p = Self::zero(nvars);
        p.terms.insert(e, 1.0);
        p
    }

    /// Builds from explicit `(exponents, coefficient)` pairs, merging duplicates.
    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Vec<u32>, f64)>) -> Self {
        let mut p = Self::zero(nvars);
        for (e, c) in terms {
            assert_eq!(e.len(), nvars, "exponent length mismatch");
            *p.terms.entry(e).or_insert(0.0) += c;
        }
        p.prune();
        p
    }

    /// Parses an expression over `h1..hq` (or bare `h` when `nvars == 1`).
    pub fn parse(src: &str, nvars: usize) -> Result<Self, ModelError> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0, nvars, src };
        let out = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(out)
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u32], f64)> {
        self.terms.iter().map(|(e, c)| (e.as_slice(), *c))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    /// Constant polynomial value, if it has no variable terms.
    pub fn as_constant(&self) -> Option<f64> {
        match self.terms.len() {
            0 => Some(0.0),
            1 => {
                let (e, c) = self.terms.iter().next().unwrap();
                e.iter().all(|&k| k == 0).then_some(*c)
            }
            _ => None,
        }
    }

    pub fn coeff(&self, exps: &[u32]) -> f64 {
        self.terms.get(exps).copied().unwrap_or(0.0)
    }

    pub fn eval(&self, h: &[f64]) -> f64 {
        debug_assert!(h.len() >= self.nvars);
        let mut acc = 0.0;
        for (e, c) in &self.terms {
            let mut m = *c;
            for (k, &p) in e.iter().enumerate() {
                if p > 0 {
                    m *= h[k].powi(p as i32);
                }
            }
            acc += m;
        }
        acc
    }

    /// Exact partial derivative with respect to variable `k`.
    pub fn partial(&self, k: usize) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, c) in &self.terms {
            if e[k] > 0 {
                let mut e2 = e.clone();
                e2[k] -= 1;
                *out.terms.entry(e2).or_insert(0.0) += c * e[k] as f64;
            }
        }
        out.prune();
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.nvars, other.nvars);
        let mut out = self.clone();
        for (e, c) in &other.terms {
            *out.terms.entry(e.clone()).or_insert(0.0) += c;
        }
        out.prune();
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= s;
        }
        out.prune();
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.nvars, other.nvars);
        let mut out = Self::zero(self.nvars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                *out.terms.entry(e).or_insert(0.0) += ca * cb;
            }
        }
        out.prune();
        out
    }

    pub fn pow(&self, n: u32) -> Self {
        let mut out = Self::constant(self.nvars, 1.0);
        for _ in 0..n {
            out = out.mul(self);
        }
        out
    }

    /// Substitutes `h = center + Q x`, returning a polynomial in `x`
    /// (`Q` is `nvars x m`, the result has `m` variables).
    pub fn compose_affine(&self, center: &[f64], q: &DMatrix<f64>) -> Self {
        assert_eq!(q.nrows(), self.nvars);
        let m = q.ncols();
        let lin: Vec<Poly> = (0..self.nvars)
            .map(|k| {
                let mut p = Poly::constant(m, center[k]);
                for j in 0..m {
                    if q[(k, j)] != 0.0 {
                        p = p.add(&Poly::var(m, j).scale(q[(k, j)]));
                    }
                }
                p
            })
            .collect();
        let mut out = Poly::zero(m);
        for (e, c) in &self.terms {
            let mut t = Poly::constant(m, *c);
            for (k, &p) in e.iter().enumerate() {
                if p > 0 {
                    t = t.mul(&lin[k].pow(p));
                }
            }
            out = out.add(&t);
        }
        out
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| *c != 0.0);
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (e, c) in &self.terms {
            let neg = *c < 0.0;
            if first {
                if neg {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {} ", if neg { "-" } else { "+" })?;
            }
            first = false;
            let a = c.abs();
            let vars: Vec<String> = e
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0)
                .map(|(k, &p)| if p == 1 { format!("h{}", k + 1) } else { format!("h{}^{}", k + 1, p) })
                .collect();
            if vars.is_empty() {
                write!(f, "{a}")?;
            } else if a == 1.0 {
                write!(f, "{}", vars.join("*"))?;
            } else {
                write!(f, "{a}*{}", vars.join("*"))?;
            }
        }
        Ok(())
    }
}

/// A rate polynomial together with the text it was parsed from.
#[derive(Clone, Debug)]
pub struct RateFn {
    pub source: String,
    pub poly: Poly,
}

impl RateFn {
    pub fn parse(src: &str, nvars: usize) -> Result<Self, ModelError> {
        Ok(Self { source: src.trim().to_string(), poly: Poly::parse(src, nvars)? })
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Self { source: format!("{c}"), poly: Poly::constant(nvars, c) }
    }

    pub fn zero(nvars: usize) -> Self {
        Self::constant(nvars, 0.0)
    }

    #[inline]
    pub fn eval(&self, h: &[f64]) -> f64 {
        self.poly.eval(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Var(usize),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ModelError> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < b.len() && ((b[i] as char).is_ascii_digit() || b[i] == b'.') {
                i += 1;
            }
            if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                let save = i;
                i += 1;
                if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
                    i += 1;
                }
                if i < b.len() && b[i].is_ascii_digit() {
                    while i < b.len() && b[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            let s = &src[start..i];
            let v: f64 = s.parse().map_err(|_| ModelError::Parse {
                src: src.to_string(),
                msg: format!("bad number '{s}' at column {}", start + 1),
            })?;
            out.push((Tok::Num(v), start));
        } else if c == 'h' {
            let start = i;
            i += 1;
            let ds = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            let k = if ds == i {
                0
            } else {
                let k: usize = src[ds..i].parse().unwrap();
                if k == 0 {
                    return Err(ModelError::Parse {
                        src: src.to_string(),
                        msg: format!("variables are numbered from h1 (column {})", start + 1),
                    });
                }
                k
            };
            out.push((Tok::Var(k), start));
        } else if "+-*/^()".contains(c) {
            out.push((Tok::Op(c), i));
            i += 1;
        } else {
            return Err(ModelError::Parse {
                src: src.to_string(),
                msg: format!("unexpected character '{c}' at column {}", i + 1),
            });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
    nvars: usize,
    src: &'a str,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> ModelError {
        let col = self.tokens.get(self.pos).map(|t| t.1 + 1).unwrap_or(self.src.len() + 1);
        ModelError::Parse { src: self.src.to_string(), msg: format!("{msg} at column {col}") }
    }

    fn peek_op(&self) -> Option<char> {
        match self.tokens.get(self.pos) {
            Some((Tok::Op(c), _)) => Some(*c),
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Poly, ModelError> {
        let mut acc = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let t = self.term()?;
            acc = if c == '+' { acc.add(&t) } else { acc.sub(&t) };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Poly, ModelError> {
        let mut acc = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            if c == '*' {
                acc = acc.mul(&rhs);
            } else {
                match rhs.as_constant() {
                    Some(d) if d != 0.0 => acc = acc.scale(1.0 / d),
                    _ => return Err(self.err("division only by nonzero constants")),
                }
            }
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Poly, ModelError> {
        match self.peek_op() {
            Some('-') => {
                self.pos += 1;
                Ok(self.unary()?.scale(-1.0))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Poly, ModelError> {
        let base = self.atom()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            match self.tokens.get(self.pos) {
                Some((Tok::Num(v), _)) if *v >= 0.0 && v.fract() == 0.0 && *v <= 64.0 => {
                    self.pos += 1;
                    Ok(base.pow(*v as u32))
                }
                _ => Err(self.err("exponent must be a small nonnegative integer")),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Poly, ModelError> {
        match self.tokens.get(self.pos).cloned() {
            Some((Tok::Num(v), _)) => {
                self.pos += 1;
                Ok(Poly::constant(self.nvars, v))
            }
            Some((Tok::Var(k), _)) => {
                let idx = if k == 0 {
                    if self.nvars != 1 {
                        return Err(self.err("bare 'h' is only allowed with one type"));
                    }
                    0
                } else {
                    k - 1
                };
                if idx >= self.nvars {
                    return Err(self.err(&format!("variable h{k} exceeds type count {}", self.nvars)));
                }
                self.pos += 1;
                Ok(Poly::var(self.nvars, idx))
            }
            Some((Tok::Op('('), _)) => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek_op() != Some(')') {
                    return Err(self.err("expected ')'"));
                }
                self.pos += 1;
                Ok(e)
            }
            _ => Err(self.err("expected a number, variable or '('")),
        }
    }
}

/// Flattened polynomial for hot loops: a list of `(coef, [(var, power)])`.
#[derive(Clone, Debug)]
pub struct FlatPoly {
    terms: Vec<(f64, Vec<(usize, i32)>)>,
}

impl FlatPoly {
    pub fn new(p: &Poly) -> Self {
        let terms = p
            .terms()
            .map(|(e, c)| {
                let f = e.iter().enumerate().filter(|(_, &k)| k > 0).map(|(v, &k)| (v, k as i32)).collect();
                (c, f)
            })
            .collect();
        Self { terms }
    }

    #[inline]
    pub fn eval(&self, h: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (c, f) in &self.terms {
            let mut m = *c;
            for &(v, k) in f {
                m *= if k == 1 { h[v] } else { h[v].powi(k) };
            }
            acc += m;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_expands() {
        let p = Poly::parse("(h1 + 2*h2)^2 - 3", 2).unwrap();
        assert_eq!(p.coeff(&[2, 0]), 1.0);
        assert_eq!(p.coeff(&[1, 1]), 4.0);
        assert_eq!(p.coeff(&[0, 2]), 4.0);
        assert_eq!(p.coeff(&[0, 0]), -3.0);
        assert_eq!(p.eval(&[1.0, 1.0]), 6.0);
    }

    #[test]
    fn bare_h_for_single_type() {
        let p = Poly::parse("2*h - h^2", 1).unwrap();
        assert_eq!(p.eval(&[2.0]), 0.0);
        assert!(Poly::parse("h", 2).is_err());
        assert!(Poly::parse("h3", 2).is_err());
        assert!(Poly::parse("2 +", 1).is_err());
        assert!(Poly::parse("h/h", 1).is_err());
    }

    #[test]
    fn division_and_exponent_numbers() {
        let p = Poly::parse("1/4 * h1 + 1e-1", 1).unwrap();
        assert!((p.eval(&[2.0]) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn partial_derivative_exact() {
        let p = Poly::parse("h1^3*h2 + 5*h2", 2).unwrap();
        let d = p.partial(0);
        assert_eq!(d.coeff(&[2, 1]), 3.0);
        assert_eq!(p.partial(1).eval(&[2.0, 0.0]), 13.0);
    }

    #[test]
    fn affine_composition_matches_eval() {
        let p = Poly::parse("h1*h2 - 2*h1^2 + h2", 2).unwrap();
        let q = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.25]);
        let c = [1.5, -0.5];
        let r = p.compose_affine(&c, &q);
        let x = [0.3, -0.7];
        let h = [c[0] + 0.5 * x[0] - x[1], c[1] + 2.0 * x[0] + 0.25 * x[1]];
        assert!((r.eval(&x) - p.eval(&h)).abs() < 1e-12);
    }

    #[test]
    fn display_round_trips() {
        let p = Poly::parse("2 - h1 + 0.5*h1*h2^2", 2).unwrap();
        let q = Poly::parse(&p.to_string(), 2).unwrap();
        assert_eq!(p, q);
    }
}
