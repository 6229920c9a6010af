//! lme4-style model formulas with a single random-effects group.
//!
//! Supported grammar:
//!
//! ```text
//! formula  := name '~' fixed '+' '(' random '|' name ')'
//! fixed    := item (('+' item) | ('-' '1'))*
//! item     := '0' | '1' | name (':' name)* | name '*' name
//! random   := '1' ('+' name)* | '0' '+' name ('+' name)* | name ('+' name)*
//! ```
//!
//! `a*b` expands to `a + b + a:b`. The fixed part carries an intercept unless
//! `0 +` or `- 1` is given; the random part carries one unless it starts with
//! `0 +`.

use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FormulaError {
    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("unknown token {token:?} at position {position}")]
    UnknownToken { position: usize, token: char },

    #[error("duplicate term `{0}`")]
    DuplicateTerm(String),

    #[error("only one random-effects group `( … | cluster)` is supported")]
    MultipleRandomGroups,

    #[error("unsupported at position {position}: {message}")]
    Unsupported { position: usize, message: String },

    #[error("invalid formula: {0}")]
    Invalid(String),
}

/// A fixed-effects term: a set of variables. The empty set is the intercept.
///
/// Equality and hashing ignore variable order (`a:b == b:a`); display keeps
/// the order in which the variables were written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Term(Vec<String>);

impl Term {
    pub fn intercept() -> Self {
        Term(Vec::new())
    }

    pub fn new<S: Into<String>>(vars: impl IntoIterator<Item = S>) -> Self {
        Term(vars.into_iter().map(Into::into).collect())
    }

    pub fn is_intercept(&self) -> bool {
        self.0.is_empty()
    }

    pub fn variables(&self) -> &[String] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    fn sorted(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.0.iter().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

impl PartialEq for Term {
    fn eq(&self, other: &Self) -> bool {
        self.sorted() == other.sorted()
    }
}

impl Eq for Term {}

impl Hash for Term {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.sorted().hash(state);
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            f.write_str(INTERCEPT_NAME)
        } else {
            f.write_str(&self.0.join(":"))
        }
    }
}

pub const INTERCEPT_NAME: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFormula {
    pub response: String,
    /// Intercept (if any) first, then main effects, then interactions.
    pub fixed_terms: Vec<Term>,
    pub random_intercept: bool,
    pub random_slopes: Vec<String>,
    pub cluster: String,
}

impl ModelFormula {
    pub fn has_intercept(&self) -> bool {
        self.fixed_terms.first().is_some_and(Term::is_intercept)
    }

    /// Column labels of the fixed design, e.g. `["(Intercept)", "treat", "time", "treat:time"]`.
    pub fn fixed_names(&self) -> Vec<String> {
        self.fixed_terms.iter().map(ToString::to_string).collect()
    }

    /// Column labels of the random design, e.g. `["(Intercept)", "time"]`.
    pub fn random_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.random_slopes.len() + 1);
        if self.random_intercept {
            names.push(INTERCEPT_NAME.to_string());
        }
        names.extend(self.random_slopes.iter().cloned());
        names
    }

    /// Numeric covariates referenced by the fixed or random part, in first-use order.
    /// Excludes the response and the cluster variable.
    pub fn covariates(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let fixed = self.fixed_terms.iter().flat_map(|t| t.variables().iter());
        for v in fixed.chain(self.random_slopes.iter()) {
            if seen.insert(v.as_str()) {
                out.push(v.clone());
            }
        }
        out
    }

    /// Canonical text form; reparses to an identical structure.
    pub fn render(&self) -> String {
        let mut fixed: Vec<String> = Vec::new();
        fixed.push(if self.has_intercept() { "1" } else { "0" }.to_string());
        fixed.extend(self.fixed_terms.iter().filter(|t| !t.is_intercept()).map(ToString::to_string));
        let mut random: Vec<String> = Vec::new();
        random.push(if self.random_intercept { "1" } else { "0" }.to_string());
        random.extend(self.random_slopes.iter().cloned());
        format!(
            "{} ~ {} + ({} | {})",
            self.response,
            fixed.join(" + "),
            random.join(" + "),
            self.cluster
        )
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for ModelFormula {
    type Err = FormulaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_formula(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Zero,
    One,
    Tilde,
    Plus,
    Minus,
    Colon,
    Star,
    LParen,
    RParen,
    Bar,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("name `{s}`"),
            Tok::Zero => "`0`".into(),
            Tok::One => "`1`".into(),
            Tok::Tilde => "`~`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Star => "`*`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Bar => "`|`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '.'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, FormulaError> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        let simple = match c {
            '~' => Some(Tok::Tilde),
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            ':' => Some(Tok::Colon),
            '*' => Some(Tok::Star),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '|' => Some(Tok::Bar),
            _ => None,
        };
        if let Some(t) = simple {
            chars.next();
            out.push((pos, t));
        } else if c.is_ascii_digit() {
            let mut num = String::new();
            while let Some(&(_, d)) = chars.peek() {
                if is_ident_char(d) {
                    num.push(d);
                    chars.next();
                } else {
                    break;
                }
            }
            match num.as_str() {
                "0" => out.push((pos, Tok::Zero)),
                "1" => out.push((pos, Tok::One)),
                _ => {
                    return Err(FormulaError::Syntax {
                        position: pos,
                        message: format!("unexpected literal `{num}` (only 0 and 1 are allowed)"),
                    })
                }
            }
        } else if is_ident_start(c) {
            let mut name = String::new();
            while let Some(&(_, d)) = chars.peek() {
                if is_ident_char(d) {
                    name.push(d);
                    chars.next();
                } else {
                    break;
                }
            }
            out.push((pos, Tok::Ident(name)));
        } else {
            return Err(FormulaError::UnknownToken { position: pos, token: c });
        }
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].1
    }

    fn pos(&self) -> usize {
        self.toks[self.at].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].1.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn error<T>(&self, expected: &str) -> Result<T, FormulaError> {
        Err(FormulaError::Syntax {
            position: self.pos(),
            message: format!("expected {expected}, found {}", self.peek().describe()),
        })
    }

    fn expect(&mut self, tok: Tok, expected: &str) -> Result<(), FormulaError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            self.error(expected)
        }
    }

    fn ident(&mut self, expected: &str) -> Result<String, FormulaError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => self.error(expected),
        }
    }

    fn interaction(&mut self) -> Result<Vec<String>, FormulaError> {
        let mut vars = vec![self.ident("a variable name")?];
        while *self.peek() == Tok::Colon {
            self.bump();
            vars.push(self.ident("a variable name after `:`")?);
        }
        Ok(vars)
    }
}

#[derive(Default)]
struct FixedBuilder {
    intercept: bool,
    mains: Vec<Term>,
    interactions: Vec<Term>,
    seen: HashSet<Term>,
}

impl FixedBuilder {
    fn add(&mut self, vars: Vec<String>) -> Result<(), FormulaError> {
        let distinct: HashSet<&String> = vars.iter().collect();
        if distinct.len() != vars.len() {
            return Err(FormulaError::DuplicateTerm(vars.join(":")));
        }
        let term = Term(vars);
        if !self.seen.insert(term.clone()) {
            return Err(FormulaError::DuplicateTerm(term.to_string()));
        }
        if term.order() == 1 {
            self.mains.push(term);
        } else {
            self.interactions.push(term);
        }
        Ok(())
    }
}

/// Parses a formula such as `"pos ~ treat * time + (time|id)"`.
pub fn parse_formula(text: &str) -> Result<ModelFormula, FormulaError> {
    let mut p = Parser { toks: tokenize(text)?, at: 0 };
    let response = p.ident("the response name")?;
    p.expect(Tok::Tilde, "`~`")?;

    let mut fixed = FixedBuilder { intercept: true, ..Default::default() };
    let mut explicit_intercept = false;
    let mut removed_intercept = false;
    let mut first = true;
    loop {
        if !first && *p.peek() == Tok::LParen {
            break;
        }
        match p.peek().clone() {
            Tok::Zero => {
                p.bump();
                removed_intercept = true;
            }
            Tok::One => {
                p.bump();
                explicit_intercept = true;
            }
            Tok::Ident(_) => {
                let left = p.interaction()?;
                if *p.peek() == Tok::Star {
                    let star_pos = p.pos();
                    p.bump();
                    let right = p.interaction()?;
                    if left.len() != 1 || right.len() != 1 {
                        return Err(FormulaError::Unsupported {
                            position: star_pos,
                            message: "`*` operands must be plain variable names".into(),
                        });
                    }
                    if *p.peek() == Tok::Star {
                        return Err(FormulaError::Unsupported {
                            position: p.pos(),
                            message: "only two-way `*` products are supported".into(),
                        });
                    }
                    let (a, b) = (left[0].clone(), right[0].clone());
                    fixed.add(vec![a.clone()])?;
                    fixed.add(vec![b.clone()])?;
                    fixed.add(vec![a, b])?;
                } else {
                    fixed.add(left)?;
                }
            }
            _ => return p.error("a fixed-effects term"),
        }
        first = false;
        // Separators: `+ item`, `- 1`, or `+ (` which ends the fixed part.
        loop {
            match p.peek() {
                Tok::Minus => {
                    p.bump();
                    if *p.peek() != Tok::One {
                        return p.error("`1` after `-`");
                    }
                    p.bump();
                    removed_intercept = true;
                }
                Tok::Plus => {
                    p.bump();
                    break;
                }
                Tok::End => return p.error("`+ ( … | cluster)` random-effects term"),
                _ => return p.error("`+`"),
            }
        }
    }
    if removed_intercept && explicit_intercept {
        return Err(FormulaError::Invalid("intercept both added and removed".into()));
    }
    fixed.intercept = !removed_intercept;

    // Random part.
    p.expect(Tok::LParen, "`(`")?;
    let mut random_intercept = true;
    let mut slopes: Vec<String> = Vec::new();
    match p.peek().clone() {
        Tok::One => {
            p.bump();
        }
        Tok::Zero => {
            p.bump();
            random_intercept = false;
            p.expect(Tok::Plus, "`+` after `0`")?;
            slopes.push(p.ident("a random slope name")?);
        }
        Tok::Ident(_) => {
            slopes.push(p.ident("a random slope name")?);
        }
        _ => return p.error("`1`, `0 +` or a variable name"),
    }
    while *p.peek() == Tok::Plus {
        p.bump();
        slopes.push(p.ident("a random slope name")?);
    }
    p.expect(Tok::Bar, "`|`")?;
    let cluster = p.ident("the cluster variable name")?;
    p.expect(Tok::RParen, "`)`")?;
    match p.peek() {
        Tok::End => {}
        Tok::Plus if *p.peek2() == Tok::LParen => return Err(FormulaError::MultipleRandomGroups),
        _ => return p.error("end of formula"),
    }

    let mut seen = HashSet::new();
    for s in &slopes {
        if !seen.insert(s.as_str()) {
            return Err(FormulaError::DuplicateTerm(format!("{s} | {cluster}")));
        }
    }
    if cluster == response {
        return Err(FormulaError::Invalid("cluster variable equals the response".into()));
    }
    let FixedBuilder { intercept, mains, interactions, .. } = fixed;
    for t in mains.iter().chain(&interactions) {
        if t.variables().contains(&response) {
            return Err(FormulaError::Invalid(format!("response `{response}` used as a predictor")));
        }
        if t.variables().contains(&cluster) {
            return Err(FormulaError::Invalid(format!(
                "cluster variable `{cluster}` used as a fixed effect"
            )));
        }
    }
    if slopes.iter().any(|s| *s == response || *s == cluster) {
        return Err(FormulaError::Invalid("random slope on the response or cluster variable".into()));
    }
    for t in &interactions {
        for v in t.variables() {
            if !mains.iter().any(|m| m.variables()[0] == *v) {
                return Err(FormulaError::Invalid(format!(
                    "interaction `{t}` requires main effect `{v}`"
                )));
            }
        }
    }
    let mut fixed_terms = Vec::with_capacity(mains.len() + interactions.len() + 1);
    if intercept {
        fixed_terms.push(Term::intercept());
    }
    fixed_terms.extend(mains);
    fixed_terms.extend(interactions);
    if fixed_terms.is_empty() {
        return Err(FormulaError::Invalid("no fixed effects".into()));
    }
    Ok(ModelFormula { response, fixed_terms, random_intercept, random_slopes: slopes, cluster })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(f: &ModelFormula) -> Vec<String> {
        f.fixed_names()
    }

    #[test]
    fn paper_model() {
        let f = parse_formula("pos ~ treat * time + (time|id)").unwrap();
        assert_eq!(f.response, "pos");
        assert_eq!(
            f.fixed_terms,
            vec![
                Term::intercept(),
                Term::new(["treat"]),
                Term::new(["time"]),
                Term::new(["treat", "time"])
            ]
        );
        assert!(f.random_intercept);
        assert_eq!(f.random_slopes, vec!["time"]);
        assert_eq!(f.cluster, "id");
        assert_eq!(terms(&f), ["(Intercept)", "treat", "time", "treat:time"]);
        assert_eq!(f.random_names(), ["(Intercept)", "time"]);
    }

    #[test]
    fn minimal_random_intercept() {
        let f = parse_formula("y ~ x + (1|g)").unwrap();
        assert_eq!(f.fixed_terms, vec![Term::intercept(), Term::new(["x"])]);
        assert!(f.random_intercept);
        assert!(f.random_slopes.is_empty());
        assert_eq!(f.cluster, "g");
    }

    #[test]
    fn star_expansion_matches_explicit() {
        let a = parse_formula("y ~ a*b + (1|g)").unwrap();
        let b = parse_formula("y ~ a + b + a:b + (1|g)").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interactions_follow_main_effects() {
        let f = parse_formula("y ~ a:b + a + b + c + (1|g)").unwrap();
        assert_eq!(terms(&f), ["(Intercept)", "a", "b", "c", "a:b"]);
    }

    #[test]
    fn intercept_removal() {
        let f = parse_formula("y ~ 0 + x + (1|g)").unwrap();
        assert_eq!(terms(&f), ["x"]);
        let f = parse_formula("y ~ x - 1 + (1|g)").unwrap();
        assert_eq!(terms(&f), ["x"]);
        let f = parse_formula("y ~ 1 + x + (0 + x|g)").unwrap();
        assert_eq!(terms(&f), ["(Intercept)", "x"]);
        assert!(!f.random_intercept);
        assert_eq!(f.random_slopes, ["x"]);
    }

    #[test]
    fn random_forms() {
        let f = parse_formula("y ~ x + (1 + x + z | g)").unwrap();
        assert!(f.random_intercept);
        assert_eq!(f.random_slopes, ["x", "z"]);
        let f = parse_formula("y ~ x + (x + z | g)").unwrap();
        assert_eq!(f.random_names(), ["(Intercept)", "x", "z"]);
    }

    #[test]
    fn render_is_canonical() {
        let f = parse_formula("pos ~ treat * time + (time|id)").unwrap();
        assert_eq!(f.render(), "pos ~ 1 + treat + time + treat:time + (1 + time | id)");
        assert_eq!(parse_formula(&f.render()).unwrap(), f);
        let g = parse_formula("y ~ 0 + x + (0 + x | g)").unwrap();
        assert_eq!(g.render(), "y ~ 0 + x + (0 + x | g)");
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_formula("y ~ a*b*c + (1|g)"), Err(FormulaError::Unsupported { .. })));
        assert!(matches!(parse_formula("y ~ x + x + (1|g)"), Err(FormulaError::DuplicateTerm(_))));
        assert!(matches!(parse_formula("y ~ a*b + a + (1|g)"), Err(FormulaError::DuplicateTerm(_))));
        assert!(matches!(
            parse_formula("y ~ x + (1|g) + (1|h)"),
            Err(FormulaError::MultipleRandomGroups)
        ));
        assert!(matches!(parse_formula("y ~ log(x) + (1|g)"), Err(FormulaError::Syntax { .. })));
        assert!(matches!(parse_formula("y ~ x + (1|g/h)"), Err(FormulaError::UnknownToken { .. })));
        assert!(matches!(parse_formula("y ~ x + (1||g)"), Err(FormulaError::Syntax { .. })));
        assert!(matches!(parse_formula("y ~ x"), Err(FormulaError::Syntax { .. })));
        assert!(matches!(parse_formula("y ~ x + (1|y)"), Err(FormulaError::Invalid(_))));
        assert!(matches!(parse_formula("y ~ a:b + (1|g)"), Err(FormulaError::Invalid(_))));
        assert!(matches!(parse_formula("y ~ 0 + (1|g)"), Err(FormulaError::Invalid(_))));
        assert!(matches!(parse_formula("y ~ x + (x + x|g)"), Err(FormulaError::DuplicateTerm(_))));
        assert!(matches!(parse_formula("y ~ x + 2 + (1|g)"), Err(FormulaError::Syntax { .. })));
        assert!(matches!(parse_formula("y ~ x + (1|g) x"), Err(FormulaError::Syntax { .. })));
    }

    #[test]
    fn syntax_error_reports_position() {
        match parse_formula("y ~ x + (1 | )") {
            Err(FormulaError::Syntax { position, .. }) => assert_eq!(position, 13),
            other => panic!("unexpected {other:?}"),
        }
    }
}
