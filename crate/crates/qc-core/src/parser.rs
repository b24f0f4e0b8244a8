//! Text formats: `.dlq` programs and queries, `.db` instances, and the JSON
//! encoding of proof trees and verdicts.
//!
//! Variables start with an uppercase letter or `_`, constants are lowercase
//! identifiers or numbers, and `@k` denotes the special constant `λ_k`.
//! Predicates that are not declared are inferred: a predicate occurring in a
//! rule head is IDB, anything else is EDB.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate, Atom, Cq, DatabaseInstance, Diagnostic, Program, QueryForm, Rule, Term, HIT, QUERY,
};
use crate::witness::{ProofTree, Verdict, Witness};

const KEYWORDS: [&str; 6] = ["edb", "idb", "fcq", "query", "subquery", "domain"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("{line}:{col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("{}", join_diags(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("witness JSON: {0}")]
    Json(String),
}

fn join_diags(d: &[Diagnostic]) -> String {
    d.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Lower(String),
    Upper(String),
    Num(String),
    Lambda(usize),
    LParen,
    RParen,
    Comma,
    Dot,
    Turnstile,
    Slash,
    LBrace,
    RBrace,
    Eof,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let syntax = |line, col, message: String| ParseError::Syntax { line, col, message };
    while i < chars.len() {
        let c = chars[i];
        let (l0, c0) = (line, col);
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '%' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let tok = if c.is_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            if c.is_uppercase() || c == '_' {
                Tok::Upper(s)
            } else {
                Tok::Lower(s)
            }
        } else if c.is_ascii_digit() {
            while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            if !s.chars().all(|ch| ch.is_ascii_digit()) {
                return Err(syntax(l0, c0, format!("malformed number {s}")));
            }
            Tok::Num(s)
        } else if c == '@' {
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let s: String = chars[start + 1..i].iter().collect();
            let k: usize = s
                .parse()
                .map_err(|_| syntax(l0, c0, "expected an index after @".into()))?;
            if k == 0 {
                return Err(syntax(l0, c0, "λ indices start at 1".into()));
            }
            Tok::Lambda(k)
        } else if c == ':' && chars.get(i + 1) == Some(&'-') {
            i += 2;
            Tok::Turnstile
        } else {
            i += 1;
            match c {
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                '.' => Tok::Dot,
                '/' => Tok::Slash,
                '{' => Tok::LBrace,
                '}' => Tok::RBrace,
                _ => return Err(syntax(l0, c0, format!("unexpected character '{c}'"))),
            }
        };
        col += i - start;
        out.push(Spanned { tok, line: l0, col: c0 });
    }
    out.push(Spanned { tok: Tok::Eof, line, col });
    Ok(out)
}

/// Unresolved contents of a program block.
#[derive(Debug, Default)]
struct RawBlock {
    edb: Vec<(String, usize)>,
    idb: Vec<(String, usize)>,
    rules: Vec<Rule>,
    fcq: Option<(usize, Vec<usize>)>,
    queries: Vec<Cq>,
    subqueries: Vec<(String, usize, RawBlock)>,
    domain: Vec<String>,
    /// Ground facts, when the block is parsed as an instance.
    facts: Vec<Atom>,
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Parser, ParseError> {
        Ok(Parser { toks: lex(text)?, pos: 0 })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        let s = &self.toks[self.pos];
        Err(ParseError::Syntax { line: s.line, col: s.col, message: message.into() })
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<(), ParseError> {
        if *self.peek() == t {
            self.next();
            Ok(())
        } else {
            self.error(format!("expected {what}"))
        }
    }

    fn number(&mut self) -> Result<usize, ParseError> {
        match self.peek().clone() {
            Tok::Num(s) => {
                self.next();
                s.parse().or_else(|_| self.error("number too large"))
            }
            _ => self.error("expected a number"),
        }
    }

    fn name(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Lower(s) | Tok::Upper(s) => {
                self.next();
                Ok(s)
            }
            _ => self.error("expected a predicate name"),
        }
    }

    fn term(&mut self) -> Result<Term, ParseError> {
        match self.next() {
            Tok::Upper(s) => Ok(Term::Var(s)),
            Tok::Lower(s) | Tok::Num(s) => Ok(Term::Const(s)),
            Tok::Lambda(k) => Ok(Term::Lambda(k)),
            _ => {
                self.pos -= 1;
                self.error("expected a term")
            }
        }
    }

    fn term_list(&mut self) -> Result<Vec<Term>, ParseError> {
        let mut args = Vec::new();
        self.expect(Tok::LParen, "'('")?;
        if *self.peek() == Tok::RParen {
            self.next();
            return Ok(args);
        }
        loop {
            args.push(self.term()?);
            match self.next() {
                Tok::Comma => continue,
                Tok::RParen => return Ok(args),
                _ => {
                    self.pos -= 1;
                    return self.error("expected ',' or ')'");
                }
            }
        }
    }

    fn atom(&mut self) -> Result<Atom, ParseError> {
        let pred = self.name()?;
        let args = if *self.peek() == Tok::LParen { self.term_list()? } else { Vec::new() };
        Ok(Atom { pred, args })
    }

    fn body(&mut self) -> Result<Vec<Atom>, ParseError> {
        let mut body = vec![self.atom()?];
        while *self.peek() == Tok::Comma {
            self.next();
            body.push(self.atom()?);
        }
        Ok(body)
    }

    fn decls(&mut self) -> Result<Vec<(String, usize)>, ParseError> {
        let mut out = Vec::new();
        loop {
            let n = self.name()?;
            self.expect(Tok::Slash, "'/'")?;
            out.push((n, self.number()?));
            match self.next() {
                Tok::Comma => continue,
                Tok::Dot => return Ok(out),
                _ => {
                    self.pos -= 1;
                    return self.error("expected ',' or '.'");
                }
            }
        }
    }

    fn is_keyword_here(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Lower(s) if s == kw)
            && !matches!(self.peek_at(1), Tok::Turnstile | Tok::Dot | Tok::Comma)
    }

    fn block(&mut self, nested: bool) -> Result<RawBlock, ParseError> {
        let mut b = RawBlock::default();
        loop {
            match self.peek() {
                Tok::Eof if !nested => return Ok(b),
                Tok::RBrace if nested => return Ok(b),
                Tok::Eof => return self.error("unterminated subquery block"),
                _ => {}
            }
            if self.is_keyword_here("edb") {
                self.next();
                b.edb.extend(self.decls()?);
            } else if self.is_keyword_here("idb") {
                self.next();
                b.idb.extend(self.decls()?);
            } else if self.is_keyword_here("fcq") {
                self.next();
                if b.fcq.is_some() {
                    return self.error("duplicate fcq directive");
                }
                match self.next() {
                    Tok::Lower(s) if s == "arity" => {}
                    _ => {
                        self.pos -= 1;
                        return self.error("expected 'arity'");
                    }
                }
                let m = self.number()?;
                let mut free = Vec::new();
                if matches!(self.peek(), Tok::Lower(s) if s == "free") {
                    self.next();
                    if *self.peek() != Tok::Dot {
                        free.push(self.number()?);
                        while *self.peek() == Tok::Comma {
                            self.next();
                            free.push(self.number()?);
                        }
                    }
                }
                self.expect(Tok::Dot, "'.'")?;
                b.fcq = Some((m, free));
            } else if matches!(self.peek(), Tok::Lower(s) if s == QUERY) {
                self.next();
                let head = if *self.peek() == Tok::LParen { self.term_list()? } else { Vec::new() };
                self.expect(Tok::Turnstile, "':-'")?;
                let body = self.body()?;
                self.expect(Tok::Dot, "'.'")?;
                b.queries.push(Cq { head, body });
            } else if self.is_keyword_here("subquery") {
                self.next();
                let n = self.name()?;
                self.expect(Tok::Slash, "'/'")?;
                let k = self.number()?;
                self.expect(Tok::LBrace, "'{'")?;
                let inner = self.block(true)?;
                self.expect(Tok::RBrace, "'}'")?;
                b.subqueries.push((n, k, inner));
            } else if self.is_keyword_here("domain") {
                self.next();
                loop {
                    match self.term()? {
                        Term::Const(c) => b.domain.push(c),
                        _ => return self.error("domain elements must be constants"),
                    }
                    match self.next() {
                        Tok::Comma => continue,
                        Tok::Dot => break,
                        _ => {
                            self.pos -= 1;
                            return self.error("expected ',' or '.'");
                        }
                    }
                }
            } else {
                let head = self.atom()?;
                match self.next() {
                    Tok::Turnstile => {
                        let body = self.body()?;
                        self.expect(Tok::Dot, "'.'")?;
                        b.rules.push(Rule { head, body });
                    }
                    Tok::Dot => b.facts.push(head),
                    _ => {
                        self.pos -= 1;
                        return self.error("expected ':-' or '.'");
                    }
                }
            }
        }
    }
}

fn invalid(location: &str, message: String) -> ParseError {
    ParseError::Invalid(vec![Diagnostic {
        level: crate::model::Level::Error,
        message,
        location: location.to_string(),
    }])
}

fn resolve(b: RawBlock, inherited: &BTreeMap<String, usize>, loc: &str) -> Result<QueryForm, ParseError> {
    if !b.facts.is_empty() {
        return Err(invalid(loc, format!("fact {} outside an instance file", b.facts[0])));
    }
    if !b.domain.is_empty() {
        return Err(invalid(loc, "domain statement outside an instance file".into()));
    }
    let mut p = Program::default();
    for (n, k) in &b.edb {
        if p.edb.insert(n.clone(), *k).is_some() {
            return Err(invalid(loc, format!("duplicate declaration of {n}")));
        }
    }
    for (n, k) in &b.idb {
        if p.idb.insert(n.clone(), *k).is_some() {
            return Err(invalid(loc, format!("duplicate declaration of {n}")));
        }
    }
    let sub_names: BTreeSet<&str> = b.subqueries.iter().map(|s| s.0.as_str()).collect();
    if sub_names.len() != b.subqueries.len() {
        return Err(invalid(loc, "duplicate subquery name".into()));
    }
    for r in &b.rules {
        let h = &r.head.pred;
        if h != HIT && !p.edb.contains_key(h) && !sub_names.contains(h.as_str()) {
            p.idb.entry(h.clone()).or_insert(r.head.args.len());
        }
    }
    let bodies = b.rules.iter().flat_map(|r| r.body.iter()).chain(b.queries.iter().flat_map(|q| q.body.iter()));
    for a in bodies {
        let n = &a.pred;
        if n == HIT || p.idb.contains_key(n) || p.edb.contains_key(n) || sub_names.contains(n.as_str()) {
            continue;
        }
        let k = inherited.get(n).copied().unwrap_or(a.args.len());
        p.edb.insert(n.clone(), k);
    }
    let mut visible = inherited.clone();
    visible.extend(p.edb.iter().map(|(k, v)| (k.clone(), *v)));
    for (name, arity, inner) in b.subqueries {
        let sq = resolve(inner, &visible, &format!("{loc}subquery {name}: "))?;
        if sq.answer_arity() != arity {
            return Err(invalid(
                loc,
                format!("arity mismatch: subquery {name} declared /{arity} but answers {}", sq.answer_arity()),
            ));
        }
        p.subqueries.insert(name, sq);
    }
    p.rules = b.rules;
    let q = match (b.fcq, b.queries.len()) {
        (Some(_), n) if n > 0 => return Err(invalid(loc, "both fcq and query directives".into())),
        (Some((arity, free)), _) => QueryForm::Fcq { program: p, arity, free },
        (None, 0) => return Err(invalid(loc, "missing fcq or query directive".into())),
        (None, 1) if !p.rules.is_empty() || !p.idb.is_empty() || !p.subqueries.is_empty() => {
            let goal = b.queries.into_iter().next().expect("one query");
            QueryForm::Datalog { program: p, goal }
        }
        (None, _) if p.rules.is_empty() && p.idb.is_empty() && p.subqueries.is_empty() => {
            QueryForm::Ucq { edb: p.edb, disjuncts: b.queries }
        }
        (None, _) => return Err(invalid(loc, "several query directives with rules".into())),
    };
    Ok(q)
}

/// Arity mismatches against declarations, reported before any other check.
fn arity_precheck(b: &RawBlock) -> Result<(), ParseError> {
    let mut decl: BTreeMap<&str, usize> = BTreeMap::new();
    for (n, k) in b.edb.iter().chain(b.idb.iter()) {
        decl.insert(n, *k);
    }
    let atoms = b
        .rules
        .iter()
        .flat_map(|r| std::iter::once(&r.head).chain(r.body.iter()))
        .chain(b.queries.iter().flat_map(|q| q.body.iter()));
    for a in atoms {
        if let Some(&k) = decl.get(a.pred.as_str()) {
            if k != a.args.len() {
                return Err(invalid(
                    "program",
                    format!("arity mismatch: {} declared with arity {k}, used with {}", a.pred, a.args.len()),
                ));
            }
        }
    }
    Ok(())
}

/// Parses a `.dlq` query file.
pub fn parse_query(text: &str) -> Result<QueryForm, ParseError> {
    let mut p = Parser::new(text)?;
    let b = p.block(false)?;
    arity_precheck(&b)?;
    let q = resolve(b, &BTreeMap::new(), "")?;
    let errs = validate(&q);
    if errs.is_empty() {
        Ok(q)
    } else {
        Err(ParseError::Invalid(errs))
    }
}

/// Parses a `.db` instance file.
pub fn parse_instance(text: &str) -> Result<DatabaseInstance, ParseError> {
    parse_instance_impl(text, None)
}

/// Parses an instance and checks every fact against an EDB signature.
pub fn parse_instance_with_schema(
    text: &str,
    schema: &BTreeMap<String, usize>,
) -> Result<DatabaseInstance, ParseError> {
    parse_instance_impl(text, Some(schema))
}

fn parse_instance_impl(
    text: &str,
    schema: Option<&BTreeMap<String, usize>>,
) -> Result<DatabaseInstance, ParseError> {
    let mut p = Parser::new(text)?;
    let start_errors = |p: &Parser, m: &str| -> ParseError {
        let s = &p.toks[p.pos];
        ParseError::Syntax { line: s.line, col: s.col, message: m.to_string() }
    };
    let mut inst = DatabaseInstance::new();
    let mut arity: BTreeMap<String, usize> = BTreeMap::new();
    loop {
        if *p.peek() == Tok::Eof {
            break;
        }
        let line = p.toks[p.pos].line;
        if p.is_keyword_here("domain") {
            p.next();
            loop {
                match p.term()? {
                    Term::Const(c) => {
                        inst.domain.insert(c);
                    }
                    _ => return Err(start_errors(&p, "domain elements must be constants")),
                }
                match p.next() {
                    Tok::Comma => continue,
                    Tok::Dot => break,
                    _ => return Err(start_errors(&p, "expected ',' or '.'")),
                }
            }
            continue;
        }
        let a = p.atom()?;
        p.expect(Tok::Dot, "'.'")?;
        let loc = format!("line {line}");
        let mut tuple = Vec::new();
        for t in &a.args {
            match t {
                Term::Const(c) => tuple.push(c.clone()),
                _ => return Err(invalid(&loc, "variables not allowed in facts".into())),
            }
        }
        if let Some(s) = schema {
            match s.get(&a.pred) {
                None => return Err(invalid(&loc, format!("unknown predicate {}", a.pred))),
                Some(&k) if k != tuple.len() => {
                    return Err(invalid(&loc, format!("arity mismatch: {} has arity {k}", a.pred)))
                }
                _ => {}
            }
        }
        match arity.get(&a.pred) {
            Some(&k) if k != tuple.len() => {
                return Err(invalid(&loc, format!("arity mismatch: {} used with arity {k} and {}", a.pred, tuple.len())))
            }
            _ => {
                arity.insert(a.pred.clone(), tuple.len());
            }
        }
        inst.insert(&a.pred, tuple);
    }
    Ok(inst)
}

/// Parses a single term in `.dlq` syntax.
pub fn parse_term(text: &str) -> Result<Term, ParseError> {
    let mut p = Parser::new(text)?;
    let t = p.term()?;
    p.expect(Tok::Eof, "end of input")?;
    Ok(t)
}

/// Parses a single atom in `.dlq` syntax.
pub fn parse_atom(text: &str) -> Result<Atom, ParseError> {
    let mut p = Parser::new(text)?;
    let a = p.atom()?;
    p.expect(Tok::Eof, "end of input")?;
    Ok(a)
}

fn write_decls(out: &mut String, pad: &str, kw: &str, m: &BTreeMap<String, usize>) {
    if m.is_empty() {
        return;
    }
    let items: Vec<String> = m.iter().map(|(n, k)| format!("{n}/{k}")).collect();
    let _ = writeln!(out, "{pad}{kw} {}.", items.join(", "));
}

fn write_cq(out: &mut String, pad: &str, cq: &Cq) {
    let body: Vec<String> = cq.body.iter().map(ToString::to_string).collect();
    let head = Atom { pred: QUERY.into(), args: cq.head.clone() };
    let _ = writeln!(out, "{pad}{head} :- {}.", body.join(", "));
}

fn write_query(out: &mut String, depth: usize, q: &QueryForm) {
    let pad = "  ".repeat(depth);
    let program = match q {
        QueryForm::Ucq { edb, disjuncts } => {
            write_decls(out, &pad, "edb", edb);
            for d in disjuncts {
                write_cq(out, &pad, d);
            }
            return;
        }
        QueryForm::Datalog { program, .. } | QueryForm::Fcq { program, .. } => program,
    };
    write_decls(out, &pad, "edb", &program.edb);
    write_decls(out, &pad, "idb", &program.idb);
    for (name, sq) in &program.subqueries {
        let _ = writeln!(out, "{pad}subquery {name}/{} {{", sq.answer_arity());
        write_query(out, depth + 1, sq);
        let _ = writeln!(out, "{pad}}}");
    }
    for r in &program.rules {
        let _ = writeln!(out, "{pad}{r}");
    }
    match q {
        QueryForm::Datalog { goal, .. } => write_cq(out, &pad, goal),
        QueryForm::Fcq { arity, free, .. } => {
            let fr: Vec<String> = free.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "{pad}fcq arity {arity} free {}.", fr.join(","));
        }
        QueryForm::Ucq { .. } => unreachable!(),
    }
}

/// Serializes a query in `.dlq` syntax; [`parse_query`] inverts it.
pub fn serialize_query(q: &QueryForm) -> String {
    let mut out = String::new();
    write_query(&mut out, 0, q);
    out
}

/// Serializes an instance in `.db` syntax; [`parse_instance`] inverts it.
pub fn serialize_instance(i: &DatabaseInstance) -> String {
    let mut out = String::new();
    let mut used = BTreeSet::new();
    for (p, t) in i.facts() {
        used.extend(t.iter().cloned());
        let a = Atom { pred: p.to_string(), args: t.iter().map(|c| Term::Const(c.clone())).collect() };
        let _ = writeln!(out, "{a}.");
    }
    let isolated: Vec<&String> = i.domain.iter().filter(|d| !used.contains(*d)).collect();
    if !isolated.is_empty() {
        let items: Vec<&str> = isolated.iter().map(|s| s.as_str()).collect();
        let _ = writeln!(out, "domain {}.", items.join(", "));
    }
    out
}

/// True iff `name` can be written as a predicate name.
pub fn is_predicate_name(name: &str) -> bool {
    let mut cs = name.chars();
    matches!(cs.next(), Some(c) if c.is_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_alphanumeric() || c == '_')
        && !KEYWORDS.contains(&name)
        && name != HIT
}

#[derive(Serialize, Deserialize)]
struct JsonAtom {
    pred: String,
    args: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct JsonLabel {
    head: JsonAtom,
    body: Vec<JsonAtom>,
}

#[derive(Serialize, Deserialize)]
struct JsonNode {
    label: JsonLabel,
    children: Vec<JsonNode>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    lambda_labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_label: Option<JsonAtom>,
}

#[derive(Serialize, Deserialize)]
struct JsonVerdict {
    verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    proof_tree: Option<JsonNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instance: Option<Vec<JsonAtom>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda: Option<BTreeMap<String, String>>,
}

fn atom_to_json(a: &Atom) -> JsonAtom {
    JsonAtom { pred: a.pred.clone(), args: a.args.iter().map(ToString::to_string).collect() }
}

fn atom_from_json(a: &JsonAtom) -> Result<Atom, ParseError> {
    let args = a.args.iter().map(|s| parse_term(s)).collect::<Result<_, _>>()?;
    Ok(Atom { pred: a.pred.clone(), args })
}

fn tree_to_json(t: &ProofTree) -> JsonNode {
    JsonNode {
        label: JsonLabel { head: atom_to_json(&t.head), body: t.body.iter().map(atom_to_json).collect() },
        children: t.children.iter().map(tree_to_json).collect(),
        lambda_labels: t.lambda.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        p_label: t.p_label.as_ref().map(atom_to_json),
    }
}

fn tree_from_json(n: &JsonNode) -> Result<ProofTree, ParseError> {
    let mut lambda = BTreeMap::new();
    for (k, v) in &n.lambda_labels {
        let k: usize = k.parse().map_err(|_| ParseError::Json(format!("bad λ index {k}")))?;
        lambda.insert(k, parse_term(v)?);
    }
    Ok(ProofTree {
        head: atom_from_json(&n.label.head)?,
        body: n.label.body.iter().map(atom_from_json).collect::<Result<_, _>>()?,
        children: n.children.iter().map(tree_from_json).collect::<Result<_, _>>()?,
        lambda,
        p_label: n.p_label.as_ref().map(atom_from_json).transpose()?,
    })
}

/// JSON encoding of a proof tree.
pub fn proof_tree_to_json(t: &ProofTree) -> serde_json::Value {
    serde_json::to_value(tree_to_json(t)).expect("serializable")
}

/// JSON encoding of a verdict; `NotContained` carries the witness keys
/// `proof_tree`, `instance`, `answer` and `lambda`.
pub fn serialize_verdict(v: &Verdict) -> String {
    let j = match v {
        Verdict::Contained => JsonVerdict {
            verdict: "contained".into(),
            depth: None,
            proof_tree: None,
            instance: None,
            answer: None,
            lambda: None,
        },
        Verdict::Inconclusive { depth } => JsonVerdict {
            verdict: "inconclusive".into(),
            depth: Some(*depth),
            proof_tree: None,
            instance: None,
            answer: None,
            lambda: None,
        },
        Verdict::NotContained(w) => JsonVerdict {
            verdict: "not_contained".into(),
            depth: None,
            proof_tree: Some(tree_to_json(&w.proof_tree)),
            instance: Some(
                w.instance
                    .facts()
                    .map(|(p, t)| JsonAtom { pred: p.to_string(), args: t.clone() })
                    .collect(),
            ),
            answer: Some(w.answer.clone()),
            lambda: Some(w.lambda.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()),
        },
    };
    serde_json::to_string_pretty(&j).expect("serializable")
}

/// Inverse of [`serialize_verdict`].
pub fn parse_verdict(text: &str) -> Result<Verdict, ParseError> {
    let j: JsonVerdict = serde_json::from_str(text).map_err(|e| ParseError::Json(e.to_string()))?;
    match j.verdict.as_str() {
        "contained" => Ok(Verdict::Contained),
        "inconclusive" => Ok(Verdict::Inconclusive { depth: j.depth.unwrap_or(0) }),
        "not_contained" => {
            let missing = |k: &str| ParseError::Json(format!("missing key {k}"));
            let tree = tree_from_json(j.proof_tree.as_ref().ok_or_else(|| missing("proof_tree"))?)?;
            let mut instance = DatabaseInstance::new();
            for a in j.instance.ok_or_else(|| missing("instance"))? {
                instance.insert(&a.pred, a.args);
            }
            let answer = j.answer.ok_or_else(|| missing("answer"))?;
            instance.domain.extend(answer.iter().cloned());
            let mut lambda = BTreeMap::new();
            for (k, v) in j.lambda.unwrap_or_default() {
                let k: usize = k.parse().map_err(|_| ParseError::Json(format!("bad λ index {k}")))?;
                instance.domain.insert(v.clone());
                lambda.insert(k, v);
            }
            Ok(Verdict::NotContained(Box::new(Witness { proof_tree: tree, instance, answer, lambda })))
        }
        other => Err(ParseError::Json(format!("unknown verdict {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QueryKind;

    const EX1: &str = "U(Y) :- p(@1,Y). U(Z) :- U(Y), p(Y,Z). hit :- U(@2). fcq arity 2 free 1,2.";

    #[test]
    fn example_one_is_fcq() {
        let q = parse_query(EX1).unwrap();
        assert_eq!(q.kind(), QueryKind::Fcq);
        assert_eq!(q.answer_arity(), 2);
        let QueryForm::Fcq { program, .. } = &q else { panic!() };
        assert_eq!(program.edb.get("p"), Some(&2));
        assert_eq!(program.idb.get("U"), Some(&1));
    }

    #[test]
    fn datalog_goal() {
        let q = parse_query("tc(X,Y) :- e(X,Y). tc(X,Z) :- tc(X,Y), e(Y,Z). query(X,Z) :- tc(X,Y), tc(Y,Z).")
            .unwrap();
        assert_eq!(q.kind(), QueryKind::Datalog);
        assert_eq!(q.answer_arity(), 2);
    }

    #[test]
    fn arity_mismatch_rejected() {
        let e = parse_query("edb p/2. U(X) :- p(X,Y,Z).").unwrap_err();
        assert!(e.to_string().contains("arity mismatch"), "{e}");
    }

    #[test]
    fn syntax_error_has_location() {
        let e = parse_query("U(X) :- p(X\n,,Y). fcq arity 0.").unwrap_err();
        assert!(matches!(e, ParseError::Syntax { line: 2, .. }), "{e:?}");
    }

    #[test]
    fn duplicate_declaration() {
        assert!(parse_query("edb p/2. edb p/2. query(X) :- p(X,Y).").is_err());
    }

    #[test]
    fn example_two_instance() {
        let i = parse_instance("q(a,b). p(a,c). p(b,e). q(c,e). p(a,e1). p(b,d). q(e1,d).").unwrap();
        assert_eq!(i.fact_count(), 7);
        let dom: Vec<&str> = i.domain.iter().map(String::as_str).collect();
        assert_eq!(dom, ["a", "b", "c", "d", "e", "e1"]);
        assert_eq!(parse_instance(&serialize_instance(&i)).unwrap(), i);
    }

    #[test]
    fn empty_and_nonground_instances() {
        assert_eq!(parse_instance("").unwrap(), DatabaseInstance::new());
        let e = parse_instance("p(X,b).").unwrap_err();
        assert!(e.to_string().contains("variables not allowed in facts"));
        let mut s = BTreeMap::new();
        s.insert("p".to_string(), 2);
        let e = parse_instance_with_schema("r(a).", &s).unwrap_err();
        assert!(e.to_string().contains("unknown predicate"));
    }

    #[test]
    fn example_one_round_trip() {
        let q = parse_query(EX1).unwrap();
        assert_eq!(parse_query(&serialize_query(&q)).unwrap(), q);
    }

    #[test]
    fn nested_round_trip() {
        let text = "edb e/2, f/1.\n\
                    subquery Reach/2 { T(X,Y) :- e(X,Y). T(X,Z) :- T(X,Y), e(Y,Z). query(X,Y) :- T(X,Y). }\n\
                    hit :- e(@1,Y), Reach(Y,@2), f(@2).\n\
                    fcq arity 2 free 1,2.";
        let q = parse_query(text).unwrap();
        assert_eq!(q.kind(), QueryKind::NestedFcq);
        let s = serialize_query(&q);
        assert_eq!(parse_query(&s).unwrap(), q, "{s}");
    }

    #[test]
    fn ucq_of_several_queries() {
        let q = parse_query("query(X) :- p(X,Y). query(X) :- q(X).").unwrap();
        assert_eq!(q.kind(), QueryKind::Ucq);
        assert_eq!(parse_query(&serialize_query(&q)).unwrap(), q);
    }

    #[test]
    fn verdict_json_keys_and_round_trip() {
        let child = ProofTree::leaf(
            Atom::new("tc", vec![Term::var("V1"), Term::var("V2")]),
            vec![Atom::new("p", vec![Term::var("V1"), Term::var("V2")])],
        );
        let mut root = ProofTree::leaf(
            Atom::new("tc", vec![Term::var("V1"), Term::var("V3")]),
            vec![
                Atom::new("tc", vec![Term::var("V1"), Term::var("V2")]),
                Atom::new("p", vec![Term::var("V2"), Term::var("V3")]),
            ],
        );
        root.children.push(child);
        let mut inst = DatabaseInstance::new();
        inst.insert("p", vec!["a".into(), "b".into()]);
        inst.insert("p", vec!["b".into(), "c".into()]);
        let v = Verdict::NotContained(Box::new(Witness {
            proof_tree: root,
            instance: inst,
            answer: vec!["a".into(), "c".into()],
            lambda: BTreeMap::new(),
        }));
        let s = serialize_verdict(&v);
        let j: serde_json::Value = serde_json::from_str(&s).unwrap();
        for k in ["proof_tree", "instance", "answer"] {
            assert!(j.get(k).is_some(), "missing {k}");
        }
        assert_eq!(parse_verdict(&s).unwrap(), v);
    }
}
