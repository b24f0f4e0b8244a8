//! Hard-instance families built from alternating Turing machines: a
//! bit-counter Datalog program whose models look like configuration trees,
//! queries that reject malformed counters and malformed runs, and a direct
//! simulator for ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{validate, Atom, Level, QueryForm, Term};
use crate::parser::parse_query;
use crate::rewrites::combine_or;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AtmError {
    #[error("machine file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid machine: {0}")]
    InvalidMachine(String),
    #[error("space {0} exceeds the simulator cap of {1}")]
    SpaceCap(usize, usize),
    #[error("generated query is invalid: {0}")]
    Generated(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Move {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Transition {
    pub from: String,
    pub read: String,
    pub to: String,
    pub write: String,
    pub dir: Move,
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.dir {
            Move::Left => "left",
            Move::Right => "right",
        };
        write!(f, "{} {} -> {} {} {d}", self.from, self.read, self.to, self.write)
    }
}

/// An alternating Turing machine.  The blank symbol is `_`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtmSpec {
    pub states: Vec<String>,
    pub universal: BTreeSet<String>,
    pub sigma: Vec<String>,
    pub transitions: Vec<Transition>,
    pub start: String,
    pub accept: String,
}

pub const BLANK: &str = "_";

impl AtmSpec {
    pub fn is_universal(&self, q: &str) -> bool {
        self.universal.contains(q)
    }

    fn applicable<'a>(&'a self, q: &'a str, s: &'a str) -> impl Iterator<Item = &'a Transition> + 'a {
        self.transitions.iter().filter(move |t| t.from == q && t.read == s)
    }

    /// Checks names and the two-successor condition on universal states.
    pub fn validate(&self) -> Result<(), AtmError> {
        let bad = |m: String| Err(AtmError::InvalidMachine(m));
        let states: BTreeSet<&String> = self.states.iter().collect();
        let sigma: BTreeSet<&String> = self.sigma.iter().collect();
        if states.len() != self.states.len() || sigma.len() != self.sigma.len() {
            return bad("duplicate state or symbol".into());
        }
        if !sigma.contains(&BLANK.to_string()) {
            return bad("the alphabet must contain the blank _".into());
        }
        for q in [&self.start, &self.accept].into_iter().chain(self.universal.iter()) {
            if !states.contains(q) {
                return bad(format!("unknown state {q}"));
            }
        }
        for q in &self.states {
            if !is_name(q) {
                return bad(format!("state name {q} is not an identifier"));
            }
        }
        for s in &self.sigma {
            if s != BLANK && !is_name(s) {
                return bad(format!("symbol {s} is not an identifier"));
            }
        }
        let mut seen = BTreeSet::new();
        for t in &self.transitions {
            if !states.contains(&t.from) || !states.contains(&t.to) {
                return bad(format!("transition {t} uses an unknown state"));
            }
            if !sigma.contains(&t.read) || !sigma.contains(&t.write) {
                return bad(format!("transition {t} uses an unknown symbol"));
            }
            if !seen.insert(t) {
                return bad(format!("duplicate transition {t}"));
            }
        }
        for q in self.universal.iter().filter(|q| **q != self.accept) {
            for s in &self.sigma {
                let n = self.applicable(q, s).count();
                if n != 2 {
                    return bad(format!("universal state {q} has {n} transitions on {s}, expected 2"));
                }
            }
        }
        Ok(())
    }
}

fn is_name(s: &str) -> bool {
    let mut cs = s.chars();
    matches!(cs.next(), Some(c) if c.is_ascii_alphabetic()) && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl FromStr for AtmSpec {
    type Err = AtmError;

    /// Reads the `.tm` format: `;`-terminated statements `states …`,
    /// `exists …`, `forall …`, `sigma …`, `start q`, `accept q` and
    /// `delta q a -> q' b left|right`.  `#` starts a comment.
    fn from_str(text: &str) -> Result<AtmSpec, AtmError> {
        let mut m = AtmSpec {
            states: Vec::new(),
            universal: BTreeSet::new(),
            sigma: Vec::new(),
            transitions: Vec::new(),
            start: String::new(),
            accept: String::new(),
        };
        let mut existential: BTreeSet<String> = BTreeSet::new();
        let cleaned: String = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .collect::<Vec<_>>()
            .join("\n");
        let mut line = 1;
        for stmt in cleaned.split(';') {
            let here = line;
            line += stmt.matches('\n').count();
            let words: Vec<&str> = stmt.split_whitespace().collect();
            let lead = stmt.len() - stmt.trim_start().len();
            let at = here + stmt[..lead].matches('\n').count();
            let err = |msg: &str| AtmError::Parse { line: at, msg: msg.to_string() };
            let Some((&kw, rest)) = words.split_first() else { continue };
            let one = |rest: &[&str]| -> Result<String, AtmError> {
                match rest {
                    [x] => Ok(x.to_string()),
                    _ => Err(err(&format!("{kw} takes exactly one state"))),
                }
            };
            match kw {
                "states" => m.states.extend(rest.iter().map(|s| s.to_string())),
                "exists" => existential.extend(rest.iter().map(|s| s.to_string())),
                "forall" => m.universal.extend(rest.iter().map(|s| s.to_string())),
                "sigma" => m.sigma.extend(rest.iter().map(|s| s.to_string())),
                "start" => m.start = one(rest)?,
                "accept" => m.accept = one(rest)?,
                "delta" => {
                    let [from, read, "->", to, write, dir] = rest else {
                        return Err(err("expected: delta q a -> q' b left|right"));
                    };
                    let dir = match *dir {
                        "left" | "l" | "L" => Move::Left,
                        "right" | "r" | "R" => Move::Right,
                        _ => return Err(err(&format!("unknown direction {dir}"))),
                    };
                    m.transitions.push(Transition {
                        from: from.to_string(),
                        read: read.to_string(),
                        to: to.to_string(),
                        write: write.to_string(),
                        dir,
                    });
                }
                _ => return Err(err(&format!("unknown statement {kw}"))),
            }
        }
        if let Some(q) = existential.intersection(&m.universal).next() {
            return Err(AtmError::InvalidMachine(format!("state {q} is both existential and universal")));
        }
        if m.start.is_empty() || m.accept.is_empty() {
            return Err(AtmError::InvalidMachine("start and accept states are required".into()));
        }
        m.validate()?;
        Ok(m)
    }
}

impl fmt::Display for AtmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ex: Vec<&str> = self.states.iter().filter(|q| !self.is_universal(q)).map(String::as_str).collect();
        let un: Vec<&str> = self.universal.iter().map(String::as_str).collect();
        writeln!(f, "states {};", self.states.join(" "))?;
        writeln!(f, "exists {};", ex.join(" "))?;
        writeln!(f, "forall {};", un.join(" "))?;
        writeln!(f, "sigma {};", self.sigma.join(" "))?;
        writeln!(f, "start {};", self.start)?;
        writeln!(f, "accept {};", self.accept)?;
        for t in &self.transitions {
            writeln!(f, "delta {t};")?;
        }
        Ok(())
    }
}

// ------------------------------------------------------------ simulation

/// Largest tape the simulator accepts.
pub const MAX_SPACE: usize = 8;

/// Whether the machine has an accepting run on the blank tape of length
/// `space`.  At the tape ends a move that would leave the tape keeps the
/// head in place.
pub fn simulate_atm(m: &AtmSpec, space: usize) -> Result<bool, AtmError> {
    if space == 0 || space > MAX_SPACE {
        return Err(AtmError::SpaceCap(space, MAX_SPACE));
    }
    m.validate()?;
    type Conf = (String, Vec<String>, usize);
    let start: Conf = (m.start.clone(), vec![BLANK.to_string(); space], 0);
    let mut ids: BTreeMap<Conf, usize> = BTreeMap::new();
    let mut confs: Vec<Conf> = Vec::new();
    let mut succ: Vec<Vec<usize>> = Vec::new();
    let mut todo = vec![start.clone()];
    ids.insert(start.clone(), 0);
    confs.push(start);
    while let Some(c) = todo.pop() {
        let id = ids[&c];
        let (q, tape, pos) = &c;
        let mut out = Vec::new();
        for t in m.applicable(q, &tape[*pos]) {
            let mut nt = tape.clone();
            nt[*pos] = t.write.clone();
            let np = match t.dir {
                Move::Left => pos.saturating_sub(1),
                Move::Right => (*pos + 1).min(space - 1),
            };
            let n: Conf = (t.to.clone(), nt, np);
            let nid = *ids.entry(n.clone()).or_insert_with(|| {
                confs.push(n.clone());
                todo.push(n);
                confs.len() - 1
            });
            out.push(nid);
        }
        if succ.len() <= id {
            succ.resize(id + 1, Vec::new());
        }
        succ[id] = out;
    }
    succ.resize(confs.len(), Vec::new());
    let mut acc = vec![false; confs.len()];
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..confs.len() {
            if acc[i] {
                continue;
            }
            let (q, _, _) = &confs[i];
            let good = *q == m.accept
                || if m.is_universal(q) {
                    !succ[i].is_empty() && succ[i].iter().all(|&j| acc[j])
                } else {
                    succ[i].iter().any(|&j| acc[j])
                };
            if good {
                acc[i] = true;
                changed = true;
            }
        }
    }
    Ok(acc[0])
}

// ------------------------------------------------------------- encodings

/// How cell addresses are asserted by the counter program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AddressBits {
    /// The rule schema as usually printed: bit rules for `i ∈ 2..=ℓ`, which
    /// never assert `bit_ℓ`.
    #[default]
    Printed,
    /// Bit rules for `i ∈ 2..=ℓ+1`, so every cell carries all ℓ bits.
    Complete,
}

/// Queries produced for one machine and address width.
#[derive(Debug, Clone)]
pub struct EncodingBundle {
    pub address_bits: usize,
    pub bits: AddressBits,
    /// Unary monadic Datalog query over configuration-tree shapes.
    pub lhs: QueryForm,
    /// Unary UCQ matching every configuration tree whose cell addresses do
    /// not count from `0…0` to `1…1`.
    pub rhs_counter: QueryForm,
    /// Component queries by name (`ConfCell`, `SameCell`, `NextConf_d1`, …).
    pub components: BTreeMap<String, QueryForm>,
    edb: BTreeMap<String, usize>,
}

pub fn state_pred(q: &str) -> String {
    format!("state_{q}")
}

pub fn next_conf_pred(k: usize) -> String {
    format!("nextConf_d{}", k + 1)
}

pub fn symbol_const(s: &str) -> String {
    if s == BLANK {
        "c_blank".into()
    } else {
        format!("c_{s}")
    }
}

pub fn bit_pred(i: usize) -> String {
    format!("bit{i}")
}

fn signature(m: &AtmSpec, l: usize) -> BTreeMap<String, usize> {
    let mut edb = BTreeMap::new();
    for p in ["firstConf", "firstCell", "nextCell", "symbol", "head"] {
        edb.insert(p.to_string(), 2);
    }
    edb.insert("lastConf".to_string(), 1);
    for k in 0..m.transitions.len() {
        edb.insert(next_conf_pred(k), 2);
    }
    for i in 1..=l {
        edb.insert(bit_pred(i), 2);
    }
    for q in &m.states {
        edb.insert(state_pred(q), 1);
    }
    edb
}

fn edb_decl(edb: &BTreeMap<String, usize>) -> String {
    let parts: Vec<String> = edb.iter().map(|(p, k)| format!("{p}/{k}")).collect();
    format!("edb {}.", parts.join(", "))
}

fn parse_generated(text: &str) -> Result<QueryForm, AtmError> {
    let q = parse_query(text).map_err(|e| AtmError::Generated(format!("{e}\n{text}")))?;
    if let Some(d) = validate(&q).into_iter().find(|d| d.level == Level::Error) {
        return Err(AtmError::Generated(format!("{}: {}", d.location, d.message)));
    }
    Ok(q)
}

/// Rules of the counter program, one string per rule.
fn counter_rules(m: &AtmSpec, l: usize, bits: AddressBits) -> Vec<String> {
    let top = match bits {
        AddressBits::Printed => l,
        AddressBits::Complete => l + 1,
    };
    let mut rules = vec!["U_goal(X) :- firstConf(X,Y), U_conf(Y).".to_string()];
    for q in &m.states {
        rules.push(format!("U_conf(X) :- {}(X), firstCell(X,Y), U_bit1(Y).", state_pred(q)));
    }
    for i in 2..=top {
        for v in 0..2 {
            rules.push(format!("U_bit{}(X) :- {}(X,{v}), U_bit{i}(X).", i - 1, bit_pred(i - 1)));
        }
    }
    for s in &m.sigma {
        rules.push(format!("U_bit{top}(X) :- symbol(X,{}), U_symbol(X).", symbol_const(s)));
    }
    for p in ["h", "r", "l"] {
        rules.push(format!("U_symbol(X) :- head(X,{p}), U_head(X)."));
    }
    rules.push("U_head(X) :- nextCell(X,Y), U_bit1(Y).".to_string());
    for (k, t) in m.transitions.iter().enumerate() {
        if !m.is_universal(&t.from) {
            rules.push(format!("U_head(X) :- {}(X,Y), U_conf(Y).", next_conf_pred(k)));
        }
    }
    for (k1, t1) in m.transitions.iter().enumerate() {
        for (k2, t2) in m.transitions.iter().enumerate().skip(k1 + 1) {
            if m.is_universal(&t1.from) && t1.from == t2.from {
                rules.push(format!(
                    "U_head(X) :- {}(X,Y1), U_conf(Y1), {}(X,Y2), U_conf(Y2).",
                    next_conf_pred(k1),
                    next_conf_pred(k2)
                ));
            }
        }
    }
    rules.push("U_head(X) :- lastConf(X).".to_string());
    rules
}

/// Bodies (over variable `Y`, the violating cell, and `Z`, its successor)
/// of the address-counter violations.
fn counter_violations(m: &AtmSpec, l: usize) -> Vec<String> {
    let b = |i: usize, x: &str, v: u8| format!("{}({x},{v})", bit_pred(i));
    let mut out = Vec::new();
    for i in 1..=l {
        // Bit i is the rightmost 0 of Y.
        let mut pre: Vec<String> = vec![b(i, "Y", 0)];
        pre.extend((i + 1..=l).map(|j| b(j, "Y", 1)));
        pre.push("nextCell(Y,Z)".into());
        let base = pre.join(", ");
        out.push(format!("{base}, {}", b(i, "Z", 0)));
        for j in i + 1..=l {
            out.push(format!("{base}, {}", b(j, "Z", 1)));
        }
        for j in 1..i {
            for v in 0..2u8 {
                out.push(format!("{base}, {}, {}", b(j, "Y", v), b(j, "Z", 1 - v)));
            }
        }
    }
    // An all-one cell must be the last cell of its configuration.
    let ones: Vec<String> = (1..=l).map(|j| b(j, "Y", 1)).collect();
    out.push(format!("{}, nextCell(Y,Z)", ones.join(", ")));
    for i in 1..=l {
        out.push(format!("firstCell(Z,Y), {}", b(i, "Y", 1)));
        out.push(format!("{}, lastConf(Y)", b(i, "Y", 0)));
        for k in 0..m.transitions.len() {
            out.push(format!("{}, {}(Y,Z)", b(i, "Y", 0), next_conf_pred(k)));
        }
    }
    out
}

fn conf_cell_text(m: &AtmSpec, edb: &BTreeMap<String, usize>) -> String {
    let mut s = edb_decl(edb);
    for q in &m.states {
        s.push_str(&format!(" U(Y) :- {}(@1), firstCell(@1,Y).", state_pred(q)));
    }
    s.push_str(" U(Z) :- U(Y), nextCell(Y,Z). hit :- U(@2). fcq arity 2 free 1,2.");
    s
}

fn same_cell_body(l: usize, x: &str, y: &str, tag: &str) -> String {
    (1..=l)
        .map(|i| format!("{b}({x},V{tag}{i}), {b}({y},V{tag}{i})", b = bit_pred(i)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Counter program, counter-violation UCQ and component queries for
/// machine `m` with `l` address bits (tapes of length `2^l`).
pub fn gen_counter_encoding(m: &AtmSpec, l: usize) -> Result<EncodingBundle, AtmError> {
    gen_counter_encoding_with(m, l, AddressBits::Printed)
}

pub fn gen_counter_encoding_with(m: &AtmSpec, l: usize, bits: AddressBits) -> Result<EncodingBundle, AtmError> {
    if l == 0 {
        return Err(AtmError::InvalidMachine("at least one address bit is needed".into()));
    }
    m.validate()?;
    let edb = signature(m, l);
    let decl = edb_decl(&edb);
    let lhs = parse_generated(&format!("{decl} {} query(X) :- U_goal(X).", counter_rules(m, l, bits).join(" ")))?;
    let ucq: Vec<String> =
        counter_violations(m, l).into_iter().map(|b| format!("query(X) :- firstConf(X,W), {b}.")).collect();
    let rhs_counter = parse_generated(&format!("{decl} {}", ucq.join(" ")))?;

    let mut components = BTreeMap::new();
    let conf_cell = conf_cell_text(m, &edb);
    let nested = |body: &str, arity: usize| {
        let free: Vec<String> = (1..=arity).map(|j| j.to_string()).collect();
        format!("{decl} subquery ConfCell/2 {{ {conf_cell} }} hit :- {body}. fcq arity {arity} free {}.", free.join(","))
    };
    let simple = |name: &str, head: &str, body: &str| (name.to_string(), format!("{decl} query({head}) :- {body}."));
    let mut texts = vec![
        simple("FirstConf", "X,Y", "firstConf(X,Y)"),
        simple("Head", "X,Y", "head(X,Y)"),
        simple("FirstCell", "X,Y", "firstCell(X,Y)"),
        simple("NextCell", "X,Y", "nextCell(X,Y)"),
        simple("Symbol", "X,Y", "symbol(X,Y)"),
        simple("SameCell", "X,Y", &same_cell_body(l, "X", "Y", "")),
        ("ConfCell".to_string(), conf_cell.clone()),
        ("LastConf".to_string(), nested("ConfCell(@1,Z), lastConf(Z)", 1)),
    ];
    let mut last_cell = vec!["query(X) :- lastConf(X).".to_string()];
    for k in 0..m.transitions.len() {
        last_cell.push(format!("query(X) :- {}(X,Z).", next_conf_pred(k)));
        texts.push((format!("NextConf_d{}", k + 1), nested(&format!("ConfCell(@1,Z), {}(Z,@2)", next_conf_pred(k)), 2)));
    }
    texts.push(("LastCell".to_string(), format!("{decl} {}", last_cell.join(" "))));
    for q in &m.states {
        texts.push((format!("State_{q}"), format!("{decl} query(X) :- {}(X).", state_pred(q))));
    }
    for (name, text) in texts {
        components.insert(name, parse_generated(&text)?);
    }
    Ok(EncodingBundle { address_bits: l, bits, lhs, rhs_counter, components, edb })
}

/// One instantiated pattern of the run checker.  `body` uses `@1` for the
/// answer element and `ConfCell` for the configuration-cell subquery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPattern {
    pub family: u8,
    pub body: Vec<Atom>,
}

/// Builder for pattern bodies that inlines the simple component queries.
struct Body {
    parts: Vec<String>,
    fresh: usize,
    l: usize,
}

impl Body {
    fn new(l: usize) -> Body {
        Body { parts: Vec::new(), fresh: 0, l }
    }

    fn var(&mut self) -> String {
        self.fresh += 1;
        format!("F{}", self.fresh)
    }

    fn add(mut self, a: impl Into<String>) -> Body {
        self.parts.push(a.into());
        self
    }

    fn next_conf(mut self, k: usize, x: &str, y: &str) -> Body {
        let z = self.var();
        self.add(format!("ConfCell({x},{z}), {}({z},{y})", next_conf_pred(k)))
    }

    fn last_conf(mut self, x: &str) -> Body {
        let z = self.var();
        self.add(format!("ConfCell({x},{z}), lastConf({z})"))
    }

    fn same_cell(mut self, x: &str, y: &str) -> Body {
        let tag = self.var();
        let s = same_cell_body(self.l, x, y, &tag);
        self.add(s)
    }
}

/// All instantiations of the six run-checker pattern families.
pub fn run_checker_patterns(bundle: &EncodingBundle, m: &AtmSpec) -> Result<Vec<RunPattern>, AtmError> {
    let l = bundle.address_bits;
    let mut out: Vec<(u8, Vec<Body>)> = Vec::new();
    let b = || Body::new(l);
    let sym = |s: &str| symbol_const(s);
    // (1) head markers.
    let mut f1 = Vec::new();
    for (p1, p2) in [("h", "h"), ("h", "l"), ("r", "h"), ("r", "l")] {
        f1.push(b().add(format!("head(Y,{p1}), nextCell(Y,Z), head(Z,{p2})")));
    }
    for p in ["r", "l"] {
        f1.push(b().add(format!("head(Y,h), head(Y,{p})")));
    }
    out.push((1, f1));
    // (2) start configuration.
    let mut f2 = Vec::new();
    for q in m.states.iter().filter(|q| **q != m.start) {
        f2.push(b().add(format!("firstConf(@1,Y), {}(Y)", state_pred(q))));
    }
    for p in ["l", "r"] {
        f2.push(b().add(format!("firstConf(@1,Y), firstCell(Y,Z), head(Z,{p})")));
    }
    for s in m.sigma.iter().filter(|s| *s != BLANK) {
        f2.push(b().add(format!("firstConf(@1,Y), ConfCell(Y,Z), symbol(Z,{})", sym(s))));
    }
    out.push((2, f2));
    // (3) transitions.
    let mut f3 = Vec::new();
    for (k, t) in m.transitions.iter().enumerate() {
        for q in &m.states {
            for s in &m.sigma {
                for q2 in &m.states {
                    for s2 in &m.sigma {
                        if t.from == *q && t.read == *s && t.to == *q2 && t.write == *s2 {
                            continue;
                        }
                        f3.push(
                            b().add(format!("{}(Y), head(Z,h), ConfCell(Y,Z), symbol(Z,{})", state_pred(q), sym(s)))
                                .next_conf(k, "Y", "Y2")
                                .add(format!("{}(Y2), ConfCell(Y2,Z2)", state_pred(q2)))
                                .same_cell("Z2", "Z")
                                .add(format!("symbol(Z2,{})", sym(s2))),
                        );
                    }
                }
            }
        }
    }
    out.push((3, f3));
    // (4) end state.
    let mut f4 = Vec::new();
    for q in m.states.iter().filter(|q| **q != m.accept) {
        f4.push(b().last_conf("Y").add(format!("{}(Y)", state_pred(q))));
    }
    out.push((4, f4));
    // (5) memory.
    let mut f5 = Vec::new();
    for k in 0..m.transitions.len() {
        for p in ["r", "l"] {
            for s in &m.sigma {
                for s2 in m.sigma.iter().filter(|s2| *s2 != s) {
                    f5.push(
                        b().add(format!("ConfCell(Y1,X1), head(X1,{p}), symbol(X1,{})", sym(s)))
                            .next_conf(k, "Y1", "Y2")
                            .add("ConfCell(Y2,X2)")
                            .same_cell("X1", "X2")
                            .add(format!("symbol(X2,{})", sym(s2))),
                    );
                }
            }
        }
    }
    out.push((5, f5));
    // (6) head movement.
    let mut f6 = Vec::new();
    for (k, t) in m.transitions.iter().enumerate() {
        for p in ["r", "l"] {
            let start = || {
                b().add("ConfCell(Y1,X1), head(X1,h)")
                    .next_conf(k, "Y1", "Y2")
                    .add("ConfCell(Y2,X2)")
                    .same_cell("X1", "X2")
            };
            match t.dir {
                Move::Right => {
                    f6.push(start().add(format!("nextCell(X2,X3), head(X3,{p})")));
                    f6.push(start().add(format!("lastConf(X2), head(X2,{p})")));
                    for k2 in 0..m.transitions.len() {
                        f6.push(start().add(format!("{}(X2,W), head(X2,{p})", next_conf_pred(k2))));
                    }
                }
                Move::Left => {
                    f6.push(start().add(format!("nextCell(X3,X2), head(X3,{p})")));
                    f6.push(start().add(format!("firstCell(W,X2), head(X2,{p})")));
                }
            }
        }
    }
    out.push((6, f6));

    let mut patterns = Vec::new();
    for (family, bodies) in out {
        for body in bodies {
            let mut text = body.parts.join(", ");
            if !text.contains("@1") {
                text.push_str(", firstConf(@1,XA)");
            }
            let q = parse_query(&format!("hit :- {text}. fcq arity 1 free 1."))
                .map_err(|e| AtmError::Generated(format!("{e}: {text}")))?;
            let atoms = q.program().expect("flag-and-check").rules[0].body.clone();
            patterns.push(RunPattern { family, body: atoms });
        }
    }
    Ok(patterns)
}

fn family_query(bundle: &EncodingBundle, conf_cell: &str, patterns: &[&RunPattern]) -> Result<QueryForm, AtmError> {
    let mut text = edb_decl(&bundle.edb);
    if patterns.iter().any(|p| p.body.iter().any(|a| a.pred == "ConfCell")) {
        text.push_str(&format!(" subquery ConfCell/2 {{ {conf_cell} }}"));
    }
    for p in patterns {
        let body: Vec<String> = p.body.iter().map(ToString::to_string).collect();
        text.push_str(&format!(" hit :- {}.", body.join(", ")));
    }
    text.push_str(" fcq arity 1 free 1.");
    parse_generated(&text)
}

/// Unary flag-and-check query matching the answer element of every
/// quasi-configuration tree that is not a run ending in the accept state.
/// Each pattern family becomes one query, and the families are joined with
/// [`combine_or`].
pub fn gen_run_checker(bundle: &EncodingBundle, m: &AtmSpec) -> Result<QueryForm, AtmError> {
    let patterns = run_checker_patterns(bundle, m)?;
    let conf_cell = conf_cell_text(m, &bundle.edb);
    let mut families = Vec::new();
    for f in 1..=6u8 {
        let ps: Vec<&RunPattern> = patterns.iter().filter(|p| p.family == f).collect();
        if !ps.is_empty() {
            families.push(family_query(bundle, &conf_cell, &ps)?);
        }
    }
    let (q, _) = combine_or(&families, None).map_err(|e| AtmError::Generated(e.to_string()))?;
    Ok(q)
}

/// Unary UCQ as a flag-and-check query with the answer variable as `@1`.
pub fn ucq_as_fcq(q: &QueryForm) -> Result<QueryForm, AtmError> {
    let QueryForm::Ucq { edb, disjuncts } = q else {
        return Err(AtmError::Generated("expected a UCQ".into()));
    };
    let mut text = edb_decl(edb);
    for d in disjuncts {
        let [Term::Var(x)] = d.head.as_slice() else {
            return Err(AtmError::Generated("expected a unary UCQ with a variable head".into()));
        };
        let body: Vec<String> = d
            .body
            .iter()
            .map(|a| {
                let args: Vec<Term> =
                    a.args.iter().map(|t| if t.as_var() == Some(x.as_str()) { Term::Lambda(1) } else { t.clone() }).collect();
                Atom { pred: a.pred.clone(), args }.to_string()
            })
            .collect();
        text.push_str(&format!(" hit :- {}.", body.join(", ")));
    }
    text.push_str(" fcq arity 1 free 1.");
    parse_generated(&text)
}

/// The full right-hand side: counter violations or run-checker matches.
pub fn gen_rhs(bundle: &EncodingBundle, m: &AtmSpec) -> Result<QueryForm, AtmError> {
    let counter = ucq_as_fcq(&bundle.rhs_counter)?;
    let checker = gen_run_checker(bundle, m)?;
    let (q, _) = combine_or(&[counter, checker], None).map_err(|e| AtmError::Generated(e.to_string()))?;
    Ok(q)
}

/// Number of steps of the unique run of a deterministic machine on the blank
/// tape, or `None` if the machine is alternating, loops or gets stuck
/// outside the accept state.
pub fn deterministic_run_length(m: &AtmSpec, space: usize) -> Option<usize> {
    if space == 0 || space > MAX_SPACE || !m.universal.is_empty() {
        return None;
    }
    let (mut q, mut tape, mut pos) = (m.start.clone(), vec![BLANK.to_string(); space], 0usize);
    let mut seen = BTreeSet::new();
    for steps in 0.. {
        if q == m.accept {
            return Some(steps);
        }
        if !seen.insert((q.clone(), tape.clone(), pos)) {
            return None;
        }
        let ts: Vec<Transition> = m.applicable(&q, &tape[pos]).cloned().collect();
        let [t] = ts.as_slice() else { return None };
        tape[pos] = t.write.clone();
        pos = match t.dir {
            Move::Left => pos.saturating_sub(1),
            Move::Right => (pos + 1).min(space - 1),
        };
        q = t.to.clone();
    }
    unreachable!()
}
