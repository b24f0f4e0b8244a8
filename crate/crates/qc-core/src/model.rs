//! Abstract syntax for Datalog programs, flag-and-check queries and their
//! nested variants, together with fragment classification and well-formedness
//! diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Reserved nullary head predicate of flag-and-check programs.
pub const HIT: &str = "hit";
/// Reserved head of the goal conjunctive query in program text.
pub const QUERY: &str = "query";

/// A term: variable, constant, or special constant `λ_k` (written `@k`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Var(String),
    Const(String),
    Lambda(usize),
}

impl Term {
    pub fn var(name: &str) -> Term {
        Term::Var(name.to_string())
    }

    pub fn cst(name: &str) -> Term {
        Term::Const(name.to_string())
    }

    pub fn is_var(&self) -> bool {
        matches!(self, Term::Var(_))
    }

    pub fn as_var(&self) -> Option<&str> {
        match self {
            Term::Var(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(v) | Term::Const(v) => write!(f, "{v}"),
            Term::Lambda(k) => write!(f, "@{k}"),
        }
    }
}

/// A predicate applied to a list of terms.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom {
    pub pred: String,
    pub args: Vec<Term>,
}

impl Atom {
    pub fn new(pred: &str, args: Vec<Term>) -> Atom {
        Atom { pred: pred.to_string(), args }
    }

    pub fn hit() -> Atom {
        Atom::new(HIT, Vec::new())
    }

    pub fn is_hit(&self) -> bool {
        self.pred == HIT
    }

    /// Variables in order of first occurrence.
    pub fn vars(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in &self.args {
            if let Term::Var(v) = t {
                if !out.contains(&v.as_str()) {
                    out.push(v);
                }
            }
        }
        out
    }

    pub fn lambdas(&self) -> impl Iterator<Item = usize> + '_ {
        self.args.iter().filter_map(|t| match t {
            Term::Lambda(k) => Some(*k),
            _ => None,
        })
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.args.is_empty() {
            return write!(f, "{}", self.pred);
        }
        write!(f, "{}(", self.pred)?;
        for (i, t) in self.args.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, ")")
    }
}

/// `head :- body`.  Body atoms whose predicate names a subquery of the
/// enclosing program are subquery atoms.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rule {
    pub head: Atom,
    pub body: Vec<Atom>,
}

impl Rule {
    pub fn new(head: Atom, body: Vec<Atom>) -> Rule {
        Rule { head, body }
    }

    /// All variables of the rule in order of first occurrence (head first).
    pub fn vars(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for a in std::iter::once(&self.head).chain(self.body.iter()) {
            for v in a.vars() {
                if !out.iter().any(|o| o == v) {
                    out.push(v.to_string());
                }
            }
        }
        out
    }

    pub fn body_vars(&self) -> BTreeSet<String> {
        self.body
            .iter()
            .flat_map(|a| a.vars().into_iter().map(str::to_string))
            .collect()
    }

    /// Head variables that do not occur in the body.
    pub fn unsafe_vars(&self) -> Vec<String> {
        let bv = self.body_vars();
        self.head
            .vars()
            .into_iter()
            .filter(|v| !bv.contains(*v))
            .map(str::to_string)
            .collect()
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} :- ", self.head)?;
        for (i, a) in self.body.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ".")
    }
}

/// A conjunctive query `query(head) :- body`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cq {
    pub head: Vec<Term>,
    pub body: Vec<Atom>,
}

impl Cq {
    pub fn vars(&self) -> Vec<String> {
        Rule::new(Atom { pred: QUERY.into(), args: self.head.clone() }, self.body.clone()).vars()
    }
}

/// Datalog program with explicit EDB/IDB declarations and named subqueries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Program {
    pub edb: BTreeMap<String, usize>,
    pub idb: BTreeMap<String, usize>,
    pub rules: Vec<Rule>,
    pub subqueries: BTreeMap<String, QueryForm>,
}

impl Program {
    pub fn is_idb(&self, pred: &str) -> bool {
        self.idb.contains_key(pred)
    }

    pub fn is_edb(&self, pred: &str) -> bool {
        self.edb.contains_key(pred)
    }

    pub fn is_subquery(&self, pred: &str) -> bool {
        self.subqueries.contains_key(pred)
    }

    /// Arity of any predicate visible in this program, `hit` included.
    pub fn arity(&self, pred: &str) -> Option<usize> {
        if pred == HIT {
            return Some(0);
        }
        self.edb
            .get(pred)
            .or_else(|| self.idb.get(pred))
            .copied()
            .or_else(|| self.subqueries.get(pred).map(QueryForm::answer_arity))
    }

    /// IDB or subquery atoms in a body; these are the atoms that count for linearity.
    pub fn derived_atoms<'a>(&'a self, rule: &'a Rule) -> impl Iterator<Item = &'a Atom> + 'a {
        rule.body
            .iter()
            .filter(move |a| self.is_idb(&a.pred) || self.is_subquery(&a.pred))
    }

    /// First EDB body atom containing every head variable, if any.
    pub fn guard_of<'a>(&self, rule: &'a Rule) -> Option<&'a Atom> {
        let hv = rule.head.vars();
        rule.body
            .iter()
            .find(|a| self.is_edb(&a.pred) && hv.iter().all(|v| a.vars().contains(v)))
    }

    pub fn max_lambda(&self) -> usize {
        self.rules
            .iter()
            .flat_map(|r| std::iter::once(&r.head).chain(r.body.iter()))
            .flat_map(|a| a.lambdas())
            .max()
            .unwrap_or(0)
    }

    pub fn uses_lambda(&self) -> bool {
        self.max_lambda() > 0
    }
}

/// The query forms handled by the library.  A flag-and-check query whose
/// program declares subqueries is a nested query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryForm {
    Datalog { program: Program, goal: Cq },
    Ucq { edb: BTreeMap<String, usize>, disjuncts: Vec<Cq> },
    Fcq { program: Program, arity: usize, free: Vec<usize> },
}

/// Coarse kind of a [`QueryForm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Datalog,
    Ucq,
    Fcq,
    NestedFcq,
}

impl QueryForm {
    pub fn kind(&self) -> QueryKind {
        match self {
            QueryForm::Datalog { .. } => QueryKind::Datalog,
            QueryForm::Ucq { .. } => QueryKind::Ucq,
            QueryForm::Fcq { program, .. } if program.subqueries.is_empty() => QueryKind::Fcq,
            QueryForm::Fcq { .. } => QueryKind::NestedFcq,
        }
    }

    /// Number of answer positions.
    pub fn answer_arity(&self) -> usize {
        match self {
            QueryForm::Datalog { goal, .. } => goal.head.len(),
            QueryForm::Ucq { disjuncts, .. } => disjuncts.first().map_or(0, |d| d.head.len()),
            QueryForm::Fcq { free, .. } => free.len(),
        }
    }

    pub fn program(&self) -> Option<&Program> {
        match self {
            QueryForm::Datalog { program, .. } | QueryForm::Fcq { program, .. } => Some(program),
            QueryForm::Ucq { .. } => None,
        }
    }

    /// EDB signature, including EDB predicates of nested subqueries.
    pub fn edb_signature(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        match self {
            QueryForm::Ucq { edb, .. } => out.extend(edb.clone()),
            QueryForm::Datalog { program, .. } | QueryForm::Fcq { program, .. } => {
                out.extend(program.edb.clone());
                for sq in program.subqueries.values() {
                    out.extend(sq.edb_signature());
                }
            }
        }
        out
    }

    /// Size measured as the total number of atoms (heads included).
    pub fn size(&self) -> usize {
        match self {
            QueryForm::Ucq { disjuncts, .. } => disjuncts.iter().map(|d| d.body.len() + 1).sum(),
            QueryForm::Datalog { program, goal } => program_size(program) + goal.body.len() + 1,
            QueryForm::Fcq { program, .. } => program_size(program),
        }
    }
}

pub fn program_size(p: &Program) -> usize {
    p.rules.iter().map(|r| r.body.len() + 1).sum::<usize>()
        + p.subqueries.values().map(QueryForm::size).sum::<usize>()
}

/// A finite database instance.  Constants denote the element of the same
/// name; `domain` may contain elements that occur in no fact.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatabaseInstance {
    pub domain: BTreeSet<String>,
    pub relations: BTreeMap<String, BTreeSet<Vec<String>>>,
}

impl DatabaseInstance {
    pub fn new() -> DatabaseInstance {
        DatabaseInstance::default()
    }

    /// Adds a fact and its elements to the domain.
    pub fn insert(&mut self, pred: &str, tuple: Vec<String>) {
        self.domain.extend(tuple.iter().cloned());
        self.relations.entry(pred.to_string()).or_default().insert(tuple);
    }

    pub fn contains(&self, pred: &str, tuple: &[String]) -> bool {
        self.relations.get(pred).is_some_and(|r| r.contains(tuple))
    }

    pub fn fact_count(&self) -> usize {
        self.relations.values().map(BTreeSet::len).sum()
    }

    /// All facts in a deterministic order.
    pub fn facts(&self) -> impl Iterator<Item = (&str, &Vec<String>)> {
        self.relations
            .iter()
            .flat_map(|(p, ts)| ts.iter().map(move |t| (p.as_str(), t)))
    }

    /// True iff every fact of `self` is a fact of `other`.
    pub fn is_subset_of(&self, other: &DatabaseInstance) -> bool {
        self.facts().all(|(p, t)| other.contains(p, t))
    }
}

/// Syntactic fragment membership of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FragmentFlags {
    pub monadic: bool,
    pub linear: bool,
    pub frontier_guarded: bool,
    pub nesting_depth: usize,
    pub recursive: bool,
}

/// Computes fragment flags.  Flags hold only if they hold at every nesting
/// level; subquery atoms count as IDB atoms for linearity and never guard.
pub fn classify(q: &QueryForm) -> FragmentFlags {
    match q {
        QueryForm::Ucq { .. } => FragmentFlags {
            monadic: true,
            linear: true,
            frontier_guarded: true,
            nesting_depth: 0,
            recursive: false,
        },
        QueryForm::Datalog { program, .. } | QueryForm::Fcq { program, .. } => classify_program(program),
    }
}

fn classify_program(p: &Program) -> FragmentFlags {
    let mut flags = FragmentFlags {
        monadic: p.idb.values().all(|&a| a <= 1),
        linear: p.rules.iter().all(|r| p.derived_atoms(r).count() <= 1),
        frontier_guarded: p
            .rules
            .iter()
            .all(|r| r.head.vars().is_empty() || p.guard_of(r).is_some()),
        nesting_depth: 0,
        recursive: is_recursive(p),
    };
    for sq in p.subqueries.values() {
        let inner = classify(sq);
        flags.monadic &= inner.monadic;
        flags.linear &= inner.linear;
        flags.frontier_guarded &= inner.frontier_guarded;
        flags.recursive |= inner.recursive;
        flags.nesting_depth = flags.nesting_depth.max(inner.nesting_depth + 1);
    }
    flags
}

/// True iff the IDB dependency graph has a cycle.
pub fn is_recursive(p: &Program) -> bool {
    let mut edges: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in &p.rules {
        for a in &r.body {
            if p.is_idb(&a.pred) {
                edges.entry(r.head.pred.as_str()).or_default().insert(a.pred.as_str());
            }
        }
    }
    // Depth-first search for a back edge.
    fn visit<'a>(
        n: &'a str,
        edges: &BTreeMap<&'a str, BTreeSet<&'a str>>,
        state: &mut BTreeMap<&'a str, u8>,
    ) -> bool {
        match state.get(n) {
            Some(1) => return true,
            Some(2) => return false,
            _ => {}
        }
        state.insert(n, 1);
        if let Some(succ) = edges.get(n) {
            for s in succ {
                if visit(s, edges, state) {
                    return true;
                }
            }
        }
        state.insert(n, 2);
        false
    }
    let mut state = BTreeMap::new();
    edges.keys().any(|n| visit(n, &edges, &mut state))
}

/// Severity of a [`Diagnostic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Info,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub level: Level,
    pub message: String,
    pub location: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lvl = match self.level {
            Level::Info => "info",
            Level::Error => "error",
        };
        write!(f, "{lvl}: {} ({})", self.message, self.location)
    }
}

/// Checks well-formedness.  The result is empty iff every invariant holds;
/// info-level notes are only reported by [`diagnostics`].
pub fn validate(q: &QueryForm) -> Vec<Diagnostic> {
    diagnostics(q).into_iter().filter(|d| d.level == Level::Error).collect()
}

/// All diagnostics, including info notes about λ constants inside guard atoms.
pub fn diagnostics(q: &QueryForm) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    validate_into(q, "", &mut out);
    out
}

fn err(out: &mut Vec<Diagnostic>, loc: &str, msg: String) {
    out.push(Diagnostic { level: Level::Error, message: msg, location: loc.to_string() });
}

fn validate_into(q: &QueryForm, prefix: &str, out: &mut Vec<Diagnostic>) {
    match q {
        QueryForm::Ucq { edb, disjuncts } => {
            if disjuncts.is_empty() {
                err(out, &format!("{prefix}query"), "empty union of conjunctive queries".into());
            }
            let arity = disjuncts.first().map_or(0, |d| d.head.len());
            let prog = Program { edb: edb.clone(), ..Program::default() };
            for (i, d) in disjuncts.iter().enumerate() {
                let loc = format!("{prefix}disjunct {}", i + 1);
                if d.head.len() != arity {
                    err(out, &loc, "arity mismatch between disjunct heads".into());
                }
                check_cq(&prog, d, &loc, out);
            }
        }
        QueryForm::Datalog { program, goal } => {
            validate_program(program, 0, false, prefix, out);
            check_cq(program, goal, &format!("{prefix}goal"), out);
        }
        QueryForm::Fcq { program, arity, free } => {
            validate_program(program, *arity, true, prefix, out);
            let mut seen = BTreeSet::new();
            for &f in free {
                if f == 0 || f > *arity {
                    err(out, &format!("{prefix}fcq directive"), format!("free position {f} out of range"));
                }
                if !seen.insert(f) {
                    err(out, &format!("{prefix}fcq directive"), format!("duplicate free position {f}"));
                }
            }
        }
    }
}

fn check_cq(p: &Program, cq: &Cq, loc: &str, out: &mut Vec<Diagnostic>) {
    if cq.body.is_empty() {
        err(out, loc, "empty rule body".into());
    }
    for t in &cq.head {
        if let Term::Lambda(k) = t {
            err(out, loc, format!("λ index out of range: @{k}"));
        }
    }
    for a in &cq.body {
        check_atom_decl(p, a, loc, out);
        if a.is_hit() {
            err(out, loc, "hit used in a body".into());
        }
        for k in a.lambdas() {
            err(out, loc, format!("λ index out of range: @{k}"));
        }
    }
}

fn check_atom_decl(p: &Program, a: &Atom, loc: &str, out: &mut Vec<Diagnostic>) {
    match p.arity(&a.pred) {
        None => err(out, loc, format!("undeclared predicate {}/{}", a.pred, a.args.len())),
        Some(n) if n != a.args.len() => err(
            out,
            loc,
            format!("arity mismatch: {} declared with arity {n}, used with {}", a.pred, a.args.len()),
        ),
        _ => {}
    }
}

fn validate_program(p: &Program, m: usize, is_fcq: bool, prefix: &str, out: &mut Vec<Diagnostic>) {
    for name in p.edb.keys() {
        if p.idb.contains_key(name) {
            err(out, &format!("{prefix}declarations"), format!("{name} declared both EDB and IDB"));
        }
        if p.subqueries.contains_key(name) {
            err(out, &format!("{prefix}declarations"), format!("{name} is both EDB and a subquery"));
        }
    }
    for name in p.idb.keys() {
        if p.subqueries.contains_key(name) {
            err(out, &format!("{prefix}declarations"), format!("{name} is both IDB and a subquery"));
        }
    }
    for reserved in [HIT, QUERY] {
        if p.edb.contains_key(reserved) || p.idb.contains_key(reserved) {
            err(out, &format!("{prefix}declarations"), format!("reserved predicate {reserved} declared"));
        }
    }
    for (i, r) in p.rules.iter().enumerate() {
        let loc = format!("{prefix}rule {}", i + 1);
        if r.body.is_empty() {
            err(out, &loc, "empty rule body".into());
        }
        if r.head.is_hit() {
            if !is_fcq {
                err(out, &loc, "hit used outside a flag-and-check query".into());
            }
            if !r.head.args.is_empty() {
                err(out, &loc, "hit takes no arguments".into());
            }
        } else if p.is_edb(&r.head.pred) {
            err(out, &loc, format!("EDB predicate {} in a rule head", r.head.pred));
        } else if p.is_subquery(&r.head.pred) {
            err(out, &loc, format!("subquery {} in a rule head", r.head.pred));
        } else {
            check_atom_decl(p, &r.head, &loc, out);
        }
        for a in &r.body {
            if a.is_hit() {
                err(out, &loc, "hit used in a body".into());
            } else {
                check_atom_decl(p, a, &loc, out);
            }
        }
        for a in std::iter::once(&r.head).chain(r.body.iter()) {
            for k in a.lambdas() {
                if k == 0 || k > m {
                    err(out, &loc, format!("λ index out of range: @{k} with arity {m}"));
                }
            }
        }
        if !r.head.vars().is_empty() {
            if let Some(g) = p.guard_of(r) {
                if g.lambdas().next().is_some() {
                    out.push(Diagnostic {
                        level: Level::Info,
                        message: format!("λ constant inside guard atom {g}"),
                        location: loc.clone(),
                    });
                }
            }
        }
    }
    for (name, sq) in &p.subqueries {
        validate_into(sq, &format!("{prefix}subquery {name}: "), out);
    }
}
