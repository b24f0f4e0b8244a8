//! Bottom-up evaluation: semi-naive least fixpoints, answers of Datalog,
//! union-of-CQ and flag-and-check queries, and single-answer checks.
//!
//! Subqueries are evaluated first and their answers installed as relations
//! named after the subquery.  Unsafe head variables range over the domain
//! of the instance.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::ops::Range;

use thiserror::Error;

pub use crate::model::DatabaseInstance;
use crate::model::{Atom, Cq, Program, QueryForm, Rule, Term, HIT};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("program uses λ constants but no binding was supplied")]
    MissingLambda,
    #[error("λ binding has {got} values, program needs {need}")]
    LambdaArity { need: usize, got: usize },
    #[error("answer tuple has arity {got}, query has arity {need}")]
    ArityMismatch { need: usize, got: usize },
}

/// Answers of a query: a set of tuples of element names.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnswerSet {
    pub arity: usize,
    pub tuples: BTreeSet<Vec<String>>,
}

impl AnswerSet {
    pub fn contains(&self, t: &[String]) -> bool {
        self.tuples.contains(t)
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

type Elem = u32;
const UNBOUND: Elem = Elem::MAX;

#[derive(Default)]
struct Interner {
    ids: HashMap<String, Elem>,
    names: Vec<String>,
}

impl Interner {
    fn id(&mut self, s: &str) -> Elem {
        if let Some(&i) = self.ids.get(s) {
            return i;
        }
        let i = self.names.len() as Elem;
        self.names.push(s.to_string());
        self.ids.insert(s.to_string(), i);
        i
    }

    fn get(&self, s: &str) -> Option<Elem> {
        self.ids.get(s).copied()
    }

    fn name(&self, e: Elem) -> &str {
        &self.names[e as usize]
    }
}

/// An append-only relation with one hash index per argument position.
#[derive(Default, Clone)]
struct Rel {
    tuples: Vec<Vec<Elem>>,
    set: HashSet<Vec<Elem>>,
    index: Vec<HashMap<Elem, Vec<u32>>>,
}

impl Rel {
    fn with_arity(arity: usize) -> Rel {
        Rel { index: vec![HashMap::new(); arity], ..Rel::default() }
    }

    fn insert(&mut self, t: Vec<Elem>) -> bool {
        if self.set.contains(&t) {
            return false;
        }
        let id = self.tuples.len() as u32;
        if self.index.len() < t.len() {
            self.index.resize(t.len(), HashMap::new());
        }
        for (p, &e) in t.iter().enumerate() {
            self.index[p].entry(e).or_default().push(id);
        }
        self.set.insert(t.clone());
        self.tuples.push(t);
        true
    }

    fn len(&self) -> usize {
        self.tuples.len()
    }
}

#[derive(Clone, Copy, Debug)]
enum CTerm {
    Var(usize),
    Elem(Elem),
}

#[derive(Clone, Debug)]
struct CAtom {
    rel: usize,
    args: Vec<CTerm>,
}

#[derive(Clone, Debug)]
struct CRule {
    head: CAtom,
    body: Vec<CAtom>,
    nvars: usize,
    unsafe_slots: Vec<usize>,
    /// Body indices of IDB atoms.
    idb_atoms: Vec<usize>,
}

/// Relations of one evaluation: fixed base relations (EDB and installed
/// subquery answers) followed by the IDB relations.
#[derive(Clone, Copy)]
struct Store<'a> {
    base: &'a [Rel],
    idb: &'a [Rel],
}

impl Store<'_> {
    fn rel(&self, id: usize) -> &Rel {
        if id < self.base.len() {
            &self.base[id]
        } else {
            &self.idb[id - self.base.len()]
        }
    }
}

/// Compiles terms of a rule against relation and element tables.
struct Compiler<'a> {
    rel_ids: &'a HashMap<String, usize>,
    interner: &'a mut Interner,
    lambda: &'a [Option<Elem>],
    /// λ indices that are compiled as variables (late λs).
    lambda_vars: &'a [usize],
}

impl Compiler<'_> {
    fn compile_rule(&mut self, head: &Atom, body: &[Atom]) -> Result<(CRule, HashMap<String, usize>), EvalError> {
        let mut slots: HashMap<String, usize> = HashMap::new();
        for &k in self.lambda_vars {
            let n = slots.len();
            slots.insert(format!("@{k}"), n);
        }
        let mut catoms = Vec::new();
        for a in body {
            catoms.push(self.compile_atom(a, &mut slots)?);
        }
        let bound: HashSet<usize> = catoms
            .iter()
            .flat_map(|a| a.args.iter())
            .filter_map(|t| match t {
                CTerm::Var(v) => Some(*v),
                _ => None,
            })
            .collect();
        let head_c = self.compile_atom(head, &mut slots)?;
        let mut unsafe_slots = Vec::new();
        for t in &head_c.args {
            if let CTerm::Var(v) = t {
                if !bound.contains(v) && !unsafe_slots.contains(v) {
                    unsafe_slots.push(*v);
                }
            }
        }
        let rule = CRule { head: head_c, body: catoms, nvars: slots.len(), unsafe_slots, idb_atoms: Vec::new() };
        Ok((rule, slots))
    }

    fn compile_atom(&mut self, a: &Atom, slots: &mut HashMap<String, usize>) -> Result<CAtom, EvalError> {
        let rel = *self.rel_ids.get(&a.pred).expect("relation registered");
        let mut args = Vec::with_capacity(a.args.len());
        for t in &a.args {
            args.push(match t {
                Term::Var(v) => {
                    let n = slots.len();
                    CTerm::Var(*slots.entry(v.clone()).or_insert(n))
                }
                Term::Const(c) => CTerm::Elem(self.interner.id(c)),
                Term::Lambda(k) if self.lambda_vars.contains(k) => CTerm::Var(slots[&format!("@{k}")]),
                Term::Lambda(k) => match self.lambda.get(k - 1) {
                    Some(Some(e)) => CTerm::Elem(*e),
                    Some(None) | None => return Err(EvalError::MissingLambda),
                },
            });
        }
        Ok(CAtom { rel, args })
    }
}

/// Orders body atoms for joining: `first` (if any) leads, then greedily the
/// atom with the most already-bound arguments.
fn join_order(body: &[CAtom], first: Option<usize>, prebound: &[bool]) -> Vec<usize> {
    let mut bound: Vec<bool> = prebound.to_vec();
    let mut order = Vec::with_capacity(body.len());
    let mut left: Vec<usize> = (0..body.len()).collect();
    let mark = |bound: &mut Vec<bool>, a: &CAtom| {
        for t in &a.args {
            if let CTerm::Var(v) = t {
                if *v >= bound.len() {
                    bound.resize(v + 1, false);
                }
                bound[*v] = true;
            }
        }
    };
    if let Some(f) = first {
        left.retain(|&i| i != f);
        order.push(f);
        mark(&mut bound, &body[f]);
    }
    while !left.is_empty() {
        let score = |i: usize| {
            body[i]
                .args
                .iter()
                .filter(|t| match t {
                    CTerm::Elem(_) => true,
                    CTerm::Var(v) => bound.get(*v).copied().unwrap_or(false),
                })
                .count() as isize
                * 4
                - body[i].args.len() as isize
        };
        let (pos, _) = left.iter().enumerate().max_by_key(|(_, &i)| (score(i), -(i as isize))).expect("nonempty");
        let i = left.remove(pos);
        order.push(i);
        mark(&mut bound, &body[i]);
    }
    order
}

/// Enumerates all extensions of `env` matching `atoms` (in the given order),
/// each restricted to its tuple-id range.
fn join(store: &Store, atoms: &[(&CAtom, Range<usize>)], env: &mut Vec<Elem>, f: &mut dyn FnMut(&[Elem])) {
    let Some(((atom, range), rest)) = atoms.split_first() else {
        f(env);
        return;
    };
    let rel = store.rel(atom.rel);
    if range.is_empty() {
        return;
    }
    let mut key = None;
    for (p, t) in atom.args.iter().enumerate() {
        let v = match t {
            CTerm::Elem(e) => *e,
            CTerm::Var(v) => env[*v],
        };
        if v != UNBOUND {
            key = Some((p, v));
            break;
        }
    }
    let mut bound_here: Vec<usize> = Vec::new();
    let mut try_tuple = |tuple: &Vec<Elem>, env: &mut Vec<Elem>| {
        bound_here.clear();
        let mut ok = true;
        for (t, &val) in atom.args.iter().zip(tuple.iter()) {
            match t {
                CTerm::Elem(e) => {
                    if *e != val {
                        ok = false;
                        break;
                    }
                }
                CTerm::Var(v) => {
                    if env[*v] == UNBOUND {
                        env[*v] = val;
                        bound_here.push(*v);
                    } else if env[*v] != val {
                        ok = false;
                        break;
                    }
                }
            }
        }
        if ok {
            join(store, rest, env, f);
        }
        for &v in &bound_here {
            env[v] = UNBOUND;
        }
    };
    match key {
        Some((p, v)) => {
            if let Some(ids) = rel.index.get(p).and_then(|ix| ix.get(&v)) {
                let start = ids.partition_point(|&id| (id as usize) < range.start);
                for &id in &ids[start..] {
                    if id as usize >= range.end {
                        break;
                    }
                    try_tuple(&rel.tuples[id as usize], env);
                }
            }
        }
        None => {
            for tuple in &rel.tuples[range.clone()] {
                try_tuple(tuple, env);
            }
        }
    }
}

/// Instantiates a head for one body match, expanding unsafe variables over `domain`.
fn emit_heads(rule: &CRule, env: &mut Vec<Elem>, domain: &[Elem], out: &mut Vec<Vec<Elem>>) {
    fn rec(rule: &CRule, env: &mut Vec<Elem>, domain: &[Elem], i: usize, out: &mut Vec<Vec<Elem>>) {
        if i == rule.unsafe_slots.len() {
            out.push(
                rule.head
                    .args
                    .iter()
                    .map(|t| match t {
                        CTerm::Elem(e) => *e,
                        CTerm::Var(v) => env[*v],
                    })
                    .collect(),
            );
            return;
        }
        let s = rule.unsafe_slots[i];
        for &d in domain {
            env[s] = d;
            rec(rule, env, domain, i + 1, out);
        }
        env[s] = UNBOUND;
    }
    rec(rule, env, domain, 0, out);
}

/// Semi-naive least fixpoint of `rules` over `store`.
fn run_fixpoint(base: &[Rel], idb: &mut [Rel], rules: &[CRule], domain: &[Elem]) {
    let nb = base.len();
    let nidb = idb.len();
    // Round 0: all rules over the (empty) initial IDB state.
    let mut buffer: Vec<(usize, Vec<Elem>)> = Vec::new();
    let mut plans: HashMap<(usize, Option<usize>), Vec<usize>> = HashMap::new();
    for (ri, r) in rules.iter().enumerate() {
        let store = Store { base, idb };
        let order = plans.entry((ri, None)).or_insert_with(|| join_order(&r.body, None, &[])).clone();
        let atoms: Vec<(&CAtom, Range<usize>)> =
            order.iter().map(|&i| (&r.body[i], 0..store.rel(r.body[i].rel).len())).collect();
        let mut env = vec![UNBOUND; r.nvars];
        let mut heads = Vec::new();
        join(&store, &atoms, &mut env, &mut |e| {
            let mut e = e.to_vec();
            emit_heads(r, &mut e, domain, &mut heads);
        });
        buffer.extend(heads.into_iter().map(|h| (r.head.rel, h)));
    }
    let mut prev: Vec<usize> = vec![0; nidb];
    loop {
        let cur: Vec<usize> = idb.iter().map(Rel::len).collect();
        for (rel, t) in buffer.drain(..) {
            idb[rel - nb].insert(t);
        }
        let now: Vec<usize> = idb.iter().map(Rel::len).collect();
        let store = Store { base, idb };
        // `cur` is the length before this batch; new tuples are [cur, now).
        prev.copy_from_slice(&cur);
        if now == cur {
            break;
        }
        for (ri, r) in rules.iter().enumerate() {
            for (k, &di) in r.idb_atoms.iter().enumerate() {
                let drel = r.body[di].rel - nb;
                if prev[drel] == now[drel] {
                    continue;
                }
                let order = plans
                    .entry((ri, Some(di)))
                    .or_insert_with(|| join_order(&r.body, Some(di), &[]))
                    .clone();
                let range_of = |i: usize| -> Range<usize> {
                    let a = &r.body[i];
                    if a.rel < nb {
                        return 0..store.rel(a.rel).len();
                    }
                    let ir = a.rel - nb;
                    let pos = r.idb_atoms.iter().position(|&x| x == i).expect("idb atom");
                    if i == di {
                        prev[ir]..now[ir]
                    } else if pos < k {
                        0..prev[ir]
                    } else {
                        0..now[ir]
                    }
                };
                let atoms: Vec<(&CAtom, Range<usize>)> = order.iter().map(|&i| (&r.body[i], range_of(i))).collect();
                let mut env = vec![UNBOUND; r.nvars];
                let mut heads = Vec::new();
                join(&store, &atoms, &mut env, &mut |e| {
                    let mut e = e.to_vec();
                    emit_heads(r, &mut e, domain, &mut heads);
                });
                buffer.extend(heads.into_iter().map(|h| (r.head.rel, h)));
            }
        }
    }
}

/// Interned instance with installed subquery answers.
struct Base {
    interner: Interner,
    rels: Vec<Rel>,
    rel_ids: HashMap<String, usize>,
    domain: Vec<Elem>,
}

impl Base {
    fn new(inst: &DatabaseInstance) -> Base {
        let mut b = Base { interner: Interner::default(), rels: Vec::new(), rel_ids: HashMap::new(), domain: Vec::new() };
        for d in &inst.domain {
            let e = b.interner.id(d);
            b.domain.push(e);
        }
        for (p, ts) in &inst.relations {
            let arity = ts.iter().next().map_or(0, Vec::len);
            let mut rel = Rel::with_arity(arity);
            for t in ts {
                let tuple: Vec<Elem> = t.iter().map(|c| b.interner.id(c)).collect();
                rel.insert(tuple);
            }
            b.rel_ids.insert(p.clone(), b.rels.len());
            b.rels.push(rel);
        }
        b
    }

    fn ensure(&mut self, name: &str, arity: usize) -> usize {
        if let Some(&i) = self.rel_ids.get(name) {
            return i;
        }
        self.rel_ids.insert(name.to_string(), self.rels.len());
        self.rels.push(Rel::with_arity(arity));
        self.rels.len() - 1
    }

    fn install(&mut self, name: &str, answers: &BTreeSet<Vec<Elem>>, arity: usize) {
        let mut rel = Rel::with_arity(arity);
        for t in answers {
            rel.insert(t.clone());
        }
        match self.rel_ids.get(name) {
            Some(&i) => self.rels[i] = rel,
            None => {
                self.rel_ids.insert(name.to_string(), self.rels.len());
                self.rels.push(rel);
            }
        }
    }
}

/// Evaluation context for one query over one instance.
struct Ctx {
    base: Base,
}

/// Per-level relation layout: base relations, then this program's IDBs
/// (and `hit` as the last IDB).
struct Level {
    rel_ids: HashMap<String, usize>,
    nbase: usize,
    idb_names: Vec<String>,
}

impl Ctx {
    fn new(inst: &DatabaseInstance) -> Ctx {
        Ctx { base: Base::new(inst) }
    }

    /// Evaluates subqueries of `p` and installs their answers.  Subquery
    /// names are scoped per program, so each level re-installs its own.
    fn install_subqueries(&mut self, p: &Program) {
        let answers: Vec<_> = p.subqueries.values().map(|sq| self.answers(sq, None)).collect();
        for ((name, sq), ans) in p.subqueries.iter().zip(answers) {
            self.base.install(name, &ans, sq.answer_arity());
        }
    }

    fn level(&mut self, p: &Program) -> Level {
        for (e, &k) in &p.edb {
            self.base.ensure(e, k);
        }
        let nbase = self.base.rels.len();
        let mut rel_ids = self.base.rel_ids.clone();
        let mut idb_names: Vec<String> = p.idb.keys().cloned().collect();
        idb_names.push(HIT.to_string());
        for (i, n) in idb_names.iter().enumerate() {
            rel_ids.insert(n.clone(), nbase + i);
        }
        Level { rel_ids, nbase, idb_names }
    }

    fn compile_rules(
        &mut self,
        lvl: &Level,
        rules: &[&Rule],
        lambda: &[Option<Elem>],
        lambda_vars: &[usize],
    ) -> Result<Vec<(CRule, HashMap<String, usize>)>, EvalError> {
        let mut c = Compiler { rel_ids: &lvl.rel_ids, interner: &mut self.base.interner, lambda, lambda_vars };
        let mut out = Vec::new();
        for r in rules {
            let (mut cr, slots) = c.compile_rule(&r.head, &r.body)?;
            cr.idb_atoms = (0..cr.body.len()).filter(|&i| cr.body[i].rel >= lvl.nbase).collect();
            out.push((cr, slots));
        }
        Ok(out)
    }

    fn fixpoint_idb(&self, lvl: &Level, rules: &[CRule]) -> Vec<Rel> {
        let mut idb = vec![Rel::default(); lvl.idb_names.len()];
        run_fixpoint(&self.base.rels[..lvl.nbase], &mut idb, rules, &self.base.domain);
        idb
    }

    /// Matches of a CQ body over a store, projected to `out_terms`.
    fn cq_matches(
        &mut self,
        lvl: &Level,
        store_idb: Option<&[Rel]>,
        body: &[Atom],
        out_terms: &[Term],
        pre: &[(Term, Elem)],
        lambda: &[Option<Elem>],
        lambda_vars: &[usize],
    ) -> Result<BTreeSet<Vec<Elem>>, EvalError> {
        let head = Atom { pred: HIT.to_string(), args: out_terms.to_vec() };
        let mut c = Compiler { rel_ids: &lvl.rel_ids, interner: &mut self.base.interner, lambda, lambda_vars };
        let (cr, slots) = c.compile_rule(&head, body)?;
        let mut env = vec![UNBOUND; cr.nvars];
        let mut prebound = vec![false; cr.nvars];
        for (t, e) in pre {
            let slot = match t {
                Term::Var(v) => slots.get(v).copied(),
                Term::Lambda(k) => slots.get(&format!("@{k}")).copied(),
                Term::Const(_) => None,
            };
            if let Some(s) = slot {
                if env[s] != UNBOUND && env[s] != *e {
                    return Ok(BTreeSet::new());
                }
                env[s] = *e;
                prebound[s] = true;
            }
        }
        let empty: Vec<Rel> = vec![Rel::default(); lvl.idb_names.len()];
        let store = Store { base: &self.base.rels[..lvl.nbase], idb: store_idb.unwrap_or(&empty) };
        let order = join_order(&cr.body, None, &prebound);
        let atoms: Vec<(&CAtom, Range<usize>)> =
            order.iter().map(|&i| (&cr.body[i], 0..store.rel(cr.body[i].rel).len())).collect();
        let mut heads = Vec::new();
        join(&store, &atoms, &mut env, &mut |e| {
            let mut e = e.to_vec();
            emit_heads(&cr, &mut e, &self.base.domain, &mut heads);
        });
        Ok(heads.into_iter().collect())
    }

    /// Answers of `q`.  With `fixed`, only answers equal to it are produced.
    fn answers(&mut self, q: &QueryForm, fixed: Option<&[Elem]>) -> BTreeSet<Vec<Elem>> {
        self.try_answers(q, fixed).expect("well-formed query")
    }

    fn try_answers(&mut self, q: &QueryForm, fixed: Option<&[Elem]>) -> Result<BTreeSet<Vec<Elem>>, EvalError> {
        match q {
            QueryForm::Ucq { edb, disjuncts } => {
                let p = Program { edb: edb.clone(), ..Program::default() };
                let lvl = self.level(&p);
                let mut out = BTreeSet::new();
                for d in disjuncts {
                    out.extend(self.goal_answers(&lvl, None, d, fixed)?);
                }
                Ok(out)
            }
            QueryForm::Datalog { program, goal } => {
                self.install_subqueries(program);
                let lvl = self.level(program);
                let rules: Vec<&Rule> = program.rules.iter().collect();
                let compiled: Vec<CRule> = self.compile_rules(&lvl, &rules, &[], &[])?.into_iter().map(|x| x.0).collect();
                let idb = self.fixpoint_idb(&lvl, &compiled);
                self.goal_answers(&lvl, Some(&idb), goal, fixed)
            }
            QueryForm::Fcq { program, arity, free } => {
                self.install_subqueries(program);
                self.fcq_answers(program, *arity, free, fixed)
            }
        }
    }

    fn goal_answers(
        &mut self,
        lvl: &Level,
        idb: Option<&[Rel]>,
        goal: &Cq,
        fixed: Option<&[Elem]>,
    ) -> Result<BTreeSet<Vec<Elem>>, EvalError> {
        let mut pre = Vec::new();
        if let Some(f) = fixed {
            for (t, &e) in goal.head.iter().zip(f.iter()) {
                match t {
                    Term::Const(c) => {
                        if self.base.interner.get(c) != Some(e) {
                            return Ok(BTreeSet::new());
                        }
                    }
                    _ => pre.push((t.clone(), e)),
                }
            }
        }
        let res = self.cq_matches(lvl, idb, &goal.body, &goal.head, &pre, &[], &[])?;
        Ok(match fixed {
            Some(f) => res.into_iter().filter(|t| t.as_slice() == f).collect(),
            None => res,
        })
    }

    fn fcq_answers(
        &mut self,
        program: &Program,
        m: usize,
        free: &[usize],
        fixed: Option<&[Elem]>,
    ) -> Result<BTreeSet<Vec<Elem>>, EvalError> {
        let lvl = self.level(program);
        let mut fixed_lambda: Vec<Option<Elem>> = vec![None; m];
        if let Some(f) = fixed {
            for (&pos, &e) in free.iter().zip(f.iter()) {
                fixed_lambda[pos - 1] = Some(e);
            }
        }
        let (hit_rules, other): (Vec<&Rule>, Vec<&Rule>) = program.rules.iter().partition(|r| r.head.is_hit());
        let mut early: BTreeSet<usize> = BTreeSet::new();
        for r in &other {
            for a in std::iter::once(&r.head).chain(r.body.iter()) {
                early.extend(a.lambdas());
            }
        }
        // Early λs that are not fixed are enumerated over the domain.
        let enum_early: Vec<usize> = early.iter().copied().filter(|k| fixed_lambda[k - 1].is_none()).collect();
        let late: Vec<usize> = (1..=m).filter(|k| !early.contains(k) && fixed_lambda[k - 1].is_none()).collect();
        let domain = self.base.domain.clone();
        let mut out = BTreeSet::new();
        if domain.is_empty() && m > 0 && fixed.is_none() {
            return Ok(out);
        }
        let mut binding = fixed_lambda.clone();
        let mut counter = vec![0usize; enum_early.len()];
        loop {
            for (i, &k) in enum_early.iter().enumerate() {
                binding[k - 1] = Some(domain[counter[i]]);
            }
            let compiled: Vec<CRule> = self.compile_rules(&lvl, &other, &binding, &[])?.into_iter().map(|x| x.0).collect();
            let idb = self.fixpoint_idb(&lvl, &compiled);
            // Each hit rule is a CQ whose late λs act as variables.
            let mut late_vals: BTreeSet<Vec<Elem>> = BTreeSet::new();
            for r in &hit_rules {
                let used: BTreeSet<usize> = r.body.iter().flat_map(|a| a.lambdas()).collect();
                let local: Vec<usize> = late.iter().copied().filter(|k| used.contains(k)).collect();
                let terms: Vec<Term> = local.iter().map(|&k| Term::Lambda(k)).collect();
                let ms = self.cq_matches(&lvl, Some(&idb), &r.body, &terms, &[], &binding, &local)?;
                for mv in ms {
                    // Late λs unused by this rule range over the domain.
                    let mut partial: Vec<Vec<Elem>> = vec![Vec::new()];
                    for &k in &late {
                        let mut next = Vec::new();
                        if let Some(pos) = local.iter().position(|&x| x == k) {
                            for p in partial {
                                let mut p = p;
                                p.push(mv[pos]);
                                next.push(p);
                            }
                        } else if free.contains(&k) {
                            for p in &partial {
                                for &d in &domain {
                                    let mut p = p.clone();
                                    p.push(d);
                                    next.push(p);
                                }
                            }
                        } else if !domain.is_empty() {
                            for p in partial {
                                let mut p = p;
                                p.push(UNBOUND);
                                next.push(p);
                            }
                        }
                        partial = next;
                    }
                    late_vals.extend(partial);
                }
            }
            for lv in late_vals {
                let mut full = binding.clone();
                for (i, &k) in late.iter().enumerate() {
                    full[k - 1] = Some(lv[i]);
                }
                let tuple: Vec<Elem> = free.iter().map(|&p| full[p - 1].unwrap_or(UNBOUND)).collect();
                out.insert(tuple);
            }
            // Advance the odometer over early λs.
            let mut i = 0;
            loop {
                if i == counter.len() {
                    return Ok(out);
                }
                counter[i] += 1;
                if counter[i] < domain.len() {
                    break;
                }
                counter[i] = 0;
                i += 1;
            }
        }
    }

    fn names(&self, t: &[Elem]) -> Vec<String> {
        t.iter().map(|&e| self.base.interner.name(e).to_string()).collect()
    }
}

/// Least fixpoint of `p` over `i`.  Returns the derived IDB relations
/// (including `hit` as a nullary relation when derived).  Subqueries of `p`
/// are evaluated and installed before the fixpoint.
pub fn fixpoint(
    p: &Program,
    i: &DatabaseInstance,
    lambda: Option<&[String]>,
) -> Result<BTreeMap<String, BTreeSet<Vec<String>>>, EvalError> {
    let m = p.max_lambda();
    let binding_names = match (m, lambda) {
        (0, _) => Vec::new(),
        (_, None) => return Err(EvalError::MissingLambda),
        (m, Some(l)) if l.len() < m => return Err(EvalError::LambdaArity { need: m, got: l.len() }),
        (_, Some(l)) => l.to_vec(),
    };
    let mut ctx = Ctx::new(i);
    ctx.install_subqueries(p);
    let lvl = ctx.level(p);
    let binding: Vec<Option<Elem>> = binding_names.iter().map(|n| Some(ctx.base.interner.id(n))).collect();
    let rules: Vec<&Rule> = p.rules.iter().collect();
    let compiled: Vec<CRule> = ctx.compile_rules(&lvl, &rules, &binding, &[])?.into_iter().map(|x| x.0).collect();
    let idb = ctx.fixpoint_idb(&lvl, &compiled);
    let mut out = BTreeMap::new();
    for (k, name) in lvl.idb_names.iter().enumerate() {
        let set: BTreeSet<Vec<String>> = idb[k].tuples.iter().map(|t| ctx.names(t)).collect();
        if !set.is_empty() {
            out.insert(name.clone(), set);
        }
    }
    Ok(out)
}

/// All answers of `q` over `i`.
pub fn eval_query(q: &QueryForm, i: &DatabaseInstance) -> AnswerSet {
    let mut ctx = Ctx::new(i);
    let ans = ctx.answers(q, None);
    AnswerSet { arity: q.answer_arity(), tuples: ans.iter().map(|t| ctx.names(t)).collect() }
}

/// Whether `t` is an answer of `q` over `i`, without enumerating other answers.
pub fn check_answer(q: &QueryForm, i: &DatabaseInstance, t: &[String]) -> Result<bool, EvalError> {
    if t.len() != q.answer_arity() {
        return Err(EvalError::ArityMismatch { need: q.answer_arity(), got: t.len() });
    }
    let mut ctx = Ctx::new(i);
    let fixed: Vec<Elem> = t.iter().map(|s| ctx.base.interner.id(s)).collect();
    Ok(!ctx.try_answers(q, Some(&fixed))?.is_empty())
}

/// Whether `w` separates the queries: `lhs` answers `w.answer` on
/// `w.instance` and `rhs` does not.
pub fn witness_holds(lhs: &QueryForm, rhs: &QueryForm, w: &crate::witness::Witness) -> Result<bool, EvalError> {
    Ok(check_answer(lhs, &w.instance, &w.answer)? && !check_answer(rhs, &w.instance, &w.answer)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_instance, parse_query};

    const EX1: &str = "U(Y) :- p(@1,Y). U(Z) :- U(Y), p(Y,Z). hit :- U(@2). fcq arity 2 free 1,2.";
    const LADDER: &str = "edb p/2, q/2. \
        U(@1,@2) :- q(@1,@2). \
        U(X2,Y2) :- U(X,Y), p(X,X2), p(Y,Y2), q(X2,Y2). \
        hit :- U(@3,@4). \
        fcq arity 4 free 1,2,3,4.";
    const EX2_DB: &str = "q(a,b). p(a,c). p(b,e). q(c,e). p(a,e1). p(b,d). q(e1,d).";

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn example_one_fixpoint() {
        let q = parse_query(EX1).unwrap();
        let i = parse_instance("p(1,2). p(2,3).").unwrap();
        let d = fixpoint(q.program().unwrap(), &i, Some(&s(&["1", "3"]))).unwrap();
        assert_eq!(d["U"], [s(&["2"]), s(&["3"])].into_iter().collect());
        assert!(d.contains_key("hit"));
        let e = fixpoint(q.program().unwrap(), &DatabaseInstance::new(), Some(&s(&["1", "1"]))).unwrap();
        assert!(e.is_empty());
        assert_eq!(fixpoint(q.program().unwrap(), &i, None), Err(EvalError::MissingLambda));
    }

    #[test]
    fn example_one_answers() {
        let q = parse_query(EX1).unwrap();
        let i = parse_instance("p(1,2). p(2,3).").unwrap();
        let a = eval_query(&q, &i);
        let expect: BTreeSet<Vec<String>> = [s(&["1", "2"]), s(&["2", "3"]), s(&["1", "3"])].into_iter().collect();
        assert_eq!(a.tuples, expect);
        assert!(check_answer(&q, &i, &s(&["1", "3"])).unwrap());
        assert!(!check_answer(&q, &i, &s(&["1", "1"])).unwrap());
        assert!(eval_query(&q, &DatabaseInstance::new()).is_empty());
    }

    #[test]
    fn ladder_on_example_two() {
        let q = parse_query(LADDER).unwrap();
        let i = parse_instance(EX2_DB).unwrap();
        let d = fixpoint(q.program().unwrap(), &i, Some(&s(&["a", "b", "c", "d"]))).unwrap();
        let u = &d["U"];
        for t in [["a", "b"], ["c", "e"], ["e1", "d"]] {
            assert!(u.contains(&s(&t)));
        }
        assert!(!d.contains_key("hit"));
        assert!(!check_answer(&q, &i, &s(&["a", "b", "c", "d"])).unwrap());
    }

    #[test]
    fn datalog_goal_and_ucq() {
        let q = parse_query("tc(X,Y) :- e(X,Y). tc(X,Z) :- tc(X,Y), e(Y,Z). query(X,Y) :- tc(X,Y).").unwrap();
        let i = parse_instance("e(a,b). e(b,c).").unwrap();
        assert_eq!(eval_query(&q, &i).len(), 3);
        assert!(check_answer(&q, &i, &s(&["a", "c"])).unwrap());
        let u = parse_query("query(X) :- e(X,Y). query(Y) :- e(X,Y).").unwrap();
        assert_eq!(eval_query(&u, &i).len(), 3);
        assert!(check_answer(&u, &i, &s(&["a"])).is_ok());
        assert!(check_answer(&u, &i, &s(&["a", "b"])).is_err());
    }

    #[test]
    fn unsafe_head_ranges_over_domain() {
        let q = parse_query("U(X) :- p(Y). query(X) :- U(X).").unwrap();
        let i = parse_instance("p(a). r(b).").unwrap();
        assert_eq!(eval_query(&q, &i).len(), 2);
    }

    #[test]
    fn existential_lambda() {
        let q = parse_query("hit :- e(@1,@2). fcq arity 2 free 2.").unwrap();
        let i = parse_instance("e(a,b). e(c,b). e(c,d).").unwrap();
        let a = eval_query(&q, &i);
        assert_eq!(a.tuples, [s(&["b"]), s(&["d"])].into_iter().collect());
        assert!(check_answer(&q, &i, &s(&["b"])).unwrap());
        assert!(!check_answer(&q, &i, &s(&["a"])).unwrap());
    }

    #[test]
    fn nested_subquery() {
        let q = parse_query(
            "edb e/2, f/1.\n\
             subquery Reach/2 { T(X,Y) :- e(X,Y). T(X,Z) :- T(X,Y), e(Y,Z). query(X,Y) :- T(X,Y). }\n\
             hit :- Reach(@1,@2), f(@2).\n\
             fcq arity 2 free 1,2.",
        )
        .unwrap();
        let i = parse_instance("e(a,b). e(b,c). f(c).").unwrap();
        let a = eval_query(&q, &i);
        assert_eq!(a.tuples, [s(&["a", "c"]), s(&["b", "c"])].into_iter().collect());
    }
}
