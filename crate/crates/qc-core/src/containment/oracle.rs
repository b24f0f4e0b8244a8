//! Refutation by enumeration: builds every proof tree of the left-hand side
//! up to a height bound, modulo renaming, and evaluates the right-hand side
//! on its canonical instance.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Duration, Instant};

use crate::eval::check_answer;
use crate::model::{DatabaseInstance, QueryForm, Term};
use crate::witness::{Verdict, Witness};

use super::normal::{normalize_lhs, NormalQuery};
use super::proof::{canonical_instance_avoiding, instantiate_expansion, root_lambda_terms, Expansion};
use super::ContainmentError;

#[derive(Debug, Clone, Copy)]
pub struct OracleLimits {
    /// Ceiling on the number of distinct subtrees kept.
    pub max_subtrees: usize,
    pub timeout: Option<Duration>,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits { max_subtrees: 1_000_000, timeout: None }
    }
}

/// Every constant of a query, subqueries included.
pub(crate) fn query_constants(q: &QueryForm) -> BTreeSet<String> {
    fn terms<'a>(ts: impl Iterator<Item = &'a Term>, out: &mut BTreeSet<String>) {
        for t in ts {
            if let Term::Const(c) = t {
                out.insert(c.clone());
            }
        }
    }
    let mut out = BTreeSet::new();
    let mut cqs: Vec<&crate::model::Cq> = Vec::new();
    match q {
        QueryForm::Ucq { disjuncts, .. } => cqs.extend(disjuncts),
        QueryForm::Datalog { goal, .. } => cqs.push(goal),
        QueryForm::Fcq { .. } => {}
    }
    for cq in cqs {
        terms(cq.head.iter(), &mut out);
        terms(cq.body.iter().flat_map(|a| a.args.iter()), &mut out);
    }
    if let Some(p) = q.program() {
        for r in &p.rules {
            terms(std::iter::once(&r.head).chain(r.body.iter()).flat_map(|a| a.args.iter()), &mut out);
        }
        for sq in p.subqueries.values() {
            out.extend(query_constants(sq));
        }
    }
    out
}

/// Checks that both sides agree on arities before any work is done.
pub(crate) fn check_signatures(lhs: &QueryForm, rhs: &QueryForm) -> Result<(), ContainmentError> {
    if lhs.answer_arity() != rhs.answer_arity() {
        return Err(ContainmentError::ArityMismatch(lhs.answer_arity(), rhs.answer_arity()));
    }
    let a = lhs.edb_signature();
    for (p, k) in rhs.edb_signature() {
        if a.get(&p).is_some_and(|&j| j != k) {
            return Err(ContainmentError::Unsupported(format!("EDB predicate {p} has different arities on both sides")));
        }
    }
    Ok(())
}

/// Instantiates an expansion tree and turns it into a checked witness.
pub(crate) fn make_witness(
    nq: &NormalQuery,
    lhs: &QueryForm,
    rhs: &QueryForm,
    e: &Expansion,
) -> Result<Witness, ContainmentError> {
    let mut tree = instantiate_expansion(nq, e)?;
    if let Some(ts) = root_lambda_terms(nq, &tree) {
        tree.lambda = ts.into_iter().enumerate().map(|(i, t)| (i + 1, t)).collect();
    }
    let mut avoid = query_constants(lhs);
    avoid.extend(query_constants(rhs));
    let c = canonical_instance_avoiding(&nq.program, &tree, &avoid)?;
    let internal = |e: crate::eval::EvalError| ContainmentError::Internal(e.to_string());
    if !check_answer(lhs, &c.instance, &c.answer).map_err(internal)? {
        return Err(ContainmentError::Internal(format!(
            "left-hand side does not produce {:?} on its own witness",
            c.answer
        )));
    }
    if check_answer(rhs, &c.instance, &c.answer).map_err(internal)? {
        return Err(ContainmentError::Internal(format!(
            "right-hand side produces {:?} on a claimed counterexample",
            c.answer
        )));
    }
    Ok(Witness { proof_tree: tree, instance: c.instance, answer: c.answer, lambda: c.lambda })
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
enum T {
    V(u32),
    C(u32),
}

type Fact = (u32, Vec<T>);

/// A subtree modulo variable renaming.  Variables are numbered by first
/// occurrence; `isolated` counts elements that occur in no fact and not in
/// the head.
#[derive(Clone, PartialEq, Eq, Hash)]
struct Key {
    pred: u32,
    head: Vec<T>,
    facts: Vec<Fact>,
    isolated: u32,
}

struct Sub {
    key: Key,
    nvars: u32,
    height: usize,
    rule: usize,
    children: Vec<usize>,
}

struct Compiled {
    nvars: u32,
    head: Fact,
    edb: Vec<Fact>,
    idb: Vec<Fact>,
}

struct Interner {
    preds: HashMap<String, u32>,
    consts: HashMap<String, u32>,
    const_names: Vec<String>,
}

impl Interner {
    fn pred(&mut self, p: &str) -> u32 {
        let n = self.preds.len() as u32;
        *self.preds.entry(p.to_string()).or_insert(n)
    }

    fn cst(&mut self, c: &str) -> u32 {
        if let Some(&i) = self.consts.get(c) {
            return i;
        }
        let i = self.const_names.len() as u32;
        self.consts.insert(c.to_string(), i);
        self.const_names.push(c.to_string());
        i
    }
}

struct Uf {
    parent: Vec<u32>,
    cst: Vec<Option<u32>>,
}

impl Uf {
    fn new(n: usize) -> Uf {
        Uf { parent: (0..n as u32).collect(), cst: vec![None; n] }
    }

    fn find(&mut self, x: u32) -> u32 {
        let mut r = x;
        while self.parent[r as usize] != r {
            r = self.parent[r as usize];
        }
        let mut y = x;
        while self.parent[y as usize] != r {
            let n = self.parent[y as usize];
            self.parent[y as usize] = r;
            y = n;
        }
        r
    }

    fn unify(&mut self, a: T, b: T) -> bool {
        match (a, b) {
            (T::C(x), T::C(y)) => x == y,
            (T::V(v), T::C(c)) | (T::C(c), T::V(v)) => {
                let r = self.find(v) as usize;
                match self.cst[r] {
                    Some(d) => d == c,
                    None => {
                        self.cst[r] = Some(c);
                        true
                    }
                }
            }
            (T::V(x), T::V(y)) => {
                let (rx, ry) = (self.find(x), self.find(y));
                if rx == ry {
                    return true;
                }
                let (cx, cy) = (self.cst[rx as usize], self.cst[ry as usize]);
                if let (Some(p), Some(q)) = (cx, cy) {
                    if p != q {
                        return false;
                    }
                }
                self.parent[rx as usize] = ry;
                self.cst[ry as usize] = cx.or(cy);
                true
            }
        }
    }

    fn resolve(&mut self, t: T) -> T {
        match t {
            T::C(_) => t,
            T::V(v) => {
                let r = self.find(v);
                self.cst[r as usize].map_or(T::V(r), T::C)
            }
        }
    }
}

/// Renames variables by first occurrence in the head, then in the facts
/// taken in a renaming-independent order.  Returns the key and the number
/// of named variables.
fn canonicalize(pred: u32, head: &[T], facts: &[Fact], all_vars: &BTreeSet<u32>, extra_isolated: u32) -> (Key, u32) {
    let mut name: HashMap<u32, u32> = HashMap::new();
    let assign = |t: &T, name: &mut HashMap<u32, u32>| {
        if let T::V(v) = t {
            let n = name.len() as u32;
            name.entry(*v).or_insert(n);
        }
    };
    for t in head {
        assign(t, &mut name);
    }
    let view = |f: &Fact, name: &HashMap<u32, u32>| -> (u32, Vec<(u8, u32)>) {
        (
            f.0,
            f.1.iter()
                .map(|t| match t {
                    T::C(c) => (0, *c),
                    T::V(v) => name.get(v).map_or((2, 0), |&n| (1, n)),
                })
                .collect(),
        )
    };
    let mut pending: Vec<&Fact> = facts.iter().collect();
    while !pending.is_empty() {
        pending.sort_by_cached_key(|f| view(f, &name));
        let f = pending.remove(0);
        for t in &f.1 {
            assign(t, &mut name);
        }
    }
    let rn = |t: &T| match t {
        T::V(v) => T::V(name[v]),
        c => *c,
    };
    let mut out: Vec<Fact> = facts.iter().map(|(p, a)| (*p, a.iter().map(rn).collect())).collect();
    out.sort();
    out.dedup();
    let named = name.len() as u32;
    let isolated = all_vars.iter().filter(|v| !name.contains_key(v)).count() as u32 + extra_isolated;
    (Key { pred, head: head.iter().map(rn).collect(), facts: out, isolated }, named)
}

/// Enumerates proof trees of `lhs` of height at most `depth` and returns
/// the first one whose canonical instance is not answered by `rhs`.
pub fn bounded_oracle(lhs: &QueryForm, rhs: &QueryForm, depth: usize) -> Result<Verdict, ContainmentError> {
    bounded_oracle_with(lhs, rhs, depth, OracleLimits::default())
}

pub fn bounded_oracle_with(
    lhs: &QueryForm,
    rhs: &QueryForm,
    depth: usize,
    limits: OracleLimits,
) -> Result<Verdict, ContainmentError> {
    check_signatures(lhs, rhs)?;
    let nq = normalize_lhs(lhs)?;
    let start = Instant::now();
    let mut it = Interner { preds: HashMap::new(), consts: HashMap::new(), const_names: Vec::new() };
    let p = &nq.program;
    let rules: Vec<Compiled> = p
        .rules
        .iter()
        .map(|r| {
            let vars = r.vars();
            let mut conv = |a: &crate::model::Atom| -> Fact {
                let args = a
                    .args
                    .iter()
                    .map(|t| match t {
                        Term::Var(v) => T::V(vars.iter().position(|w| w == v).unwrap() as u32),
                        Term::Const(c) => T::C(it.cst(c)),
                        Term::Lambda(k) => T::C(it.cst(&format!("@{k}"))),
                    })
                    .collect();
                (it.pred(&a.pred), args)
            };
            Compiled {
                nvars: vars.len() as u32,
                head: conv(&r.head),
                edb: r.body.iter().filter(|a| !p.is_idb(&a.pred)).map(&mut conv).collect(),
                idb: r.body.iter().filter(|a| p.is_idb(&a.pred)).map(&mut conv).collect(),
            }
        })
        .collect();
    let goal = it.pred(&nq.goal);
    let mut subs: Vec<Sub> = Vec::new();
    let mut seen: HashMap<Key, usize> = HashMap::new();
    let mut by_pred: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for h in 0..=depth {
        let mut added = Vec::new();
        for (ri, r) in rules.iter().enumerate() {
            if (h == 0) != r.idb.is_empty() {
                continue;
            }
            let lists: Vec<&[usize]> = r
                .idb
                .iter()
                .map(|a| by_pred.get(&a.0).map_or(&[][..], |v| v.as_slice()))
                .collect();
            if lists.iter().any(|l| l.is_empty()) {
                continue;
            }
            let mut idx = vec![0usize; lists.len()];
            'tuples: loop {
                let kids: Vec<usize> = idx.iter().zip(&lists).map(|(&i, l)| l[i]).collect();
                let fresh = kids.iter().all(|&k| subs[k].height < h.max(1))
                    && (h == 0 || kids.iter().any(|&k| subs[k].height + 1 == h));
                if fresh {
                    if let Some((key, nvars)) = compose(r, &kids, &subs) {
                        if !seen.contains_key(&key) {
                            if subs.len() >= limits.max_subtrees {
                                return Err(ContainmentError::ResourceLimit(format!(
                                    "more than {} subtrees",
                                    limits.max_subtrees
                                )));
                            }
                            if limits.timeout.is_some_and(|t| start.elapsed() > t) {
                                return Err(ContainmentError::ResourceLimit("oracle timeout".into()));
                            }
                            seen.insert(key.clone(), subs.len());
                            added.push(subs.len());
                            subs.push(Sub { key, nvars, height: h, rule: ri, children: kids });
                            let id = subs.len() - 1;
                            if subs[id].key.pred == goal {
                                if let Some(w) = refute(&nq, lhs, rhs, &subs, id, &it)? {
                                    return Ok(Verdict::NotContained(Box::new(w)));
                                }
                            }
                        }
                    }
                }
                for k in 0..idx.len() {
                    idx[k] += 1;
                    if idx[k] < lists[k].len() {
                        continue 'tuples;
                    }
                    idx[k] = 0;
                }
                break;
            }
        }
        if added.is_empty() && h > 0 {
            break;
        }
        for id in added {
            by_pred.entry(subs[id].key.pred).or_default().push(id);
        }
    }
    Ok(Verdict::Inconclusive { depth })
}

fn compose(r: &Compiled, kids: &[usize], subs: &[Sub]) -> Option<(Key, u32)> {
    let mut offsets = Vec::with_capacity(kids.len());
    let mut total = r.nvars;
    for &k in kids {
        offsets.push(total);
        total += subs[k].nvars;
    }
    let mut uf = Uf::new(total as usize);
    let shift = |t: T, off: u32| match t {
        T::V(v) => T::V(v + off),
        c => c,
    };
    for ((atom, &k), &off) in r.idb.iter().zip(kids).zip(&offsets) {
        for (a, b) in atom.1.iter().zip(&subs[k].key.head) {
            if !uf.unify(*a, shift(*b, off)) {
                return None;
            }
        }
    }
    let head: Vec<T> = r.head.1.iter().map(|t| uf.resolve(*t)).collect();
    let mut facts: Vec<Fact> = r.edb.iter().map(|(p, a)| (*p, a.iter().map(|t| uf.resolve(*t)).collect())).collect();
    for (&k, &off) in kids.iter().zip(&offsets) {
        for (p, a) in &subs[k].key.facts {
            facts.push((*p, a.iter().map(|t| uf.resolve(shift(*t, off))).collect()));
        }
    }
    let mut all = BTreeSet::new();
    for v in 0..total {
        if let T::V(x) = uf.resolve(T::V(v)) {
            all.insert(x);
        }
    }
    let extra: u32 = kids.iter().map(|&k| subs[k].key.isolated).sum();
    Some(canonicalize(r.head.0, &head, &facts, &all, extra))
}

fn expansion(subs: &[Sub], id: usize) -> Expansion {
    Expansion { rule: subs[id].rule, children: subs[id].children.iter().map(|&c| expansion(subs, c)).collect() }
}

/// Evaluates the right-hand side on the canonical instance of a root
/// subtree; on failure, rebuilds the proof tree and validates the witness.
fn refute(
    nq: &NormalQuery,
    lhs: &QueryForm,
    rhs: &QueryForm,
    subs: &[Sub],
    id: usize,
    it: &Interner,
) -> Result<Option<Witness>, ContainmentError> {
    let key = &subs[id].key;
    let name = |t: &T| match t {
        T::V(v) => format!("#{v}"),
        T::C(c) => it.const_names[*c as usize].clone(),
    };
    let mut inst = DatabaseInstance::new();
    let pred_names: HashMap<u32, &String> = it.preds.iter().map(|(n, &i)| (i, n)).collect();
    for (p, a) in &key.facts {
        inst.insert(pred_names[p], a.iter().map(name).collect());
    }
    let answer: Vec<String> = key.head.iter().map(name).collect();
    inst.domain.extend(answer.iter().cloned());
    for i in 0..key.isolated {
        inst.domain.insert(format!("#iso{i}"));
    }
    let holds = check_answer(rhs, &inst, &answer).map_err(|e| ContainmentError::Internal(e.to_string()))?;
    if holds {
        return Ok(None);
    }
    make_witness(nq, lhs, rhs, &expansion(subs, id)).map(Some)
}
