//! Containment decision procedure.
//!
//! Proof trees of the left-hand side are explored bottom-up, one height at
//! a time, and summarized by *types*.  The type of a subtree records, for
//! every relevant placement of the answer elements, which facts of the
//! right-hand side (and which partial rule matches) over the subtree's
//! interface are derivable inside it, each guarded by the sets of interface
//! facts that have to be supplied from outside.  Two subtrees with the same
//! type can replace each other in any proof tree without changing whether
//! the right-hand side answers the tree's canonical instance, so the set of
//! types is finite and the exploration terminates.  A root type whose `hit`
//! is not derivable unconditionally yields a counterexample, which is
//! rebuilt as a proof tree and checked by direct evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::time::{Duration, Instant};

use crate::model::{QueryForm, QueryKind, Term, HIT};
use crate::witness::Verdict;

use super::normal::{normalize_lhs, normalize_rhs, MatchProgram, NormalQuery};
use super::oracle::{check_signatures, make_witness, query_constants};
use super::proof::Expansion;
use super::ContainmentError;

/// Which fragment of the right-hand side to assume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Auto,
    /// Right-hand side is a (frontier-guarded) flag-and-check query or a UCQ.
    Gq,
    /// Right-hand side is a Datalog query without λ constants, or a UCQ.
    Gdl,
    /// Right-hand side is a nested flag-and-check query.
    Nested,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Mode, String> {
        match s {
            "auto" => Ok(Mode::Auto),
            "gq" => Ok(Mode::Gq),
            "gdl" => Ok(Mode::Gdl),
            "nested" => Ok(Mode::Nested),
            _ => Err(format!("unknown mode {s}")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    /// Ceiling on the number of distinct subtree types.
    pub max_types: usize,
    /// Ceiling on the number of items in a single node closure.
    pub max_items: usize,
    pub timeout: Option<Duration>,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_types: 1_000_000, max_items: 200_000, timeout: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub patterns: usize,
    pub compositions: usize,
    pub statuses: usize,
    pub types: usize,
    pub rounds: usize,
}

pub fn decide_containment(lhs: &QueryForm, rhs: &QueryForm, mode: Mode) -> Result<Verdict, ContainmentError> {
    decide_containment_with(lhs, rhs, mode, Limits::default()).map(|(v, _)| v)
}

pub fn decide_containment_with(
    lhs: &QueryForm,
    rhs: &QueryForm,
    mode: Mode,
    limits: Limits,
) -> Result<(Verdict, EngineStats), ContainmentError> {
    check_signatures(lhs, rhs)?;
    check_mode(rhs, mode)?;
    let nq = normalize_lhs(lhs)?;
    let mp = normalize_rhs(rhs)?;
    let mut consts = query_constants(lhs);
    consts.extend(query_constants(rhs));
    let mut e = Engine::new(&nq, &mp, consts, limits)?;
    e.reachable()?;
    e.demand();
    match e.explore()? {
        Some(exp) => {
            let w = make_witness(&nq, lhs, rhs, &exp)?;
            Ok((Verdict::NotContained(Box::new(w)), e.stats))
        }
        None => Ok((Verdict::Contained, e.stats)),
    }
}

fn check_mode(rhs: &QueryForm, mode: Mode) -> Result<(), ContainmentError> {
    let kind = rhs.kind();
    let ok = match mode {
        Mode::Auto => kind != QueryKind::NestedFcq,
        Mode::Gq => matches!(kind, QueryKind::Fcq | QueryKind::Ucq),
        Mode::Gdl => matches!(kind, QueryKind::Datalog | QueryKind::Ucq),
        Mode::Nested => false,
    };
    if ok {
        Ok(())
    } else {
        Err(ContainmentError::Unsupported(format!("{mode:?} mode with a {kind:?} right-hand side")))
    }
}

// ------------------------------------------------------------ elements

/// An element as seen from a node: a class of the node's variables (or,
/// on an interface, a class of the head pattern), a constant, or an answer
/// element that does not occur in the subtree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Elem {
    Loc(u8),
    Const(u32),
    Abs(u8),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Fact {
    pred: u16,
    args: Vec<Elem>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Item {
    Fact(Fact),
    /// Partial match of a rule body: the matched atoms and the values of
    /// the variables still shared with the rest of the rule.
    Pm { rule: u16, set: u32, beta: Vec<Option<Elem>> },
}

/// Sorted set of facts that must hold on the interface.
type Premise = Vec<Fact>;
type Theory = BTreeMap<Item, Vec<Premise>>;

fn union(a: &Premise, b: &Premise) -> Premise {
    let mut out: Premise = a.iter().chain(b.iter()).cloned().collect();
    out.sort();
    out.dedup();
    out
}

fn subset(a: &Premise, b: &Premise) -> bool {
    a.iter().all(|f| b.binary_search(f).is_ok())
}

// ------------------------------------------------------- left-hand side

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum LT {
    V(u8),
    C(u32),
}

/// Head pattern: equal positions share a class, numbered by first
/// occurrence, or carry a constant.
type Pattern = Vec<LT>;

struct LRule {
    pred: usize,
    nvars: usize,
    head: Vec<LT>,
    edb: Vec<(Option<u16>, Vec<LT>)>,
    idb: Vec<(usize, Vec<LT>)>,
}

/// One way to build a node: a rule, the slots (predicate and pattern) of
/// its children and the slot of its head.
struct Comp {
    rule: usize,
    children: Vec<usize>,
    slot: usize,
    /// Node class of every head-pattern class.
    head_class: Vec<u8>,
    /// Node class of every pattern class of every child.
    child_class: Vec<Vec<u8>>,
    edb_facts: Vec<Fact>,
}

// ------------------------------------------------------ right-hand side

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RT {
    V(u8),
    C(u32),
    Lam(u8),
}

struct RAtom {
    pred: u16,
    args: Vec<RT>,
}

struct RRule {
    head: RAtom,
    body: Vec<RAtom>,
    nvars: usize,
    atom_vars: Vec<u32>,
    head_vars: u32,
    constraints: Vec<(usize, RT)>,
}

impl RRule {
    fn full(&self) -> u32 {
        if self.body.len() == 32 {
            u32::MAX
        } else {
            (1u32 << self.body.len()) - 1
        }
    }

    fn vars_of(&self, set: u32) -> u32 {
        let mut m = 0;
        for (i, v) in self.atom_vars.iter().enumerate() {
            if set & (1 << i) != 0 {
                m |= v;
            }
        }
        m
    }

    fn open(&self, set: u32) -> u32 {
        let mut inside = 0;
        let mut outside = self.head_vars;
        for (i, m) in self.atom_vars.iter().enumerate() {
            if set & (1 << i) != 0 {
                inside |= m;
            } else {
                outside |= m;
            }
        }
        inside & outside
    }
}

/// Placement of each answer element relative to a subtree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Se {
    /// Occurs in the head, as the given pattern class.
    Pos(u8),
    Const(u32),
    /// Does not occur; equal answer elements share the id.
    Abs(u8),
}

type Status = Vec<Se>;

struct Type {
    slot: usize,
    theories: Vec<Theory>,
    comp: usize,
    children: Vec<usize>,
    height: usize,
}

struct Engine {
    limits: Limits,
    start: Instant,
    consts: Vec<u32>,
    lrules: Vec<LRule>,
    goal: usize,
    r_idb: Vec<bool>,
    hit: u16,
    rrules: Vec<RRule>,
    slots: Vec<(usize, Pattern)>,
    slot_ids: HashMap<(usize, Pattern), usize>,
    comps: Vec<Comp>,
    demands: Vec<Vec<Status>>,
    /// Child status indices for every (composition, head status index).
    child_status: HashMap<(usize, usize), Vec<usize>>,
    stats: EngineStats,
}

fn pattern_of(uf: &mut Uf, args: &[LT]) -> Pattern {
    let mut seen: Vec<u32> = Vec::new();
    args.iter()
        .map(|t| match uf.resolve(*t) {
            R::C(c) => LT::C(c),
            R::V(r) => {
                let k = seen.iter().position(|&x| x == r).unwrap_or_else(|| {
                    seen.push(r);
                    seen.len() - 1
                });
                LT::V(k as u8)
            }
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum R {
    V(u32),
    C(u32),
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
        self.parent[x as usize] = r;
        r
    }

    fn resolve(&mut self, t: LT) -> R {
        match t {
            LT::C(c) => R::C(c),
            LT::V(v) => {
                let r = self.find(v as u32);
                self.cst[r as usize].map_or(R::V(r), R::C)
            }
        }
    }

    fn unify(&mut self, a: LT, b: LT) -> bool {
        match (self.resolve(a), self.resolve(b)) {
            (R::C(x), R::C(y)) => x == y,
            (R::V(v), R::C(c)) | (R::C(c), R::V(v)) => {
                self.cst[v as usize] = Some(c);
                true
            }
            (R::V(x), R::V(y)) => {
                if x != y {
                    self.parent[x as usize] = y;
                }
                true
            }
        }
    }

    /// Imposes a pattern on an argument list.
    fn impose(&mut self, args: &[LT], pat: &Pattern) -> bool {
        let mut first: Vec<Option<LT>> = vec![None; args.len()];
        for (a, p) in args.iter().zip(pat) {
            match p {
                LT::C(c) => {
                    if !self.unify(*a, LT::C(*c)) {
                        return false;
                    }
                }
                LT::V(k) => match first[*k as usize] {
                    Some(b) => {
                        if !self.unify(*a, b) {
                            return false;
                        }
                    }
                    None => first[*k as usize] = Some(*a),
                },
            }
        }
        true
    }
}

impl Engine {
    fn new(
        nq: &NormalQuery,
        mp: &MatchProgram,
        consts: BTreeSet<String>,
        limits: Limits,
    ) -> Result<Engine, ContainmentError> {
        let const_ids: HashMap<String, u32> = consts.iter().enumerate().map(|(i, c)| (c.clone(), i as u32)).collect();
        let mut rpreds: Vec<String> = mp.edb.keys().cloned().collect();
        rpreds.extend(mp.idb.keys().filter(|p| !mp.edb.contains_key(*p)).cloned());
        if !rpreds.iter().any(|p| p == HIT) {
            rpreds.push(HIT.to_string());
        }
        let r_idb: Vec<bool> = rpreds.iter().map(|p| mp.idb.contains_key(p) && p != HIT).collect();
        let rid: HashMap<&str, u16> = rpreds.iter().enumerate().map(|(i, p)| (p.as_str(), i as u16)).collect();
        let hit = rid[HIT];
        let mut rrules = Vec::new();
        for mr in &mp.rules {
            let r = &mr.rule;
            let vars = r.vars();
            if r.body.len() > 32 || vars.len() > 32 {
                return Err(ContainmentError::Unsupported(format!("rule {r} is too long")));
            }
            let conv_t = |t: &Term| match t {
                Term::Var(v) => RT::V(vars.iter().position(|w| w == v).unwrap() as u8),
                Term::Const(c) => RT::C(const_ids[c]),
                Term::Lambda(j) => RT::Lam((*j - 1) as u8),
            };
            let conv = |a: &crate::model::Atom| -> Result<RAtom, ContainmentError> {
                let pred = *rid
                    .get(a.pred.as_str())
                    .ok_or_else(|| ContainmentError::Unsupported(format!("predicate {} has no declaration", a.pred)))?;
                Ok(RAtom { pred, args: a.args.iter().map(conv_t).collect() })
            };
            let mask = |a: &RAtom| {
                a.args.iter().fold(0u32, |m, t| if let RT::V(v) = t { m | (1 << v) } else { m })
            };
            let head = conv(&r.head)?;
            let body: Vec<RAtom> = r.body.iter().map(conv).collect::<Result<_, _>>()?;
            rrules.push(RRule {
                head_vars: mask(&head),
                atom_vars: body.iter().map(mask).collect(),
                head,
                body,
                nvars: vars.len(),
                constraints: mr.constraints.iter().map(|(j, t)| (*j - 1, conv_t(t))).collect(),
            });
        }
        let p = &nq.program;
        let lpreds: Vec<String> = p.idb.keys().cloned().collect();
        let lid = |n: &str| lpreds.iter().position(|x| x == n);
        let goal = lid(&nq.goal).ok_or_else(|| ContainmentError::Internal("goal predicate not declared".into()))?;
        let mut lrules = Vec::new();
        for r in &p.rules {
            let vars = r.vars();
            if vars.len() > 200 {
                return Err(ContainmentError::Unsupported(format!("rule {r} has too many variables")));
            }
            let conv_t = |t: &Term| match t {
                Term::Var(v) => LT::V(vars.iter().position(|w| w == v).unwrap() as u8),
                Term::Const(c) => LT::C(const_ids[c]),
                Term::Lambda(_) => unreachable!("λ constants are rewritten away"),
            };
            let args = |a: &crate::model::Atom| a.args.iter().map(conv_t).collect::<Vec<_>>();
            lrules.push(LRule {
                pred: lid(&r.head.pred).ok_or_else(|| ContainmentError::Internal(format!("{} not declared", r.head.pred)))?,
                nvars: vars.len(),
                head: args(&r.head),
                edb: r
                    .body
                    .iter()
                    .filter(|a| !p.is_idb(&a.pred))
                    .map(|a| (rid.get(a.pred.as_str()).copied().filter(|&i| !r_idb[i as usize] && i != hit), args(a)))
                    .collect(),
                idb: r.body.iter().filter(|a| p.is_idb(&a.pred)).map(|a| (lid(&a.pred).unwrap(), args(a))).collect(),
            });
        }
        let mut consts_all: Vec<u32> = const_ids.values().copied().collect();
        consts_all.sort();
        Ok(Engine {
            limits,
            start: Instant::now(),
            consts: consts_all,
            lrules,
            goal,
            r_idb,
            hit,
            rrules,
            slots: Vec::new(),
            slot_ids: HashMap::new(),
            comps: Vec::new(),
            demands: Vec::new(),
            child_status: HashMap::new(),
            stats: EngineStats::default(),
        })
    }

    fn check_time(&self) -> Result<(), ContainmentError> {
        if self.limits.timeout.is_some_and(|t| self.start.elapsed() > t) {
            return Err(ContainmentError::ResourceLimit("timeout".into()));
        }
        Ok(())
    }

    fn slot(&mut self, pred: usize, pat: Pattern) -> (usize, bool) {
        if let Some(&s) = self.slot_ids.get(&(pred, pat.clone())) {
            return (s, false);
        }
        let s = self.slots.len();
        self.slots.push((pred, pat.clone()));
        self.slot_ids.insert((pred, pat), s);
        (s, true)
    }

    /// Phase 1: reachable head patterns and the compositions realizing them.
    fn reachable(&mut self) -> Result<(), ContainmentError> {
        let mut done: HashSet<(usize, Vec<usize>, usize)> = HashSet::new();
        // Coarser head patterns forced on a predicate by the atoms that use it.
        let mut requests: HashMap<usize, BTreeSet<Pattern>> = HashMap::new();
        loop {
            let before = (self.slots.len(), requests.values().map(BTreeSet::len).sum::<usize>());
            for ri in 0..self.lrules.len() {
                let lists: Vec<Vec<usize>> = self.lrules[ri]
                    .idb
                    .iter()
                    .map(|(p, _)| (0..self.slots.len()).filter(|&s| self.slots[s].0 == *p).collect())
                    .collect();
                if lists.iter().any(Vec::is_empty) {
                    continue;
                }
                let mut idx = vec![0usize; lists.len()];
                loop {
                    let kids: Vec<usize> = idx.iter().zip(&lists).map(|(&i, l)| l[i]).collect();
                    self.try_compose(ri, &kids, &mut requests, &mut done)?;
                    let mut k = 0;
                    while k < idx.len() {
                        idx[k] += 1;
                        if idx[k] < lists[k].len() {
                            break;
                        }
                        idx[k] = 0;
                        k += 1;
                    }
                    if k == idx.len() {
                        break;
                    }
                }
            }
            self.check_time()?;
            if (self.slots.len(), requests.values().map(BTreeSet::len).sum::<usize>()) == before {
                break;
            }
        }
        self.stats.patterns = self.slots.len();
        self.stats.compositions = self.comps.len();
        Ok(())
    }

    fn try_compose(
        &mut self,
        ri: usize,
        kids: &[usize],
        requests: &mut HashMap<usize, BTreeSet<Pattern>>,
        done: &mut HashSet<(usize, Vec<usize>, usize)>,
    ) -> Result<(), ContainmentError> {
        let r = &self.lrules[ri];
        let mut uf = Uf::new(r.nvars);
        for ((_, args), &s) in r.idb.iter().zip(kids) {
            if !uf.impose(args, &self.slots[s].1) {
                return Ok(());
            }
        }
        let natural = pattern_of(&mut uf, &r.head);
        let mut heads: Vec<Pattern> = requests.get(&r.pred).into_iter().flatten().filter(|p| **p != natural).cloned().collect();
        heads.insert(0, natural);
        for pat in heads {
            let mut u2 = Uf { parent: uf.parent.clone(), cst: uf.cst.clone() };
            let r = &self.lrules[ri];
            if !u2.impose(&r.head, &pat) || pattern_of(&mut u2, &r.head) != pat {
                continue;
            }
            let mut forced = false;
            for ((p, args), &s) in r.idb.iter().zip(kids) {
                let want = pattern_of(&mut u2, args);
                if want != self.slots[s].1 {
                    requests.entry(*p).or_default().insert(want);
                    forced = true;
                }
            }
            if forced {
                continue;
            }
            let pred = r.pred;
            let (slot, _) = self.slot(pred, pat.clone());
            if !done.insert((ri, kids.to_vec(), slot)) {
                continue;
            }
            let r = &self.lrules[ri];
            // Node classes: variable classes in order of first occurrence.
            let mut roots: Vec<u32> = Vec::new();
            let mut var_elem = Vec::with_capacity(r.nvars);
            for v in 0..r.nvars {
                var_elem.push(match u2.resolve(LT::V(v as u8)) {
                    R::C(c) => Elem::Const(c),
                    R::V(x) => {
                        let k = roots.iter().position(|&y| y == x).unwrap_or_else(|| {
                            roots.push(x);
                            roots.len() - 1
                        });
                        Elem::Loc(k as u8)
                    }
                });
            }
            let elem_of = |t: &LT| match t {
                LT::C(c) => Elem::Const(*c),
                LT::V(v) => var_elem[*v as usize],
            };
            let classes_of = |args: &[LT], p: &Pattern| -> Vec<u8> {
                let n = p.iter().filter_map(|t| if let LT::V(k) = t { Some(*k as usize + 1) } else { None }).max().unwrap_or(0);
                let mut out = vec![0u8; n];
                for (a, t) in args.iter().zip(p) {
                    if let (LT::V(k), Elem::Loc(x)) = (t, elem_of(a)) {
                        out[*k as usize] = x;
                    }
                }
                out
            };
            let head_class = classes_of(&r.head, &pat);
            let child_class = r.idb.iter().zip(kids).map(|((_, a), &s)| classes_of(a, &self.slots[s].1)).collect();
            let mut edb_facts: Vec<Fact> = r
                .edb
                .iter()
                .filter_map(|(p, args)| p.map(|p| Fact { pred: p, args: args.iter().map(elem_of).collect() }))
                .collect();
            edb_facts.sort();
            edb_facts.dedup();
            self.comps.push(Comp { rule: ri, children: kids.to_vec(), slot, head_class, child_class, edb_facts });
            if self.comps.len() > self.limits.max_types {
                return Err(ContainmentError::ResourceLimit("too many compositions".into()));
            }
        }
        Ok(())
    }

    fn root_status(&self, slot: usize) -> Status {
        self.slots[slot]
            .1
            .iter()
            .map(|t| match t {
                LT::V(k) => Se::Pos(*k),
                LT::C(c) => Se::Const(*c),
            })
            .collect()
    }

    /// Status of the answer elements in child `i` of a composition.
    fn child_status_of(&self, c: &Comp, s: &Status, i: usize) -> Status {
        let mut abs: Vec<(bool, u8)> = Vec::new();
        s.iter()
            .map(|se| {
                let key = match se {
                    Se::Const(x) => return Se::Const(*x),
                    Se::Abs(a) => (false, *a),
                    Se::Pos(k) => {
                        let n = c.head_class[*k as usize];
                        if let Some(k2) = c.child_class[i].iter().position(|&x| x == n) {
                            return Se::Pos(k2 as u8);
                        }
                        (true, n)
                    }
                };
                let id = abs.iter().position(|x| *x == key).unwrap_or_else(|| {
                    abs.push(key);
                    abs.len() - 1
                });
                Se::Abs(id as u8)
            })
            .collect()
    }

    /// Phase 2: statuses needed per slot, from the roots downwards.
    fn demand(&mut self) {
        self.demands = vec![Vec::new(); self.slots.len()];
        let mut queue = VecDeque::new();
        for s in 0..self.slots.len() {
            if self.slots[s].0 == self.goal {
                let st = self.root_status(s);
                self.demands[s].push(st);
                queue.push_back((s, 0usize));
            }
        }
        let mut by_slot: HashMap<usize, Vec<usize>> = HashMap::new();
        for (ci, c) in self.comps.iter().enumerate() {
            by_slot.entry(c.slot).or_default().push(ci);
        }
        while let Some((s, si)) = queue.pop_front() {
            let st = self.demands[s][si].clone();
            for &ci in by_slot.get(&s).map_or(&[][..], |v| v.as_slice()) {
                let c = &self.comps[ci];
                let mut idxs = Vec::new();
                for (i, &cs) in c.children.iter().enumerate() {
                    let child = self.child_status_of(c, &st, i);
                    let pos = match self.demands[cs].iter().position(|x| *x == child) {
                        Some(p) => p,
                        None => {
                            self.demands[cs].push(child);
                            queue.push_back((cs, self.demands[cs].len() - 1));
                            self.demands[cs].len() - 1
                        }
                    };
                    idxs.push(pos);
                }
                self.child_status.insert((ci, si), idxs);
            }
        }
        self.stats.statuses = self.demands.iter().map(Vec::len).sum();
    }

    /// Phase 3: types by height until no new type appears.  Returns the
    /// expansion tree of a counterexample, if any.
    fn explore(&mut self) -> Result<Option<Expansion>, ContainmentError> {
        let mut types: Vec<Type> = Vec::new();
        let mut seen: HashMap<(usize, Vec<Theory>), usize> = HashMap::new();
        let mut by_slot: HashMap<usize, Vec<usize>> = HashMap::new();
        let root_idx: HashMap<usize, usize> = (0..self.slots.len())
            .filter(|&s| self.slots[s].0 == self.goal)
            .map(|s| {
                let st = self.root_status(s);
                (s, self.demands[s].iter().position(|x| *x == st).unwrap())
            })
            .collect();
        let mut h = 0;
        loop {
            self.stats.rounds = h + 1;
            let mut added: Vec<usize> = Vec::new();
            for ci in 0..self.comps.len() {
                let c = &self.comps[ci];
                if self.demands[c.slot].is_empty() || (h == 0) != c.children.is_empty() {
                    continue;
                }
                let lists: Vec<&[usize]> =
                    c.children.iter().map(|s| by_slot.get(s).map_or(&[][..], |v| v.as_slice())).collect();
                if lists.iter().any(|l| l.is_empty()) {
                    continue;
                }
                let mut idx = vec![0usize; lists.len()];
                loop {
                    let kids: Vec<usize> = idx.iter().zip(&lists).map(|(&i, l)| l[i]).collect();
                    if h == 0 || kids.iter().any(|&k| types[k].height + 1 == h) {
                        self.check_time()?;
                        let theories = self.node_theories(ci, &kids, &types)?;
                        let slot = self.comps[ci].slot;
                        let key = (slot, theories);
                        if !seen.contains_key(&key) {
                            if types.len() >= self.limits.max_types {
                                return Err(ContainmentError::ResourceLimit(format!(
                                    "more than {} subtree types",
                                    self.limits.max_types
                                )));
                            }
                            let id = types.len();
                            if let Some(&ri) = root_idx.get(&slot) {
                                let hit = Item::Fact(Fact { pred: self.hit, args: Vec::new() });
                                let derivable = key.1[ri].get(&hit).is_some_and(|ps| ps.iter().any(Vec::is_empty));
                                types.push(Type { slot, theories: Vec::new(), comp: ci, children: kids.clone(), height: h });
                                if !derivable {
                                    self.stats.types = types.len();
                                    return Ok(Some(expansion(&types, &self.comps, id)));
                                }
                                types.pop();
                            }
                            seen.insert(key.clone(), id);
                            types.push(Type { slot, theories: key.1, comp: ci, children: kids, height: h });
                            added.push(id);
                        }
                    }
                    let mut k = 0;
                    while k < idx.len() {
                        idx[k] += 1;
                        if idx[k] < lists[k].len() {
                            break;
                        }
                        idx[k] = 0;
                        k += 1;
                    }
                    if k == idx.len() {
                        break;
                    }
                }
            }
            self.stats.types = types.len();
            if added.is_empty() {
                return Ok(None);
            }
            for id in added {
                by_slot.entry(types[id].slot).or_default().push(id);
            }
            h += 1;
        }
    }

    fn node_theories(&self, ci: usize, kids: &[usize], types: &[Type]) -> Result<Vec<Theory>, ContainmentError> {
        let c = &self.comps[ci];
        let mut out = Vec::with_capacity(self.demands[c.slot].len());
        for (si, st) in self.demands[c.slot].iter().enumerate() {
            let child_idx = &self.child_status[&(ci, si)];
            let mut children = Vec::with_capacity(kids.len());
            for (i, (&k, &cs)) in kids.iter().zip(child_idx).enumerate() {
                children.push((&types[k].theories[cs], self.child_translation(c, st, i)));
            }
            out.push(self.closure(c, st, &children)?);
        }
        Ok(out)
    }

    /// Maps the interface elements of child `i` to node elements.
    fn child_translation(&self, c: &Comp, st: &Status, i: usize) -> Translation {
        let child = self.child_status_of(c, st, i);
        let mut abs = Vec::new();
        for (j, se) in child.iter().enumerate() {
            if let Se::Abs(a) = se {
                if abs.len() <= *a as usize {
                    abs.push(self.node_lambda(c, st[j]));
                }
            }
        }
        Translation { loc: c.child_class[i].clone(), abs }
    }

    fn node_lambda(&self, c: &Comp, se: Se) -> Elem {
        match se {
            Se::Pos(k) => Elem::Loc(c.head_class[k as usize]),
            Se::Const(x) => Elem::Const(x),
            Se::Abs(a) => Elem::Abs(a),
        }
    }

    fn closure(&self, c: &Comp, st: &Status, children: &[(&Theory, Translation)]) -> Result<Theory, ContainmentError> {
        let lambda: Vec<Elem> = st.iter().map(|se| self.node_lambda(c, *se)).collect();
        let mut iface: Vec<Elem> = c.head_class.iter().map(|&n| Elem::Loc(n)).collect();
        iface.sort();
        iface.dedup();
        let mut abs: Vec<u8> = st.iter().filter_map(|se| if let Se::Abs(a) = se { Some(*a) } else { None }).collect();
        abs.sort();
        abs.dedup();
        let mut assumable_elems = iface.clone();
        assumable_elems.extend(self.consts.iter().map(|&x| Elem::Const(x)));
        assumable_elems.extend(abs.iter().map(|&a| Elem::Abs(a)));
        let enabled: Vec<bool> = self
            .rrules
            .iter()
            .map(|r| {
                r.constraints.iter().all(|(j, t)| match t {
                    RT::Lam(k) => st[*j] == st[*k as usize],
                    RT::C(x) => st[*j] == Se::Const(*x),
                    RT::V(_) => true,
                })
            })
            .collect();
        let mut cl = Closure {
            e: self,
            lambda,
            iface,
            assumable_elems,
            enabled,
            x: HashMap::new(),
            facts_by_pred: HashMap::new(),
            pms_by_rule: HashMap::new(),
            conds: Vec::new(),
            cond_index: HashMap::new(),
            queue: VecDeque::new(),
            max_items: self.limits.max_items,
        };
        for f in &c.edb_facts {
            cl.add(Item::Fact(f.clone()), Vec::new());
        }
        for (theory, tr) in children {
            for (item, prems) in theory.iter() {
                let item = tr.item(item);
                for p in prems {
                    let mut p: Premise = p.iter().map(|f| tr.fact(f)).collect();
                    p.sort();
                    p.dedup();
                    if p.is_empty() {
                        cl.add(item.clone(), p);
                    } else {
                        let id = cl.conds.len();
                        for f in &p {
                            cl.cond_index.entry(f.clone()).or_default().push(id);
                        }
                        cl.conds.push((item.clone(), p));
                    }
                }
            }
        }
        for id in 0..cl.conds.len() {
            cl.fire_cond(id, None);
        }
        cl.run()?;
        Ok(cl.export(&c.head_class))
    }
}

impl Engine {
    /// Drops entries that cannot contribute anything beyond other entries
    /// of the same theory.
    fn prune(&self, mut th: Theory) -> Theory {
        let hit = Item::Fact(Fact { pred: self.hit, args: Vec::new() });
        if th.get(&hit).is_some_and(|ps| ps.iter().any(Vec::is_empty)) {
            return Theory::from([(hit, vec![Vec::new()])]);
        }
        // A match that closes no variable is rebuilt from the exported facts.
        th.retain(|i, _| match i {
            Item::Pm { rule, set, .. } => {
                let r = &self.rrules[*rule as usize];
                r.vars_of(*set) & !r.open(*set) != 0
            }
            Item::Fact(_) => true,
        });
        let pms: Vec<(Item, Vec<Premise>)> =
            th.iter().filter(|(i, _)| matches!(i, Item::Pm { .. })).map(|(i, p)| (i.clone(), p.clone())).collect();
        for (small, sprems) in &pms {
            let Item::Pm { rule, set: s2, beta: b2 } = small else { unreachable!() };
            let r = &self.rrules[*rule as usize];
            let vars2 = r.vars_of(*s2);
            let keep: Vec<Premise> = sprems
                .iter()
                .filter(|p2| {
                    !pms.iter().any(|(big, bprems)| {
                        let Item::Pm { rule: r1, set: s1, beta: b1 } = big else { unreachable!() };
                        if r1 != rule || s1 == s2 || s1 & s2 != *s2 {
                            return false;
                        }
                        let open1 = r.open(*s1);
                        let agrees = (0..r.nvars)
                            .filter(|v| open1 & (1 << v) != 0)
                            .all(|v| vars2 & (1 << v) != 0 && b1[v] == b2[v]);
                        agrees && bprems.iter().any(|p1| subset(p1, p2))
                    })
                })
                .cloned()
                .collect();
            if keep.is_empty() {
                th.remove(small);
            } else if keep.len() < sprems.len() {
                th.insert(small.clone(), keep);
            }
        }
        th
    }
}

fn expansion(types: &[Type], comps: &[Comp], id: usize) -> Expansion {
    Expansion {
        rule: comps[types[id].comp].rule,
        children: types[id].children.iter().map(|&k| expansion(types, comps, k)).collect(),
    }
}

struct Translation {
    loc: Vec<u8>,
    abs: Vec<Elem>,
}

impl Translation {
    fn elem(&self, e: Elem) -> Elem {
        match e {
            Elem::Loc(k) => Elem::Loc(self.loc[k as usize]),
            Elem::Abs(a) => self.abs[a as usize],
            c => c,
        }
    }

    fn fact(&self, f: &Fact) -> Fact {
        Fact { pred: f.pred, args: f.args.iter().map(|e| self.elem(*e)).collect() }
    }

    fn item(&self, i: &Item) -> Item {
        match i {
            Item::Fact(f) => Item::Fact(self.fact(f)),
            Item::Pm { rule, set, beta } => Item::Pm {
                rule: *rule,
                set: *set,
                beta: beta.iter().map(|b| b.map(|e| self.elem(e))).collect(),
            },
        }
    }
}

/// Fixpoint of derivations at a single node.
struct Closure<'a> {
    e: &'a Engine,
    lambda: Vec<Elem>,
    iface: Vec<Elem>,
    assumable_elems: Vec<Elem>,
    enabled: Vec<bool>,
    x: HashMap<Item, Vec<Premise>>,
    facts_by_pred: HashMap<u16, Vec<Fact>>,
    pms_by_rule: HashMap<u16, Vec<Item>>,
    conds: Vec<(Item, Premise)>,
    cond_index: HashMap<Fact, Vec<usize>>,
    queue: VecDeque<(Item, Premise)>,
    max_items: usize,
}

impl Closure<'_> {
    fn is_iface(&self, e: Elem) -> bool {
        match e {
            Elem::Loc(_) => self.iface.binary_search(&e).is_ok(),
            _ => true,
        }
    }

    fn assumable(&self, f: &Fact) -> bool {
        self.e.r_idb[f.pred as usize] && f.args.iter().all(|&a| self.is_iface(a))
    }

    fn add(&mut self, item: Item, prem: Premise) {
        if let Item::Fact(f) = &item {
            if prem.binary_search(f).is_ok() {
                return;
            }
        }
        let entry = self.x.entry(item.clone());
        let fresh = matches!(entry, std::collections::hash_map::Entry::Vacant(_));
        let chain = entry.or_default();
        if chain.iter().any(|p| subset(p, &prem)) {
            return;
        }
        chain.retain(|p| !subset(&prem, p));
        chain.push(prem.clone());
        if fresh {
            match &item {
                Item::Fact(f) => self.facts_by_pred.entry(f.pred).or_default().push(f.clone()),
                Item::Pm { rule, .. } => self.pms_by_rule.entry(*rule).or_default().push(item.clone()),
            }
        }
        self.queue.push_back((item, prem));
    }

    /// Options for establishing a premise fact at this node.
    fn options(&self, f: &Fact) -> Vec<Premise> {
        let mut out: Vec<Premise> = self.x.get(&Item::Fact(f.clone())).cloned().unwrap_or_default();
        if self.assumable(f) {
            out.push(vec![f.clone()]);
        }
        out
    }

    /// Re-derives the item of a conditional entry, with `fixed` pinning the
    /// option of one premise.
    fn fire_cond(&mut self, id: usize, fixed: Option<(&Fact, &Premise)>) {
        let (item, prem) = self.conds[id].clone();
        let mut acc: Vec<Premise> = vec![Vec::new()];
        for f in &prem {
            let opts = match fixed {
                Some((g, p)) if g == f => vec![p.clone()],
                _ => self.options(f),
            };
            let mut next = Vec::new();
            for a in &acc {
                for o in &opts {
                    next.push(union(a, o));
                }
            }
            acc = next;
            if acc.is_empty() {
                return;
            }
        }
        for p in acc {
            self.add(item.clone(), p);
        }
    }

    fn run(&mut self) -> Result<(), ContainmentError> {
        while let Some((item, prem)) = self.queue.pop_front() {
            if self.x.len() > self.max_items {
                return Err(ContainmentError::ResourceLimit(format!("more than {} items at a node", self.max_items)));
            }
            // Skip entries that have been subsumed in the meantime.
            if !self.x.get(&item).is_some_and(|c| c.contains(&prem)) {
                continue;
            }
            match &item {
                Item::Fact(f) => self.process_fact(f, &prem),
                Item::Pm { rule, set, beta } => self.process_pm(*rule, *set, beta, &prem),
            }
        }
        Ok(())
    }

    fn process_fact(&mut self, f: &Fact, prem: &Premise) {
        if let Some(ids) = self.cond_index.get(f).cloned() {
            for id in ids {
                self.fire_cond(id, Some((f, prem)));
            }
        }
        let rules = &self.e.rrules;
        for (ri, r) in rules.iter().enumerate() {
            if !self.enabled[ri] {
                continue;
            }
            let empty = vec![None; r.nvars];
            for (ai, a) in r.body.iter().enumerate() {
                if a.pred != f.pred {
                    continue;
                }
                if let Some(pm) = self.extend(ri, 0, &empty, ai, f) {
                    self.add(pm, prem.clone());
                }
                // Existing partial matches missing this atom.
                let pms = self.pms_by_rule.get(&(ri as u16)).cloned().unwrap_or_default();
                for pm in pms {
                    let Item::Pm { set, beta, .. } = &pm else { unreachable!() };
                    if set & (1 << ai) != 0 {
                        continue;
                    }
                    if let Some(next) = self.extend(ri, *set, beta, ai, f) {
                        for b in self.x[&pm].clone() {
                            self.add(next.clone(), union(&b, prem));
                        }
                    }
                }
            }
        }
    }

    fn process_pm(&mut self, ri: u16, set: u32, beta: &[Option<Elem>], prem: &Premise) {
        let r = &self.e.rrules[ri as usize];
        if set == r.full() {
            let args = r.head.args.iter().map(|t| self.term(t, beta).expect("head variables are bound")).collect();
            self.add(Item::Fact(Fact { pred: r.head.pred, args }), prem.clone());
            return;
        }
        for (ai, a) in r.body.iter().enumerate() {
            if set & (1 << ai) != 0 {
                continue;
            }
            let facts = self.facts_by_pred.get(&a.pred).cloned().unwrap_or_default();
            for f in facts {
                if let Some(next) = self.extend(ri as usize, set, beta, ai, &f) {
                    for b in self.x[&Item::Fact(f.clone())].clone() {
                        self.add(next.clone(), union(&b, prem));
                    }
                }
            }
            if self.e.r_idb[a.pred as usize] {
                for f in self.assumptions(a, beta) {
                    if let Some(next) = self.extend(ri as usize, set, beta, ai, &f) {
                        self.add(next, union(&vec![f], prem));
                    }
                }
            }
        }
        let pms = self.pms_by_rule.get(&ri).cloned().unwrap_or_default();
        for pm in pms {
            let Item::Pm { set: s2, beta: b2, .. } = &pm else { unreachable!() };
            if set & s2 != 0 {
                continue;
            }
            if let Some(merged) = self.merge(ri as usize, set, beta, *s2, b2) {
                for b in self.x[&pm].clone() {
                    self.add(merged.clone(), union(&b, prem));
                }
            }
        }
    }

    fn term(&self, t: &RT, beta: &[Option<Elem>]) -> Option<Elem> {
        match t {
            RT::V(v) => beta[*v as usize],
            RT::C(c) => Some(Elem::Const(*c)),
            RT::Lam(j) => Some(self.lambda[*j as usize]),
        }
    }

    /// Adds body atom `ai`, matched to `f`, to a partial match.
    fn extend(&self, ri: usize, set: u32, beta: &[Option<Elem>], ai: usize, f: &Fact) -> Option<Item> {
        let r = &self.e.rrules[ri];
        let a = &r.body[ai];
        if a.pred != f.pred || a.args.len() != f.args.len() {
            return None;
        }
        let mut b = beta.to_vec();
        for (t, &e) in a.args.iter().zip(&f.args) {
            match t {
                RT::V(v) => match b[*v as usize] {
                    Some(x) if x != e => return None,
                    Some(_) => {}
                    None => b[*v as usize] = Some(e),
                },
                RT::C(c) => {
                    if e != Elem::Const(*c) {
                        return None;
                    }
                }
                RT::Lam(j) => {
                    if e != self.lambda[*j as usize] {
                        return None;
                    }
                }
            }
        }
        let set = set | (1 << ai);
        let open = r.open(set);
        for (v, x) in b.iter_mut().enumerate() {
            if open & (1 << v) == 0 {
                *x = None;
            }
        }
        Some(Item::Pm { rule: ri as u16, set, beta: b })
    }

    fn merge(&self, ri: usize, s1: u32, b1: &[Option<Elem>], s2: u32, b2: &[Option<Elem>]) -> Option<Item> {
        let r = &self.e.rrules[ri];
        let mut b = b1.to_vec();
        for (x, y) in b.iter_mut().zip(b2) {
            match (*x, *y) {
                (Some(p), Some(q)) if p != q => return None,
                (None, Some(q)) => *x = Some(q),
                _ => {}
            }
        }
        let set = s1 | s2;
        let open = r.open(set);
        for (v, x) in b.iter_mut().enumerate() {
            if open & (1 << v) == 0 {
                *x = None;
            }
        }
        Some(Item::Pm { rule: ri as u16, set, beta: b })
    }

    /// Interface facts that could match atom `a` under `beta`.
    fn assumptions(&self, a: &RAtom, beta: &[Option<Elem>]) -> Vec<Fact> {
        let mut out = vec![(Vec::with_capacity(a.args.len()), beta.to_vec())];
        for t in &a.args {
            let mut next = Vec::new();
            for (args, b) in out {
                match t {
                    RT::V(v) => match b[*v as usize] {
                        Some(e) => {
                            let mut args = args.clone();
                            args.push(e);
                            next.push((args, b));
                        }
                        None => {
                            for &e in &self.assumable_elems {
                                let mut args = args.clone();
                                args.push(e);
                                let mut b = b.clone();
                                b[*v as usize] = Some(e);
                                next.push((args, b));
                            }
                        }
                    },
                    RT::C(c) => {
                        let mut args = args;
                        args.push(Elem::Const(*c));
                        next.push((args, b));
                    }
                    RT::Lam(j) => {
                        let mut args = args;
                        args.push(self.lambda[*j as usize]);
                        next.push((args, b));
                    }
                }
            }
            out = next;
        }
        out.into_iter()
            .map(|(args, _)| Fact { pred: a.pred, args })
            .filter(|f| self.assumable(f))
            .collect()
    }

    /// Items over the interface, renamed to head-pattern classes.
    fn export(self, head_class: &[u8]) -> Theory {
        let to_iface = |e: Elem| -> Option<Elem> {
            match e {
                Elem::Loc(n) => head_class.iter().position(|&x| x == n).map(|k| Elem::Loc(k as u8)),
                other => Some(other),
            }
        };
        let fact = |f: &Fact| -> Option<Fact> {
            Some(Fact { pred: f.pred, args: f.args.iter().map(|&e| to_iface(e)).collect::<Option<_>>()? })
        };
        let mut out = Theory::new();
        for (item, prems) in self.x {
            let item = match item {
                Item::Fact(f) => match fact(&f) {
                    Some(f) => Item::Fact(f),
                    None => continue,
                },
                Item::Pm { rule, set, beta } => {
                    if set == self.e.rrules[rule as usize].full() {
                        continue;
                    }
                    let beta: Option<Vec<Option<Elem>>> = beta
                        .iter()
                        .map(|b| match b {
                            None => Some(None),
                            Some(e) => to_iface(*e).map(Some),
                        })
                        .collect();
                    match beta {
                        Some(beta) => Item::Pm { rule, set, beta },
                        None => continue,
                    }
                }
            };
            let mut ps: Vec<Premise> = prems
                .iter()
                .map(|p| {
                    let mut q: Premise = p.iter().map(|f| fact(f).expect("premises lie on the interface")).collect();
                    q.sort();
                    q
                })
                .collect();
            ps.sort();
            out.insert(item, ps);
        }
        self.e.prune(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_query;

    const TC: &str = "tc(X,Y) :- p(X,Y). tc(X,Z) :- tc(X,Y), p(Y,Z). query(X,Y) :- tc(X,Y).";
    const EX1: &str = "U(Y) :- p(@1,Y). U(Z) :- U(Y), p(Y,Z). hit :- U(@2). fcq arity 2 free 1,2.";

    fn q(s: &str) -> QueryForm {
        parse_query(s).unwrap()
    }

    #[test]
    fn reflexivity() {
        assert_eq!(decide_containment(&q(EX1), &q(EX1), Mode::Auto).unwrap(), Verdict::Contained);
    }

    #[test]
    fn path_in_tc() {
        let cq = q("query(X,Y) :- p(X,Z), p(Z,Y).");
        assert_eq!(decide_containment(&cq, &q(EX1), Mode::Gq).unwrap(), Verdict::Contained);
        assert_eq!(decide_containment(&q(TC), &q(EX1), Mode::Gq).unwrap(), Verdict::Contained);
    }

    #[test]
    fn unguarded_rhs_is_unsupported() {
        assert!(matches!(decide_containment(&q(TC), &q(TC), Mode::Gdl), Err(ContainmentError::Unsupported(_))));
    }

    #[test]
    fn tc_not_in_edge() {
        let v = decide_containment(&q(EX1), &q("hit :- p(@1,@2). fcq arity 2 free 1,2."), Mode::Gq).unwrap();
        let w = v.witness().expect("counterexample");
        assert_eq!(w.instance.fact_count(), 2);
        assert_eq!(w.answer, vec!["a".to_string(), "c".to_string()]);
        assert!(w.instance.contains("p", &["a".to_string(), "b".to_string()]));
        assert!(w.instance.contains("p", &["b".to_string(), "c".to_string()]));
    }

    #[test]
    fn reachability_variants() {
        // Forward and backward reachability define the same query.
        let back = q("U(Y) :- p(Y,@2). U(X) :- p(X,Y), U(Y). hit :- U(@1). fcq arity 2 free 1,2.");
        assert_eq!(decide_containment(&q(EX1), &back, Mode::Gq).unwrap(), Verdict::Contained);
        assert_eq!(decide_containment(&back, &q(EX1), Mode::Gq).unwrap(), Verdict::Contained);
        // Paths of even length are not all paths of length two.
        let even = q("e(X,Z) :- p(X,Y), p(Y,Z). e(X,Z) :- e(X,Y), p(Y,W), p(W,Z). query(X,Y) :- e(X,Y).");
        let v = decide_containment(&even, &q("query(X,Y) :- p(X,Z), p(Z,Y)."), Mode::Auto).unwrap();
        assert_eq!(v.witness().unwrap().instance.fact_count(), 4);
        assert_eq!(decide_containment(&even, &q(EX1), Mode::Auto).unwrap(), Verdict::Contained);
        // Odd-length reachability from an even-length guarded program.
        let odd = q("O(Y) :- p(@1,Y). O(Z) :- O(Y), p(Y,W), p(W,Z). hit :- O(@2). fcq arity 2 free 1,2.");
        let v = decide_containment(&even, &odd, Mode::Auto).unwrap();
        assert_eq!(v.witness().unwrap().instance.fact_count(), 2);
        assert!(matches!(decide_containment(&odd, &even, Mode::Gdl), Err(ContainmentError::Unsupported(_))));
    }

    #[test]
    fn parent_atoms_merge_child_positions() {
        // `tc(X,X)` only has expansions in which the cycle closes on X.
        let cyc = q("tc(X,Y) :- p(X,Y). tc(X,Z) :- tc(X,Y), p(Y,Z). query(X) :- tc(X,X).");
        let selfloop = q("edb p/2. query(X) :- p(X,X).");
        let v = decide_containment(&cyc, &selfloop, Mode::Auto).unwrap();
        let w = v.witness().expect("a two-cycle is a counterexample");
        assert_eq!(w.instance.fact_count(), 2);
        let back = q("edb p/2. query(X) :- p(X,Y), p(Y,Z).");
        assert_eq!(decide_containment(&cyc, &back, Mode::Auto).unwrap(), Verdict::Contained);
    }

    #[test]
    fn modes_are_checked() {
        assert!(matches!(decide_containment(&q(EX1), &q(TC), Mode::Gq), Err(ContainmentError::Unsupported(_))));
        assert!(matches!(decide_containment(&q(TC), &q(EX1), Mode::Gdl), Err(ContainmentError::Unsupported(_))));
    }
}
