//! Automata over annotated proof trees that recognise matches of a rule
//! (or of a whole flag-and-check program) in the canonical instance of a
//! proof tree.
//!
//! All automata here are generated on demand.  A matcher state records, for
//! every variable and λ of the rule, where the element it is mapped to lives
//! relative to the current node: it enters through a head variable, it is
//! created somewhere below, it is a constant, or it does not occur in the
//! subtree.  The state also records which body atoms, λ-labels and the
//! p-label still have to be found below.

use std::collections::{BTreeMap, BTreeSet};

use crate::automata::{top_down_accepts, two_way_accepts, Formula, NodeCtx, TopDown, Tree, TwoWay};
use crate::model::{Atom, Program, QueryForm, Rule, Term, HIT};
use crate::unify::{apply_atom, mgu, rename_rule_vars, Fresh, Subst};

use super::normal::normalize_rhs;
use super::proof::ProofAlphabet;
use super::ContainmentError;

/// A proof label together with its λ-label and optional p-label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AnnotatedLabel {
    pub label: usize,
    /// λ index to pool variable.
    pub lambda: BTreeMap<usize, String>,
    pub p: Option<Atom>,
}

impl AnnotatedLabel {
    pub fn plain(label: usize) -> AnnotatedLabel {
        AnnotatedLabel { label, lambda: BTreeMap::new(), p: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Loc {
    Head(String),
    Inside,
    Absent,
    Const(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Local {
    Var(String),
    Const(String),
    InChild(usize),
    Gone,
}

impl Local {
    fn term(&self) -> Option<Term> {
        match self {
            Local::Var(v) => Some(Term::Var(v.clone())),
            Local::Const(c) => Some(Term::Const(c.clone())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Arg {
    Slot(usize),
    Const(String),
}

/// State of a matcher run at a node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatchState {
    rule: usize,
    /// Expected head atom of the node; `None` at the root.
    head: Option<Atom>,
    loc: Vec<Loc>,
    atoms: u64,
    lams: u64,
    p: bool,
}

#[derive(Debug, Clone)]
struct Compiled {
    head_pred: String,
    head: Vec<Arg>,
    needs_p: bool,
    /// Number of slots; slots `0..n_vars` are variables, the rest are λs.
    slots: usize,
    n_vars: usize,
    lam_slot: BTreeMap<usize, usize>,
    atoms: Vec<(String, Vec<Arg>)>,
    /// Derived fact to establish wherever the atom is matched.
    spawns: Vec<Option<(String, Vec<Arg>)>>,
}

impl Compiled {
    fn new(rule: &Rule, aliases: &BTreeMap<usize, usize>, spawns: &BTreeMap<usize, Atom>) -> Compiled {
        let vars = rule.vars();
        let mut lams: BTreeSet<usize> = BTreeSet::new();
        for a in std::iter::once(&rule.head).chain(rule.body.iter()) {
            lams.extend(a.lambdas());
        }
        lams.extend(aliases.keys().copied());
        lams.extend(aliases.values().copied());
        let root = |j: usize| aliases.get(&j).copied().unwrap_or(j);
        let mut lam_slot = BTreeMap::new();
        let mut next = vars.len();
        for &j in lams.iter().filter(|&&j| root(j) == j) {
            lam_slot.insert(j, next);
            next += 1;
        }
        for &j in &lams {
            let slot = lam_slot[&root(j)];
            lam_slot.insert(j, slot);
        }
        let conv = |a: &Atom| -> Vec<Arg> {
            a.args
                .iter()
                .map(|t| match t {
                    Term::Var(v) => Arg::Slot(vars.iter().position(|w| w == v).unwrap()),
                    Term::Lambda(j) => Arg::Slot(lam_slot[j]),
                    Term::Const(c) => Arg::Const(c.clone()),
                })
                .collect()
        };
        Compiled {
            head_pred: rule.head.pred.clone(),
            head: conv(&rule.head),
            needs_p: rule.head.pred != HIT,
            slots: next,
            n_vars: vars.len(),
            lam_slot: lam_slot.clone(),
            atoms: rule.body.iter().map(|a| (a.pred.clone(), conv(a))).collect(),
            spawns: (0..rule.body.len()).map(|i| spawns.get(&i).map(|f| (f.pred.clone(), conv(f)))).collect(),
        }
    }

    fn lam_mask(&self) -> u64 {
        self.lam_slot.values().fold(0, |m, &s| m | 1 << (s - self.n_vars))
    }
}

fn product<T: Clone>(opts: &[Vec<T>]) -> Vec<Vec<T>> {
    let mut out = vec![Vec::new()];
    for o in opts {
        let mut next = Vec::with_capacity(out.len() * o.len());
        for prefix in &out {
            for x in o {
                let mut v = prefix.clone();
                v.push(x.clone());
                next.push(v);
            }
        }
        out = next;
    }
    out
}

fn bits(mask: u64) -> Vec<usize> {
    (0..64).filter(|i| mask >> i & 1 == 1).collect()
}

/// One way of continuing a matcher run at a node.
struct Step {
    children: Vec<MatchState>,
    spawns: Vec<(String, Vec<Term>)>,
}

/// Shared transition structure of all matchers over one proof alphabet.
#[derive(Debug, Clone)]
struct Core {
    alpha: ProofAlphabet,
    rules: Vec<Compiled>,
    consts: Vec<String>,
}

impl Core {
    fn new(alpha: &ProofAlphabet) -> Core {
        Core { alpha: alpha.clone(), rules: Vec::new(), consts: alpha.query.constants().into_iter().collect() }
    }

    fn initial(&self, r: usize) -> Vec<MatchState> {
        let c = &self.rules[r];
        let opts: Vec<Vec<Loc>> = (0..c.slots)
            .map(|s| {
                let mut o = vec![Loc::Inside];
                if s < c.n_vars {
                    o.extend(self.consts.iter().map(|k| Loc::Const(k.clone())));
                }
                o
            })
            .collect();
        product(&opts)
            .into_iter()
            .map(|loc| MatchState {
                rule: r,
                head: None,
                loc,
                atoms: (1u64 << c.atoms.len()) - 1,
                lams: c.lam_mask(),
                p: c.needs_p,
            })
            .collect()
    }

    /// Every state a run of rule `r` can be in at a node labelled `label`,
    /// optionally restricted to parents of a child in state `child`.
    fn candidates(&self, r: usize, label: usize, is_root: bool, child: Option<&MatchState>) -> Vec<MatchState> {
        if is_root {
            return self.initial(r);
        }
        let c = &self.rules[r];
        let head = &self.alpha.labels[label].head;
        let mut hv: Vec<String> = head.vars().into_iter().map(String::from).collect();
        hv.sort();
        hv.dedup();
        let opts: Vec<Vec<Loc>> = (0..c.slots)
            .map(|s| {
                let all = || {
                    let mut o: Vec<Loc> = hv.iter().map(|v| Loc::Head(v.clone())).collect();
                    o.push(Loc::Inside);
                    o.push(Loc::Absent);
                    if s < c.n_vars {
                        o.extend(self.consts.iter().map(|k| Loc::Const(k.clone())));
                    }
                    o
                };
                match child.map(|m| &m.loc[s]) {
                    None | Some(Loc::Absent) => all(),
                    Some(Loc::Head(u)) if hv.contains(u) => vec![Loc::Head(u.clone())],
                    Some(Loc::Head(_)) | Some(Loc::Inside) => vec![Loc::Inside],
                    Some(Loc::Const(k)) => vec![Loc::Const(k.clone())],
                }
            })
            .collect();
        let (am, lm, pm) = child.map_or((0, 0, false), |m| (m.atoms, m.lams, m.p));
        let full_a = (1u64 << c.atoms.len()) - 1;
        let full_l = c.lam_mask();
        let mut out = Vec::new();
        for loc in product(&opts) {
            for atoms in (0..=full_a).filter(|a| a & am == am && a & !full_a == 0) {
                for lams in (0..=full_l).filter(|l| l & lm == lm && l & !full_l == 0) {
                    for p in [false, true] {
                        if (p && !c.needs_p) || (pm && !p) {
                            continue;
                        }
                        out.push(MatchState { rule: r, head: Some(head.clone()), loc: loc.clone(), atoms, lams, p });
                    }
                }
            }
        }
        out
    }

    fn step(&self, s: &MatchState, al: &AnnotatedLabel) -> Vec<Step> {
        let Some(label) = self.alpha.labels.get(al.label) else { return Vec::new() };
        let c = &self.rules[s.rule];
        match &s.head {
            None if label.head.pred != self.alpha.query.goal => return Vec::new(),
            Some(h) if *h != label.head => return Vec::new(),
            _ => {}
        }
        let program = &self.alpha.query.program;
        let kids: Vec<&Atom> = label.body.iter().filter(|a| program.is_idb(&a.pred)).collect();
        let edb: Vec<&Atom> = label.body.iter().filter(|a| !program.is_idb(&a.pred)).collect();
        let mut lvars: Vec<String> = Vec::new();
        for a in std::iter::once(&label.head).chain(label.body.iter()) {
            for v in a.vars() {
                if !lvars.iter().any(|w| w == v) {
                    lvars.push(v.to_string());
                }
            }
        }
        let hvars: Vec<&str> = s.head.as_ref().map(|h| h.vars()).unwrap_or_default();
        // λ-labels pin the slot to a variable of this node.
        let mut pinned: BTreeMap<usize, &str> = BTreeMap::new();
        for (j, v) in &al.lambda {
            if let Some(&slot) = c.lam_slot.get(j) {
                if pinned.insert(slot, v).is_some_and(|w| w != v) {
                    return Vec::new();
                }
            }
        }
        let mut opts: Vec<Vec<Local>> = Vec::new();
        for (slot, loc) in s.loc.iter().enumerate() {
            let mut o = match loc {
                Loc::Head(v) => vec![Local::Var(v.clone())],
                Loc::Const(k) => vec![Local::Const(k.clone())],
                Loc::Absent => vec![Local::Gone],
                Loc::Inside => lvars
                    .iter()
                    .filter(|u| !hvars.contains(&u.as_str()))
                    .map(|u| Local::Var(u.clone()))
                    .chain((0..kids.len()).map(Local::InChild))
                    .collect(),
            };
            if let Some(v) = pinned.get(&slot) {
                o.retain(|l| matches!(l, Local::Var(u) if u == v));
            }
            if o.is_empty() {
                return Vec::new();
            }
            opts.push(o);
        }
        let image = |local: &[Local], args: &[Arg]| -> Option<Vec<Term>> {
            args.iter()
                .map(|a| match a {
                    Arg::Slot(i) => local[*i].term(),
                    Arg::Const(k) => Some(Term::Const(k.clone())),
                })
                .collect()
        };
        let mut out = Vec::new();
        for local in product(&opts) {
            let p_here = match (&al.p, c.needs_p) {
                (Some(pa), true) => {
                    let ok = s.p
                        && pa.pred == c.head_pred
                        && image(&local, &c.head).is_some_and(|args| args == pa.args);
                    if !ok {
                        continue;
                    }
                    true
                }
                _ => false,
            };
            let child_loc: Vec<Vec<Loc>> = kids
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    local
                        .iter()
                        .map(|l| match l {
                            Local::Var(u) if a.vars().contains(&u.as_str()) => Loc::Head(u.clone()),
                            Local::Const(k) => Loc::Const(k.clone()),
                            Local::InChild(k) if *k == i => Loc::Inside,
                            _ => Loc::Absent,
                        })
                        .collect()
                })
                .collect();
            // None stands for "here", Some(i) for child i.
            let mut places: Vec<Vec<Option<usize>>> = Vec::new();
            let atom_ids = bits(s.atoms);
            for &ai in &atom_ids {
                let (pred, args) = &c.atoms[ai];
                let mut o = Vec::new();
                if let Some(img) = image(&local, args) {
                    if edb.iter().any(|b| b.pred == *pred && b.args == img) {
                        o.push(None);
                    }
                }
                for (i, cl) in child_loc.iter().enumerate() {
                    if args.iter().all(|a| !matches!(a, Arg::Slot(s) if cl[*s] == Loc::Absent)) {
                        o.push(Some(i));
                    }
                }
                places.push(o);
            }
            let lam_ids = bits(s.lams);
            for &li in &lam_ids {
                let slot = c.n_vars + li;
                let mut o = Vec::new();
                if pinned.contains_key(&slot) {
                    o.push(None);
                }
                o.extend((0..kids.len()).filter(|&i| child_loc[i][slot] != Loc::Absent).map(Some));
                places.push(o);
            }
            if s.p && !p_here {
                places.push((0..kids.len()).map(Some).collect());
            }
            for choice in product(&places) {
                let mut children: Vec<MatchState> = kids
                    .iter()
                    .zip(&child_loc)
                    .map(|(a, loc)| MatchState {
                        rule: s.rule,
                        head: Some((*a).clone()),
                        loc: loc.clone(),
                        atoms: 0,
                        lams: 0,
                        p: false,
                    })
                    .collect();
                let mut spawns = Vec::new();
                for (k, &ai) in atom_ids.iter().enumerate() {
                    match choice[k] {
                        Some(i) => children[i].atoms |= 1 << ai,
                        None => {
                            if let Some((pred, args)) = &c.spawns[ai] {
                                spawns.push((pred.clone(), image(&local, args).expect("guard covers the fact")));
                            }
                        }
                    }
                }
                for (k, &li) in lam_ids.iter().enumerate() {
                    if let Some(i) = choice[atom_ids.len() + k] {
                        children[i].lams |= 1 << li;
                    }
                }
                if s.p && !p_here {
                    if let Some(i) = choice[atom_ids.len() + lam_ids.len()] {
                        children[i].p = true;
                    }
                }
                spawns.sort();
                spawns.dedup();
                out.push(Step { children, spawns });
            }
        }
        out
    }
}

fn check_matcher_rule(alpha: &ProofAlphabet, rho: &Rule) -> Result<(), ContainmentError> {
    let program = &alpha.query.program;
    if let Some(a) = rho.body.iter().find(|a| !program.is_edb(&a.pred)) {
        return Err(ContainmentError::Unsupported(format!("matched rules need EDB-only bodies, found {a}")));
    }
    Ok(())
}

/// Top-down automaton accepting the annotated matching trees of a rule
/// with an EDB-only body.  For a `hit` rule p-labels are ignored; for any
/// other rule exactly one node carries the p-label `head(v⃗)` and the head
/// variables are mapped to the classes of `v⃗` there.
#[derive(Debug, Clone)]
pub struct RuleMatcher {
    core: Core,
}

pub fn build_rule_matcher(alpha: &ProofAlphabet, rho: &Rule) -> Result<RuleMatcher, ContainmentError> {
    check_matcher_rule(alpha, rho)?;
    let mut core = Core::new(alpha);
    core.rules.push(Compiled::new(rho, &BTreeMap::new(), &BTreeMap::new()));
    Ok(RuleMatcher { core })
}

impl TopDown<AnnotatedLabel> for RuleMatcher {
    type State = MatchState;

    fn initial(&self) -> Vec<MatchState> {
        self.core.initial(0)
    }

    fn transitions(&self, q: &MatchState, label: &AnnotatedLabel, _rank: usize) -> Vec<Vec<MatchState>> {
        self.core.step(q, label).into_iter().map(|s| s.children).collect()
    }
}

impl RuleMatcher {
    pub fn accepts(&self, t: &Tree<AnnotatedLabel>) -> bool {
        top_down_accepts(self, t)
    }
}

/// States of the two-way automata built from matchers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TwoWayState {
    /// Initial state of a [`LocalizedMatcher`] at its start node.
    Start,
    /// Finish a matcher run in the subtree below.
    Down(MatchState),
    /// Complete the run above: the current node is the parent of child `i`
    /// (1-based), which is in the given state.
    Up(usize, MatchState),
    /// The fact `pred(args)` over the classes of this node's variables is
    /// derivable by the right-hand program.
    Derive(String, Vec<Term>),
}

fn down_atoms(st: &Step) -> Vec<Formula<TwoWayState>> {
    let mut f: Vec<Formula<TwoWayState>> =
        st.children.iter().enumerate().map(|(i, c)| Formula::Atom(i as i32 + 1, TwoWayState::Down(c.clone()))).collect();
    f.extend(st.spawns.iter().map(|(p, a)| Formula::Atom(0, TwoWayState::Derive(p.clone(), a.clone()))));
    f
}

fn up_check(s: &MatchState, ctx: NodeCtx) -> Formula<TwoWayState> {
    match (ctx.is_root, &s.head) {
        (true, None) => Formula::True,
        (false, Some(_)) => Formula::Atom(-1, TwoWayState::Up(ctx.child_index, s.clone())),
        _ => Formula::False,
    }
}

impl Core {
    /// Run of rule `r` through the current node, which carries the p-label `p`.
    fn started_here(&self, r: usize, label: &AnnotatedLabel, p: Option<Atom>, ctx: NodeCtx) -> Formula<TwoWayState> {
        let al = AnnotatedLabel { p, ..label.clone() };
        let mut alts = Vec::new();
        for s in self.candidates(r, label.label, ctx.is_root, None) {
            if s.p != self.rules[r].needs_p {
                continue;
            }
            for st in self.step(&s, &al) {
                let mut conj = down_atoms(&st);
                conj.push(up_check(&s, ctx));
                alts.push(Formula::And(conj));
            }
        }
        Formula::Or(alts)
    }

    fn two_way_delta(&self, q: &TwoWayState, label: &AnnotatedLabel, ctx: NodeCtx) -> Formula<TwoWayState> {
        let plain = AnnotatedLabel { p: None, ..label.clone() };
        match q {
            TwoWayState::Down(s) => Formula::Or(self.step(s, &plain).iter().map(|st| Formula::And(down_atoms(st))).collect()),
            TwoWayState::Up(i, child) => {
                let mut alts = Vec::new();
                for s in self.candidates(child.rule, label.label, ctx.is_root, Some(child)) {
                    for st in self.step(&s, &plain) {
                        if st.children.get(i - 1) != Some(child) {
                            continue;
                        }
                        let mut conj: Vec<Formula<TwoWayState>> = down_atoms(&st)
                            .into_iter()
                            .enumerate()
                            .filter(|(k, _)| *k != i - 1)
                            .map(|(_, f)| f)
                            .collect();
                        conj.push(up_check(&s, ctx));
                        alts.push(Formula::And(conj));
                    }
                }
                Formula::Or(alts)
            }
            TwoWayState::Start | TwoWayState::Derive(..) => Formula::False,
        }
    }
}

/// Two-way automaton that checks, from a start node `e` of a tree without
/// p-label, that the tree becomes a matching tree of the rule once `e`
/// carries the p-label `head(v⃗)`.
#[derive(Debug, Clone)]
pub struct LocalizedMatcher {
    core: Core,
    target: Vec<Term>,
}

pub fn localize(alpha: &ProofAlphabet, rho: &Rule, target: &[Term]) -> Result<LocalizedMatcher, ContainmentError> {
    check_matcher_rule(alpha, rho)?;
    if rho.head.args.len() != target.len() {
        return Err(ContainmentError::ArityMismatch(rho.head.args.len(), target.len()));
    }
    let mut core = Core::new(alpha);
    core.rules.push(Compiled::new(rho, &BTreeMap::new(), &BTreeMap::new()));
    Ok(LocalizedMatcher { core, target: target.to_vec() })
}

impl TwoWay<AnnotatedLabel> for LocalizedMatcher {
    type State = TwoWayState;

    fn initial(&self) -> Vec<TwoWayState> {
        vec![TwoWayState::Start]
    }

    fn accepting(&self, _q: &TwoWayState) -> bool {
        true
    }

    fn delta(&self, q: &TwoWayState, label: &AnnotatedLabel, ctx: NodeCtx) -> Formula<TwoWayState> {
        match q {
            TwoWayState::Start => {
                let p = Atom { pred: self.core.rules[0].head_pred.clone(), args: self.target.clone() };
                self.core.started_here(0, label, Some(p), ctx)
            }
            _ => self.core.two_way_delta(q, label, ctx),
        }
    }
}

impl LocalizedMatcher {
    /// Acceptance of a run started at the node with the given 1-based address.
    pub fn accepts_at(&self, t: &Tree<AnnotatedLabel>, node: &[usize]) -> Result<bool, ContainmentError> {
        two_way_accepts(self, t, node, None).map_err(|e| ContainmentError::InvalidTree(e.to_string()))
    }
}

/// Result of replacing every IDB atom of a rule by the guard of a chosen
/// rule for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardExpansion {
    pub source: Rule,
    /// Index into the program's rules, one per IDB body atom.
    pub chosen: Vec<usize>,
    pub unifier: Subst,
    pub result: Rule,
    /// Positions in `result.body` that hold replacement guards, with the
    /// IDB atom each one stands for.
    pub guards: Vec<(usize, Atom)>,
}

fn canonical_key(r: &Rule, guards: &[(usize, Atom)]) -> String {
    let mut s = Subst::new();
    for v in r.vars() {
        let n = s.len();
        s.insert(v, Term::Var(format!("_{n}")));
    }
    let body: Vec<String> = r.body.iter().map(|a| apply_atom(&s, a).to_string()).collect();
    let g: Vec<String> = guards.iter().map(|(i, a)| format!("{i}:{}", apply_atom(&s, a))).collect();
    format!("{} | {} | {}", apply_atom(&s, &r.head), body.join(","), g.join(","))
}

/// All guard expansions of `rho` with respect to the rules of `program`.
pub fn guard_expansions(rho: &Rule, program: &Program) -> Result<Vec<GuardExpansion>, ContainmentError> {
    let idb: Vec<usize> = (0..rho.body.len()).filter(|&i| program.is_idb(&rho.body[i].pred)).collect();
    let mut choices: Vec<Vec<usize>> = Vec::new();
    for &i in &idb {
        let pred = &rho.body[i].pred;
        let rules: Vec<usize> = (0..program.rules.len()).filter(|&k| program.rules[k].head.pred == *pred).collect();
        for &k in &rules {
            if program.guard_of(&program.rules[k]).is_none() {
                return Err(ContainmentError::Unsupported(format!("rule {} has no guard", program.rules[k])));
            }
        }
        choices.push(rules);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for chosen in product(&choices) {
        let renamed: Vec<Rule> =
            chosen.iter().enumerate().map(|(k, &r)| rename_rule_vars(&program.rules[r], &format!("#{k}"))).collect();
        let pairs: Vec<(&Atom, &Atom)> = idb.iter().zip(&renamed).map(|(&i, r)| (&r.head, &rho.body[i])).collect();
        let Some(theta) = mgu(&pairs) else { continue };
        let mut body = Vec::new();
        let mut guards = Vec::new();
        for (i, a) in rho.body.iter().enumerate() {
            match idb.iter().position(|&j| j == i) {
                None => body.push(apply_atom(&theta, a)),
                Some(k) => {
                    let g = program.guard_of(&renamed[k]).expect("checked above");
                    guards.push((body.len(), apply_atom(&theta, a)));
                    body.push(apply_atom(&theta, g));
                }
            }
        }
        let mut result = Rule::new(apply_atom(&theta, &rho.head), body);
        // Give the variables introduced by renaming readable names.
        let mut fresh = Fresh::new(rho.vars());
        let mut names = Subst::new();
        for v in result.vars().into_iter().filter(|v| v.contains('#')) {
            let base = v.split('#').next().unwrap_or("V").to_string();
            names.insert(v, Term::Var(fresh.prefer(&base)));
        }
        result = Rule::new(apply_atom(&names, &result.head), result.body.iter().map(|a| apply_atom(&names, a)).collect());
        let guards: Vec<(usize, Atom)> = guards.into_iter().map(|(i, a)| (i, apply_atom(&names, &a))).collect();
        if seen.insert(canonical_key(&result, &guards)) {
            out.push(GuardExpansion { source: rho.clone(), chosen, unifier: theta, result, guards });
        }
    }
    Ok(out)
}

/// Two-way automaton over λ-annotated proof trees of the left program that
/// accepts a tree when the right program matches its canonical instance
/// with every `λj` bound to the class its λ-label names.
#[derive(Debug, Clone)]
pub struct MatchAta {
    core: Core,
    /// Rule 0 checks the λ-labels; then come the expansions of the hit rules.
    hit_rules: Vec<usize>,
    by_pred: BTreeMap<String, Vec<usize>>,
    pub expansions: Vec<GuardExpansion>,
}

pub fn build_match_ata(alpha: &ProofAlphabet, rhs: &QueryForm) -> Result<MatchAta, ContainmentError> {
    let mp = normalize_rhs(rhs)?;
    let program = Program { edb: mp.edb.clone(), idb: mp.idb.clone(), rules: mp.rules.iter().map(|r| r.rule.clone()).collect(), ..Program::default() };
    let mut core = Core::new(alpha);
    let lam_check = Rule::new(Atom::hit(), Vec::new());
    let all: BTreeMap<usize, usize> = (1..=mp.arity).map(|j| (j, j)).collect();
    core.rules.push(Compiled::new(&lam_check, &all, &BTreeMap::new()));
    let mut hit_rules = Vec::new();
    let mut by_pred: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut expansions = Vec::new();
    for mr in &mp.rules {
        let mut aliases = BTreeMap::new();
        if mr.constraints.iter().any(|(_, t)| !matches!(t, Term::Lambda(_))) {
            // λ values are pool variables, never constants.
            continue;
        }
        for (j, t) in &mr.constraints {
            if let Term::Lambda(k) = t {
                aliases.insert(*j, *k);
            }
        }
        for e in guard_expansions(&mr.rule, &program)? {
            let spawns: BTreeMap<usize, Atom> = e.guards.iter().cloned().collect();
            let id = core.rules.len();
            core.rules.push(Compiled::new(&e.result, &aliases, &spawns));
            if mr.rule.head.pred == HIT {
                hit_rules.push(id);
            } else {
                by_pred.entry(mr.rule.head.pred.clone()).or_default().push(id);
            }
            expansions.push(e);
        }
    }
    Ok(MatchAta { core, hit_rules, by_pred, expansions })
}

impl TwoWay<AnnotatedLabel> for MatchAta {
    type State = TwoWayState;

    fn initial(&self) -> Vec<TwoWayState> {
        vec![TwoWayState::Start]
    }

    fn accepting(&self, _q: &TwoWayState) -> bool {
        true
    }

    fn delta(&self, q: &TwoWayState, label: &AnnotatedLabel, ctx: NodeCtx) -> Formula<TwoWayState> {
        match q {
            TwoWayState::Start => {
                if !ctx.is_root {
                    return Formula::False;
                }
                let check = self.core.started_here(0, label, None, ctx);
                let hits = self.hit_rules.iter().map(|&r| self.core.started_here(r, label, None, ctx)).collect();
                Formula::And(vec![check, Formula::Or(hits)])
            }
            TwoWayState::Derive(pred, args) => {
                let p = Atom { pred: pred.clone(), args: args.clone() };
                let alts = self
                    .by_pred
                    .get(pred)
                    .into_iter()
                    .flatten()
                    .map(|&r| self.core.started_here(r, label, Some(p.clone()), ctx))
                    .collect();
                Formula::Or(alts)
            }
            _ => self.core.two_way_delta(q, label, ctx),
        }
    }
}

impl MatchAta {
    pub fn accepts(&self, t: &Tree<AnnotatedLabel>) -> bool {
        two_way_accepts(self, t, &[], None).unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::check_answer;
    use crate::model::DatabaseInstance;
    use crate::parser::parse_query;
    use crate::witness::ProofTree;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    const TC: &str = "tc(X,Y) :- p(X,Y). tc(X,Z) :- tc(X,Y), p(Y,Z). query(X,Y) :- tc(X,Y).";
    const EX1: &str = "U(Y) :- p(@1,Y). U(Z) :- U(Y), p(Y,Z). hit :- U(@2). fcq arity 2 free 1,2.";

    fn alpha(src: &str) -> ProofAlphabet {
        super::super::proof_alphabet(&parse_query(src).unwrap(), 100_000).unwrap()
    }

    fn rule(src: &str) -> Rule {
        let q = parse_query(&format!("{src} fcq arity 2 free 1,2.")).unwrap();
        q.program().unwrap().rules[0].clone()
    }

    fn atom(p: &str, a: &[&str]) -> Atom {
        Atom::new(p, a.iter().map(|x| Term::var(x)).collect())
    }

    fn annotate(alpha: &ProofAlphabet, t: &ProofTree) -> Tree<AnnotatedLabel> {
        let label = alpha.label_index(&t.head, &t.body).expect("label");
        let lambda = t.lambda.iter().map(|(k, v)| (*k, v.as_var().unwrap().to_string())).collect();
        Tree::node(
            AnnotatedLabel { label, lambda, p: t.p_label.clone() },
            t.children.iter().map(|c| annotate(alpha, c)).collect(),
        )
    }

    /// Connectedness classes of a proof tree computed directly: preorder
    /// nodes, and a class id for every (node, variable) occurrence.
    struct Classes {
        nodes: Vec<ProofTree>,
        class: HashMap<(usize, String), usize>,
    }

    fn classes(t: &ProofTree) -> Classes {
        let mut nodes = Vec::new();
        let mut parent = Vec::new();
        fn walk(t: &ProofTree, p: Option<usize>, nodes: &mut Vec<ProofTree>, parent: &mut Vec<Option<usize>>) {
            let id = nodes.len();
            nodes.push(t.clone());
            parent.push(p);
            for c in &t.children {
                walk(c, Some(id), nodes, parent);
            }
        }
        walk(t, None, &mut nodes, &mut parent);
        let mut class = HashMap::new();
        let mut next = 0;
        for (id, n) in nodes.iter().enumerate() {
            let r = Rule::new(n.head.clone(), n.body.clone());
            for v in r.vars() {
                let inherited = if n.head.vars().contains(&v.as_str()) { parent[id].map(|p| class[&(p, v.clone())]) } else { None };
                let c = inherited.unwrap_or_else(|| {
                    next += 1;
                    next - 1
                });
                class.insert((id, v), c);
            }
        }
        Classes { nodes, class }
    }

    fn elem(c: &Classes, id: usize, t: &Term) -> String {
        match t {
            Term::Var(v) => format!("e{}", c.class[&(id, v.clone())]),
            other => other.to_string(),
        }
    }

    fn instance(c: &Classes, edb: &BTreeMap<String, usize>) -> DatabaseInstance {
        let mut i = DatabaseInstance::new();
        for (id, n) in c.nodes.iter().enumerate() {
            for a in &n.body {
                i.domain.extend(a.args.iter().map(|t| elem(c, id, t)));
                if edb.contains_key(&a.pred) {
                    i.insert(&a.pred, a.args.iter().map(|t| elem(c, id, t)).collect());
                }
            }
        }
        i
    }

    /// Element named by each λ-label, if every λ in `lams` occurs and all
    /// occurrences agree.
    fn lambda_values(c: &Classes, lams: &BTreeSet<usize>) -> Option<BTreeMap<usize, String>> {
        let mut out: BTreeMap<usize, String> = BTreeMap::new();
        for (id, n) in c.nodes.iter().enumerate() {
            for (k, v) in &n.lambda {
                if lams.contains(k) {
                    let e = elem(c, id, v);
                    if out.insert(*k, e.clone()).is_some_and(|o| o != e) {
                        return None;
                    }
                }
            }
        }
        (out.len() == lams.len()).then_some(out)
    }

    /// Whether the annotated tree is a matching tree for `rho`, by search
    /// over homomorphisms into the canonical instance.
    fn oracle_rule(a: &ProofAlphabet, rho: &Rule, t: &ProofTree) -> bool {
        let c = classes(t);
        let inst = instance(&c, &a.query.program.edb);
        let lams: BTreeSet<usize> = rho.body.iter().chain(std::iter::once(&rho.head)).flat_map(|x| x.lambdas()).collect();
        let Some(lv) = lambda_values(&c, &lams) else { return false };
        let mut fixed: BTreeMap<String, String> = BTreeMap::new();
        if rho.head.pred != HIT {
            let ps: Vec<usize> = (0..c.nodes.len()).filter(|&i| c.nodes[i].p_label.is_some()).collect();
            let [pid] = ps.as_slice() else { return false };
            let p = c.nodes[*pid].p_label.as_ref().unwrap();
            if p.pred != rho.head.pred {
                return false;
            }
            for (x, v) in rho.head.args.iter().zip(&p.args) {
                let e = elem(&c, *pid, v);
                match x {
                    Term::Var(x) => {
                        if fixed.insert(x.clone(), e.clone()).is_some_and(|o| o != e) {
                            return false;
                        }
                    }
                    Term::Lambda(j) if lv[j] == e => {}
                    Term::Const(k) if *k == e => {}
                    _ => return false,
                }
            }
        }
        let vars: Vec<String> = rho.vars().into_iter().filter(|v| !fixed.contains_key(v)).collect();
        let dom: Vec<String> = inst.domain.iter().cloned().collect();
        let mut choice = vec![0usize; vars.len()];
        loop {
            let mut s = fixed.clone();
            for (v, &k) in vars.iter().zip(&choice) {
                s.insert(v.clone(), dom[k].clone());
            }
            let ok = rho.body.iter().all(|b| {
                let tuple: Vec<String> = b
                    .args
                    .iter()
                    .map(|t| match t {
                        Term::Var(v) => s[v].clone(),
                        Term::Lambda(j) => lv[j].clone(),
                        Term::Const(k) => k.clone(),
                    })
                    .collect();
                inst.contains(&b.pred, &tuple)
            });
            if ok {
                return true;
            }
            let mut i = 0;
            while i < choice.len() {
                choice[i] += 1;
                if choice[i] < dom.len() {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
            if i == choice.len() || dom.is_empty() {
                return false;
            }
        }
    }

    /// Random proof tree of height at most `depth`.
    fn random_tree(a: &ProofAlphabet, r: &mut ChaCha8Rng, depth: usize) -> ProofTree {
        let by_head = |h: Option<&Atom>, leaf: bool| -> Vec<usize> {
            (0..a.labels.len())
                .filter(|&i| {
                    let l = &a.labels[i];
                    h.map_or(l.head.pred == a.query.goal, |h| l.head == *h) && (!leaf || a.ranked.rank(i) == 0)
                })
                .collect()
        };
        fn build(a: &ProofAlphabet, r: &mut ChaCha8Rng, h: Option<&Atom>, d: usize, by: &dyn Fn(Option<&Atom>, bool) -> Vec<usize>) -> ProofTree {
            let ls = by(h, d == 0);
            let ls = if ls.is_empty() { by(h, false) } else { ls };
            let l = &a.labels[*ls.choose(r).unwrap()];
            let mut t = ProofTree::leaf(l.head.clone(), l.body.clone());
            for b in l.body.iter().filter(|b| a.query.program.is_idb(&b.pred)) {
                t.children.push(build(a, r, Some(b), d.saturating_sub(1), by));
            }
            t
        }
        let d = r.gen_range(0..=depth);
        build(a, r, None, d, &by_head)
    }

    fn node_vars(t: &ProofTree) -> Vec<String> {
        Rule::new(t.head.clone(), t.body.clone()).vars()
    }

    fn all_nodes(t: &ProofTree) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for (i, c) in t.children.iter().enumerate() {
            out.extend(all_nodes(c).into_iter().map(|mut p| {
                p.insert(0, i + 1);
                p
            }));
        }
        out
    }

    fn node_mut<'a>(t: &'a mut ProofTree, addr: &[usize]) -> &'a mut ProofTree {
        match addr.split_first() {
            None => t,
            Some((&i, rest)) => node_mut(&mut t.children[i - 1], rest),
        }
    }

    /// Adds λ-labels for λ1..λk, usually consistent with the root head.
    fn random_lambdas(t: &mut ProofTree, r: &mut ChaCha8Rng, k: usize) {
        let nodes = all_nodes(t);
        for j in 1..=k {
            if r.gen_bool(0.1) {
                continue;
            }
            let at = nodes.choose(r).unwrap().clone();
            let n = node_mut(t, &at);
            let v = node_vars(n).choose(r).unwrap().clone();
            n.lambda.insert(j, Term::Var(v));
            if r.gen_bool(0.3) {
                let at = nodes.choose(r).unwrap().clone();
                let n = node_mut(t, &at);
                let v = node_vars(n).choose(r).unwrap().clone();
                n.lambda.insert(j, Term::Var(v));
            }
        }
    }

    fn consistent_root_lambdas(t: &mut ProofTree) {
        for (j, v) in t.head.args.clone().into_iter().enumerate() {
            t.lambda.insert(j + 1, v);
        }
    }

    #[test]
    fn single_edge_rule_matcher() {
        let a = alpha(TC);
        let m = build_rule_matcher(&a, &rule("hit :- p(@1,@2).")).unwrap();
        let mut t = ProofTree::leaf(atom("tc", &["V1", "V2"]), vec![atom("p", &["V1", "V2"])]);
        t.lambda.insert(1, Term::var("V1"));
        t.lambda.insert(2, Term::var("V2"));
        assert!(m.accepts(&annotate(&a, &t)));
        t.lambda.remove(&1);
        assert!(!m.accepts(&annotate(&a, &t)));
        t.lambda.insert(1, Term::var("V2"));
        assert!(!m.accepts(&annotate(&a, &t)));
    }

    #[test]
    fn unconnected_shared_variable_rejected() {
        let a = alpha("R(X) :- p(X,Y). G :- R(X), R(Y), q(X,Y). query :- G.");
        let m = build_rule_matcher(&a, &rule("hit :- p(X,Y), p(X,Z).")).unwrap();
        // The root splits into two leaves that both use V2, but V2 is not
        // in their heads, so the two occurrences name different elements.
        let leaf = |x: &str| ProofTree::leaf(atom("R", &[x]), vec![atom("p", &[x, "V2"])]);
        let mut root = ProofTree::leaf(atom("G", &[]), vec![atom("R", &["V1"]), atom("R", &["V3"]), atom("q", &["V1", "V3"])]);
        root.children = vec![leaf("V1"), leaf("V3")];
        assert!(m.accepts(&annotate(&a, &root)));
        let m2 = build_rule_matcher(&a, &rule("hit :- p(X,Y), p(Z,Y), q(X,Z).")).unwrap();
        assert!(!m2.accepts(&annotate(&a, &root)));
        assert!(!oracle_rule(&a, &rule("hit :- p(X,Y), p(Z,Y), q(X,Z)."), &root));
    }

    #[test]
    fn rule_matcher_agrees_with_oracle() {
        let a = alpha(TC);
        let rules = [
            "hit :- p(@1,@2).",
            "hit :- p(@1,X), p(X,@2).",
            "hit :- p(X,Y), p(Y,Z).",
            "U(X) :- p(X,Y).",
            "U(Y) :- p(X,Y), p(Y,@1).",
        ];
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let mut accepted = 0;
        for src in rules {
            let rho = rule(src);
            let m = build_rule_matcher(&a, &rho).unwrap();
            for _ in 0..60 {
                let mut t = random_tree(&a, &mut r, 2);
                random_lambdas(&mut t, &mut r, 2);
                if rho.head.pred != HIT {
                    let nodes = all_nodes(&t);
                    let at = nodes.choose(&mut r).unwrap().clone();
                    let n = node_mut(&mut t, &at);
                    let vs = node_vars(n);
                    let args = rho.head.args.iter().map(|_| Term::Var(vs.choose(&mut r).unwrap().clone())).collect();
                    n.p_label = Some(Atom { pred: rho.head.pred.clone(), args });
                }
                let expect = oracle_rule(&a, &rho, &t);
                accepted += expect as usize;
                assert_eq!(m.accepts(&annotate(&a, &t)), expect, "{src} on {t:?}");
            }
        }
        assert!(accepted > 10, "too few positive samples: {accepted}");
    }

    #[test]
    fn localize_agrees_with_rule_matcher() {
        let a = alpha(TC);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        for src in ["U(X) :- p(X,Y).", "U(X,Y) :- p(X,Z), p(Z,Y).", "U(Y) :- p(@1,Y)."] {
            let rho = rule(src);
            let m = build_rule_matcher(&a, &rho).unwrap();
            let mut positive = 0;
            for _ in 0..15 {
                let mut t = random_tree(&a, &mut r, 2);
                random_lambdas(&mut t, &mut r, 1);
                for at in all_nodes(&t) {
                    let vs = node_vars(t.node(&at).unwrap());
                    let target: Vec<Term> = rho.head.args.iter().map(|_| Term::Var(vs.choose(&mut r).unwrap().clone())).collect();
                    let loc = localize(&a, &rho, &target).unwrap();
                    let got = loc.accepts_at(&annotate(&a, &t), &at).unwrap();
                    let mut with_p = t.clone();
                    node_mut(&mut with_p, &at).p_label = Some(Atom { pred: rho.head.pred.clone(), args: target });
                    let expect = m.accepts(&annotate(&a, &with_p));
                    assert_eq!(expect, oracle_rule(&a, &rho, &with_p));
                    assert_eq!(got, expect, "{src} at {at:?} on {t:?}");
                    positive += got as usize;
                }
            }
            assert!(positive > 0, "{src}");
        }
    }

    #[test]
    fn localize_at_annotated_leaf() {
        let a = alpha(TC);
        let rho = rule("U(X) :- p(X,Y).");
        let child = ProofTree::leaf(atom("tc", &["V1", "V2"]), vec![atom("p", &["V1", "V2"])]);
        let mut root = ProofTree::leaf(atom("tc", &["V1", "V3"]), vec![atom("tc", &["V1", "V2"]), atom("p", &["V2", "V3"])]);
        root.children.push(child);
        let loc = localize(&a, &rho, &[Term::var("V2")]).unwrap();
        // From the leaf, V2 has an outgoing edge only through the root's p(V2,V3).
        assert!(loc.accepts_at(&annotate(&a, &root), &[1]).unwrap());
        let loc = localize(&a, &rho, &[Term::var("V3")]).unwrap();
        assert!(!loc.accepts_at(&annotate(&a, &root), &[]).unwrap());
        assert!(loc.accepts_at(&annotate(&a, &root), &[]).unwrap() == oracle_rule(&a, &rho, &{
            let mut t = root.clone();
            t.p_label = Some(atom("U", &["V3"]));
            t
        }));
    }

    #[test]
    fn guard_expansion_examples() {
        let p = parse_query("U(X,Y) :- e(X,Y). hit :- U(X,Y). fcq arity 0.").unwrap();
        let prog = p.program().unwrap();
        let ex = guard_expansions(&prog.rules[1], prog).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].result.to_string(), "hit :- e(X,Y).");
        assert_eq!(ex[0].guards, vec![(0, atom("U", &["X", "Y"]))]);
        let ex = guard_expansions(&prog.rules[0], prog).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].result, prog.rules[0]);
        let p = parse_query("U(X,Y) :- e(X,Y). U(X,Y) :- f(Y,X), U(Y,Z). hit :- U(X,Y). fcq arity 0.").unwrap();
        let prog = p.program().unwrap();
        let ex = guard_expansions(&prog.rules[2], prog).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1].result.to_string(), "hit :- f(Y,X).");
    }

    #[test]
    fn guard_expansion_unification_failure_drops_choice() {
        let p = parse_query("U(X,c) :- e(X,Y). U(X,X) :- f(X). hit :- U(a,b). fcq arity 0.").unwrap();
        let prog = p.program().unwrap();
        assert!(guard_expansions(&prog.rules[2], prog).unwrap().is_empty());
    }

    fn oracle_fcq(a: &ProofAlphabet, rhs: &QueryForm, t: &ProofTree) -> bool {
        let c = classes(t);
        let inst = instance(&c, &a.query.program.edb);
        let k = rhs.answer_arity();
        let Some(lv) = lambda_values(&c, &(1..=k).collect()) else { return false };
        check_answer(rhs, &inst, &lv.into_values().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn match_ata_accepts_consistent_tc_trees() {
        let a = alpha(TC);
        let ata = build_match_ata(&a, &parse_query(EX1).unwrap()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let mut t = random_tree(&a, &mut r, 2);
            consistent_root_lambdas(&mut t);
            assert!(ata.accepts(&annotate(&a, &t)), "{t:?}");
        }
    }

    #[test]
    fn match_ata_without_hit_rules_accepts_nothing() {
        let a = alpha(TC);
        let ata = build_match_ata(&a, &parse_query("U(Y) :- p(@1,Y). fcq arity 1 free 1.").unwrap()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut t = random_tree(&a, &mut r, 1);
            consistent_root_lambdas(&mut t);
            assert!(!ata.accepts(&annotate(&a, &t)));
        }
    }

    #[test]
    fn match_ata_direct_edge_accepts_depth_zero() {
        let a = alpha(TC);
        let ata = build_match_ata(&a, &parse_query("hit :- p(@1,@2). fcq arity 2 free 1,2.").unwrap()).unwrap();
        let mut leaf = ProofTree::leaf(atom("tc", &["V1", "V2"]), vec![atom("p", &["V1", "V2"])]);
        consistent_root_lambdas(&mut leaf);
        assert!(ata.accepts(&annotate(&a, &leaf)));
        let child = ProofTree::leaf(atom("tc", &["V1", "V2"]), vec![atom("p", &["V1", "V2"])]);
        let mut root = ProofTree::leaf(atom("tc", &["V1", "V3"]), vec![atom("tc", &["V1", "V2"]), atom("p", &["V2", "V3"])]);
        root.children.push(child);
        consistent_root_lambdas(&mut root);
        assert!(!ata.accepts(&annotate(&a, &root)));
    }

    #[test]
    fn match_ata_agrees_with_evaluation() {
        let a = alpha(TC);
        let rhss = [
            EX1,
            "hit :- p(@1,@2). fcq arity 2 free 1,2.",
            "V(X) :- p(X,Y). hit :- V(@1), p(Y,@2). fcq arity 2 free 1,2.",
            "U(Y) :- p(Y,Z). U(Y) :- p(Y,Z), U(Z). hit :- U(@1), p(@2,Y). fcq arity 2 free 1,2.",
            "query(X,X) :- p(X,Y).",
        ];
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for src in rhss {
            let rhs = parse_query(src).unwrap();
            let ata = build_match_ata(&a, &rhs).unwrap();
            let mut pos = 0;
            for _ in 0..40 {
                let mut t = random_tree(&a, &mut r, 2);
                if r.gen_bool(0.5) {
                    consistent_root_lambdas(&mut t);
                } else {
                    random_lambdas(&mut t, &mut r, 2);
                }
                let expect = oracle_fcq(&a, &rhs, &t);
                pos += expect as usize;
                assert_eq!(ata.accepts(&annotate(&a, &t)), expect, "{src} on {t:?}");
            }
            assert!(pos > 0, "{src}");
        }
    }
}
