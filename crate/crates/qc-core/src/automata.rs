//! Ranked trees, nondeterministic top-down tree automata (NFTA) and
//! alternating two-way tree automata (ATA2).
//!
//! A run of an ATA2 is accepted when every run leaf carries an accepting
//! state.  This covers leaves at real nodes, where the transition formula
//! holds without further obligations, as well as moves that leave the tree.
//! Moves above the root or below a node's rank are such out-of-tree moves
//! and succeed exactly for accepting states.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::hash::Hash;

use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AutomataError {
    #[error("alphabet mismatch: {0}")]
    AlphabetMismatch(String),
    #[error("label {0} is not in the alphabet")]
    UnknownLabel(String),
    #[error("node {0:?} is not in the tree")]
    InvalidNode(Vec<usize>),
    #[error("morphism changes the rank of {0}")]
    RankChange(String),
    #[error("state limit of {0} exceeded")]
    StateLimit(usize),
    #[error("malformed automaton JSON: {0}")]
    Json(String),
}

/// A ranked, labelled tree.  Node addresses are sequences of 1-based child
/// indices; the root is the empty address.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tree<L> {
    pub label: L,
    pub children: Vec<Tree<L>>,
}

impl<L> Tree<L> {
    pub fn leaf(label: L) -> Tree<L> {
        Tree { label, children: Vec::new() }
    }

    pub fn node(label: L, children: Vec<Tree<L>>) -> Tree<L> {
        Tree { label, children }
    }

    pub fn height(&self) -> usize {
        self.children.iter().map(|c| c.height() + 1).max().unwrap_or(0)
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(Tree::size).sum::<usize>()
    }

    pub fn subtree(&self, addr: &[usize]) -> Option<&Tree<L>> {
        match addr.split_first() {
            None => Some(self),
            Some((&i, rest)) => self.children.get(i.checked_sub(1)?)?.subtree(rest),
        }
    }

    /// All node addresses in preorder.
    pub fn addresses(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        fn walk<L>(t: &Tree<L>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            out.push(cur.clone());
            for (i, c) in t.children.iter().enumerate() {
                cur.push(i + 1);
                walk(c, cur, out);
                cur.pop();
            }
        }
        walk(self, &mut Vec::new(), &mut out);
        out
    }

    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> Tree<M> {
        Tree { label: f(&self.label), children: self.children.iter().map(|c| c.map(f)).collect() }
    }
}

/// Flattened view of a tree: preorder node ids with parent links.
pub struct Indexed<'a, L> {
    pub nodes: Vec<&'a Tree<L>>,
    pub parent: Vec<Option<usize>>,
    /// Child index (1-based) of each node in its parent; 0 for the root.
    pub child_index: Vec<usize>,
    pub children: Vec<Vec<usize>>,
    pub addr: Vec<Vec<usize>>,
}

impl<'a, L> Indexed<'a, L> {
    pub fn new(t: &'a Tree<L>) -> Indexed<'a, L> {
        let mut ix = Indexed { nodes: Vec::new(), parent: Vec::new(), child_index: Vec::new(), children: Vec::new(), addr: Vec::new() };
        fn walk<'a, L>(t: &'a Tree<L>, parent: Option<usize>, ci: usize, addr: Vec<usize>, ix: &mut Indexed<'a, L>) -> usize {
            let id = ix.nodes.len();
            ix.nodes.push(t);
            ix.parent.push(parent);
            ix.child_index.push(ci);
            ix.children.push(Vec::new());
            ix.addr.push(addr.clone());
            for (i, c) in t.children.iter().enumerate() {
                let mut a = addr.clone();
                a.push(i + 1);
                let cid = walk(c, Some(id), i + 1, a, ix);
                ix.children[id].push(cid);
            }
            id
        }
        walk(t, None, 0, Vec::new(), &mut ix);
        ix
    }

    pub fn find(&self, addr: &[usize]) -> Option<usize> {
        self.addr.iter().position(|a| a == addr)
    }

    /// Node reached by moving in direction `d` from `n`; `None` when the
    /// move leaves the tree.
    pub fn step(&self, n: usize, d: i32) -> Option<usize> {
        match d {
            -1 => self.parent[n],
            0 => Some(n),
            d if d > 0 => self.children[n].get(d as usize - 1).copied(),
            _ => None,
        }
    }
}

/// Ranked alphabet; labels are referred to by index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RankedAlphabet {
    pub symbols: Vec<(String, usize)>,
}

impl RankedAlphabet {
    pub fn new(symbols: &[(&str, usize)]) -> RankedAlphabet {
        RankedAlphabet { symbols: symbols.iter().map(|(n, r)| (n.to_string(), *r)).collect() }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn rank(&self, label: usize) -> usize {
        self.symbols[label].1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.symbols.iter().position(|(n, _)| n == name)
    }

    /// Checks that every node's label exists and has the node's out-degree.
    pub fn check_tree(&self, t: &Tree<usize>) -> Result<(), AutomataError> {
        match self.symbols.get(t.label) {
            Some((_, r)) if *r == t.children.len() => t.children.iter().try_for_each(|c| self.check_tree(c)),
            Some((n, _)) => Err(AutomataError::UnknownLabel(format!("{n} with {} children", t.children.len()))),
            None => Err(AutomataError::UnknownLabel(t.label.to_string())),
        }
    }
}

/// Nondeterministic top-down tree automaton.  `trans[(q, σ)]` lists the
/// child-state tuples allowed below a node labelled `σ` in state `q`; for a
/// rank-0 label the empty tuple means "may finish here".
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Nfta {
    pub alphabet: RankedAlphabet,
    pub num_states: usize,
    pub start: BTreeSet<usize>,
    pub trans: BTreeMap<(usize, usize), BTreeSet<Vec<usize>>>,
}

impl Nfta {
    pub fn new(alphabet: RankedAlphabet, num_states: usize) -> Nfta {
        Nfta { alphabet, num_states, ..Nfta::default() }
    }

    pub fn add(&mut self, q: usize, label: usize, children: Vec<usize>) {
        debug_assert_eq!(children.len(), self.alphabet.rank(label));
        self.trans.entry((q, label)).or_default().insert(children);
    }

    pub fn transitions(&self, q: usize, label: usize) -> impl Iterator<Item = &Vec<usize>> {
        self.trans.get(&(q, label)).into_iter().flat_map(|s| s.iter())
    }

    pub fn transition_count(&self) -> usize {
        self.trans.values().map(BTreeSet::len).sum()
    }
}

fn same_alphabet(a: &RankedAlphabet, b: &RankedAlphabet) -> Result<(), AutomataError> {
    if a != b {
        return Err(AutomataError::AlphabetMismatch(format!("{} vs {} symbols", a.len(), b.len())));
    }
    Ok(())
}

/// Membership by memoized top-down search.
pub fn nfta_membership(a: &Nfta, t: &Tree<usize>) -> Result<bool, AutomataError> {
    a.alphabet.check_tree(t)?;
    let ix = Indexed::new(t);
    let mut memo: HashMap<(usize, usize), bool> = HashMap::new();
    fn acc(a: &Nfta, ix: &Indexed<usize>, n: usize, q: usize, memo: &mut HashMap<(usize, usize), bool>) -> bool {
        if let Some(&b) = memo.get(&(n, q)) {
            return b;
        }
        let label = ix.nodes[n].label;
        let kids = &ix.children[n];
        let r = a
            .transitions(q, label)
            .any(|tuple| tuple.iter().zip(kids.iter()).all(|(&qc, &c)| acc(a, ix, c, qc, memo)));
        memo.insert((n, q), r);
        r
    }
    Ok(a.start.iter().any(|&q| acc(a, &ix, 0, q, &mut memo)))
}

/// Product automaton accepting the intersection of both languages.
pub fn nfta_intersection(a: &Nfta, b: &Nfta) -> Result<Nfta, AutomataError> {
    same_alphabet(&a.alphabet, &b.alphabet)?;
    let nb = b.num_states;
    let mut out = Nfta::new(a.alphabet.clone(), a.num_states * nb);
    for &p in &a.start {
        for &q in &b.start {
            out.start.insert(p * nb + q);
        }
    }
    for (&(p, l), ta) in &a.trans {
        for q in 0..nb {
            let Some(tb) = b.trans.get(&(q, l)) else { continue };
            for x in ta {
                for y in tb {
                    out.add(p * nb + q, l, x.iter().zip(y.iter()).map(|(&s, &t)| s * nb + t).collect());
                }
            }
        }
    }
    Ok(out)
}

/// Image of the language under a rank-preserving relabelling `h` (old
/// label index to label index of `target`).
pub fn nfta_project(a: &Nfta, h: &[usize], target: &RankedAlphabet) -> Result<Nfta, AutomataError> {
    for (l, &img) in h.iter().enumerate() {
        if target.symbols.get(img).map(|s| s.1) != Some(a.alphabet.rank(l)) {
            return Err(AutomataError::RankChange(a.alphabet.symbols[l].0.clone()));
        }
    }
    let mut out = Nfta::new(target.clone(), a.num_states);
    out.start = a.start.clone();
    for (&(q, l), ts) in &a.trans {
        for t in ts {
            out.add(q, h[l], t.clone());
        }
    }
    Ok(out)
}

/// Deterministic bottom-up form: reachable state sets and their transitions.
struct Determinized {
    sets: Vec<BTreeSet<usize>>,
    trans: BTreeMap<(usize, usize), BTreeSet<Vec<usize>>>,
}

fn determinize(a: &Nfta, cap: usize) -> Result<Determinized, AutomataError> {
    // Reverse index: label -> list of (parent state, child tuple).
    let mut by_label: Vec<Vec<(usize, &Vec<usize>)>> = vec![Vec::new(); a.alphabet.len()];
    for (&(q, l), ts) in &a.trans {
        for t in ts {
            by_label[l].push((q, t));
        }
    }
    let mut sets: Vec<BTreeSet<usize>> = Vec::new();
    let mut ids: HashMap<BTreeSet<usize>, usize> = HashMap::new();
    let mut trans: BTreeMap<(usize, usize), BTreeSet<Vec<usize>>> = BTreeMap::new();
    let mut seen_combo: HashSet<(usize, Vec<usize>)> = HashSet::new();
    let mut changed = true;
    while changed {
        changed = false;
        for l in 0..a.alphabet.len() {
            let r = a.alphabet.rank(l);
            let n = sets.len();
            if r > 0 && n == 0 {
                continue;
            }
            // Enumerate all r-tuples over current sets.
            let mut tuple = vec![0usize; r];
            loop {
                if seen_combo.insert((l, tuple.clone())) {
                    let s: BTreeSet<usize> = by_label[l]
                        .iter()
                        .filter(|(_, t)| t.iter().zip(tuple.iter()).all(|(q, &si)| sets[si].contains(q)))
                        .map(|(q, _)| *q)
                        .collect();
                    let id = match ids.get(&s) {
                        Some(&id) => id,
                        None => {
                            if sets.len() >= cap {
                                return Err(AutomataError::StateLimit(cap));
                            }
                            ids.insert(s.clone(), sets.len());
                            sets.push(s);
                            changed = true;
                            sets.len() - 1
                        }
                    };
                    trans.entry((id, l)).or_default().insert(tuple.clone());
                }
                let mut i = 0;
                while i < r {
                    tuple[i] += 1;
                    if tuple[i] < n {
                        break;
                    }
                    tuple[i] = 0;
                    i += 1;
                }
                if i == r {
                    break;
                }
            }
        }
    }
    Ok(Determinized { sets, trans })
}

fn from_determinized(alphabet: &RankedAlphabet, d: Determinized, accept: impl Fn(&BTreeSet<usize>) -> bool) -> Nfta {
    let mut out = Nfta::new(alphabet.clone(), d.sets.len());
    out.trans = d.trans;
    out.start = (0..d.sets.len()).filter(|&i| accept(&d.sets[i])).collect();
    out
}

/// Default ceiling on constructed state counts.
pub const DEFAULT_STATE_CAP: usize = 1_000_000;

/// Complement via bottom-up subset construction.
pub fn nfta_complement(a: &Nfta) -> Result<Nfta, AutomataError> {
    nfta_complement_capped(a, DEFAULT_STATE_CAP)
}

pub fn nfta_complement_capped(a: &Nfta, cap: usize) -> Result<Nfta, AutomataError> {
    let d = determinize(a, cap)?;
    Ok(from_determinized(&a.alphabet, d, |s| s.is_disjoint(&a.start)))
}

/// `None` if the language is empty, otherwise a tree of minimal height.
pub fn nfta_emptiness(a: &Nfta) -> Option<Tree<usize>> {
    let mut witness: Vec<Option<Tree<usize>>> = vec![None; a.num_states];
    loop {
        let mut round: Vec<(usize, Tree<usize>)> = Vec::new();
        for (&(q, l), ts) in &a.trans {
            if witness[q].is_some() || round.iter().any(|(r, _)| *r == q) {
                continue;
            }
            for t in ts {
                if t.iter().all(|&c| witness[c].is_some()) {
                    let kids = t.iter().map(|&c| witness[c].clone().expect("inhabited")).collect();
                    round.push((q, Tree::node(l, kids)));
                    break;
                }
            }
        }
        if round.is_empty() {
            break;
        }
        for (q, t) in round {
            witness[q] = Some(t);
        }
        if let Some(best) = a.start.iter().filter_map(|&q| witness[q].as_ref()).min_by_key(|t| t.height()) {
            return Some(best.clone());
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Containment {
    Contained,
    Counterexample(Tree<usize>),
}

/// `L(a) ⊆ L(b)`, decided as emptiness of `a ∩ complement(b)`.
pub fn nfta_containment(a: &Nfta, b: &Nfta) -> Result<Containment, AutomataError> {
    same_alphabet(&a.alphabet, &b.alphabet)?;
    let prod = nfta_intersection(a, &nfta_complement(b)?)?;
    Ok(match nfta_emptiness(&prod) {
        None => Containment::Contained,
        Some(t) => Containment::Counterexample(t),
    })
}

// ------------------------------------------------------------------ ATA2

/// Positive boolean formula over (direction, state) atoms.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Formula<S> {
    True,
    False,
    Atom(i32, S),
    And(Vec<Formula<S>>),
    Or(Vec<Formula<S>>),
}

impl<S> Formula<S> {
    pub fn eval(&self, f: &mut impl FnMut(i32, &S) -> bool) -> bool {
        match self {
            Formula::True => true,
            Formula::False => false,
            Formula::Atom(d, s) => f(*d, s),
            Formula::And(xs) => xs.iter().all(|x| x.eval(f)),
            Formula::Or(xs) => xs.iter().any(|x| x.eval(f)),
        }
    }

    pub fn atoms(&self) -> Vec<(i32, &S)> {
        let mut out = Vec::new();
        fn walk<'a, S>(f: &'a Formula<S>, out: &mut Vec<(i32, &'a S)>) {
            match f {
                Formula::Atom(d, s) => out.push((*d, s)),
                Formula::And(xs) | Formula::Or(xs) => xs.iter().for_each(|x| walk(x, out)),
                _ => {}
            }
        }
        walk(self, &mut out);
        out
    }

    pub fn and(xs: Vec<Formula<S>>) -> Formula<S> {
        Formula::And(xs)
    }

    pub fn or(xs: Vec<Formula<S>>) -> Formula<S> {
        Formula::Or(xs)
    }
}

/// Alternating two-way tree automaton with explicit states.  Missing
/// transitions are `False`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Ata2 {
    pub alphabet: RankedAlphabet,
    pub num_states: usize,
    pub start: BTreeSet<usize>,
    pub accepting: BTreeSet<usize>,
    pub delta: BTreeMap<(usize, usize), Formula<usize>>,
}

/// Context of a node visited by a two-way automaton.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeCtx {
    pub is_root: bool,
    /// 1-based index among the parent's children; 0 at the root.
    pub child_index: usize,
    pub rank: usize,
}

/// Two-way alternating automaton whose states are generated on demand.
pub trait TwoWay<L> {
    type State: Clone + Eq + Hash;
    fn initial(&self) -> Vec<Self::State>;
    fn accepting(&self, q: &Self::State) -> bool;
    fn delta(&self, q: &Self::State, label: &L, ctx: NodeCtx) -> Formula<Self::State>;
}

impl TwoWay<usize> for Ata2 {
    type State = usize;

    fn initial(&self) -> Vec<usize> {
        self.start.iter().copied().collect()
    }

    fn accepting(&self, q: &usize) -> bool {
        self.accepting.contains(q)
    }

    fn delta(&self, q: &usize, label: &usize, _ctx: NodeCtx) -> Formula<usize> {
        self.delta.get(&(*q, *label)).cloned().unwrap_or(Formula::False)
    }
}

/// Acceptance from `start_node` for any of `starts` (default: initial
/// states), computed as the least fixpoint of the alternating reachability
/// game on (node, state) pairs.
pub fn two_way_accepts<L, A: TwoWay<L>>(
    a: &A,
    t: &Tree<L>,
    start_node: &[usize],
    starts: Option<&[A::State]>,
) -> Result<bool, AutomataError> {
    let ix = Indexed::new(t);
    let n0 = ix.find(start_node).ok_or_else(|| AutomataError::InvalidNode(start_node.to_vec()))?;
    let starts: Vec<A::State> = match starts {
        Some(s) => s.to_vec(),
        None => a.initial(),
    };
    // Discover reachable positions and their formulas.
    let mut pos_id: HashMap<(usize, A::State), usize> = HashMap::new();
    let mut positions: Vec<(usize, A::State)> = Vec::new();
    let mut formulas: Vec<Formula<A::State>> = Vec::new();
    let mut queue = VecDeque::new();
    let mut intern = |n: usize, q: A::State, positions: &mut Vec<(usize, A::State)>, queue: &mut VecDeque<usize>| -> usize {
        *pos_id.entry((n, q.clone())).or_insert_with(|| {
            positions.push((n, q));
            queue.push_back(positions.len() - 1);
            positions.len() - 1
        })
    };
    let start_ids: Vec<usize> = starts.iter().map(|q| intern(n0, q.clone(), &mut positions, &mut queue)).collect();
    while let Some(p) = queue.pop_front() {
        let (n, q) = positions[p].clone();
        let ctx = NodeCtx { is_root: ix.parent[n].is_none(), child_index: ix.child_index[n], rank: ix.children[n].len() };
        let f = a.delta(&q, &ix.nodes[n].label, ctx);
        for (d, s) in f.atoms() {
            if let Some(m) = ix.step(n, d) {
                intern(m, s.clone(), &mut positions, &mut queue);
            }
        }
        while formulas.len() <= p {
            formulas.push(Formula::False);
        }
        formulas[p] = f;
    }
    let mut win = vec![false; positions.len()];
    let mut changed = true;
    while changed {
        changed = false;
        for p in 0..positions.len() {
            if win[p] {
                continue;
            }
            let (n, q) = &positions[p];
            let mut any_atom = false;
            let sat = formulas[p].eval(&mut |d, s| {
                let v = match ix.step(*n, d) {
                    Some(m) => win[pos_id[&(m, s.clone())]],
                    None => a.accepting(s),
                };
                any_atom |= v;
                v
            });
            // A position without winning successors is a run leaf and must be accepting.
            if sat && (any_atom || a.accepting(q)) {
                win[p] = true;
                changed = true;
            }
        }
    }
    Ok(start_ids.iter().any(|&p| win[p]))
}

pub fn ata2_membership(
    a: &Ata2,
    t: &Tree<usize>,
    start_node: &[usize],
    start_states: Option<&[usize]>,
) -> Result<bool, AutomataError> {
    a.alphabet.check_tree(t)?;
    two_way_accepts(a, t, start_node, start_states)
}

/// Winning-set summary of a subtree: for every parent winning set `W`
/// (bitmask index), the winning set at the subtree root.
type Summary = Vec<u64>;

fn summarize(a: &Ata2, label: usize, kids: &[&Summary]) -> Summary {
    let nq = a.num_states;
    let rank = kids.len();
    let acc_mask: u64 = a.accepting.iter().fold(0, |m, &q| m | (1 << q));
    let mut table = Vec::with_capacity(1 << nq);
    for w in 0..(1u64 << nq) {
        let mut x: u64 = 0;
        loop {
            let mut nx = 0u64;
            for q in 0..nq {
                let Some(f) = a.delta.get(&(q, label)) else { continue };
                let mut any = false;
                let sat = f.eval(&mut |d, &s| {
                    let v = match d {
                        -1 => w >> s & 1 == 1,
                        0 => x >> s & 1 == 1,
                        d if d >= 1 && (d as usize) <= rank => kids[d as usize - 1][x as usize] >> s & 1 == 1,
                        _ => acc_mask >> s & 1 == 1,
                    };
                    any |= v;
                    v
                });
                if sat && (any || acc_mask >> q & 1 == 1) {
                    nx |= 1 << q;
                }
            }
            if nx == x {
                break;
            }
            x = nx;
        }
        table.push(x);
    }
    table
}

/// Bottom-up deterministic automaton over summaries, returned with the
/// acceptance flag of each state.
fn ata2_summaries(a: &Ata2, cap: usize) -> Result<(Nfta, Vec<bool>), AutomataError> {
    if a.num_states > 16 {
        return Err(AutomataError::StateLimit(cap));
    }
    let acc_mask: u64 = a.accepting.iter().fold(0, |m, &q| m | (1 << q));
    let start_mask: u64 = a.start.iter().fold(0, |m, &q| m | (1 << q));
    let mut sums: Vec<Summary> = Vec::new();
    let mut ids: HashMap<Summary, usize> = HashMap::new();
    let mut trans: BTreeMap<(usize, usize), BTreeSet<Vec<usize>>> = BTreeMap::new();
    let mut seen: HashSet<(usize, Vec<usize>)> = HashSet::new();
    let mut changed = true;
    while changed {
        changed = false;
        for l in 0..a.alphabet.len() {
            let r = a.alphabet.rank(l);
            let n = sums.len();
            if r > 0 && n == 0 {
                continue;
            }
            let mut tuple = vec![0usize; r];
            loop {
                if seen.insert((l, tuple.clone())) {
                    let kids: Vec<&Summary> = tuple.iter().map(|&i| &sums[i]).collect();
                    let s = summarize(a, l, &kids);
                    let id = match ids.get(&s) {
                        Some(&id) => id,
                        None => {
                            if sums.len() >= cap {
                                return Err(AutomataError::StateLimit(cap));
                            }
                            ids.insert(s.clone(), sums.len());
                            sums.push(s);
                            changed = true;
                            sums.len() - 1
                        }
                    };
                    trans.entry((id, l)).or_default().insert(tuple.clone());
                }
                let mut i = 0;
                while i < r {
                    tuple[i] += 1;
                    if tuple[i] < n {
                        break;
                    }
                    tuple[i] = 0;
                    i += 1;
                }
                if i == r {
                    break;
                }
            }
        }
    }
    let accept: Vec<bool> = sums.iter().map(|s| s[acc_mask as usize] & start_mask != 0).collect();
    let mut out = Nfta::new(a.alphabet.clone(), sums.len());
    out.trans = trans;
    Ok((out, accept))
}

/// NFTA accepting the same trees as `a` (runs started at the root).
pub fn ata2_to_nfta(a: &Ata2) -> Result<Nfta, AutomataError> {
    ata2_to_nfta_capped(a, DEFAULT_STATE_CAP)
}

pub fn ata2_to_nfta_capped(a: &Ata2, cap: usize) -> Result<Nfta, AutomataError> {
    let (mut n, acc) = ata2_summaries(a, cap)?;
    n.start = (0..acc.len()).filter(|&i| acc[i]).collect();
    Ok(n)
}

/// NFTA accepting exactly the trees `a` rejects.
pub fn ata2_complement_to_nfta(a: &Ata2) -> Result<Nfta, AutomataError> {
    ata2_complement_to_nfta_capped(a, DEFAULT_STATE_CAP)
}

pub fn ata2_complement_to_nfta_capped(a: &Ata2, cap: usize) -> Result<Nfta, AutomataError> {
    let (mut n, acc) = ata2_summaries(a, cap)?;
    n.start = (0..acc.len()).filter(|&i| !acc[i]).collect();
    Ok(n)
}

/// Top-down automaton whose states are generated on demand.
pub trait TopDown<L> {
    type State: Clone + Eq + Hash;
    fn initial(&self) -> Vec<Self::State>;
    fn transitions(&self, q: &Self::State, label: &L, rank: usize) -> Vec<Vec<Self::State>>;
}

impl TopDown<usize> for Nfta {
    type State = usize;

    fn initial(&self) -> Vec<usize> {
        self.start.iter().copied().collect()
    }

    fn transitions(&self, q: &usize, label: &usize, _rank: usize) -> Vec<Vec<usize>> {
        self.transitions(*q, *label).cloned().collect()
    }
}

/// Membership for an on-demand top-down automaton.
pub fn top_down_accepts<L, A: TopDown<L>>(a: &A, t: &Tree<L>) -> bool {
    fn acc<L, A: TopDown<L>>(a: &A, t: &Tree<L>, q: &A::State) -> bool {
        a.transitions(q, &t.label, t.children.len())
            .iter()
            .any(|tuple| tuple.len() == t.children.len() && tuple.iter().zip(&t.children).all(|(qc, c)| acc(a, c, qc)))
    }
    a.initial().iter().any(|q| acc(a, t, q))
}

// ------------------------------------------------------------------ JSON

fn alphabet_json(a: &RankedAlphabet) -> Value {
    Value::Array(a.symbols.iter().map(|(n, r)| json!({"label": n, "rank": r})).collect())
}

fn state_name(q: usize) -> String {
    format!("q{q}")
}

pub fn formula_json(f: &Formula<usize>) -> Value {
    match f {
        Formula::True => json!({"and": []}),
        Formula::False => json!({"or": []}),
        Formula::Atom(d, s) => json!({"atom": [d, state_name(*s)]}),
        Formula::And(xs) => json!({"and": xs.iter().map(formula_json).collect::<Vec<_>>()}),
        Formula::Or(xs) => json!({"or": xs.iter().map(formula_json).collect::<Vec<_>>()}),
    }
}

pub fn nfta_to_json(a: &Nfta) -> Value {
    let trans: Vec<Value> = a
        .trans
        .iter()
        .flat_map(|(&(q, l), ts)| {
            ts.iter().map(move |t| {
                json!({"state": state_name(q), "label": a.alphabet.symbols[l].0,
                       "children": t.iter().map(|&c| state_name(c)).collect::<Vec<_>>()})
            })
        })
        .collect();
    json!({
        "kind": "nfta",
        "alphabet": alphabet_json(&a.alphabet),
        "states": (0..a.num_states).map(state_name).collect::<Vec<_>>(),
        "start": a.start.iter().map(|&q| state_name(q)).collect::<Vec<_>>(),
        "transitions": trans,
    })
}

pub fn ata2_to_json(a: &Ata2) -> Value {
    let trans: Vec<Value> = a
        .delta
        .iter()
        .map(|(&(q, l), f)| json!({"state": state_name(q), "label": a.alphabet.symbols[l].0, "formula": formula_json(f)}))
        .collect();
    json!({
        "kind": "ata2",
        "alphabet": alphabet_json(&a.alphabet),
        "states": (0..a.num_states).map(state_name).collect::<Vec<_>>(),
        "start": a.start.iter().map(|&q| state_name(q)).collect::<Vec<_>>(),
        "accepting": a.accepting.iter().map(|&q| state_name(q)).collect::<Vec<_>>(),
        "transitions": trans,
    })
}

fn jerr(m: &str) -> AutomataError {
    AutomataError::Json(m.to_string())
}

fn alphabet_from_json(v: &Value) -> Result<RankedAlphabet, AutomataError> {
    let arr = v.as_array().ok_or_else(|| jerr("alphabet"))?;
    let mut symbols = Vec::new();
    for s in arr {
        let n = s["label"].as_str().ok_or_else(|| jerr("label"))?;
        let r = s["rank"].as_u64().ok_or_else(|| jerr("rank"))?;
        symbols.push((n.to_string(), r as usize));
    }
    Ok(RankedAlphabet { symbols })
}

fn states_from_json(v: &Value) -> Result<HashMap<String, usize>, AutomataError> {
    let arr = v.as_array().ok_or_else(|| jerr("states"))?;
    Ok(arr.iter().enumerate().filter_map(|(i, s)| s.as_str().map(|s| (s.to_string(), i))).collect())
}

fn state_set(v: &Value, ids: &HashMap<String, usize>) -> Result<BTreeSet<usize>, AutomataError> {
    v.as_array()
        .ok_or_else(|| jerr("state list"))?
        .iter()
        .map(|s| s.as_str().and_then(|s| ids.get(s).copied()).ok_or_else(|| jerr("unknown state")))
        .collect()
}

fn formula_from_json(v: &Value, ids: &HashMap<String, usize>) -> Result<Formula<usize>, AutomataError> {
    if let Some(a) = v.get("atom") {
        let d = a[0].as_i64().ok_or_else(|| jerr("direction"))? as i32;
        let s = a[1].as_str().and_then(|s| ids.get(s).copied()).ok_or_else(|| jerr("atom state"))?;
        return Ok(Formula::Atom(d, s));
    }
    for (key, is_and) in [("and", true), ("or", false)] {
        if let Some(xs) = v.get(key).and_then(Value::as_array) {
            if xs.is_empty() {
                return Ok(if is_and { Formula::True } else { Formula::False });
            }
            let fs = xs.iter().map(|x| formula_from_json(x, ids)).collect::<Result<Vec<_>, _>>()?;
            return Ok(if is_and { Formula::And(fs) } else { Formula::Or(fs) });
        }
    }
    Err(jerr("formula"))
}

pub fn nfta_from_json(v: &Value) -> Result<Nfta, AutomataError> {
    let alphabet = alphabet_from_json(&v["alphabet"])?;
    let ids = states_from_json(&v["states"])?;
    let mut a = Nfta::new(alphabet, ids.len());
    a.start = state_set(&v["start"], &ids)?;
    for t in v["transitions"].as_array().ok_or_else(|| jerr("transitions"))? {
        let q = t["state"].as_str().and_then(|s| ids.get(s).copied()).ok_or_else(|| jerr("state"))?;
        let l = t["label"].as_str().and_then(|s| a.alphabet.index(s)).ok_or_else(|| jerr("label"))?;
        let kids: Vec<usize> = t["children"]
            .as_array()
            .ok_or_else(|| jerr("children"))?
            .iter()
            .map(|s| s.as_str().and_then(|s| ids.get(s).copied()).ok_or_else(|| jerr("child state")))
            .collect::<Result<_, _>>()?;
        a.trans.entry((q, l)).or_default().insert(kids);
    }
    Ok(a)
}

pub fn ata2_from_json(v: &Value) -> Result<Ata2, AutomataError> {
    let alphabet = alphabet_from_json(&v["alphabet"])?;
    let ids = states_from_json(&v["states"])?;
    let mut a = Ata2 { alphabet, num_states: ids.len(), ..Ata2::default() };
    a.start = state_set(&v["start"], &ids)?;
    a.accepting = state_set(&v["accepting"], &ids)?;
    for t in v["transitions"].as_array().ok_or_else(|| jerr("transitions"))? {
        let q = t["state"].as_str().and_then(|s| ids.get(s).copied()).ok_or_else(|| jerr("state"))?;
        let l = t["label"].as_str().and_then(|s| a.alphabet.index(s)).ok_or_else(|| jerr("label"))?;
        a.delta.insert((q, l), formula_from_json(&t["formula"], &ids)?);
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab() -> RankedAlphabet {
        RankedAlphabet::new(&[("a", 0), ("b", 0), ("f", 2)])
    }

    fn leaf_a() -> Nfta {
        let mut n = Nfta::new(ab(), 1);
        n.start.insert(0);
        n.add(0, 0, vec![]);
        n
    }

    #[test]
    fn leaf_acceptor() {
        let a = leaf_a();
        assert!(nfta_membership(&a, &Tree::leaf(0)).unwrap());
        assert!(!nfta_membership(&a, &Tree::leaf(1)).unwrap());
        assert_eq!(nfta_emptiness(&a), Some(Tree::leaf(0)));
    }

    #[test]
    fn no_leaf_transitions_is_empty() {
        let mut n = Nfta::new(ab(), 1);
        n.start.insert(0);
        n.add(0, 2, vec![0, 0]);
        assert_eq!(nfta_emptiness(&n), None);
    }

    #[test]
    fn containment_counterexample() {
        let a = leaf_a();
        let mut b = Nfta::new(ab(), 1);
        b.start.insert(0);
        b.add(0, 1, vec![]);
        assert_eq!(nfta_containment(&a, &b).unwrap(), Containment::Counterexample(Tree::leaf(0)));
        assert_eq!(nfta_containment(&a, &a).unwrap(), Containment::Contained);
    }

    #[test]
    fn complement_of_empty_accepts_all() {
        let mut e = Nfta::new(ab(), 1);
        e.start.insert(0);
        let c = nfta_complement(&e).unwrap();
        let t = Tree::node(2, vec![Tree::leaf(0), Tree::node(2, vec![Tree::leaf(1), Tree::leaf(0)])]);
        assert!(nfta_membership(&c, &t).unwrap());
    }

    #[test]
    fn projection_of_annotated_leaf() {
        let src = RankedAlphabet::new(&[("a_x", 0), ("a_y", 0)]);
        let mut n = Nfta::new(src, 1);
        n.start.insert(0);
        n.add(0, 1, vec![]);
        let tgt = RankedAlphabet::new(&[("a", 0)]);
        let p = nfta_project(&n, &[0, 0], &tgt).unwrap();
        assert!(nfta_membership(&p, &Tree::leaf(0)).unwrap());
        assert!(nfta_project(&n, &[0, 0], &RankedAlphabet::new(&[("a", 1)])).is_err());
    }

    fn ata(accepting: bool, f: Formula<usize>) -> Ata2 {
        let mut a = Ata2 { alphabet: ab(), num_states: 1, ..Ata2::default() };
        a.start.insert(0);
        if accepting {
            a.accepting.insert(0);
        }
        for l in 0..3 {
            a.delta.insert((0, l), f.clone());
        }
        a
    }

    #[test]
    fn accept_everything() {
        let a = ata(true, Formula::True);
        let t = Tree::node(2, vec![Tree::leaf(0), Tree::leaf(1)]);
        for n in t.addresses() {
            assert!(ata2_membership(&a, &t, &n, None).unwrap());
        }
        assert_eq!(nfta_emptiness(&ata2_complement_to_nfta(&a).unwrap()), None);
    }

    #[test]
    fn up_from_root_rejects_unless_accepting() {
        let a = ata(false, Formula::Atom(-1, 0));
        let t = Tree::leaf(0);
        assert!(!ata2_membership(&a, &t, &[], None).unwrap());
        let b = ata(true, Formula::Atom(-1, 0));
        assert!(ata2_membership(&b, &t, &[], None).unwrap());
    }

    #[test]
    fn true_formula_needs_accepting_leaf() {
        let a = ata(false, Formula::True);
        assert!(!ata2_membership(&a, &Tree::leaf(0), &[], None).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let mut a = ata(true, Formula::Or(vec![Formula::Atom(1, 0), Formula::True]));
        a.delta.insert((0, 1), Formula::False);
        assert_eq!(ata2_from_json(&ata2_to_json(&a)).unwrap(), a);
        let n = leaf_a();
        assert_eq!(nfta_from_json(&nfta_to_json(&n)).unwrap(), n);
    }
}
