//! Acceptance suite.  Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.  `QC_ACCEPTANCE=1,3` runs a subset.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use qc_core::atmgen::{gen_counter_encoding_with, gen_rhs, simulate_atm, AddressBits, AtmSpec};
use qc_core::automata::{
    ata2_complement_to_nfta, ata2_membership, ata2_to_nfta, nfta_complement, nfta_emptiness, nfta_membership, Ata2,
    Formula, Nfta, RankedAlphabet, Tree,
};
use qc_core::containment::{
    bounded_oracle_with, build_proof_automaton, decide_containment, decide_containment_with, proof_alphabet,
    unlabel_tree, ContainmentError, Limits, Mode, OracleLimits, ProofAlphabet,
};
use qc_core::eval::{check_answer, eval_query, witness_holds};
use qc_core::model::{classify, Atom, DatabaseInstance, QueryForm, Rule, Term};
use qc_core::parser::{parse_instance, parse_query, serialize_query};
use qc_core::rewrites::{self, SizeMetrics};
use qc_core::witness::{ProofTree, Verdict};

use common::*;

type Outcome = Result<String, String>;

fn main() {
    let only: Option<BTreeSet<u32>> =
        std::env::var("QC_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "differential containment vs bounded oracle", differential),
        (2, "witness validity", witness_validity),
        (3, "automata algebra", automata_algebra),
        (4, "proof-tree automaton vs structural checker", proof_automaton),
        (5, "rewrite equivalence and size", rewrite_equivalence),
        (6, "ladder example", ladder),
        (7, "ATM end-to-end", atm_end_to_end),
        (8, "parser round trip", parser_round_trip),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS criterion {n}: {name} ({detail}; {secs:.1}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {n}: {name} ({why}; {secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn q(text: &str) -> QueryForm {
    parse_query(text).unwrap_or_else(|e| panic!("{e}: {text}"))
}

// ------------------------------------------------------- criteria 1 and 2

const TC_FCQ: &str = "edb p/2. U(Y) :- p(@1,Y). U(Z) :- U(Y), p(Y,Z). hit :- U(@2). fcq arity 2 free 1,2.";
const TC_DL: &str = "edb p/2. T(X,Y) :- p(X,Y). T(X,Z) :- T(X,Y), p(Y,Z). query(X,Y) :- T(X,Y).";
const LADDER_GQ: &str = "edb p/2, q/2. U(@1,@2) :- q(@1,@2). \
    U(X2,Y2) :- U(X,Y), p(X,X2), p(Y,Y2), q(X2,Y2). hit :- U(@3,@4). fcq arity 4 free 1,2,3,4.";
const LADDER_MQ: &str = "edb p/2, q/2. U1(@1) :- q(@1,@2). U2(@2) :- q(@1,@2). \
    U1(X2) :- U1(X), U2(Y), p(X,X2), p(Y,Y2), q(X2,Y2). \
    U2(Y2) :- U1(X), U2(Y), p(X,X2), p(Y,Y2), q(X2,Y2). \
    hit :- U1(@3), U2(@4). fcq arity 4 free 1,2,3,4.";

fn hand_written_pairs() -> Vec<(String, QueryForm, QueryForm)> {
    let tc = q(TC_FCQ);
    let tcd = q(TC_DL);
    let edge = q("edb p/2. query(X,Y) :- p(X,Y).");
    let path2 = q("edb p/2. query(X,Y) :- p(X,Z), p(Z,Y).");
    let path3 = q("edb p/2. query(X,Y) :- p(X,Z), p(Z,W), p(W,Y).");
    let even = q("edb p/2. E(X,Y) :- p(X,Z), p(Z,Y). E(X,Y) :- E(X,Z), p(Z,W), p(W,Y). query(X,Y) :- E(X,Y).");
    let loop1 = q("edb p/2. query(X,X) :- p(X,X).");
    let gq = q(LADDER_GQ);
    let rung = q("edb p/2, q/2. hit :- q(@1,@2), q(@3,@4). fcq arity 4 free 1,2,3,4.");
    let gqd = rewrites::fcq_to_datalog(&gq).unwrap().0;
    vec![
        ("TC ⊑ edge".into(), tcd.clone(), edge.clone()),
        ("edge ⊑ TC".into(), edge.clone(), tc.clone()),
        ("2-path ⊑ TC".into(), path2.clone(), tc.clone()),
        ("3-path ⊑ TC".into(), path3, tc.clone()),
        ("TC ⊑ TC".into(), tcd, tc.clone()),
        ("even paths ⊑ TC".into(), even.clone(), tc.clone()),
        ("even paths ⊑ 2-path".into(), even, path2.clone()),
        ("self loop ⊑ 2-path".into(), loop1, path2),
        ("ladder ⊑ rungs".into(), gqd.clone(), rung),
        ("ladder ⊑ ladder".into(), gqd, gq),
    ]
}

#[derive(Default)]
struct DiffStats {
    decided: usize,
    contained: usize,
    not_contained: usize,
    unsupported: usize,
    capped: Vec<String>,
    contradictions: Vec<String>,
    /// Witnesses from either side that failed the eval double-check.
    bad_witnesses: Vec<String>,
    witnesses_checked: usize,
}

const CASE_BUDGET: Duration = Duration::from_secs(60);
const STATE_CAP: usize = 1_000_000;

fn capped(e: &ContainmentError) -> bool {
    matches!(e, ContainmentError::ResourceLimit(_))
}

fn run_case(name: &str, lhs: &QueryForm, rhs: &QueryForm, st: &mut DiffStats) {
    let start = Instant::now();
    let remaining = || CASE_BUDGET.saturating_sub(start.elapsed());
    let limits = Limits { max_types: STATE_CAP, timeout: Some(remaining()), ..Limits::default() };
    let engine = match decide_containment_with(lhs, rhs, Mode::Auto, limits) {
        Ok((v, _)) => v,
        Err(ContainmentError::Unsupported(_)) => {
            st.unsupported += 1;
            return;
        }
        Err(e) if capped(&e) => {
            st.capped.push(format!("{name} (engine: {e})"));
            return;
        }
        Err(e) => {
            st.contradictions.push(format!("{name}: engine error {e}"));
            return;
        }
    };
    let check = |w: &qc_core::witness::Witness, who: &str, st: &mut DiffStats| {
        st.witnesses_checked += 1;
        if !witness_holds(lhs, rhs, w).unwrap_or(false) {
            st.bad_witnesses.push(format!("{name} ({who})"));
        }
    };
    let depth = match &engine {
        Verdict::NotContained(w) => {
            check(w, "engine", st);
            w.proof_tree.height().max(4)
        }
        _ => 4,
    };
    let olimits = OracleLimits { max_subtrees: STATE_CAP, timeout: Some(remaining()) };
    let oracle = match bounded_oracle_with(lhs, rhs, depth, olimits) {
        Ok(v) => v,
        Err(e) if capped(&e) => {
            st.capped.push(format!("{name} (oracle: {e})"));
            return;
        }
        Err(e) => {
            st.contradictions.push(format!("{name}: oracle error {e}"));
            return;
        }
    };
    if let Verdict::NotContained(w) = &oracle {
        check(w, "oracle", st);
    }
    st.decided += 1;
    match (&engine, &oracle) {
        (Verdict::Contained, Verdict::NotContained(_)) => {
            st.contained += 1;
            st.contradictions.push(format!("{name}: engine contained, oracle refuted"));
        }
        (Verdict::Contained, _) => st.contained += 1,
        (Verdict::NotContained(w), Verdict::NotContained(ow)) => {
            st.not_contained += 1;
            if ow.proof_tree.height() > w.proof_tree.height().max(4) {
                st.contradictions.push(format!("{name}: oracle witness deeper than engine witness"));
            }
        }
        (Verdict::NotContained(_), _) => {
            st.not_contained += 1;
            st.contradictions.push(format!("{name}: engine refuted, oracle found nothing at height {depth}"));
        }
        (Verdict::Inconclusive { .. }, _) => st.contradictions.push(format!("{name}: engine inconclusive")),
    }
}

const RANDOM_PAIRS: usize = 200;

fn differential_stats() -> &'static DiffStats {
    static STATS: std::sync::OnceLock<DiffStats> = std::sync::OnceLock::new();
    STATS.get_or_init(|| {
        let mut st = DiffStats::default();
        for (name, l, r) in hand_written_pairs() {
            run_case(&name, &l, &r, &mut st);
        }
        let hand = st.decided;
        let mut seed = 0u64;
        while st.decided - hand < RANDOM_PAIRS && seed < 20 * RANDOM_PAIRS as u64 {
            let p = random_pair(seed);
            run_case(&format!("seed {seed} ({})", p.rhs_kind), &q(&p.lhs), &q(&p.rhs), &mut st);
            seed += 1;
        }
        st
    })
}

fn differential() -> Outcome {
    let st = differential_stats();
    let summary = format!(
        "{} decided: {} contained, {} not contained; {} unsupported skipped; {} capped excluded{}",
        st.decided,
        st.contained,
        st.not_contained,
        st.unsupported,
        st.capped.len(),
        if st.capped.is_empty() { String::new() } else { format!(" [{}]", st.capped.join("; ")) }
    );
    if st.decided < RANDOM_PAIRS + 10 {
        return Err(format!("too few decided pairs; {summary}"));
    }
    if !st.contradictions.is_empty() {
        return Err(format!("{}; {summary}", st.contradictions.join("; ")));
    }
    Ok(summary)
}

fn witness_validity() -> Outcome {
    let st = differential_stats();
    if st.bad_witnesses.is_empty() {
        Ok(format!("{} witnesses validated", st.witnesses_checked))
    } else {
        Err(format!("invalid witnesses: {}", st.bad_witnesses.join(", ")))
    }
}

// -------------------------------------------------------------- criterion 3

fn random_alphabet(r: &mut impl Rng) -> RankedAlphabet {
    let n = r.gen_range(1..=3);
    let mut symbols = vec![("a".to_string(), 0)];
    for (i, name) in ["b", "c"].iter().enumerate().take(n - 1) {
        symbols.push((name.to_string(), r.gen_range(0..=2).max(i)));
    }
    RankedAlphabet { symbols }
}

fn random_formula(r: &mut impl Rng, states: usize, rank: usize, depth: usize) -> Formula<usize> {
    let k = r.gen_range(0..10);
    if depth == 0 || k < 5 {
        return match k {
            0 => Formula::True,
            1 => Formula::False,
            _ => Formula::Atom(r.gen_range(-1..=rank as i32), r.gen_range(0..states)),
        };
    }
    let parts = (0..r.gen_range(1..=2)).map(|_| random_formula(r, states, rank, depth - 1)).collect();
    if k < 8 {
        Formula::And(parts)
    } else {
        Formula::Or(parts)
    }
}

fn random_ata2(r: &mut impl Rng) -> Ata2 {
    let alphabet = random_alphabet(r);
    let n = r.gen_range(1..=3);
    let mut a = Ata2 { alphabet, num_states: n, ..Ata2::default() };
    a.start.insert(0);
    if r.gen_bool(0.5) {
        a.start.insert(r.gen_range(0..n));
    }
    for s in 0..n {
        if r.gen_bool(0.5) {
            a.accepting.insert(s);
        }
        for l in 0..a.alphabet.len() {
            if r.gen_bool(0.8) {
                let f = random_formula(r, n, a.alphabet.rank(l), 2);
                a.delta.insert((s, l), f);
            }
        }
    }
    a
}

fn random_tree(r: &mut impl Rng, alpha: &RankedAlphabet, depth: usize) -> Tree<usize> {
    let choices: Vec<usize> = (0..alpha.len()).filter(|&l| depth > 0 || alpha.rank(l) == 0).collect();
    let l = *choices.choose(r).unwrap();
    Tree::node(l, (0..alpha.rank(l)).map(|_| random_tree(r, alpha, depth - 1)).collect())
}

fn random_nfta(r: &mut impl Rng) -> Nfta {
    let alphabet = random_alphabet(r);
    let n = r.gen_range(1..=3);
    let mut a = Nfta::new(alphabet, n);
    a.start.insert(r.gen_range(0..n));
    for s in 0..n {
        for l in 0..a.alphabet.len() {
            let k = a.alphabet.rank(l);
            for _ in 0..r.gen_range(0..=2) {
                a.add(s, l, (0..k).map(|_| r.gen_range(0..n)).collect());
            }
        }
    }
    a
}

/// Every tree over `alpha` of height at most `h`.
fn all_trees(alpha: &RankedAlphabet, h: usize) -> Vec<Tree<usize>> {
    let mut by_height: Vec<Vec<Tree<usize>>> = Vec::new();
    let mut upto: Vec<Tree<usize>> = Vec::new();
    for level in 0..=h {
        let mut fresh = Vec::new();
        for l in 0..alpha.len() {
            let k = alpha.rank(l);
            if k == 0 {
                if level == 0 {
                    fresh.push(Tree::leaf(l));
                }
                continue;
            }
            if level == 0 {
                continue;
            }
            // Children of height < level, at least one of height exactly level-1.
            let mut combos: Vec<Vec<Tree<usize>>> = vec![Vec::new()];
            for _ in 0..k {
                combos = combos
                    .into_iter()
                    .flat_map(|c| upto.iter().map(move |t| {
                        let mut c = c.clone();
                        c.push(t.clone());
                        c
                    }))
                    .collect();
            }
            for c in combos {
                if c.iter().any(|t| t.height() + 1 == level) {
                    fresh.push(Tree::node(l, c));
                }
            }
        }
        upto.extend(fresh.iter().cloned());
        by_height.push(fresh);
    }
    upto
}

fn automata_algebra() -> Outcome {
    let mut r = rng(3);
    let mut checks = 0usize;
    for i in 0..100 {
        let a = random_ata2(&mut r);
        let n = ata2_to_nfta(&a).map_err(|e| format!("ata2_to_nfta #{i}: {e}"))?;
        let c = ata2_complement_to_nfta(&a).map_err(|e| format!("complement #{i}: {e}"))?;
        let nc = nfta_complement(&n).map_err(|e| format!("nfta_complement #{i}: {e}"))?;
        for j in 0..100 {
            let d = r.gen_range(0..=3);
            let t = random_tree(&mut r, &a.alphabet, d);
            let direct = ata2_membership(&a, &t, &[], None).map_err(|e| e.to_string())?;
            let via = nfta_membership(&n, &t).map_err(|e| e.to_string())?;
            let comp = nfta_membership(&c, &t).map_err(|e| e.to_string())?;
            let flip = nfta_membership(&nc, &t).map_err(|e| e.to_string())?;
            if via != direct || comp == direct || flip == via {
                return Err(format!("ATA2 #{i}, tree #{j}: direct {direct}, nfta {via}, complement {comp}, nfta complement {flip}"));
            }
            checks += 1;
        }
    }
    let mut empties = 0;
    for i in 0..100 {
        let a = random_nfta(&mut r);
        let brute = all_trees(&a.alphabet, a.num_states)
            .into_iter()
            .find(|t| nfta_membership(&a, t).unwrap());
        match (nfta_emptiness(&a), brute) {
            (None, None) => empties += 1,
            (Some(t), Some(_)) if nfta_membership(&a, &t).unwrap() => {}
            (got, want) => return Err(format!("emptiness #{i}: got {got:?}, enumeration {want:?}")),
        }
    }
    Ok(format!("{checks} ATA2 membership checks; 100 emptiness checks, {empties} empty"))
}

// -------------------------------------------------------------- criterion 4

/// Matches `pattern` against `target`, extending `s`.
fn match_atom(pattern: &Atom, target: &Atom, s: &mut BTreeMap<String, Term>) -> bool {
    if pattern.pred != target.pred || pattern.args.len() != target.args.len() {
        return false;
    }
    for (p, t) in pattern.args.iter().zip(&target.args) {
        match p {
            Term::Var(v) => match s.get(v) {
                Some(b) if b != t => return false,
                Some(_) => {}
                None => {
                    s.insert(v.clone(), t.clone());
                }
            },
            other => {
                if other != t {
                    return false;
                }
            }
        }
    }
    true
}

fn instance_of(rule: &Rule, head: &Atom, body: &[Atom]) -> bool {
    let mut s = BTreeMap::new();
    rule.body.len() == body.len()
        && match_atom(&rule.head, head, &mut s)
        && rule.body.iter().zip(body).all(|(p, t)| match_atom(p, t, &mut s))
}

/// Direct check of the proof-tree conditions: the root derives the goal,
/// every node instantiates a rule, and the children derive exactly the IDB
/// body atoms of their parent, in order.
fn is_proof_tree(alpha: &ProofAlphabet, t: &ProofTree) -> bool {
    let p = &alpha.query.program;
    fn node_ok(p: &qc_core::model::Program, t: &ProofTree) -> bool {
        let idb: Vec<&Atom> = t.body.iter().filter(|a| p.idb.contains_key(&a.pred)).collect();
        p.rules.iter().any(|r| instance_of(r, &t.head, &t.body))
            && idb.len() == t.children.len()
            && idb.iter().zip(&t.children).all(|(a, c)| **a == c.head)
            && t.children.iter().all(|c| node_ok(p, c))
    }
    t.head.pred == alpha.query.goal && node_ok(p, t)
}

fn count_trees(alpha: &RankedAlphabet, h: usize) -> f64 {
    let mut upto = 0.0f64;
    for _ in 0..=h {
        upto = (0..alpha.len()).map(|l| upto.powi(alpha.rank(l) as i32)).sum();
    }
    upto
}

fn guided_tree(r: &mut impl Rng, alpha: &ProofAlphabet, h: usize, want: Option<&Atom>) -> Tree<usize> {
    let fits: Vec<usize> = (0..alpha.labels.len())
        .filter(|&i| want.is_none_or(|w| alpha.labels[i].head == *w))
        .filter(|&i| h > 0 || alpha.ranked.rank(i) == 0)
        .collect();
    let l = match fits.choose(r) {
        Some(&l) if r.gen_bool(0.9) => l,
        _ => {
            let any: Vec<usize> = (0..alpha.labels.len()).filter(|&i| h > 0 || alpha.ranked.rank(i) == 0).collect();
            *any.choose(r).unwrap()
        }
    };
    let lab = &alpha.labels[l];
    let idb: Vec<Atom> = lab.body.iter().filter(|a| alpha.query.program.idb.contains_key(&a.pred)).cloned().collect();
    Tree::node(l, idb.iter().map(|a| guided_tree(r, alpha, h.saturating_sub(1), Some(a))).collect())
}

fn proof_automaton() -> Outcome {
    let mut r = rng(4);
    let mut programs = 0;
    let (mut trees, mut accepted) = (0usize, 0usize);
    let mut seed = 0;
    while programs < 20 {
        seed += 1;
        let sig = signature(&mut r);
        let n = r.gen_range(0..=2);
        let text = format!("{} {}", edb_decl(&sig), datalog_lhs(&mut r, &sig, n));
        let query = q(&text);
        let Ok(alpha) = proof_alphabet(&query, 5_000) else { continue };
        if alpha.ranked.symbols.iter().all(|(_, k)| *k > 0) {
            continue;
        }
        programs += 1;
        let nfta = build_proof_automaton(&alpha);
        let sample: Vec<Tree<usize>> = if count_trees(&alpha.ranked, 2) <= 1e4 {
            all_trees(&alpha.ranked, 2)
        } else {
            (0..1000)
                .map(|i| {
                    if i % 2 == 0 {
                        guided_tree(&mut r, &alpha, 2, None)
                    } else {
                        random_tree(&mut r, &alpha.ranked, 2)
                    }
                })
                .collect()
        };
        for t in &sample {
            let auto = nfta_membership(&nfta, t).map_err(|e| e.to_string())?;
            let direct = is_proof_tree(&alpha, &unlabel_tree(&alpha, t));
            if auto != direct {
                return Err(format!("program {seed} ({text}): automaton {auto}, checker {direct} on {t:?}"));
            }
            trees += 1;
            accepted += usize::from(auto);
        }
    }
    Ok(format!("{programs} programs, {trees} trees, {accepted} proof trees"))
}

// -------------------------------------------------------------- criterion 5

fn random_instance(r: &mut impl Rng, sig: &BTreeMap<String, usize>) -> DatabaseInstance {
    let n = r.gen_range(1..=6);
    let dom: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
    let mut text = String::new();
    for (p, &k) in sig {
        let density = r.gen_range(0.1..0.5);
        let tuples: Vec<Vec<String>> = if k == 0 {
            vec![Vec::new()]
        } else {
            let mut all: Vec<Vec<String>> = vec![Vec::new()];
            for _ in 0..k {
                all = all.into_iter().flat_map(|t| dom.iter().map(move |d| [t.clone(), vec![d.clone()]].concat())).collect();
            }
            all
        };
        for t in tuples {
            if r.gen_bool(density) {
                text.push_str(&format!("{p}({}). ", t.join(",")));
            }
        }
    }
    let mut i = parse_instance(&text).unwrap();
    if i.domain.is_empty() {
        i.domain.insert(dom[0].clone());
    }
    i
}

fn edb_of(q: &QueryForm) -> BTreeMap<String, usize> {
    match q {
        QueryForm::Ucq { edb, .. } => edb.clone(),
        _ => q.program().unwrap().edb.clone(),
    }
}

fn random_monadic(r: &mut impl Rng) -> String {
    let sig = signature(r);
    let bin: Vec<&str> = sig.iter().filter(|(_, k)| *k == 2).map(|(p, _)| *p).collect();
    let b = bin[0];
    let mut rules = vec![format!("U(X) :- {b}(X,Y).")];
    for _ in 0..r.gen_range(1..=3) {
        let rule = match r.gen_range(0..4) {
            0 => format!("V(Y) :- U(X), {b}(X,Y)."),
            1 => "W(X) :- U(X), V(X).".to_string(),
            2 => format!("U(Y) :- U(X), {}(X,Y).", bin.choose(r).unwrap()),
            _ => format!("V(X) :- {}(Y,X).", bin.choose(r).unwrap()),
        };
        rules.push(rule);
    }
    let goal = ["U", "V", "W"].iter().find(|p| rules.iter().any(|x| x.starts_with(*p))).unwrap();
    if r.gen_bool(0.5) {
        format!("{} {} query(X) :- {goal}(X).", edb_decl(&sig), rules.join(" "))
    } else {
        format!("{} {} hit :- {goal}(@1). fcq arity 1 free 1.", edb_decl(&sig), rules.join(" "))
    }
}

fn random_linear_nested(r: &mut impl Rng) -> String {
    let inner = ["T(X,Y) :- e(X,Y). T(X,Z) :- T(X,Y), e(Y,Z). query(X,Y) :- T(X,Y).", "query(X,Y) :- e(X,Z), e(Z,Y)."]
        .choose(r)
        .unwrap();
    let (a, b) = *[("X", "Y"), ("Y", "X"), ("X", "X")].choose(r).unwrap();
    let mut rules = vec!["P(A,B) :- s(A,B).".to_string()];
    rules.push(format!("G(X,Y) :- P(X,Y), Reach({a},{b}), f(Y)."));
    if r.gen_bool(0.5) {
        rules.push("G(X,Z) :- G(X,Y), s(Y,Z).".to_string());
    }
    format!("edb e/2, f/1, s/2. subquery Reach/2 {{ {inner} }} {} query(X,Y) :- G(X,Y).", rules.join(" "))
}

fn random_nested_fcq(r: &mut impl Rng) -> String {
    let (q1, q2) = (
        *["query(X) :- g(X,X).", "query(X) :- g(X,Y), g(Y,X)."].choose(r).unwrap(),
        *["query(X) :- g(X,Y).", "query(X) :- g(Y,X)."].choose(r).unwrap(),
    );
    let body = *["g(X,Y), Q1(X), Q2(Y)", "g(X,Y), Q2(X), Q2(Y)", "g(X,Y), Q1(Y)"].choose(r).unwrap();
    format!(
        "edb g/2. subquery Q1/1 {{ {q1} }} subquery Q2/1 {{ {q2} }} P(X,Y) :- {body}. \
         P(Y,Z) :- P(X,Y), g(Y,Z). hit :- P(@1,@2). fcq arity 2 free 1,2."
    )
}

fn rewrite_equivalence() -> Outcome {
    let mut r = rng(5);
    let mut lines = Vec::new();
    type Gen = fn(&mut rand_chacha::ChaCha8Rng) -> Vec<QueryForm>;
    let passes: [(&str, Gen); 6] = [
        ("guard_monadic", |r| vec![q(&random_monadic(r))]),
        ("fcq_to_datalog", |r| {
            let sig = signature(r);
            {
                let n = r.gen_range(0..=2);
                vec![q(&format!("{} {}", edb_decl(&sig), gq(r, &sig, n)))]
            }
        }),
        ("combine_or", |r| {
            let sig = signature(r);
            let a = r.gen_range(0..=2);
            (0..r.gen_range(2..=3)).map(|_| q(&format!("{} {}", edb_decl(&sig), gq(r, &sig, a)))).collect()
        }),
        ("combine_and", |r| {
            let sig = signature(r);
            let a = r.gen_range(0..=2);
            (0..r.gen_range(2..=3)).map(|_| q(&format!("{} {}", edb_decl(&sig), gq(r, &sig, a)))).collect()
        }),
        ("unnest_linear", |r| vec![q(&random_linear_nested(r))]),
        ("normalize_nested", |r| vec![q(&random_nested_fcq(r))]),
    ];
    for (name, gen) in passes {
        let (mut instances, mut worst) = (0, 0.0f64);
        for _ in 0..25 {
            let inputs = gen(&mut r);
            let res = match name {
                "guard_monadic" => rewrites::guard_monadic(&inputs[0]),
                "fcq_to_datalog" => rewrites::fcq_to_datalog(&inputs[0]),
                "combine_or" => rewrites::combine_or(&inputs, None),
                "combine_and" => rewrites::combine_and(&inputs, None),
                "unnest_linear" => rewrites::unnest_linear(&inputs[0]),
                _ => rewrites::normalize_nested(&inputs[0]),
            };
            let (out, _) = res.map_err(|e| format!("{name}: {e} on {}", serialize_query(&inputs[0])))?;
            if name.starts_with("combine") {
                let size_in: usize = inputs.iter().map(|x| SizeMetrics::of(x).atoms).sum();
                let ratio = SizeMetrics::of(&out).atoms as f64 / size_in as f64;
                worst = worst.max(ratio);
                if ratio > 3.0 {
                    return Err(format!("{name}: output {ratio:.2}x the input size"));
                }
            }
            let mut sig = BTreeMap::new();
            for x in &inputs {
                sig.extend(edb_of(x));
            }
            for _ in 0..4 {
                let i = random_instance(&mut r, &sig);
                let got = eval_query(&out, &i).tuples;
                let want: BTreeSet<Vec<String>> = match name {
                    "combine_or" => inputs.iter().flat_map(|x| eval_query(x, &i).tuples).collect(),
                    "combine_and" => {
                        let mut sets = inputs.iter().map(|x| eval_query(x, &i).tuples);
                        let first = sets.next().unwrap();
                        sets.fold(first, |acc, s| acc.intersection(&s).cloned().collect())
                    }
                    _ => eval_query(&inputs[0], &i).tuples,
                };
                if got != want {
                    return Err(format!(
                        "{name}: answers differ on {:?}\ninput {}\noutput {}",
                        i.relations,
                        serialize_query(&inputs[0]),
                        serialize_query(&out)
                    ));
                }
                instances += 1;
            }
        }
        let size = if name.starts_with("combine") { format!(", max size ratio {worst:.2}") } else { String::new() };
        lines.push(format!("{name}: {instances} instances{size}"));
    }
    Ok(lines.join("; "))
}

// -------------------------------------------------------------- criterion 6

fn ladder() -> Outcome {
    let gq = q(LADDER_GQ);
    let mq = q(LADDER_MQ);
    let db = parse_instance("q(a,b). p(a,c). p(b,e). q(c,e). p(a,e1). p(b,d). q(e1,d).").unwrap();
    let t: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    if !check_answer(&mq, &db, &t).unwrap() || check_answer(&gq, &db, &t).unwrap() {
        return Err("MQ/GQ answers on the 7-fact instance are wrong".into());
    }
    let gqd = rewrites::fcq_to_datalog(&gq).unwrap().0;
    let mqd = rewrites::fcq_to_datalog(&mq).unwrap().0;
    let fwd = decide_containment(&gqd, &mq, Mode::Auto).map_err(|e| e.to_string())?;
    if !fwd.is_contained() {
        return Err(format!("GQ ⊑ MQ expected contained, got {fwd:?}"));
    }
    let oracle = bounded_oracle_with(&gqd, &mq, 5, OracleLimits { max_subtrees: STATE_CAP, timeout: None })
        .map_err(|e| e.to_string())?;
    if oracle.witness().is_some() {
        return Err("oracle refutes GQ ⊑ MQ at height 5".into());
    }
    let back = decide_containment(&mqd, &gq, Mode::Auto).map_err(|e| e.to_string())?;
    let Some(w) = back.witness() else {
        return Err(format!("MQ ⊑ GQ expected not contained, got {back:?}"));
    };
    if !witness_holds(&mqd, &gq, w).unwrap_or(false) {
        return Err("MQ ⊑ GQ witness does not validate".into());
    }
    Ok(format!("MQ ⊄ GQ witness with {} facts, height {}", w.instance.facts().count(), w.proof_tree.height()))
}

// -------------------------------------------------------------- criterion 7

fn atm_end_to_end() -> Outcome {
    let machines = [
        ("accepting", "states q; exists q; forall ; sigma _; start q; accept q;"),
        (
            "rejecting",
            "states q0 q1; exists q0 q1; forall ; sigma a _; start q0; accept q1; \
             delta q0 _ -> q0 a right; delta q0 a -> q0 _ left;",
        ),
    ];
    let mut out = Vec::new();
    for (name, text) in machines {
        let m: AtmSpec = text.parse().map_err(|e| format!("{name}: {e}"))?;
        let b = gen_counter_encoding_with(&m, 1, AddressBits::Complete).map_err(|e| e.to_string())?;
        let rhs = gen_rhs(&b, &m).map_err(|e| e.to_string())?;
        let accepts = simulate_atm(&m, 2).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let limits = OracleLimits { max_subtrees: STATE_CAP, timeout: Some(Duration::from_secs(300)) };
        let v = bounded_oracle_with(&b.lhs, &rhs, 12, limits).map_err(|e| format!("{name}: {e}"))?;
        let refuted = match &v {
            Verdict::NotContained(w) => {
                if !witness_holds(&b.lhs, &rhs, w).unwrap_or(false) {
                    return Err(format!("{name}: witness does not validate"));
                }
                true
            }
            _ => false,
        };
        if refuted != accepts {
            return Err(format!("{name}: simulator says {accepts}, oracle counterexample {refuted}"));
        }
        out.push(format!("{name}: simulate {accepts}, oracle {} in {:.2}s", if refuted { "NotContained" } else { "no counterexample" }, start.elapsed().as_secs_f64()));
    }
    Ok(out.join("; "))
}

// -------------------------------------------------------------- criterion 8

fn random_query_text(r: &mut impl Rng) -> String {
    let sig = signature(r);
    let a = r.gen_range(0..=2);
    let body = match r.gen_range(0..5) {
        0 => datalog_lhs(r, &sig, a),
        1 => ucq(r, &sig, a),
        2 => gdl(r, &sig, a),
        3 => gq(r, &sig, a),
        _ => {
            let inner = ucq(r, &sig, 1);
            let outer = gq(r, &sig, a).replacen("hit :- ", "hit :- Sub(X), ", 1);
            format!("subquery Sub/1 {{ {} {inner} }} {outer}", edb_decl(&sig))
        }
    };
    let mut text = format!("{} {body}", edb_decl(&sig));
    if r.gen_bool(0.3) {
        text = text.replacen("X)", "c1)", 1);
    }
    text
}

fn parser_round_trip() -> Outcome {
    let mut r = rng(8);
    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    let mut n = 0;
    let mut attempts = 0;
    while n < 1000 {
        attempts += 1;
        if attempts > 20_000 {
            return Err(format!("only {n} parsable random queries"));
        }
        let Ok(ast) = parse_query(&random_query_text(&mut r)) else { continue };
        let text = serialize_query(&ast);
        let back = parse_query(&text).map_err(|e| format!("{e} in {text}"))?;
        if back != ast {
            return Err(format!("round trip changed the query:\n{text}\n{}", serialize_query(&back)));
        }
        let kind = match &ast {
            QueryForm::Datalog { .. } => "datalog",
            QueryForm::Ucq { .. } => "ucq",
            QueryForm::Fcq { .. } if classify(&ast).nesting_depth > 0 => "nested",
            QueryForm::Fcq { .. } => "fcq",
        };
        *kinds.entry(kind).or_default() += 1;
        n += 1;
    }
    Ok(format!("{n} ASTs {kinds:?}"))
}
