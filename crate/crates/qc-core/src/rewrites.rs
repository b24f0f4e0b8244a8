//! Answer-preserving query transformations.
//!
//! Every pass returns the rewritten query together with a [`RewriteReport`]
//! that records sizes before and after, the fresh symbols introduced and any
//! choices the pass had to make.  Fresh names come from a counter seeded
//! with every name already in use, so the output is reproducible.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{classify, Atom, Cq, Program, QueryForm, Rule, Term, HIT};
use crate::unify::{apply_rule, predicate_names, variable_names, Fresh, Subst};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SizeMetrics {
    pub rules: usize,
    pub max_arity: usize,
    pub idb_count: usize,
    /// Total number of atoms, heads included.
    pub atoms: usize,
}

impl SizeMetrics {
    pub fn of(q: &QueryForm) -> SizeMetrics {
        let mut m = SizeMetrics { atoms: q.size(), ..SizeMetrics::default() };
        fn walk(q: &QueryForm, m: &mut SizeMetrics) {
            match q {
                QueryForm::Ucq { disjuncts, .. } => m.rules += disjuncts.len(),
                QueryForm::Datalog { program, .. } | QueryForm::Fcq { program, .. } => {
                    m.rules += program.rules.len();
                    m.idb_count += program.idb.len();
                    m.max_arity = m.max_arity.max(program.idb.values().copied().max().unwrap_or(0));
                    for sq in program.subqueries.values() {
                        walk(sq, m);
                    }
                }
            }
        }
        walk(q, &mut m);
        m
    }

    fn sum(items: impl Iterator<Item = SizeMetrics>) -> SizeMetrics {
        items.fold(SizeMetrics::default(), |a, b| SizeMetrics {
            rules: a.rules + b.rules,
            max_arity: a.max_arity.max(b.max_arity),
            idb_count: a.idb_count + b.idb_count,
            atoms: a.atoms + b.atoms,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteReport {
    pub pass: &'static str,
    pub input: SizeMetrics,
    pub output: SizeMetrics,
    pub fresh: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RewriteError {
    #[error("rule {0} has a head variable that does not occur in its body")]
    UnsafeRule(String),
    #[error("rule {0} has more than one unguarded head variable")]
    NotMonadic(String),
    #[error("expected a flag-and-check query")]
    NotFcq,
    #[error("inconsistent sharing map: {0}")]
    InconsistentSharing(String),
    #[error("non-linear rule: {0}")]
    NonLinear(String),
    #[error("rule {0} has more than one subquery atom")]
    MultipleSubqueries(String),
    #[error("no EDB atom covers the variables of subquery atom {0}")]
    NoGuard(String),
    #[error("conflicting arities for EDB predicate {0}")]
    Signature(String),
}

pub type RewriteResult = Result<(QueryForm, RewriteReport), RewriteError>;

fn report(pass: &'static str, input: SizeMetrics, out: &QueryForm, fresh: &Fresh, notes: Vec<String>) -> RewriteReport {
    RewriteReport { pass, input, output: SizeMetrics::of(out), fresh: fresh.log().to_vec(), notes }
}

pub(crate) fn fresh_for(qs: &[&QueryForm]) -> Fresh {
    let mut names = BTreeSet::new();
    for q in qs {
        names.extend(predicate_names(q));
    }
    names.insert(HIT.to_string());
    Fresh::new(names)
}

pub(crate) fn var_fresh_for(qs: &[&QueryForm]) -> Fresh {
    let mut names = BTreeSet::new();
    for q in qs {
        names.extend(variable_names(q));
    }
    Fresh::new(names)
}

fn map_programs(q: &QueryForm, f: &mut dyn FnMut(&Program) -> Result<Program, RewriteError>) -> Result<QueryForm, RewriteError> {
    Ok(match q {
        QueryForm::Ucq { .. } => q.clone(),
        QueryForm::Datalog { program, goal } => QueryForm::Datalog { program: f(program)?, goal: goal.clone() },
        QueryForm::Fcq { program, arity, free } => {
            QueryForm::Fcq { program: f(program)?, arity: *arity, free: free.clone() }
        }
    })
}

// ---------------------------------------------------------------- guards

/// Adds an EDB guard to every rule of a monadic query that lacks one, in
/// all possible ways: one rule per (EDB predicate, argument position).
pub fn guard_monadic(q: &QueryForm) -> RewriteResult {
    let input = SizeMetrics::of(q);
    let mut vars = var_fresh_for(&[q]);
    let mut notes = Vec::new();
    let out = guard_query(q, &mut vars, &mut notes)?;
    let fresh = Fresh::default();
    Ok((out.clone(), report("guard", input, &out, &fresh, notes)))
}

fn guard_query(q: &QueryForm, vars: &mut Fresh, notes: &mut Vec<String>) -> Result<QueryForm, RewriteError> {
    map_programs(q, &mut |p| {
        let mut np = p.clone();
        np.rules.clear();
        for r in &p.rules {
            let hv = r.head.vars();
            if hv.is_empty() || p.guard_of(r).is_some() {
                np.rules.push(r.clone());
                continue;
            }
            if !r.unsafe_vars().is_empty() {
                return Err(RewriteError::UnsafeRule(r.to_string()));
            }
            if hv.len() > 1 {
                return Err(RewriteError::NotMonadic(r.to_string()));
            }
            let x = hv[0];
            let before = np.rules.len();
            for (e, &k) in &p.edb {
                for pos in 0..k {
                    let args = (0..k)
                        .map(|i| if i == pos { Term::var(x) } else { Term::Var(vars.name("G")) })
                        .collect();
                    let mut body = r.body.clone();
                    body.push(Atom { pred: e.clone(), args });
                    np.rules.push(Rule { head: r.head.clone(), body });
                }
            }
            if np.rules.len() == before {
                notes.push(format!("rule {r} dropped: no EDB position can guard it"));
            }
        }
        let mut subs = BTreeMap::new();
        for (n, sq) in &p.subqueries {
            subs.insert(n.clone(), guard_query(sq, vars, notes)?);
        }
        np.subqueries = subs;
        Ok(np)
    })
}

// ------------------------------------------------------ FCQ to Datalog

/// Replaces the λ constants of a flag-and-check query by context variables
/// carried in every IDB atom, yielding an equivalent Datalog query.
pub fn fcq_to_datalog(q: &QueryForm) -> RewriteResult {
    let input = SizeMetrics::of(q);
    let mut fresh = fresh_for(&[q]);
    let mut vars = var_fresh_for(&[q]);
    let out = fcq_to_datalog_with(q, &mut fresh, &mut vars)?;
    let notes = Vec::new();
    Ok((out.clone(), report("to-datalog", input, &out, &fresh, notes)))
}

fn fcq_to_datalog_with(q: &QueryForm, fresh: &mut Fresh, vars: &mut Fresh) -> Result<QueryForm, RewriteError> {
    let QueryForm::Fcq { program, arity, free } = q else {
        return Err(RewriteError::NotFcq);
    };
    let m = *arity;
    let ctx: Vec<Term> = (1..=m).map(|j| Term::Var(vars.prefer(&format!("Y{j}")))).collect();
    let goal_pred = fresh.prefer("goal");
    let mut np = Program { edb: program.edb.clone(), subqueries: program.subqueries.clone(), ..Program::default() };
    for (n, &k) in &program.idb {
        np.idb.insert(n.clone(), k + m);
    }
    np.idb.insert(goal_pred.clone(), m);
    let conv_atom = |a: &Atom, is_idb: bool| -> Atom {
        let mut args: Vec<Term> = a
            .args
            .iter()
            .map(|t| match t {
                Term::Lambda(j) => ctx[j - 1].clone(),
                _ => t.clone(),
            })
            .collect();
        if is_idb {
            args.extend(ctx.iter().cloned());
        }
        Atom { pred: a.pred.clone(), args }
    };
    for r in &program.rules {
        let head = if r.head.is_hit() {
            Atom { pred: goal_pred.clone(), args: ctx.clone() }
        } else {
            conv_atom(&r.head, true)
        };
        let body = r.body.iter().map(|a| conv_atom(a, program.is_idb(&a.pred))).collect();
        np.rules.push(Rule { head, body });
    }
    let goal = Cq {
        head: free.iter().map(|&f| ctx[f - 1].clone()).collect(),
        body: vec![Atom { pred: goal_pred, args: ctx.clone() }],
    };
    Ok(QueryForm::Datalog { program: np, goal })
}

// ---------------------------------------------------- positive combinations

struct Prepared {
    rules: Vec<Rule>,
    idb: BTreeMap<String, usize>,
    subqueries: BTreeMap<String, QueryForm>,
}

/// Renames the inputs apart and maps their λ constants to global indices.
/// Returns the renamed programs, the answer arity and the total λ count.
fn prepare(
    qs: &[QueryForm],
    sharing: Option<&[Vec<usize>]>,
    conjunction: bool,
    fresh: &mut Fresh,
    edb: &mut BTreeMap<String, usize>,
) -> Result<(Vec<Prepared>, usize, usize), RewriteError> {
    let mut parts = Vec::new();
    for q in qs {
        match q {
            QueryForm::Fcq { program, arity, free } => parts.push((program, *arity, free)),
            _ => return Err(RewriteError::NotFcq),
        }
    }
    let default: Vec<Vec<usize>>;
    let sharing = match sharing {
        Some(s) => s,
        None => {
            default = parts.iter().map(|(_, _, f)| (1..=f.len()).collect()).collect();
            &default
        }
    };
    if sharing.len() != parts.len() {
        return Err(RewriteError::InconsistentSharing(format!("{} maps for {} queries", sharing.len(), parts.len())));
    }
    let a = sharing.iter().flat_map(|s| s.iter().copied()).max().unwrap_or(0);
    let mut covered = BTreeSet::new();
    for (i, ((_, _, free), s)) in parts.iter().zip(sharing).enumerate() {
        if s.len() != free.len() {
            return Err(RewriteError::InconsistentSharing(format!(
                "query {} has {} free positions but its map has {} entries",
                i + 1,
                free.len(),
                s.len()
            )));
        }
        let img: BTreeSet<usize> = s.iter().copied().collect();
        if img.len() != s.len() || img.contains(&0) {
            return Err(RewriteError::InconsistentSharing(format!("map of query {} is not injective", i + 1)));
        }
        if !conjunction && img.len() != a {
            return Err(RewriteError::InconsistentSharing(format!(
                "query {} does not cover all {a} answer positions",
                i + 1
            )));
        }
        covered.extend(img);
    }
    if covered.len() != a {
        return Err(RewriteError::InconsistentSharing("some answer position is not used by any query".into()));
    }
    let mut next_private = a;
    let mut out = Vec::new();
    for (i, ((program, m, free), s)) in parts.iter().zip(sharing).enumerate() {
        for (e, &k) in &program.edb {
            if *edb.entry(e.clone()).or_insert(k) != k {
                return Err(RewriteError::Signature(e.clone()));
            }
        }
        let mut lam = BTreeMap::new();
        for (f, g) in free.iter().zip(s.iter()) {
            lam.insert(*f, *g);
        }
        for j in 1..=*m {
            lam.entry(j).or_insert_with(|| {
                next_private += 1;
                next_private
            });
        }
        let mut rename = BTreeMap::new();
        for n in program.idb.keys().chain(program.subqueries.keys()) {
            rename.insert(n.clone(), fresh.prefer(&format!("{n}_{}", i + 1)));
        }
        let conv = |a: &Atom| Atom {
            pred: rename.get(&a.pred).cloned().unwrap_or_else(|| a.pred.clone()),
            args: a
                .args
                .iter()
                .map(|t| match t {
                    Term::Lambda(j) => Term::Lambda(lam[j]),
                    _ => t.clone(),
                })
                .collect(),
        };
        let rules = program
            .rules
            .iter()
            .map(|r| Rule { head: conv(&r.head), body: r.body.iter().map(conv).collect() })
            .collect();
        let idb = program.idb.iter().map(|(n, &k)| (rename[n].clone(), k)).collect();
        let subqueries = program.subqueries.iter().map(|(n, sq)| (rename[n].clone(), sq.clone())).collect();
        out.push(Prepared { rules, idb, subqueries });
    }
    Ok((out, a, next_private))
}

fn assemble(parts: Vec<Prepared>, edb: BTreeMap<String, usize>, a: usize, m: usize, extra: Vec<Rule>, extra_idb: Vec<(String, usize)>) -> QueryForm {
    let mut p = Program { edb, ..Program::default() };
    for part in parts {
        p.rules.extend(part.rules);
        p.idb.extend(part.idb);
        p.subqueries.extend(part.subqueries);
    }
    p.rules.extend(extra);
    p.idb.extend(extra_idb);
    QueryForm::Fcq { program: p, arity: m, free: (1..=a).collect() }
}

/// Disjunction of flag-and-check queries.  `sharing[i][j]` is the answer
/// position of the `j`-th free position of query `i`; by default free
/// positions are matched in order.  Non-free λs stay private to their query.
pub fn combine_or(qs: &[QueryForm], sharing: Option<&[Vec<usize>]>) -> RewriteResult {
    let input = SizeMetrics::sum(qs.iter().map(SizeMetrics::of));
    let refs: Vec<&QueryForm> = qs.iter().collect();
    let mut fresh = fresh_for(&refs);
    let mut edb = BTreeMap::new();
    let (parts, a, m) = prepare(qs, sharing, false, &mut fresh, &mut edb)?;
    let out = assemble(parts, edb, a, m, Vec::new(), Vec::new());
    Ok((out.clone(), report("or", input, &out, &fresh, Vec::new())))
}

/// Conjunction of flag-and-check queries.  The `hit` of each query but the
/// last sets a flag `U_i(λ1)`, and the IDB-free rules of the next query are
/// gated by that flag, which keeps linear inputs linear.
pub fn combine_and(qs: &[QueryForm], sharing: Option<&[Vec<usize>]>) -> RewriteResult {
    let input = SizeMetrics::sum(qs.iter().map(SizeMetrics::of));
    let refs: Vec<&QueryForm> = qs.iter().collect();
    let mut fresh = fresh_for(&refs);
    let mut edb = BTreeMap::new();
    let mut notes = Vec::new();
    let (mut parts, a, mut m) = prepare(qs, sharing, true, &mut fresh, &mut edb)?;
    if m == 0 && parts.len() > 1 {
        m = 1;
        notes.push("no λ constant to anchor the chain; added non-free λ1".to_string());
    }
    let n = parts.len();
    let flags: Vec<String> = (1..n).map(|_| fresh.name("U_and")).collect();
    for i in 0..n {
        let idb_names: BTreeSet<String> = parts[i].idb.keys().cloned().collect();
        let mut gated = 0;
        for r in parts[i].rules.iter_mut() {
            if i + 1 < n && r.head.is_hit() {
                r.head = Atom::new(&flags[i], vec![Term::Lambda(1)]);
            }
            if i > 0 && !r.body.iter().any(|b| idb_names.contains(&b.pred)) {
                r.body.push(Atom::new(&flags[i - 1], vec![Term::Lambda(1)]));
                gated += 1;
            }
        }
        if i > 0 && gated == 0 {
            notes.push(format!(
                "query {} has no IDB-free rule; its least model is empty, so no gate is needed",
                i + 1
            ));
        }
    }
    let extra_idb = flags.iter().map(|f| (f.clone(), 1)).collect();
    let out = assemble(parts, edb, a, m, Vec::new(), extra_idb);
    Ok((out.clone(), report("and", input, &out, &fresh, notes)))
}

// ------------------------------------------------------------- unnesting

/// Flattens a nested linear query into a linear Datalog query by copying
/// each subquery's rules into the outer program, once per use.  Inner IDB
/// atoms carry the variables of the outer rule's IDB atom as extra
/// arguments, and IDB-free inner rules are gated by that atom.
pub fn unnest_linear(q: &QueryForm) -> RewriteResult {
    let input = SizeMetrics::of(q);
    if q.program().is_none_or(|p| p.subqueries.is_empty()) {
        let out = q.clone();
        return Ok((out.clone(), report("unnest", input, &out, &Fresh::default(), vec!["already unnested".into()])));
    }
    let mut fresh = fresh_for(&[q]);
    let mut vars = var_fresh_for(&[q]);
    let out = unnest(q, &mut fresh, &mut vars)?;
    Ok((out.clone(), report("unnest", input, &out, &fresh, Vec::new())))
}

/// Flat Datalog program plus the IDB predicate holding its answers.
struct Flat {
    program: Program,
    goal_pred: String,
}

fn check_linear(p: &Program, r: &Rule) -> Result<(), RewriteError> {
    if r.body.iter().filter(|a| p.is_idb(&a.pred)).count() > 1 {
        return Err(RewriteError::NonLinear(r.to_string()));
    }
    Ok(())
}

/// Unnests `q` and turns its goal into a single IDB predicate.
fn flatten(q: &QueryForm, fresh: &mut Fresh, vars: &mut Fresh) -> Result<Flat, RewriteError> {
    let dl = match q {
        QueryForm::Ucq { edb, disjuncts } => {
            let g = fresh.name("G");
            let arity = q.answer_arity();
            let mut p = Program { edb: edb.clone(), ..Program::default() };
            p.idb.insert(g.clone(), arity);
            for d in disjuncts {
                p.rules.push(Rule { head: Atom { pred: g.clone(), args: d.head.clone() }, body: d.body.clone() });
            }
            return Ok(Flat { program: p, goal_pred: g });
        }
        _ => unnest(q, fresh, vars)?,
    };
    let QueryForm::Datalog { mut program, goal } = dl else { unreachable!() };
    let g = fresh.name("G");
    let rule = Rule { head: Atom { pred: g.clone(), args: goal.head.clone() }, body: goal.body.clone() };
    program.idb.insert(g.clone(), goal.head.len());
    check_linear(&program, &rule)?;
    program.rules.push(rule);
    Ok(Flat { program, goal_pred: g })
}

fn merge_edb(into: &mut BTreeMap<String, usize>, from: &BTreeMap<String, usize>) -> Result<(), RewriteError> {
    for (e, &k) in from {
        if *into.entry(e.clone()).or_insert(k) != k {
            return Err(RewriteError::Signature(e.clone()));
        }
    }
    Ok(())
}

fn unnest(q: &QueryForm, fresh: &mut Fresh, vars: &mut Fresh) -> Result<QueryForm, RewriteError> {
    let (program, goal) = match q {
        QueryForm::Ucq { .. } => return Ok(q.clone()),
        QueryForm::Fcq { .. } => match fcq_to_datalog_with(q, fresh, vars)? {
            QueryForm::Datalog { program, goal } => (program, goal),
            _ => unreachable!(),
        },
        QueryForm::Datalog { program, goal } => (program.clone(), goal.clone()),
    };
    let mut flats = BTreeMap::new();
    for (n, sq) in &program.subqueries {
        flats.insert(n.clone(), flatten(sq, fresh, vars)?);
    }
    let mut out = Program { edb: program.edb.clone(), idb: program.idb.clone(), ..Program::default() };
    let mut rules = program.rules.clone();
    let mut goal = goal;
    if goal.body.iter().any(|a| program.is_subquery(&a.pred)) {
        let g = fresh.name("G");
        rules.push(Rule { head: Atom { pred: g.clone(), args: goal.head.clone() }, body: goal.body.clone() });
        out.idb.insert(g.clone(), goal.head.len());
        goal = Cq { head: goal.head.clone(), body: vec![Atom { pred: g, args: goal.head.clone() }] };
    }
    for r in &rules {
        check_linear(&out, r)?;
        let subs: Vec<&Atom> = r.body.iter().filter(|a| program.is_subquery(&a.pred)).collect();
        if subs.len() > 1 {
            return Err(RewriteError::MultipleSubqueries(r.to_string()));
        }
        let Some(sq) = subs.first() else {
            out.rules.push(r.clone());
            continue;
        };
        let flat = &flats[&sq.pred];
        merge_edb(&mut out.edb, &flat.program.edb)?;
        let ctx_atom = r.body.iter().find(|a| out.is_idb(&a.pred)).cloned();
        let ctx: Vec<Term> = ctx_atom
            .as_ref()
            .map(|a| a.vars().into_iter().map(Term::var).collect())
            .unwrap_or_default();
        // Fresh copy of the inner program for this use.
        let mut rename = BTreeMap::new();
        for (n, &k) in &flat.program.idb {
            let nn = fresh.prefer(&format!("{n}_{}", r.head.pred));
            out.idb.insert(nn.clone(), k + ctx.len());
            rename.insert(n.clone(), nn);
        }
        for ir in &flat.program.rules {
            let s: Subst = ir.vars().into_iter().map(|v| (v.clone(), Term::Var(vars.prefer(&format!("{v}_")))))
                .collect();
            let ir = apply_rule(&s, ir);
            let ext = |a: &Atom| -> Atom {
                match rename.get(&a.pred) {
                    Some(nn) => {
                        let mut args = a.args.clone();
                        args.extend(ctx.iter().cloned());
                        Atom { pred: nn.clone(), args }
                    }
                    None => a.clone(),
                }
            };
            let has_idb = ir.body.iter().any(|a| flat.program.is_idb(&a.pred));
            let mut body: Vec<Atom> = ir.body.iter().map(ext).collect();
            if !has_idb {
                if let Some(c) = &ctx_atom {
                    body.push(c.clone());
                }
            }
            out.rules.push(Rule { head: ext(&ir.head), body });
        }
        let mut args = sq.args.clone();
        args.extend(ctx.iter().cloned());
        let replaced = Atom { pred: rename[&flat.goal_pred].clone(), args };
        let body = r
            .body
            .iter()
            .filter(|a| Some(*a) != ctx_atom.as_ref() && a.pred != sq.pred)
            .cloned()
            .chain(std::iter::once(replaced))
            .collect();
        out.rules.push(Rule { head: r.head.clone(), body });
    }
    Ok(QueryForm::Datalog { program: out, goal })
}

// ---------------------------------------------------------- normalization

/// Rewrites every rule that uses subqueries so that each subquery atom sits
/// in its own rule next to a single EDB guard atom.
pub fn normalize_nested(q: &QueryForm) -> RewriteResult {
    let input = SizeMetrics::of(q);
    let mut fresh = fresh_for(&[q]);
    let out = normalize(q, &mut fresh)?;
    Ok((out.clone(), report("normalize", input, &out, &fresh, Vec::new())))
}

fn normalize(q: &QueryForm, fresh: &mut Fresh) -> Result<QueryForm, RewriteError> {
    map_programs(q, &mut |p| {
        let mut np = p.clone();
        np.rules.clear();
        for r in &p.rules {
            let subs: Vec<usize> = (0..r.body.len()).filter(|&i| p.is_subquery(&r.body[i].pred)).collect();
            let already = subs.len() == 1 && r.body.len() == 2 && p.is_edb(&r.body[1 - subs[0]].pred);
            if subs.is_empty() || already {
                np.rules.push(r.clone());
                continue;
            }
            let mut body = r.body.clone();
            for &i in &subs {
                let sq = &r.body[i];
                let sv = sq.vars();
                let g = r
                    .body
                    .iter()
                    .find(|a| p.is_edb(&a.pred) && sv.iter().all(|v| a.vars().contains(v)))
                    .ok_or_else(|| RewriteError::NoGuard(sq.to_string()))?;
                let s = fresh.name("S");
                let args: Vec<Term> = sv.iter().map(|v| Term::var(v)).collect();
                np.idb.insert(s.clone(), args.len());
                np.rules.push(Rule { head: Atom { pred: s.clone(), args: args.clone() }, body: vec![g.clone(), sq.clone()] });
                body[i] = Atom { pred: s, args };
            }
            np.rules.push(Rule { head: r.head.clone(), body });
        }
        let mut subs = BTreeMap::new();
        for (n, sq) in &p.subqueries {
            subs.insert(n.clone(), normalize(sq, fresh)?);
        }
        np.subqueries = subs;
        Ok(np)
    })
}

/// Fragment flags are preserved by the combination passes; exposed for tests
/// and the CLI report.
pub fn preserves_fragment(input: &[QueryForm], output: &QueryForm) -> bool {
    let out = classify(output);
    let lin = input.iter().all(|q| classify(q).linear);
    let fg = input.iter().all(|q| classify(q).frontier_guarded);
    (!lin || out.linear) && (!fg || out.frontier_guarded)
}
