//! Substitutions, most general unifiers and deterministic fresh names.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{Atom, Program, QueryForm, Rule, Term};

/// Variable substitution.
pub type Subst = BTreeMap<String, Term>;

pub fn apply_term(s: &Subst, t: &Term) -> Term {
    match t {
        Term::Var(v) => match s.get(v) {
            Some(u) if u != t => apply_term(s, u),
            _ => t.clone(),
        },
        _ => t.clone(),
    }
}

pub fn apply_atom(s: &Subst, a: &Atom) -> Atom {
    Atom { pred: a.pred.clone(), args: a.args.iter().map(|t| apply_term(s, t)).collect() }
}

pub fn apply_rule(s: &Subst, r: &Rule) -> Rule {
    Rule { head: apply_atom(s, &r.head), body: r.body.iter().map(|a| apply_atom(s, a)).collect() }
}

/// Extends `s` so that `a` and `b` become equal; `false` on clash.
pub fn unify_terms(s: &mut Subst, a: &Term, b: &Term) -> bool {
    let a = apply_term(s, a);
    let b = apply_term(s, b);
    if a == b {
        return true;
    }
    match (&a, &b) {
        (Term::Var(v), _) => {
            s.insert(v.clone(), b);
            true
        }
        (_, Term::Var(v)) => {
            s.insert(v.clone(), a);
            true
        }
        _ => false,
    }
}

/// Most general unifier of two atom lists (pairwise), if any.
pub fn mgu(pairs: &[(&Atom, &Atom)]) -> Option<Subst> {
    let mut s = Subst::new();
    for (a, b) in pairs {
        if a.pred != b.pred || a.args.len() != b.args.len() {
            return None;
        }
        for (x, y) in a.args.iter().zip(b.args.iter()) {
            if !unify_terms(&mut s, x, y) {
                return None;
            }
        }
    }
    // Resolve chains so the substitution is idempotent.
    let keys: Vec<String> = s.keys().cloned().collect();
    for k in keys {
        let t = apply_term(&s, &Term::Var(k.clone()));
        s.insert(k, t);
    }
    Some(s)
}

/// Renames every variable of `r` by appending `suffix`.
pub fn rename_rule_vars(r: &Rule, suffix: &str) -> Rule {
    let s: Subst = r.vars().into_iter().map(|v| (v.clone(), Term::Var(format!("{v}{suffix}")))).collect();
    apply_rule(&s, r)
}

/// Deterministic generator of names that avoid a set of taken names.
#[derive(Debug, Clone, Default)]
pub struct Fresh {
    taken: BTreeSet<String>,
    counter: usize,
    log: Vec<String>,
}

impl Fresh {
    pub fn new<I: IntoIterator<Item = String>>(taken: I) -> Fresh {
        Fresh { taken: taken.into_iter().collect(), counter: 0, log: Vec::new() }
    }

    /// Fresh name `{prefix}{n}` for the smallest unused counter value.
    pub fn name(&mut self, prefix: &str) -> String {
        loop {
            self.counter += 1;
            let n = format!("{prefix}{}", self.counter);
            if self.taken.insert(n.clone()) {
                self.log.push(n.clone());
                return n;
            }
        }
    }

    /// `base` itself if free, otherwise a numbered variant.
    pub fn prefer(&mut self, base: &str) -> String {
        if self.taken.insert(base.to_string()) {
            self.log.push(base.to_string());
            return base.to_string();
        }
        let mut i = 1;
        loop {
            let n = format!("{base}_{i}");
            if self.taken.insert(n.clone()) {
                self.log.push(n.clone());
                return n;
            }
            i += 1;
        }
    }

    pub fn reserve(&mut self, name: &str) {
        self.taken.insert(name.to_string());
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }
}

/// All predicate names used or declared anywhere in a query.
pub fn predicate_names(q: &QueryForm) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    fn prog(p: &Program, out: &mut BTreeSet<String>) {
        out.extend(p.edb.keys().cloned());
        out.extend(p.idb.keys().cloned());
        out.extend(p.subqueries.keys().cloned());
        for r in &p.rules {
            out.insert(r.head.pred.clone());
            out.extend(r.body.iter().map(|a| a.pred.clone()));
        }
        for sq in p.subqueries.values() {
            out.extend(predicate_names(sq));
        }
    }
    match q {
        QueryForm::Ucq { edb, disjuncts } => {
            out.extend(edb.keys().cloned());
            for d in disjuncts {
                out.extend(d.body.iter().map(|a| a.pred.clone()));
            }
        }
        QueryForm::Datalog { program, goal } => {
            prog(program, &mut out);
            out.extend(goal.body.iter().map(|a| a.pred.clone()));
        }
        QueryForm::Fcq { program, .. } => prog(program, &mut out),
    }
    out
}

/// All variable names used anywhere in a query.
pub fn variable_names(q: &QueryForm) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    fn prog(p: &Program, out: &mut BTreeSet<String>) {
        for r in &p.rules {
            out.extend(r.vars());
        }
        for sq in p.subqueries.values() {
            out.extend(variable_names(sq));
        }
    }
    match q {
        QueryForm::Ucq { disjuncts, .. } => {
            for d in disjuncts {
                out.extend(d.vars());
            }
        }
        QueryForm::Datalog { program, goal } => {
            prog(program, &mut out);
            out.extend(goal.vars());
        }
        QueryForm::Fcq { program, .. } => prog(program, &mut out),
    }
    out
}
