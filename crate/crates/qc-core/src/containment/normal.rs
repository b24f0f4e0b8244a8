//! Normal forms of both sides of a containment problem.
//!
//! The left-hand side becomes a plain Datalog program whose answers are
//! the head tuples of a single goal predicate.  The right-hand side becomes
//! a match program: rules over `hit`, where `λj` stands for the `j`-th
//! answer position.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{Atom, Program, QueryForm, QueryKind, Rule, Term, HIT};
use crate::rewrites::{fcq_to_datalog, fresh_for, unnest_linear};

use super::ContainmentError;

/// A Datalog query whose goal is a single IDB predicate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalQuery {
    pub program: Program,
    pub goal: String,
    pub arity: usize,
    /// For flag-and-check inputs: the predicate whose arguments carry the
    /// λ values (either the goal itself or an atom in the root body).
    pub lambda_pred: Option<String>,
}

impl NormalQuery {
    /// Maximal number of distinct variables in a rule.
    pub fn max_vars(&self) -> usize {
        self.program.rules.iter().map(|r| r.vars().len()).max().unwrap_or(0)
    }

    /// Constants occurring in the rules, in sorted order.
    pub fn constants(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for r in &self.program.rules {
            for a in std::iter::once(&r.head).chain(r.body.iter()) {
                for t in &a.args {
                    if let Term::Const(c) = t {
                        out.insert(c.clone());
                    }
                }
            }
        }
        out
    }
}

/// Brings a query into goal-predicate Datalog form.  Flag-and-check
/// queries go through the λ-to-variable rewriting and nested ones through
/// unnesting, which fails for non-linear nesting.
pub fn normalize_lhs(q: &QueryForm) -> Result<NormalQuery, ContainmentError> {
    let unsupported = |e: crate::rewrites::RewriteError| ContainmentError::Unsupported(e.to_string());
    let (dl, from_fcq) = match q.kind() {
        QueryKind::Datalog if q.program().is_some_and(|p| p.subqueries.is_empty()) => (q.clone(), false),
        QueryKind::Datalog | QueryKind::NestedFcq => (unnest_linear(q).map_err(unsupported)?.0, false),
        QueryKind::Fcq => (fcq_to_datalog(q).map_err(unsupported)?.0, true),
        QueryKind::Ucq => {
            let QueryForm::Ucq { edb, disjuncts } = q else { unreachable!() };
            let goal = fresh_for(&[q]).prefer("G");
            let mut program = Program { edb: edb.clone(), ..Program::default() };
            program.idb.insert(goal.clone(), q.answer_arity());
            for d in disjuncts {
                program.rules.push(Rule::new(Atom { pred: goal.clone(), args: d.head.clone() }, d.body.clone()));
            }
            return Ok(NormalQuery { program, goal, arity: q.answer_arity(), lambda_pred: None });
        }
    };
    let QueryForm::Datalog { mut program, goal } = dl else {
        return Err(ContainmentError::Unsupported("left-hand side did not reduce to Datalog".into()));
    };
    if !program.subqueries.is_empty() {
        return Err(ContainmentError::Unsupported("nested subqueries remain after unnesting".into()));
    }
    if program.uses_lambda() {
        return Err(ContainmentError::Unsupported("λ constants in a Datalog program".into()));
    }
    let lambda_pred = if from_fcq { goal.body.first().map(|a| a.pred.clone()) } else { None };
    let atomic = match goal.body.as_slice() {
        [a] if program.is_idb(&a.pred) => {
            a.args == goal.head && {
                let vs: BTreeSet<&Term> = a.args.iter().collect();
                vs.len() == a.args.len() && a.args.iter().all(Term::is_var)
            }
        }
        _ => false,
    };
    let goal_pred = if atomic {
        goal.body[0].pred.clone()
    } else {
        let g = fresh_for(&[q, &QueryForm::Datalog { program: program.clone(), goal: goal.clone() }]).prefer("G");
        program.idb.insert(g.clone(), goal.head.len());
        program.rules.push(Rule::new(Atom { pred: g.clone(), args: goal.head.clone() }, goal.body.clone()));
        g
    };
    Ok(NormalQuery { program, goal: goal_pred, arity: goal.head.len(), lambda_pred })
}

/// A rule of a match program together with equalities that the answer
/// tuple has to satisfy for the rule to apply: `(j, t)` requires `λj = t`
/// where `t` is another `λ` or a constant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchRule {
    pub rule: Rule,
    pub constraints: Vec<(usize, Term)>,
}

/// Right-hand side as a flag-and-check program over the answer positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchProgram {
    pub edb: BTreeMap<String, usize>,
    pub idb: BTreeMap<String, usize>,
    pub rules: Vec<MatchRule>,
    pub arity: usize,
}

/// Replaces the head terms of a goal conjunctive query by answer-position
/// constants, recording repeated variables and constants as constraints.
fn goal_to_hit(head: &[Term], body: &[Atom]) -> MatchRule {
    let mut map: BTreeMap<String, usize> = BTreeMap::new();
    let mut constraints = Vec::new();
    for (i, t) in head.iter().enumerate() {
        let j = i + 1;
        match t {
            Term::Var(v) => match map.get(v) {
                Some(&k) => constraints.push((j, Term::Lambda(k))),
                None => {
                    map.insert(v.clone(), j);
                }
            },
            other => constraints.push((j, other.clone())),
        }
    }
    let conv = |a: &Atom| Atom {
        pred: a.pred.clone(),
        args: a
            .args
            .iter()
            .map(|t| match t {
                Term::Var(v) => map.get(v).map_or_else(|| t.clone(), |&j| Term::Lambda(j)),
                _ => t.clone(),
            })
            .collect(),
    };
    MatchRule { rule: Rule::new(Atom::hit(), body.iter().map(conv).collect()), constraints }
}

/// Brings the right-hand side into match-program form.  Derived facts have
/// to stay local: every head variable of a non-`hit` rule must occur in a
/// single body atom.
pub fn normalize_rhs(q: &QueryForm) -> Result<MatchProgram, ContainmentError> {
    let arity = q.answer_arity();
    let mut out = MatchProgram { edb: q.edb_signature(), idb: BTreeMap::new(), rules: Vec::new(), arity };
    match q {
        QueryForm::Ucq { disjuncts, .. } => {
            out.rules.extend(disjuncts.iter().map(|d| goal_to_hit(&d.head, &d.body)));
        }
        QueryForm::Datalog { program, goal } => {
            if !program.subqueries.is_empty() {
                return Err(ContainmentError::Unsupported("nested right-hand side".into()));
            }
            out.idb = program.idb.clone();
            out.rules.extend(program.rules.iter().map(|r| MatchRule { rule: r.clone(), constraints: Vec::new() }));
            out.rules.push(goal_to_hit(&goal.head, &goal.body));
        }
        QueryForm::Fcq { program, free, .. } => {
            if !program.subqueries.is_empty() {
                return Err(ContainmentError::Unsupported("nested right-hand side".into()));
            }
            let pos: BTreeMap<usize, usize> = free.iter().enumerate().map(|(i, &f)| (f, i + 1)).collect();
            let conv = |a: &Atom| -> Result<Atom, ContainmentError> {
                let args = a
                    .args
                    .iter()
                    .map(|t| match t {
                        Term::Lambda(j) => pos.get(j).map(|&k| Term::Lambda(k)).ok_or_else(|| {
                            ContainmentError::Unsupported(format!("λ{j} is not an answer position"))
                        }),
                        _ => Ok(t.clone()),
                    })
                    .collect::<Result<_, _>>()?;
                Ok(Atom { pred: a.pred.clone(), args })
            };
            out.idb = program.idb.clone();
            for r in &program.rules {
                let rule = Rule::new(conv(&r.head)?, r.body.iter().map(conv).collect::<Result<_, _>>()?);
                out.rules.push(MatchRule { rule, constraints: Vec::new() });
            }
        }
    }
    for mr in &out.rules {
        let r = &mr.rule;
        if r.head.pred == HIT {
            continue;
        }
        let hv = r.head.vars();
        if !hv.is_empty() && !r.body.iter().any(|a| hv.iter().all(|v| a.vars().contains(v))) {
            return Err(ContainmentError::Unsupported(format!(
                "rule {r} derives facts over elements that no single body atom covers"
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_query;

    #[test]
    fn fcq_goal_and_lambda_source() {
        let q = parse_query("U(Y) :- p(@1,Y). U(Z) :- U(Y), p(Y,Z). hit :- U(@2). fcq arity 2 free 1,2.").unwrap();
        let n = normalize_lhs(&q).unwrap();
        assert_eq!(n.goal, "goal");
        assert_eq!(n.lambda_pred.as_deref(), Some("goal"));
        assert_eq!(n.arity, 2);
        let q = parse_query("U(Y) :- p(@1,Y). hit :- U(@2). fcq arity 2 free 2.").unwrap();
        let n = normalize_lhs(&q).unwrap();
        assert_ne!(n.goal, "goal");
        assert_eq!(n.lambda_pred.as_deref(), Some("goal"));
        assert_eq!(n.arity, 1);
    }

    #[test]
    fn ucq_rhs_constraints() {
        let q = parse_query("query(X,X,c) :- e(X,Y).").unwrap();
        let m = normalize_rhs(&q).unwrap();
        assert_eq!(m.rules.len(), 1);
        assert_eq!(m.rules[0].rule.to_string(), "hit :- e(@1,Y).");
        assert_eq!(m.rules[0].constraints, vec![(2, Term::Lambda(1)), (3, Term::cst("c"))]);
    }

    #[test]
    fn non_local_rhs_rejected() {
        let q = parse_query("R(X,Y) :- e(X,Z), e(Z,Y). query(X,Y) :- R(X,Y).").unwrap();
        assert!(matches!(normalize_rhs(&q), Err(ContainmentError::Unsupported(_))));
    }
}
