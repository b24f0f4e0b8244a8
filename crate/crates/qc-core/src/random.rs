//! Seeded generators for random query pairs over small signatures, used for
//! differential testing and corpus runs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const VARS: [&str; 3] = ["X", "Y", "Z"];

/// A small EDB signature: one to three predicates of arity one or two.
pub fn signature(r: &mut impl Rng) -> Vec<(&'static str, usize)> {
    let mut all = vec![("p", 2), ("q", 2), ("r", 1)];
    all.shuffle(r);
    let n = r.gen_range(1..=3);
    let mut sig: Vec<_> = all.into_iter().take(n).collect();
    if sig.iter().all(|(_, k)| *k == 1) {
        sig.push(("p", 2));
    }
    sig.sort();
    sig
}

fn atom(r: &mut impl Rng, pred: &str, arity: usize, nvars: usize, lambdas: usize) -> String {
    let args: Vec<String> = (0..arity)
        .map(|_| {
            if lambdas > 0 && r.gen_bool(0.3) {
                format!("@{}", r.gen_range(1..=lambdas))
            } else {
                VARS[r.gen_range(0..nvars)].to_string()
            }
        })
        .collect();
    if args.is_empty() {
        pred.to_string()
    } else {
        format!("{pred}({})", args.join(","))
    }
}

fn vars_of(atoms: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for a in atoms {
        for v in VARS {
            if (a.contains(&format!("({v}")) || a.contains(&format!(",{v}"))) && !out.contains(&v.to_string()) {
                out.push(v.to_string());
            }
        }
    }
    out
}

fn head(pred: &str, args: &[String]) -> String {
    if args.is_empty() {
        pred.to_string()
    } else {
        format!("{pred}({})", args.join(","))
    }
}

/// Random safe Datalog query with answer arity `a`.
pub fn datalog_lhs(r: &mut impl Rng, sig: &[(&'static str, usize)], a: usize) -> String {
    let mut idb = vec![("G", a)];
    if r.gen_bool(0.6) {
        idb.push(("U", r.gen_range(1..=2)));
    }
    let nrules = r.gen_range(idb.len()..=4);
    let mut rules = Vec::new();
    for i in 0..nrules {
        let (hp, ha) = if i < idb.len() { idb[idb.len() - 1 - i] } else { *idb.choose(r).unwrap() };
        // The first rule of each predicate only uses EDB atoms (and U for G).
        let nv = r.gen_range(1..=3);
        let nb = r.gen_range(1..=3);
        let mut body = Vec::new();
        for j in 0..nb {
            let use_idb = j > 0 && r.gen_bool(0.4);
            let (bp, ba) = if use_idb && (i >= idb.len() || hp == "G") {
                *idb.choose(r).unwrap()
            } else {
                *sig.choose(r).unwrap()
            };
            body.push(atom(r, bp, ba, nv, 0));
        }
        let bv = vars_of(&body);
        let args: Vec<String> = (0..ha).map(|_| bv.choose(r).unwrap().clone()).collect();
        rules.push(format!("{} :- {}.", head(hp, &args), body.join(", ")));
    }
    let gargs: Vec<String> = (0..a).map(|k| VARS[k].to_string()).collect();
    rules.push(format!("{} :- {}.", head("query", &gargs), head("G", &gargs)));
    rules.join(" ")
}

/// Random UCQ of answer arity `a`.
pub fn ucq(r: &mut impl Rng, sig: &[(&'static str, usize)], a: usize) -> String {
    let n = r.gen_range(1..=2);
    let mut out = Vec::new();
    for _ in 0..n {
        let nv = r.gen_range(1..=3);
        let body: Vec<String> = (0..r.gen_range(1..=3))
            .map(|_| {
                let (p, k) = *sig.choose(r).unwrap();
                atom(r, p, k, nv, 0)
            })
            .collect();
        let bv = vars_of(&body);
        let args: Vec<String> = (0..a).map(|_| bv.choose(r).unwrap().clone()).collect();
        out.push(format!("{} :- {}.", head("query", &args), body.join(", ")));
    }
    out.join(" ")
}

/// Random frontier-guarded rule body: a guard atom first, then extras.
fn guarded_rule(
    r: &mut impl Rng,
    sig: &[(&'static str, usize)],
    idb: &[(&'static str, usize)],
    hp: &str,
    ha: usize,
    lambdas: usize,
) -> String {
    let nv = r.gen_range(1..=3);
    let (gp, gk) = *sig.iter().filter(|(_, k)| *k >= ha).collect::<Vec<_>>().choose(r).unwrap();
    let guard = atom(r, gp, *gk, nv, lambdas);
    let mut body = vec![guard.clone()];
    for _ in 0..r.gen_range(0..=2) {
        let (p, k) = if !idb.is_empty() && r.gen_bool(0.5) { *idb.choose(r).unwrap() } else { *sig.choose(r).unwrap() };
        body.push(atom(r, p, k, nv, lambdas));
    }
    let gv = vars_of(std::slice::from_ref(&guard));
    let args: Vec<String> = (0..ha)
        .map(|_| gv.choose(r).cloned().unwrap_or_else(|| "X".into()))
        .collect();
    let args = if args.iter().any(|v| !gv.contains(v)) { Vec::new() } else { args };
    let ha_ok = args.len() == ha;
    if !ha_ok {
        return String::new();
    }
    format!("{} :- {}.", head(hp, &args), body.join(", "))
}

fn guarded_rules(r: &mut impl Rng, sig: &[(&'static str, usize)], lambdas: usize) -> (Vec<(&'static str, usize)>, Vec<String>) {
    let mut idb = Vec::new();
    if r.gen_bool(0.8) {
        idb.push(("V", r.gen_range(1..=2)));
    }
    let mut rules = Vec::new();
    if idb.is_empty() {
        return (idb, rules);
    }
    let n = r.gen_range(1..=3);
    let mut tries = 0;
    while rules.len() < n && tries < 50 {
        tries += 1;
        let (hp, ha) = idb[0];
        let allowed: Vec<_> = if rules.is_empty() { Vec::new() } else { idb.clone() };
        let rule = guarded_rule(r, sig, &allowed, hp, ha, lambdas);
        if !rule.is_empty() {
            rules.push(rule);
        }
    }
    if rules.is_empty() {
        idb.clear();
    }
    (idb, rules)
}

/// Random frontier-guarded Datalog query of answer arity `a`.
pub fn gdl(r: &mut impl Rng, sig: &[(&'static str, usize)], a: usize) -> String {
    let (idb, mut rules) = guarded_rules(r, sig, 0);
    let nv = r.gen_range(1..=3);
    let mut body = Vec::new();
    for _ in 0..r.gen_range(1..=2) {
        let (p, k) = if !idb.is_empty() && r.gen_bool(0.6) { *idb.choose(r).unwrap() } else { *sig.choose(r).unwrap() };
        body.push(atom(r, p, k, nv, 0));
    }
    let bv = vars_of(&body);
    let args: Vec<String> = (0..a).map(|_| bv.choose(r).unwrap().clone()).collect();
    rules.push(format!("{} :- {}.", head("query", &args), body.join(", ")));
    rules.join(" ")
}

/// Random frontier-guarded flag-and-check query of answer arity `a`.
pub fn gq(r: &mut impl Rng, sig: &[(&'static str, usize)], a: usize) -> String {
    let (idb, mut rules) = guarded_rules(r, sig, a);
    let nv = r.gen_range(1..=3);
    for _ in 0..r.gen_range(1..=2) {
        let mut body = Vec::new();
        for _ in 0..r.gen_range(1..=2) {
            let (p, k) = if !idb.is_empty() && r.gen_bool(0.6) { *idb.choose(r).unwrap() } else { *sig.choose(r).unwrap() };
            body.push(atom(r, p, k, nv, a));
        }
        rules.push(format!("hit :- {}.", body.join(", ")));
    }
    let free: Vec<String> = (1..=a).map(|j| j.to_string()).collect();
    let decl = if a == 0 { "fcq arity 0.".to_string() } else { format!("fcq arity {a} free {}.", free.join(",")) };
    rules.push(decl);
    rules.join(" ")
}

/// Declares the signature so both sides agree on it.
pub fn edb_decl(sig: &[(&'static str, usize)]) -> String {
    let parts: Vec<String> = sig.iter().map(|(p, k)| format!("{p}/{k}")).collect();
    format!("edb {}.", parts.join(", "))
}

#[derive(Debug, Clone)]
pub struct Pair {
    pub lhs: String,
    pub rhs: String,
    pub rhs_kind: &'static str,
}

pub fn random_pair(seed: u64) -> Pair {
    let mut r = rng(seed);
    let sig = signature(&mut r);
    let a = r.gen_range(0..=2);
    let decl = edb_decl(&sig);
    let lhs = if r.gen_bool(0.2) { ucq(&mut r, &sig, a) } else { datalog_lhs(&mut r, &sig, a) };
    let (kind, rhs) = match seed % 3 {
        0 => ("ucq", ucq(&mut r, &sig, a)),
        1 => ("gdl", gdl(&mut r, &sig, a)),
        _ => ("gq", gq(&mut r, &sig, a)),
    };
    Pair { lhs: format!("{decl} {lhs}"), rhs: format!("{decl} {rhs}"), rhs_kind: kind }
}
