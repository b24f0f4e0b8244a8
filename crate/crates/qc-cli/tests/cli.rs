use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qc_core::eval::witness_holds;
use qc_core::parser::{parse_query, parse_verdict};
use qc_core::witness::Verdict;

const TC_DL: &str = "edb p/2. tc(X,Y) :- p(X,Y). tc(X,Z) :- tc(X,Y), p(Y,Z). query(X,Y) :- tc(X,Y).";
const TC_FCQ: &str = "edb p/2. U(Y) :- p(@1,Y). U(Z) :- U(Y), p(Y,Z). hit :- U(@2). fcq arity 2 free 1,2.";
const EDGE: &str = "edb p/2. query(X,Y) :- p(X,Y).";
const LADDER_GQ: &str = "edb p/2, q/2. U(@1,@2) :- q(@1,@2). \
    U(X2,Y2) :- U(X,Y), p(X,X2), p(Y,Y2), q(X2,Y2). hit :- U(@3,@4). fcq arity 4 free 1,2,3,4.";
const LADDER_MQ: &str = "edb p/2, q/2. U1(@1) :- q(@1,@2). U2(@2) :- q(@1,@2). \
    U1(X2) :- U1(X), U2(Y), p(X,X2), p(Y,Y2), q(X2,Y2). \
    U2(Y2) :- U1(X), U2(Y), p(X,X2), p(Y,Y2), q(X2,Y2). \
    hit :- U1(@3), U2(@4). fcq arity 4 free 1,2,3,4.";
const LADDER_DB: &str = "q(a,b). p(a,c). p(b,e). q(c,e). p(a,e1). p(b,d). q(e1,d).";

fn qc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qc")).args(args).output().expect("qc runs")
}

fn file(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn not_contained_exits_one_with_a_valid_witness() {
    let dir = tempfile::tempdir().unwrap();
    let lhs = file(dir.path(), "tc.dlq", TC_DL);
    let rhs = file(dir.path(), "edge.dlq", EDGE);
    let w: PathBuf = dir.path().join("w.json");
    let o = qc(&["contain", "--lhs", &lhs, "--rhs", &rhs, "--witness", w.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("NOT_CONTAINED"));
    let Verdict::NotContained(w) = parse_verdict(&fs::read_to_string(w).unwrap()).unwrap() else {
        panic!("witness file holds a counterexample");
    };
    assert!(witness_holds(&parse_query(TC_DL).unwrap(), &parse_query(EDGE).unwrap(), &w).unwrap());
}

#[test]
fn contained_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let lhs = file(dir.path(), "edge.dlq", EDGE);
    let rhs = file(dir.path(), "tc.dlq", TC_FCQ);
    let o = qc(&["contain", "--lhs", &lhs, "--rhs", &rhs]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "CONTAINED");
}

#[test]
fn non_local_right_side_is_unsupported() {
    let dir = tempfile::tempdir().unwrap();
    let tc = file(dir.path(), "tc.dlq", TC_DL);
    assert_eq!(qc(&["contain", "--lhs", &tc, "--rhs", &tc]).status.code(), Some(2));
}

#[test]
fn oracle_without_counterexample_is_inconclusive() {
    let dir = tempfile::tempdir().unwrap();
    let lhs = file(dir.path(), "tc.dlq", TC_DL);
    let rhs = file(dir.path(), "tcf.dlq", TC_FCQ);
    let o = qc(&["contain", "--lhs", &lhs, "--rhs", &rhs, "--engine", "oracle", "--depth", "3"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn state_cap_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let lhs = file(dir.path(), "tc.dlq", TC_DL);
    let rhs = file(dir.path(), "tcf.dlq", TC_FCQ);
    let o = qc(&["contain", "--lhs", &lhs, "--rhs", &rhs, "--engine", "oracle", "--depth", "6", "--max-states", "3"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn parse_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = file(dir.path(), "bad.dlq", "query(X :- p(X).");
    let o = qc(&["classify", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn ladder_answers() {
    let dir = tempfile::tempdir().unwrap();
    let db = file(dir.path(), "db.facts", LADDER_DB);
    let gq = file(dir.path(), "gq.dlq", LADDER_GQ);
    let mq = file(dir.path(), "mq.dlq", LADDER_MQ);
    let o = qc(&["eval", "--query", &mq, "--db", &db, "--answer", "a,b,c,d"]);
    assert_eq!(stdout(&o).trim(), "true");
    let o = qc(&["eval", "--query", &gq, "--db", &db, "--answer", "a,b,c,d"]);
    assert_eq!(stdout(&o).trim(), "false");
}

#[test]
fn classify_reports_fragment_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let q = file(dir.path(), "tc.dlq", TC_FCQ);
    let o = qc(&["classify", &q, "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["monadic"], true);
    assert_eq!(v["linear"], true);
    assert_eq!(v["recursive"], true);
}

#[test]
fn rewrite_output_parses_and_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let q = file(dir.path(), "gq.dlq", LADDER_GQ);
    let out = dir.path().join("gq_dl.dlq");
    let o = qc(&["rewrite", "fcq-to-datalog", &q, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let rewritten = parse_query(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(rewritten.program().is_some());
    let db = file(dir.path(), "db.facts", LADDER_DB);
    let o = qc(&["eval", "--query", out.to_str().unwrap(), "--db", &db]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!stdout(&o).lines().any(|l| l == "a,b,c,d"));
}

#[test]
fn gen_atm_writes_parseable_queries() {
    let dir = tempfile::tempdir().unwrap();
    let m = file(dir.path(), "acc.tm", "states q; exists q; forall ; sigma _; start q; accept q;");
    let out = dir.path().join("enc");
    let o = qc(&["gen-atm", "--machine", &m, "--bits", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["lhs.dlq", "rhs.dlq", "rhs_counter.dlq"] {
        parse_query(&fs::read_to_string(out.join(name)).unwrap()).unwrap();
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.is_object());
}

#[test]
fn corpus_reports_no_disagreements() {
    let o = qc(&["corpus", "--seed", "5", "--count", "10"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 disagreements"));
}
