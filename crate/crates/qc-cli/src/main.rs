//! `qc`: command-line front end for qc-core.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use qc_core::atmgen::{self, AddressBits, AtmSpec};
use qc_core::automata::{ata2_from_json, nfta_from_json, nfta_to_json};
use qc_core::containment::{
    bounded_oracle_with, build_proof_automaton, decide_containment_with, proof_alphabet, ContainmentError, Limits, Mode,
    OracleLimits,
};
use qc_core::eval::{check_answer, eval_query, witness_holds};
use qc_core::model::{classify, validate, Level, QueryForm};
use qc_core::parser::{parse_instance, parse_query, serialize_query, serialize_verdict};
use qc_core::random::random_pair;
use qc_core::rewrites::{self, SizeMetrics};
use qc_core::witness::Verdict;

const EXIT_CONTAINED: u8 = 0;
const EXIT_NOT_CONTAINED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INCONCLUSIVE: u8 = 3;
const EXIT_RESOURCE: u8 = 4;

#[derive(Parser)]
#[command(name = "qc", version, about = "Datalog query fragments, rewritings and containment checking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report fragment membership and validation diagnostics.
    Classify {
        query: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a query over a database instance.
    Eval {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        db: PathBuf,
        /// Check one comma-separated answer tuple instead of listing all answers.
        #[arg(long)]
        answer: Option<String>,
    },
    /// Apply a rewriting and print the result.
    Rewrite {
        #[arg(value_enum)]
        op: RewriteOp,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decide containment of --lhs in --rhs.
    Contain {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, value_enum, default_value_t = Engine::Automata)]
        engine: Engine,
        #[arg(long, default_value = "auto")]
        mode: Mode,
        #[command(flatten)]
        limits: LimitArgs,
    },
    /// Search for a counterexample among proof trees up to --depth.
    Oracle {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        limits: LimitArgs,
    },
    /// Generate containment instances from an alternating Turing machine.
    GenAtm {
        #[arg(long)]
        machine: PathBuf,
        /// Number of address bits; the tape has 2^bits cells.
        #[arg(long)]
        bits: usize,
        #[arg(long)]
        out: PathBuf,
        /// Assert every address bit in the counter program.
        #[arg(long)]
        complete_bits: bool,
    },
    /// Dump or load tree automata as JSON.
    Automata {
        /// Print the proof-tree automaton of this query.
        #[arg(long, value_name = "QUERY", conflicts_with = "load")]
        dump: Option<PathBuf>,
        /// Read an NFTA or ATA2 JSON file and print its size.
        #[arg(long, value_name = "JSON")]
        load: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        max_states: usize,
    },
    /// Compare the automata engine with the oracle on random query pairs.
    Corpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: u64,
        /// Write each pair as `<seed>.lhs.dlq` and `<seed>.rhs.dlq`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        limits: LimitArgs,
    },
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    lhs: PathBuf,
    #[arg(long)]
    rhs: PathBuf,
    /// Write the counterexample as JSON when containment fails.
    #[arg(long)]
    witness: Option<PathBuf>,
}

#[derive(Args, Clone, Copy)]
struct LimitArgs {
    /// Proof-tree height bound for the oracle.
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Ceiling on distinct automaton states or enumerated subtrees.
    #[arg(long, default_value_t = 1_000_000)]
    max_states: usize,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    timeout: Option<u64>,
}

impl LimitArgs {
    fn engine(&self) -> Limits {
        Limits { max_types: self.max_states, timeout: self.timeout.map(Duration::from_secs), ..Limits::default() }
    }

    fn oracle(&self) -> OracleLimits {
        OracleLimits { max_subtrees: self.max_states, timeout: self.timeout.map(Duration::from_secs) }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Engine {
    Automata,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewriteOp {
    GuardMonadic,
    FcqToDatalog,
    CombineOr,
    CombineAnd,
    UnnestLinear,
    NormalizeNested,
}

/// A failure with its exit code.
struct Failure(u8, String);

impl Failure {
    fn usage(msg: impl ToString) -> Failure {
        Failure(EXIT_USAGE, msg.to_string())
    }
}

impl From<ContainmentError> for Failure {
    fn from(e: ContainmentError) -> Failure {
        match e {
            ContainmentError::ResourceLimit(_) => Failure(EXIT_RESOURCE, e.to_string()),
            _ => Failure::usage(e),
        }
    }
}

type Outcome = Result<u8, Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure(EXIT_USAGE, format!("{}: {e}", path.display())))
}

fn load_query(path: &Path) -> Result<QueryForm, Failure> {
    let q = parse_query(&read(path)?).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let errors: Vec<String> =
        validate(&q).iter().filter(|d| d.level == Level::Error).map(|d| format!("{}: {d}", path.display())).collect();
    if errors.is_empty() {
        Ok(q)
    } else {
        Err(Failure::usage(errors.join("\n")))
    }
}

fn classify_cmd(path: &Path, as_json: bool) -> Outcome {
    let q = parse_query(&read(path)?).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let diags = validate(&q);
    let f = classify(&q);
    if as_json {
        let d: Vec<_> = diags
            .iter()
            .map(|d| json!({"level": format!("{:?}", d.level).to_lowercase(), "location": d.location, "message": d.message}))
            .collect();
        let v = json!({
            "monadic": f.monadic,
            "linear": f.linear,
            "frontier_guarded": f.frontier_guarded,
            "nesting_depth": f.nesting_depth,
            "recursive": f.recursive,
            "diagnostics": d,
        });
        println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
    } else {
        println!("monadic: {}", f.monadic);
        println!("linear: {}", f.linear);
        println!("frontier_guarded: {}", f.frontier_guarded);
        println!("nesting_depth: {}", f.nesting_depth);
        println!("recursive: {}", f.recursive);
        for d in &diags {
            println!("{d}");
        }
    }
    let invalid = diags.iter().any(|d| d.level == Level::Error);
    Ok(if invalid { EXIT_USAGE } else { 0 })
}

fn eval_cmd(query: &Path, db: &Path, answer: Option<&str>) -> Outcome {
    let q = load_query(query)?;
    let i = parse_instance(&read(db)?).map_err(|e| Failure::usage(format!("{}: {e}", db.display())))?;
    match answer {
        Some(a) => {
            let t: Vec<String> = if a.is_empty() { Vec::new() } else { a.split(',').map(|s| s.trim().to_string()).collect() };
            let ok = check_answer(&q, &i, &t).map_err(Failure::usage)?;
            println!("{ok}");
        }
        None => {
            if matches!(q, QueryForm::Fcq { .. }) {
                return Err(Failure::usage("flag-and-check queries need --answer with the λ values"));
            }
            for t in &eval_query(&q, &i).tuples {
                println!("{}", t.join(","));
            }
        }
    }
    Ok(0)
}

fn rewrite_cmd(op: RewriteOp, inputs: &[PathBuf], out: Option<&Path>) -> Outcome {
    let qs = inputs.iter().map(|p| load_query(p)).collect::<Result<Vec<_>, _>>()?;
    let single = || match qs.as_slice() {
        [q] => Ok(q),
        _ => Err(Failure::usage("this rewriting takes exactly one input")),
    };
    let res = match op {
        RewriteOp::GuardMonadic => rewrites::guard_monadic(single()?),
        RewriteOp::FcqToDatalog => rewrites::fcq_to_datalog(single()?),
        RewriteOp::UnnestLinear => rewrites::unnest_linear(single()?),
        RewriteOp::NormalizeNested => rewrites::normalize_nested(single()?),
        RewriteOp::CombineOr => rewrites::combine_or(&qs, None),
        RewriteOp::CombineAnd => rewrites::combine_and(&qs, None),
    };
    let (q, report) = res.map_err(Failure::usage)?;
    let text = serialize_query(&q);
    match out {
        Some(p) => write(p, &text)?,
        None => println!("{text}"),
    }
    let m = |s: &SizeMetrics| format!("{} rules, {} atoms", s.rules, s.atoms);
    eprintln!("{}: {} -> {}", report.pass, m(&report.input), m(&report.output));
    for n in &report.notes {
        eprintln!("note: {n}");
    }
    Ok(0)
}

fn report_verdict(v: &Verdict, lhs: &QueryForm, rhs: &QueryForm, witness: Option<&Path>) -> Outcome {
    match v {
        Verdict::Contained => {
            println!("CONTAINED");
            Ok(EXIT_CONTAINED)
        }
        Verdict::Inconclusive { depth } => {
            println!("INCONCLUSIVE (no counterexample up to height {depth})");
            Ok(EXIT_INCONCLUSIVE)
        }
        Verdict::NotContained(w) => {
            if !witness_holds(lhs, rhs, w).unwrap_or(false) {
                return Err(Failure(EXIT_RESOURCE, "internal error: witness does not validate".into()));
            }
            println!("NOT_CONTAINED");
            println!("answer: {}", w.answer.join(","));
            match witness {
                Some(p) => write(p, &serialize_verdict(v))?,
                None => {
                    let facts: Vec<String> = w.instance.facts().map(|(p, t)| format!("{p}({})", t.join(","))).collect();
                    println!("instance: {}", facts.join(". "));
                }
            }
            Ok(EXIT_NOT_CONTAINED)
        }
    }
}

fn contain_cmd(pair: &PairArgs, engine: Engine, mode: Mode, limits: LimitArgs) -> Outcome {
    let lhs = load_query(&pair.lhs)?;
    let rhs = load_query(&pair.rhs)?;
    let v = match engine {
        Engine::Automata => decide_containment_with(&lhs, &rhs, mode, limits.engine())?.0,
        Engine::Oracle => bounded_oracle_with(&lhs, &rhs, limits.depth, limits.oracle())?,
    };
    report_verdict(&v, &lhs, &rhs, pair.witness.as_deref())
}

fn gen_atm_cmd(machine: &Path, bits: usize, out: &Path, complete: bool) -> Outcome {
    let m: AtmSpec = read(machine)?.parse().map_err(Failure::usage)?;
    let mode = if complete { AddressBits::Complete } else { AddressBits::Printed };
    let b = atmgen::gen_counter_encoding_with(&m, bits, mode).map_err(Failure::usage)?;
    let checker = atmgen::gen_run_checker(&b, &m).map_err(Failure::usage)?;
    let rhs = atmgen::gen_rhs(&b, &m).map_err(Failure::usage)?;
    fs::create_dir_all(out.join("components")).map_err(|e| Failure::usage(format!("{}: {e}", out.display())))?;
    let mut files = vec![("lhs.dlq".to_string(), &b.lhs), ("rhs_counter.dlq".into(), &b.rhs_counter)];
    files.push(("run_checker.dlq".into(), &checker));
    files.push(("rhs.dlq".into(), &rhs));
    for (name, q) in &b.components {
        files.push((format!("components/{name}.dlq"), q));
    }
    let mut listing = serde_json::Map::new();
    for (name, q) in &files {
        write(&out.join(name), &serialize_query(q))?;
        let s = SizeMetrics::of(q);
        listing.insert(name.clone(), json!({"rules": s.rules, "atoms": s.atoms}));
    }
    let space = 1usize.checked_shl(bits as u32).unwrap_or(usize::MAX);
    let accepts = atmgen::simulate_atm(&m, space).ok();
    let manifest = json!({
        "machine": machine.display().to_string(),
        "address_bits": bits,
        "space": space,
        "complete_bits": complete,
        "simulated_accepts": accepts,
        "files": listing,
    });
    write(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("serializable"))?;
    println!("wrote {} queries to {}", files.len(), out.display());
    Ok(0)
}

fn automata_cmd(dump: Option<&Path>, load: Option<&Path>, max_states: usize) -> Outcome {
    if let Some(p) = dump {
        let q = load_query(p)?;
        let alpha = proof_alphabet(&q, max_states)?;
        let a = build_proof_automaton(&alpha);
        let mut v = nfta_to_json(&a);
        let labels: Vec<String> = alpha.labels.iter().map(|l| l.to_string()).collect();
        v["labels"] = json!(labels);
        println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
        return Ok(0);
    }
    let Some(p) = load else {
        return Err(Failure::usage("automata needs --dump QUERY or --load JSON"));
    };
    let v: serde_json::Value = serde_json::from_str(&read(p)?).map_err(Failure::usage)?;
    if let Ok(a) = nfta_from_json(&v) {
        println!("nfta: {} states, {} transitions", a.num_states, a.transition_count());
    } else {
        let a = ata2_from_json(&v).map_err(Failure::usage)?;
        println!("ata2: {} states", a.num_states);
    }
    Ok(0)
}

fn corpus_cmd(seed: u64, count: u64, out: Option<&Path>, limits: LimitArgs) -> Outcome {
    println!("seed {seed}, {count} pairs, oracle depth {}", limits.depth);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    }
    let lines: Vec<(String, bool)> = (seed..seed + count)
        .into_par_iter()
        .map(|s| {
            let p = random_pair(s);
            if let Some(dir) = out {
                let _ = fs::write(dir.join(format!("{s}.lhs.dlq")), &p.lhs);
                let _ = fs::write(dir.join(format!("{s}.rhs.dlq")), &p.rhs);
            }
            let (Ok(l), Ok(r)) = (parse_query(&p.lhs), parse_query(&p.rhs)) else {
                return (format!("{s} {} skipped: unparsable", p.rhs_kind), false);
            };
            let e = decide_containment_with(&l, &r, Mode::Auto, limits.engine()).map(|x| x.0);
            let o = bounded_oracle_with(&l, &r, limits.depth, limits.oracle());
            let word = |v: &Result<Verdict, ContainmentError>| match v {
                Ok(Verdict::Contained) => "contained".to_string(),
                Ok(Verdict::NotContained(_)) => "not_contained".to_string(),
                Ok(Verdict::Inconclusive { .. }) => "inconclusive".to_string(),
                Err(e) => format!("error({e})"),
            };
            let disagree = matches!((&e, &o), (Ok(Verdict::Contained), Ok(Verdict::NotContained(_))))
                || matches!(&e, Ok(Verdict::NotContained(w)) if !witness_holds(&l, &r, w).unwrap_or(false));
            let tag = if disagree { " DISAGREE" } else { "" };
            (format!("{s} {} engine={} oracle={}{tag}", p.rhs_kind, word(&e), word(&o)), disagree)
        })
        .collect();
    let mut bad = 0;
    for (line, disagree) in &lines {
        println!("{line}");
        bad += usize::from(*disagree);
    }
    println!("{bad} disagreements");
    Ok(if bad == 0 { 0 } else { EXIT_NOT_CONTAINED })
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Classify { query, json } => classify_cmd(&query, json),
        Command::Eval { query, db, answer } => eval_cmd(&query, &db, answer.as_deref()),
        Command::Rewrite { op, inputs, out } => rewrite_cmd(op, &inputs, out.as_deref()),
        Command::Contain { pair, engine, mode, limits } => contain_cmd(&pair, engine, mode, limits),
        Command::Oracle { pair, limits } => contain_cmd(&pair, Engine::Oracle, Mode::Auto, limits),
        Command::GenAtm { machine, bits, out, complete_bits } => gen_atm_cmd(&machine, bits, &out, complete_bits),
        Command::Automata { dump, load, max_states } => automata_cmd(dump.as_deref(), load.as_deref(), max_states),
        Command::Corpus { seed, count, out, limits } => corpus_cmd(seed, count, out.as_deref(), limits),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
