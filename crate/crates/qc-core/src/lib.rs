//! Static analysis toolkit for Datalog queries: syntax, evaluation,
//! rewritings, tree automata, and a containment decision procedure with
//! checkable counterexamples.

pub mod model;
pub mod parser;
pub mod witness;
pub mod eval;
pub mod rewrites;
pub mod unify;
pub mod automata;
pub mod containment;
pub mod atmgen;
pub mod random;
