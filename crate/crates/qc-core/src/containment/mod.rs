//! Query containment: proof trees and their automata, matching-tree
//! automata, the containment decision procedure and a bounded
//! enumeration oracle.

mod engine;
mod matcher;
mod normal;
mod oracle;
mod proof;

use thiserror::Error;

pub use matcher::{
    build_match_ata, build_rule_matcher, guard_expansions, localize, AnnotatedLabel, GuardExpansion, LocalizedMatcher,
    MatchAta, MatchState, RuleMatcher, TwoWayState,
};
pub use oracle::{bounded_oracle, bounded_oracle_with, OracleLimits};
pub use engine::{decide_containment, decide_containment_with, EngineStats, Limits, Mode};
pub use normal::{normalize_lhs, NormalQuery};
pub use proof::{
    build_proof_automaton, canonical_instance, instantiate_expansion, label_tree, proof_alphabet, unlabel_tree, CanonicalInstance,
    Expansion, Label, ProofAlphabet,
};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ContainmentError {
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("resource limit: {0}")]
    ResourceLimit(String),
    #[error("answer arities differ: {0} vs {1}")]
    ArityMismatch(usize, usize),
    #[error("invalid proof tree: {0}")]
    InvalidTree(String),
    #[error("internal error: {0}")]
    Internal(String),
}
