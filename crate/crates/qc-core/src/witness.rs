//! Proof trees and containment verdicts.

use std::collections::BTreeMap;

use crate::model::{Atom, DatabaseInstance, Term};

/// A node of a proof tree: a rule instantiation plus optional annotations.
///
/// Children correspond, in order, to the IDB (or subquery-free derived) body
/// atoms of the label; the head of child `i` equals the `i`-th such atom.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProofTree {
    pub head: Atom,
    pub body: Vec<Atom>,
    pub children: Vec<ProofTree>,
    /// Partial map from λ indices to pool variables.
    pub lambda: BTreeMap<usize, Term>,
    /// The distinguished entailed atom of a matching tree.
    pub p_label: Option<Atom>,
}

impl ProofTree {
    pub fn leaf(head: Atom, body: Vec<Atom>) -> ProofTree {
        ProofTree { head, body, ..ProofTree::default() }
    }

    pub fn height(&self) -> usize {
        self.children.iter().map(|c| c.height() + 1).max().unwrap_or(0)
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(ProofTree::node_count).sum::<usize>()
    }

    /// Node at a 1-based address (empty address = root).
    pub fn node(&self, addr: &[usize]) -> Option<&ProofTree> {
        match addr.split_first() {
            None => Some(self),
            Some((&i, rest)) => self.children.get(i.checked_sub(1)?)?.node(rest),
        }
    }
}

/// Counterexample to a containment: an instance on which the left query
/// answers `answer` but the right query does not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Witness {
    pub proof_tree: ProofTree,
    pub instance: DatabaseInstance,
    pub answer: Vec<String>,
    /// Values of the left query's λ constants when it is a flag-and-check query.
    pub lambda: BTreeMap<usize, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Contained,
    NotContained(Box<Witness>),
    /// No counterexample up to the given proof-tree height.
    Inconclusive { depth: usize },
}

impl Verdict {
    pub fn is_contained(&self) -> bool {
        matches!(self, Verdict::Contained)
    }

    pub fn witness(&self) -> Option<&Witness> {
        match self {
            Verdict::NotContained(w) => Some(w),
            _ => None,
        }
    }
}
