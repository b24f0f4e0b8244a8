//! Proof trees of a Datalog query: their alphabet of rule instantiations,
//! the tree automaton accepting them, instantiation of abstract expansion
//! trees, and canonical instances.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::automata::{Nfta, RankedAlphabet, Tree};
use crate::model::{Atom, DatabaseInstance, Program, QueryForm, Rule, Term};
use crate::unify::{apply_atom, mgu, rename_rule_vars, Subst};
use crate::witness::ProofTree;

use super::normal::{normalize_lhs, NormalQuery};
use super::ContainmentError;

/// Instantiation of rule `rule` over the variable pool.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label {
    pub rule: usize,
    pub head: Atom,
    pub body: Vec<Atom>,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", Rule::new(self.head.clone(), self.body.clone()))
    }
}

#[derive(Debug, Clone)]
pub struct ProofAlphabet {
    pub query: NormalQuery,
    /// Variable pool `V1..Vn` with `n` twice the largest rule width.
    pub pool: Vec<String>,
    pub labels: Vec<Label>,
    /// Label `i` of `labels` is symbol `i`; its rank is its number of IDB body atoms.
    pub ranked: RankedAlphabet,
    index: HashMap<String, usize>,
}

impl ProofAlphabet {
    pub fn label_index(&self, head: &Atom, body: &[Atom]) -> Option<usize> {
        self.index.get(&Rule::new(head.clone(), body.to_vec()).to_string()).copied()
    }

    fn idb_atoms<'a>(&'a self, body: &'a [Atom]) -> impl Iterator<Item = &'a Atom> + 'a {
        body.iter().filter(|a| self.query.program.is_idb(&a.pred))
    }
}

pub(crate) fn pool_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("V{i}")).collect()
}

/// All instantiations of the rules of the normalized query over `V1..Vn`.
pub fn proof_alphabet(q: &QueryForm, max_labels: usize) -> Result<ProofAlphabet, ContainmentError> {
    let query = normalize_lhs(q)?;
    let pool = pool_names(2 * query.max_vars());
    let mut labels = Vec::new();
    for (ri, r) in query.program.rules.iter().enumerate() {
        let vars = r.vars();
        let count = pool.len().checked_pow(vars.len() as u32).unwrap_or(usize::MAX);
        if labels.len().saturating_add(count) > max_labels {
            return Err(ContainmentError::ResourceLimit(format!("more than {max_labels} proof labels")));
        }
        let mut choice = vec![0usize; vars.len()];
        loop {
            let s: Subst = vars.iter().zip(&choice).map(|(v, &c)| (v.clone(), Term::Var(pool[c].clone()))).collect();
            labels.push(Label {
                rule: ri,
                head: apply_atom(&s, &r.head),
                body: r.body.iter().map(|a| apply_atom(&s, a)).collect(),
            });
            // Odometer over pool indices.
            let mut k = 0;
            while k < choice.len() {
                choice[k] += 1;
                if choice[k] < pool.len() {
                    break;
                }
                choice[k] = 0;
                k += 1;
            }
            if k == choice.len() {
                break;
            }
        }
    }
    let names: Vec<(String, usize)> = labels
        .iter()
        .map(|l| (l.to_string(), l.body.iter().filter(|a| query.program.is_idb(&a.pred)).count()))
        .collect();
    let index = names.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
    let ranked = RankedAlphabet { symbols: names };
    Ok(ProofAlphabet { query, pool, labels, ranked, index })
}

/// Top-down automaton whose runs are exactly the proof trees: state 0 is
/// the start state, every other state is an IDB atom over the pool.
pub fn build_proof_automaton(alpha: &ProofAlphabet) -> Nfta {
    let mut states: BTreeMap<&Atom, usize> = BTreeMap::new();
    for l in &alpha.labels {
        for a in std::iter::once(&l.head).chain(alpha.idb_atoms(&l.body)) {
            let n = states.len() + 1;
            states.entry(a).or_insert(n);
        }
    }
    let mut nfta = Nfta::new(alpha.ranked.clone(), states.len() + 1);
    nfta.start.insert(0);
    for (i, l) in alpha.labels.iter().enumerate() {
        let children: Vec<usize> = alpha.idb_atoms(&l.body).map(|a| states[a]).collect();
        nfta.add(states[&l.head], i, children.clone());
        if l.head.pred == alpha.query.goal {
            nfta.add(0, i, children);
        }
    }
    nfta
}

/// Encodes a proof tree over the alphabet's labels.
pub fn label_tree(alpha: &ProofAlphabet, t: &ProofTree) -> Result<Tree<usize>, ContainmentError> {
    let l = alpha
        .label_index(&t.head, &t.body)
        .ok_or_else(|| ContainmentError::InvalidTree(format!("{} is not a label", Rule::new(t.head.clone(), t.body.clone()))))?;
    let children = t.children.iter().map(|c| label_tree(alpha, c)).collect::<Result<_, _>>()?;
    Ok(Tree::node(l, children))
}

/// Decodes a tree over the alphabet's labels.
pub fn unlabel_tree(alpha: &ProofAlphabet, t: &Tree<usize>) -> ProofTree {
    let l = &alpha.labels[t.label];
    ProofTree {
        head: l.head.clone(),
        body: l.body.clone(),
        children: t.children.iter().map(|c| unlabel_tree(alpha, c)).collect(),
        ..ProofTree::default()
    }
}

/// Abstract expansion tree: a rule per node, children in the textual order
/// of the rule's IDB body atoms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expansion {
    pub rule: usize,
    pub children: Vec<Expansion>,
}

impl Expansion {
    pub fn height(&self) -> usize {
        self.children.iter().map(|c| c.height() + 1).max().unwrap_or(0)
    }
}

/// Most general proof tree with the shape of `e`, its variables named
/// from the pool `V1..Vn`.
pub fn instantiate_expansion(q: &NormalQuery, e: &Expansion) -> Result<ProofTree, ContainmentError> {
    let p = &q.program;
    // Rename every node apart, then unify child heads with parent atoms.
    let mut nodes: Vec<(Rule, Vec<usize>)> = Vec::new();
    fn collect(p: &Program, e: &Expansion, nodes: &mut Vec<(Rule, Vec<usize>)>) -> Result<usize, ContainmentError> {
        let r = p
            .rules
            .get(e.rule)
            .ok_or_else(|| ContainmentError::InvalidTree(format!("no rule {}", e.rule)))?;
        let id = nodes.len();
        nodes.push((rename_rule_vars(r, &format!("#{id}")), Vec::new()));
        let mut kids = Vec::new();
        for c in &e.children {
            kids.push(collect(p, c, nodes)?);
        }
        nodes[id].1 = kids;
        Ok(id)
    }
    collect(p, e, &mut nodes)?;
    let mut pairs: Vec<(&Atom, &Atom)> = Vec::new();
    for (r, kids) in &nodes {
        let idb: Vec<&Atom> = r.body.iter().filter(|a| p.is_idb(&a.pred)).collect();
        if idb.len() != kids.len() {
            return Err(ContainmentError::InvalidTree(format!("rule {r} needs {} children", idb.len())));
        }
        for (a, &k) in idb.iter().zip(kids) {
            pairs.push((a, &nodes[k].0.head));
        }
    }
    let s = mgu(&pairs).ok_or_else(|| ContainmentError::InvalidTree("expansion does not unify".into()))?;
    let pool = pool_names(2 * q.max_vars());
    fn build(
        nodes: &[(Rule, Vec<usize>)],
        s: &Subst,
        id: usize,
        inherited: &BTreeMap<Term, String>,
        pool: &[String],
    ) -> Result<ProofTree, ContainmentError> {
        let (r, kids) = &nodes[id];
        let head = apply_atom(s, &r.head);
        let body: Vec<Atom> = r.body.iter().map(|a| apply_atom(s, a)).collect();
        let mut names: BTreeMap<Term, String> = BTreeMap::new();
        for t in &head.args {
            if let (Term::Var(_), Some(n)) = (t, inherited.get(t)) {
                names.insert(t.clone(), n.clone());
            }
        }
        for a in std::iter::once(&head).chain(body.iter()) {
            for t in &a.args {
                if t.is_var() && !names.contains_key(t) {
                    let used: BTreeSet<&String> = names.values().collect();
                    let n = pool
                        .iter()
                        .find(|n| !used.contains(n))
                        .ok_or_else(|| ContainmentError::Internal("variable pool exhausted".into()))?;
                    names.insert(t.clone(), n.clone());
                }
            }
        }
        let rn = |a: &Atom| Atom {
            pred: a.pred.clone(),
            args: a.args.iter().map(|t| names.get(t).map_or_else(|| t.clone(), |n| Term::Var(n.clone()))).collect(),
        };
        let mut children = Vec::new();
        for &k in kids {
            children.push(build(nodes, s, k, &names, pool)?);
        }
        Ok(ProofTree { head: rn(&head), body: body.iter().map(rn).collect(), children, ..ProofTree::default() })
    }
    build(&nodes, &s, 0, &BTreeMap::new(), &pool)
}

/// Instance, answer and λ values induced by a proof tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalInstance {
    pub instance: DatabaseInstance,
    pub answer: Vec<String>,
    pub lambda: BTreeMap<usize, String>,
}

fn natural_key(s: &str) -> (String, u64, String) {
    let digits = s.len() - s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let (stem, num) = s.split_at(s.len() - digits);
    (stem.to_string(), num.parse().unwrap_or(0), s.to_string())
}

fn element_names(avoid: &BTreeSet<String>) -> impl Iterator<Item = String> + '_ {
    (0usize..)
        .map(|i| {
            let letter = (b'a' + (i % 26) as u8) as char;
            if i < 26 {
                letter.to_string()
            } else {
                format!("{letter}{}", i / 26)
            }
        })
        .filter(move |n| !avoid.contains(n))
}

/// Canonical instance of a proof tree: one element per class of connected
/// variable occurrences, named `a, b, c, ...`, and every EDB
/// atom of every label.  Elements whose names appear in `avoid` (and the
/// tree's own constants) are skipped when naming.
pub fn canonical_instance(program: &Program, t: &ProofTree) -> Result<CanonicalInstance, ContainmentError> {
    canonical_instance_avoiding(program, t, &BTreeSet::new())
}

pub(crate) fn canonical_instance_avoiding(
    program: &Program,
    t: &ProofTree,
    avoid: &BTreeSet<String>,
) -> Result<CanonicalInstance, ContainmentError> {
    // Preorder node list with parents.
    let mut nodes: Vec<(&ProofTree, Option<usize>)> = Vec::new();
    fn walk<'a>(t: &'a ProofTree, parent: Option<usize>, out: &mut Vec<(&'a ProofTree, Option<usize>)>) {
        let id = out.len();
        out.push((t, parent));
        for c in &t.children {
            walk(c, Some(id), out);
        }
    }
    walk(t, None, &mut nodes);
    let mut taken: BTreeSet<String> = avoid.clone();
    let mut occ: BTreeMap<(usize, &str), usize> = BTreeMap::new();
    let mut parent_of = Vec::new();
    for (id, (n, _)) in nodes.iter().enumerate() {
        let idb: Vec<&Atom> = n.body.iter().filter(|a| !program.is_edb(&a.pred)).collect();
        if idb.len() != n.children.len() {
            return Err(ContainmentError::InvalidTree(format!(
                "node {} has {} derived body atoms but {} children",
                n.head,
                idb.len(),
                n.children.len()
            )));
        }
        for (a, c) in idb.iter().zip(&n.children) {
            if **a != c.head {
                return Err(ContainmentError::InvalidTree(format!("child head {} differs from {a}", c.head)));
            }
        }
        for a in std::iter::once(&n.head).chain(n.body.iter()) {
            for term in &a.args {
                match term {
                    Term::Var(v) => {
                        let k = occ.len();
                        occ.entry((id, v.as_str())).or_insert(k);
                    }
                    Term::Const(c) => {
                        taken.insert(c.clone());
                    }
                    Term::Lambda(_) => {
                        return Err(ContainmentError::InvalidTree("λ constant in a proof label".into()));
                    }
                }
            }
        }
        parent_of.push(nodes[id].1);
    }
    // Union the occurrence of each child-head variable with the parent's.
    let mut uf: Vec<usize> = (0..occ.len()).collect();
    fn find(uf: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while uf[r] != r {
            r = uf[r];
        }
        let mut y = x;
        while uf[y] != r {
            let n = uf[y];
            uf[y] = r;
            y = n;
        }
        r
    }
    for (id, (n, parent)) in nodes.iter().enumerate() {
        if let Some(p) = parent {
            for v in n.head.vars() {
                let a = find(&mut uf, occ[&(id, v)]);
                let b = find(&mut uf, occ[&(*p, v)]);
                uf[a] = b;
            }
        }
    }
    // Elements met in facts are named first, visiting nodes children-first
    // so that chains read in derivation order; the rest follow in preorder.
    let mut order: Vec<usize> = Vec::new();
    fn post(nodes: &[(&ProofTree, Option<usize>)], id: usize, out: &mut Vec<usize>) {
        let kids: Vec<usize> = (0..nodes.len()).filter(|&k| nodes[k].1 == Some(id)).collect();
        for k in kids {
            post(nodes, k, out);
        }
        out.push(id);
    }
    post(&nodes, 0, &mut order);
    let mut visits: Vec<(usize, &str)> = Vec::new();
    for &id in &order {
        for a in nodes[id].0.body.iter().filter(|a| program.is_edb(&a.pred)) {
            visits.extend(a.vars().into_iter().map(|v| (id, v)));
        }
    }
    for id in 0..nodes.len() {
        let mut vars: Vec<&str> = occ.keys().filter(|(i, _)| *i == id).map(|(_, v)| *v).collect();
        vars.sort_by_key(|v| natural_key(v));
        visits.extend(vars.into_iter().map(|v| (id, v)));
    }
    let mut names = element_names(&taken);
    let mut class_name: BTreeMap<usize, String> = BTreeMap::new();
    let mut naming: BTreeMap<(usize, &str), String> = BTreeMap::new();
    for key in visits {
        let c = find(&mut uf, occ[&key]);
        let name = class_name.entry(c).or_insert_with(|| names.next().expect("unbounded names")).clone();
        naming.insert(key, name);
    }
    let elem = |id: usize, t: &Term| -> String {
        match t {
            Term::Var(v) => naming[&(id, v.as_str())].clone(),
            Term::Const(c) => c.clone(),
            Term::Lambda(k) => format!("@{k}"),
        }
    };
    let mut instance = DatabaseInstance::new();
    let mut lambda = BTreeMap::new();
    for (id, (n, _)) in nodes.iter().enumerate() {
        for a in std::iter::once(&n.head).chain(n.body.iter()) {
            instance.domain.extend(a.args.iter().map(|t| elem(id, t)));
        }
        for a in n.body.iter().filter(|a| program.is_edb(&a.pred)) {
            instance.insert(&a.pred, a.args.iter().map(|t| elem(id, t)).collect());
        }
        for (k, t) in &n.lambda {
            lambda.insert(*k, elem(id, t));
        }
    }
    let answer = t.head.args.iter().map(|x| elem(0, x)).collect();
    Ok(CanonicalInstance { instance, answer, lambda })
}

/// Reads the λ values of a flag-and-check left-hand side off the root of
/// its normalized proof tree.
pub(crate) fn root_lambda_terms(q: &NormalQuery, t: &ProofTree) -> Option<Vec<Term>> {
    let lp = q.lambda_pred.as_ref()?;
    if &t.head.pred == lp {
        return Some(t.head.args.clone());
    }
    t.body.iter().find(|a| &a.pred == lp).map(|a| a.args.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automata::nfta_membership;
    use crate::parser::parse_query;

    const TC: &str = "tc(X,Y) :- p(X,Y). tc(X,Z) :- tc(X,Y), p(Y,Z). query(X,Y) :- tc(X,Y).";

    fn atom(p: &str, a: &[&str]) -> Atom {
        Atom::new(p, a.iter().map(|x| Term::var(x)).collect())
    }

    fn two_node() -> ProofTree {
        let child = ProofTree::leaf(atom("tc", &["V1", "V2"]), vec![atom("p", &["V1", "V2"])]);
        let mut root = ProofTree::leaf(atom("tc", &["V1", "V3"]), vec![atom("tc", &["V1", "V2"]), atom("p", &["V2", "V3"])]);
        root.children.push(child);
        root
    }

    #[test]
    fn tc_alphabet_size() {
        let a = proof_alphabet(&parse_query(TC).unwrap(), 1_000_000).unwrap();
        assert_eq!(a.pool.len(), 6);
        assert_eq!(a.labels.iter().filter(|l| l.rule == 0).count(), 36);
        assert_eq!(a.labels.iter().filter(|l| l.rule == 1).count(), 216);
    }

    #[test]
    fn proof_automaton_accepts_hand_built_tree() {
        let a = proof_alphabet(&parse_query(TC).unwrap(), 1_000_000).unwrap();
        let n = build_proof_automaton(&a);
        let t = label_tree(&a, &two_node()).unwrap();
        assert!(nfta_membership(&n, &t).unwrap());
        let mut bad = two_node();
        bad.children[0] = ProofTree::leaf(atom("tc", &["V1", "V4"]), vec![atom("p", &["V1", "V4"])]);
        // The mismatched child is still a label but the tree is rejected.
        let t = label_tree(&a, &bad).unwrap();
        assert!(!nfta_membership(&n, &t).unwrap());
    }

    #[test]
    fn canonical_instance_of_two_node_tree() {
        let q = parse_query(TC).unwrap();
        let c = canonical_instance(q.program().unwrap(), &two_node()).unwrap();
        let mut want = DatabaseInstance::new();
        want.insert("p", vec!["a".into(), "b".into()]);
        want.insert("p", vec!["b".into(), "c".into()]);
        assert_eq!(c.instance, want);
        assert_eq!(c.answer, vec!["a".to_string(), "c".to_string()]);
    }

    #[test]
    fn unconnected_siblings_get_distinct_elements() {
        let q = parse_query("r(X) :- e(X), f(X,Z). s :- r(X), r(Y). query :- s.").unwrap();
        let p = q.program().unwrap();
        let leaf = |v: &str| ProofTree::leaf(atom("r", &[v]), vec![atom("e", &[v])]);
        let mut root = ProofTree::leaf(Atom::new("s", vec![]), vec![atom("r", &["V1"]), atom("r", &["V1"])]);
        root.children = vec![leaf("V1"), leaf("V1")];
        let c = canonical_instance(p, &root).unwrap();
        assert_eq!(c.instance.fact_count(), 1);
        root.body = vec![atom("r", &["V1"]), atom("r", &["V2"])];
        root.children = vec![leaf("V1"), leaf("V2")];
        assert_eq!(canonical_instance(p, &root).unwrap().instance.fact_count(), 2);
        let leaf2 = |v: &str| ProofTree::leaf(atom("r", &[v]), vec![atom("e", &[v]), atom("f", &[v, "V3"])]);
        root.children = vec![leaf2("V1"), leaf2("V2")];
        root.children[0].body[0] = atom("e", &["V1"]);
        let c = canonical_instance(p, &root).unwrap();
        assert_eq!(c.instance.relations["f"].len(), 2);
    }

    #[test]
    fn instantiate_tc_expansion() {
        let nq = normalize_lhs(&parse_query(TC).unwrap()).unwrap();
        let e = Expansion { rule: 1, children: vec![Expansion { rule: 0, children: vec![] }] };
        let t = instantiate_expansion(&nq, &e).unwrap();
        assert_eq!(t.head.to_string(), "tc(V1,V2)");
        assert_eq!(t.children[0].head, t.body[0]);
        let c = canonical_instance(&nq.program, &t).unwrap();
        assert_eq!(c.instance.fact_count(), 2);
        assert_eq!(c.answer, vec!["a".to_string(), "c".to_string()]);
    }
}
