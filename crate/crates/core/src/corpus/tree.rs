use std::fmt;

use serde::{Deserialize, Serialize};

use super::RelationInstance;

/// `Up` walks from a dependent to its head, `Down` from a head to a dependent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PathStep {
    pub direction: Direction,
    pub deprel: String,
    pub optional: bool,
}

impl PathStep {
    pub fn new(direction: Direction, deprel: impl Into<String>) -> Self {
        PathStep {
            direction,
            deprel: deprel.into(),
            optional: false,
        }
    }

    pub fn optional(mut self) -> Self {
        self.optional = true;
        self
    }
}

impl fmt::Display for PathStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let arrow = match self.direction {
            Direction::Up => '<',
            Direction::Down => '>',
        };
        write!(f, "{arrow}{}", self.deprel)?;
        if self.optional {
            f.write_str("?")?;
        }
        Ok(())
    }
}

/// Sequence of labeled tree edges.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DepPath {
    pub steps: Vec<PathStep>,
}

impl DepPath {
    pub fn new(steps: Vec<PathStep>) -> Self {
        DepPath { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The same path walked from the other end.
    pub fn reversed(&self) -> DepPath {
        DepPath {
            steps: self
                .steps
                .iter()
                .rev()
                .map(|s| PathStep {
                    direction: s.direction.flipped(),
                    deprel: s.deprel.clone(),
                    optional: s.optional,
                })
                .collect(),
        }
    }
}

impl fmt::Display for DepPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

fn ancestors(inst: &RelationInstance, mut i: usize) -> Vec<usize> {
    let mut out = vec![i];
    while let Some(h) = inst.tokens[i].head {
        out.push(h);
        i = h;
    }
    out
}

/// Tree path between two tokens: up from `a` to the lowest common ancestor,
/// then down to `b`.
fn path_between(inst: &RelationInstance, a: usize, b: usize) -> DepPath {
    let up = ancestors(inst, a);
    let down = ancestors(inst, b);
    let (ia, ib) = up
        .iter()
        .enumerate()
        .find_map(|(ia, n)| down.iter().position(|m| m == n).map(|ib| (ia, ib)))
        .expect("validated trees share a root");
    let mut steps = Vec::with_capacity(ia + ib);
    for &n in &up[..ia] {
        steps.push(PathStep::new(Direction::Up, inst.tokens[n].deprel.clone()));
    }
    for &n in down[..ib].iter().rev() {
        steps.push(PathStep::new(Direction::Down, inst.tokens[n].deprel.clone()));
    }
    DepPath::new(steps)
}

/// Shortest undirected tree path from any token of `from` to any token of
/// `to`, with the endpoints it connects. Equal lengths are resolved by the
/// smallest `(from, to)` index pair.
///
/// Panics if either set is empty or out of bounds.
pub fn shortest_dep_path(
    inst: &RelationInstance,
    from: &[usize],
    to: &[usize],
) -> (DepPath, (usize, usize)) {
    assert!(!from.is_empty() && !to.is_empty(), "endpoint sets must be non-empty");
    let mut from = from.to_vec();
    let mut to = to.to_vec();
    from.sort_unstable();
    to.sort_unstable();
    let mut best: Option<(DepPath, (usize, usize))> = None;
    for &a in &from {
        for &b in &to {
            let p = path_between(inst, a, b);
            if best.as_ref().is_none_or(|(q, _)| p.len() < q.len()) {
                best = Some((p, (a, b)));
            }
        }
    }
    best.expect("non-empty endpoint sets")
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use proptest::prelude::*;

    use super::*;
    use crate::corpus::fixtures::{tok, walkthrough};
    use crate::corpus::{Span, Token};

    #[test]
    fn walkthrough_trigger_paths() {
        let inst = walkthrough();
        let (p, ends) = shortest_dep_path(&inst, &[2], &[0]);
        assert_eq!(p, DepPath::new(vec![PathStep::new(Direction::Down, "nmod:poss")]));
        assert_eq!(ends, (2, 0));
        let (p, _) = shortest_dep_path(&inst, &[2], &[4]);
        assert_eq!(p.to_string(), ">appos");
    }

    #[test]
    fn same_node_gives_empty_path() {
        let inst = walkthrough();
        let (p, ends) = shortest_dep_path(&inst, &[3], &[3]);
        assert!(p.is_empty());
        assert_eq!(ends, (3, 3));
    }

    #[test]
    fn subject_to_object_goes_up_then_down() {
        let inst = walkthrough();
        let (p, _) = shortest_dep_path(&inst, &[0], &[4]);
        assert_eq!(p.to_string(), "<nmod:poss >appos");
    }

    #[test]
    fn ties_prefer_smallest_endpoints() {
        let inst = walkthrough();
        // Both commas hang one step from Emma.
        let (_, ends) = shortest_dep_path(&inst, &[5, 3], &[4]);
        assert_eq!(ends, (3, 4));
    }

    /// Random tree: node i > 0 attaches to a random earlier node, then
    /// indices are permuted so the root is not always token 0.
    fn random_tree(parents: Vec<usize>, perm: Vec<usize>) -> RelationInstance {
        let n = parents.len() + 1;
        let mut heads = vec![None; n];
        for (k, &p) in parents.iter().enumerate() {
            heads[perm[k + 1]] = Some(perm[p % (k + 1)]);
        }
        let tokens: Vec<Token> = (0..n)
            .map(|i| tok(&format!("w{i}"), heads[i], &format!("r{i}")))
            .collect();
        let inst = RelationInstance {
            id: "rand".into(),
            tokens,
            subj: Span::new(0, 0),
            obj: Span::new(n - 1, n - 1),
            subj_type: "A".into(),
            obj_type: "B".into(),
            relation: "r".into(),
        };
        inst.validate().unwrap();
        inst
    }

    fn bfs_distance(inst: &RelationInstance, a: usize, b: usize) -> usize {
        let n = inst.len();
        let mut adj = vec![Vec::new(); n];
        for (i, t) in inst.tokens.iter().enumerate() {
            if let Some(h) = t.head {
                adj[i].push(h);
                adj[h].push(i);
            }
        }
        let mut dist = vec![usize::MAX; n];
        dist[a] = 0;
        let mut q = VecDeque::from([a]);
        while let Some(u) = q.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    q.push_back(v);
                }
            }
        }
        dist[b]
    }

    fn tree_strategy() -> impl Strategy<Value = RelationInstance> {
        (2usize..=10).prop_flat_map(|n| {
            (
                proptest::collection::vec(0usize..100, n - 1),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            )
                .prop_map(|(parents, perm)| random_tree(parents, perm))
        })
    }

    proptest! {
        #[test]
        fn path_length_matches_bfs(inst in tree_strategy()) {
            let n = inst.len();
            for a in 0..n {
                for b in 0..n {
                    let (p, _) = shortest_dep_path(&inst, &[a], &[b]);
                    prop_assert_eq!(p.len(), bfs_distance(&inst, a, b));
                }
            }
        }

        #[test]
        fn set_path_is_minimum_over_pairs(inst in tree_strategy(), xs in proptest::collection::vec(0usize..10, 1..4), ys in proptest::collection::vec(0usize..10, 1..4)) {
            let n = inst.len();
            let from: Vec<usize> = xs.iter().map(|x| x % n).collect();
            let to: Vec<usize> = ys.iter().map(|y| y % n).collect();
            let (p, (a, b)) = shortest_dep_path(&inst, &from, &to);
            let best = from.iter().flat_map(|&a| to.iter().map(move |&b| (a, b)))
                .map(|(a, b)| bfs_distance(&inst, a, b)).min().unwrap();
            prop_assert_eq!(p.len(), best);
            prop_assert_eq!(bfs_distance(&inst, a, b), best);
        }

        #[test]
        fn reversing_endpoints_reverses_the_path(inst in tree_strategy(), a in 0usize..10, b in 0usize..10) {
            let n = inst.len();
            let (a, b) = (a % n, b % n);
            let (fwd, _) = shortest_dep_path(&inst, &[a], &[b]);
            let (back, _) = shortest_dep_path(&inst, &[b], &[a]);
            prop_assert_eq!(back, fwd.reversed());
            prop_assert!(fwd.steps.iter().all(|s| !s.optional));
        }
    }
}
