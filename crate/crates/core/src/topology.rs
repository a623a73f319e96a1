//! Communication overlays the agents gossip on.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::AgentId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("an overlay needs at least one node")]
    Empty,
    #[error("duplicate node id {0}")]
    Duplicate(AgentId),
    #[error("small world needs an even k with 2 <= k < n, got k={k}, n={n}")]
    BadDegree { k: usize, n: usize },
    #[error("rewire probability must lie in [0, 1], got {0}")]
    BadProbability(f64),
    #[error("edge ({0}, {1}) references an unknown node or is a self-loop")]
    BadEdge(AgentId, AgentId),
}

/// Undirected, loop-free graph over agent ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlay {
    node_ids: Vec<AgentId>,
    adjacency: BTreeMap<AgentId, Vec<AgentId>>,
}

impl Overlay {
    /// Builds an overlay from an explicit edge list. Duplicate edges collapse.
    pub fn from_edges(
        ids: &[AgentId],
        edges: impl IntoIterator<Item = (AgentId, AgentId)>,
    ) -> Result<Self, TopologyError> {
        let mut adj = empty_adjacency(ids)?;
        for (a, b) in edges {
            if a == b || !adj.contains_key(&a) || !adj.contains_key(&b) {
                return Err(TopologyError::BadEdge(a, b));
            }
            adj.get_mut(&a).unwrap().insert(b);
            adj.get_mut(&b).unwrap().insert(a);
        }
        Ok(Self::from_sets(ids, adj))
    }

    fn from_sets(ids: &[AgentId], adj: BTreeMap<AgentId, BTreeSet<AgentId>>) -> Self {
        Self {
            node_ids: ids.to_vec(),
            adjacency: adj.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect(),
        }
    }

    pub fn node_ids(&self) -> &[AgentId] {
        &self.node_ids
    }

    /// Sorted neighbor list; empty for unknown ids.
    pub fn neighbors(&self, id: AgentId) -> &[AgentId] {
        self.adjacency.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once, as `(lower, higher)`.
    pub fn edges(&self) -> Vec<(AgentId, AgentId)> {
        self.adjacency
            .iter()
            .flat_map(|(&a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<AgentId>> {
        let mut seen = HashSet::new();
        let mut sorted: Vec<AgentId> = self.node_ids.clone();
        sorted.sort();
        let mut out = Vec::new();
        for &start in &sorted {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(n) = queue.pop_front() {
                for &m in self.neighbors(n) {
                    if seen.insert(m) {
                        comp.push(m);
                        queue.push_back(m);
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency.iter().all(|(&a, ns)| {
            ns.iter()
                .all(|&b| b != a && self.neighbors(b).binary_search(&a).is_ok())
        })
    }
}

fn empty_adjacency(ids: &[AgentId]) -> Result<BTreeMap<AgentId, BTreeSet<AgentId>>, TopologyError> {
    if ids.is_empty() {
        return Err(TopologyError::Empty);
    }
    let mut adj = BTreeMap::new();
    for &id in ids {
        if adj.insert(id, BTreeSet::new()).is_some() {
            return Err(TopologyError::Duplicate(id));
        }
    }
    Ok(adj)
}

/// Cycle over `ids` in the given order.
pub fn ring(ids: &[AgentId]) -> Result<Overlay, TopologyError> {
    let n = ids.len();
    let edges = (0..n).filter(|_| n > 1).map(|i| (ids[i], ids[(i + 1) % n]));
    let edges: Vec<_> = edges.collect();
    Overlay::from_edges(ids, edges)
}

/// Every pair adjacent.
pub fn complete(ids: &[AgentId]) -> Result<Overlay, TopologyError> {
    let mut edges = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            edges.push((a, b));
        }
    }
    Overlay::from_edges(ids, edges)
}

/// Watts-Strogatz graph: a ring lattice where each node links to its `k / 2`
/// successors, after which every lattice edge is rewired to a uniformly chosen
/// new endpoint with probability `p`. Components left disconnected are then
/// joined by linking their smallest ids.
pub fn small_world(ids: &[AgentId], k: usize, p: f64, seed: u64) -> Result<Overlay, TopologyError> {
    let mut adj = lattice(ids, k, p)?;
    let n = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for j in 1..=k / 2 {
        for i in 0..n {
            let (u, v) = (ids[i], ids[(i + j) % n]);
            if !rng.random_bool(p) || !adj[&u].contains(&v) {
                continue;
            }
            // Saturated nodes keep their edge.
            if adj[&u].len() >= n - 1 {
                continue;
            }
            let w = loop {
                let w = ids[rng.random_range(0..n)];
                if w != u && !adj[&u].contains(&w) {
                    break w;
                }
            };
            adj.get_mut(&u).unwrap().remove(&v);
            adj.get_mut(&v).unwrap().remove(&u);
            adj.get_mut(&u).unwrap().insert(w);
            adj.get_mut(&w).unwrap().insert(u);
        }
    }
    let mut overlay = Overlay::from_sets(ids, adj);
    repair_connectivity(&mut overlay);
    Ok(overlay)
}

/// The unrewired lattice, used to check `p = 0` behaviour.
pub fn ring_lattice(ids: &[AgentId], k: usize) -> Result<Overlay, TopologyError> {
    Ok(Overlay::from_sets(ids, lattice(ids, k, 0.0)?))
}

fn lattice(ids: &[AgentId], k: usize, p: f64) -> Result<BTreeMap<AgentId, BTreeSet<AgentId>>, TopologyError> {
    let mut adj = empty_adjacency(ids)?;
    let n = ids.len();
    if k < 2 || !k.is_multiple_of(2) || k >= n {
        return Err(TopologyError::BadDegree { k, n });
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(TopologyError::BadProbability(p));
    }
    for i in 0..n {
        for j in 1..=k / 2 {
            let (u, v) = (ids[i], ids[(i + j) % n]);
            adj.get_mut(&u).unwrap().insert(v);
            adj.get_mut(&v).unwrap().insert(u);
        }
    }
    Ok(adj)
}

fn repair_connectivity(overlay: &mut Overlay) {
    loop {
        let comps = overlay.components();
        if comps.len() <= 1 {
            return;
        }
        let (a, b) = (comps[0][0], comps[1][0]);
        for (x, y) in [(a, b), (b, a)] {
            let ns = overlay.adjacency.get_mut(&x).unwrap();
            let pos = ns.binary_search(&y).unwrap_err();
            ns.insert(pos, y);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: u32) -> Vec<AgentId> {
        (0..n).map(AgentId).collect()
    }

    fn edge_set(o: &Overlay) -> Vec<(u32, u32)> {
        o.edges().into_iter().map(|(a, b)| (a.0, b.0)).collect()
    }

    #[test]
    fn ring_examples() {
        assert_eq!(ring(&ids(1)).unwrap().edge_count(), 0);
        assert_eq!(edge_set(&ring(&ids(2)).unwrap()), vec![(0, 1)]);
        assert_eq!(edge_set(&ring(&ids(3)).unwrap()), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(
            ring(&[AgentId(1), AgentId(1)]),
            Err(TopologyError::Duplicate(AgentId(1)))
        );
        assert_eq!(ring(&[]), Err(TopologyError::Empty));
    }

    #[test]
    fn complete_examples() {
        assert_eq!(complete(&ids(1)).unwrap().edge_count(), 0);
        assert_eq!(complete(&ids(3)).unwrap().edge_count(), 3);
        assert_eq!(complete(&ids(5)).unwrap().edge_count(), 5 * 4 / 2);
    }

    #[test]
    fn small_world_without_rewiring_is_ring() {
        let o = small_world(&ids(7), 2, 0.0, 99).unwrap();
        assert_eq!(o, ring(&ids(7)).unwrap());
    }

    #[test]
    fn fully_rewired_small_world() {
        let n = 20;
        let adj = lattice(&ids(n), 4, 1.0).unwrap();
        assert_eq!(adj.values().map(BTreeSet::len).sum::<usize>() / 2, 40);
        let o = small_world(&ids(n), 4, 1.0, 7).unwrap();
        // Rewiring preserves the edge count; repair may only add.
        assert!(o.edge_count() >= 40);
        assert!(o.is_connected());
        assert!(o.is_symmetric());
        assert_eq!(o, small_world(&ids(n), 4, 1.0, 7).unwrap());
    }

    #[test]
    fn small_world_rejects_bad_degree() {
        assert!(matches!(
            small_world(&ids(4), 4, 0.1, 0),
            Err(TopologyError::BadDegree { .. })
        ));
        assert!(matches!(
            small_world(&ids(9), 3, 0.1, 0),
            Err(TopologyError::BadDegree { .. })
        ));
        assert!(matches!(
            small_world(&ids(9), 2, 1.5, 0),
            Err(TopologyError::BadProbability(_))
        ));
    }

    #[test]
    fn repair_joins_components() {
        let mut o = Overlay::from_edges(&ids(5), [(AgentId(0), AgentId(1)), (AgentId(3), AgentId(4))]).unwrap();
        repair_connectivity(&mut o);
        assert!(o.is_connected());
        assert_eq!(edge_set(&o), vec![(0, 1), (0, 2), (0, 3), (3, 4)]);
    }

    proptest! {
        #[test]
        fn generated_overlays_are_valid(n in 3u32..40, half_k in 1usize..5, p in 0.0f64..=1.0, seed in any::<u64>()) {
            let k = 2 * half_k;
            let ids = ids(n);
            let mut overlays = vec![ring(&ids).unwrap(), complete(&ids).unwrap()];
            if k < n as usize {
                overlays.push(small_world(&ids, k, p, seed).unwrap());
            }
            for o in overlays {
                prop_assert!(o.is_symmetric());
                prop_assert!(o.is_connected());
                prop_assert_eq!(o.node_ids().len(), n as usize);
            }
        }

        #[test]
        fn zero_rewiring_equals_lattice(n in 5u32..30, half_k in 1usize..3, seed in any::<u64>()) {
            let k = 2 * half_k;
            prop_assert_eq!(small_world(&ids(n), k, 0.0, seed).unwrap(), ring_lattice(&ids(n), k).unwrap());
        }
    }
}
