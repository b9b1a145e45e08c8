//! Minimum-latency sets of link-disjoint paths between two bridges.
//!
//! Successive shortest augmenting paths on a unit-capacity residual graph
//! (the Suurballe construction generalized to `k` paths). Every undirected
//! bridge link becomes a pair of opposite arcs; the final flow decomposes
//! into `k` link-disjoint paths of minimum total latency.

use std::collections::BTreeMap;

use crate::model::{LinkId, LinkPath, Topology};

use super::PlacementError;

struct Arc {
    to: usize,
    link: LinkId,
    cost: i64,
    cap: u8,
}

struct Residual {
    arcs: Vec<Arc>,
    out: Vec<Vec<usize>>,
}

impl Residual {
    fn add_edge(&mut self, u: usize, v: usize, link: LinkId, cost: i64) {
        for (from, to) in [(u, v), (v, u)] {
            let fwd = self.arcs.len();
            self.arcs.push(Arc { to, link, cost, cap: 1 });
            self.arcs.push(Arc { to: from, link, cost: -cost, cap: 0 });
            self.out[from].push(fwd);
            self.out[to].push(fwd + 1);
        }
    }

    /// Bellman-Ford over residual arcs, strict improvements only, so the
    /// predecessor tree is a pure function of arc order.
    fn shortest(&self, src: usize, dst: usize) -> Option<Vec<usize>> {
        let n = self.out.len();
        let mut dist = vec![i64::MAX; n];
        let mut pred: Vec<Option<usize>> = vec![None; n];
        dist[src] = 0;
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                if dist[u] == i64::MAX {
                    continue;
                }
                for &ai in &self.out[u] {
                    let arc = &self.arcs[ai];
                    if arc.cap == 0 {
                        continue;
                    }
                    let nd = dist[u] + arc.cost;
                    if nd < dist[arc.to] {
                        dist[arc.to] = nd;
                        pred[arc.to] = Some(ai);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[dst] == i64::MAX {
            return None;
        }
        let mut path = Vec::new();
        let mut at = dst;
        while at != src {
            let ai = pred[at]?;
            path.push(ai);
            at = self.arcs[ai ^ 1].to;
            if path.len() > self.arcs.len() {
                return None;
            }
        }
        path.reverse();
        Some(path)
    }
}

/// `k` pairwise link-disjoint bridge paths from `a` to `b` minimizing total
/// latency, shortest first. Ties between equal-latency paths are ordered
/// by their bridge name sequence.
pub fn disjoint_paths(t: &Topology, a: &str, b: &str, k: usize) -> Result<Vec<LinkPath>, PlacementError> {
    for end in [a, b] {
        if !t.has_bridge(end) {
            return Err(PlacementError::InvalidReference(end.to_owned()));
        }
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if a == b {
        return if k == 1 { Ok(vec![Vec::new()]) } else { Err(PlacementError::InsufficientDisjointness { found: 1 }) };
    }

    let mut names: Vec<&str> = t.bridges.iter().map(|b| b.as_str()).collect();
    names.sort_unstable();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut res = Residual { arcs: Vec::new(), out: vec![Vec::new(); names.len()] };
    let mut edges: Vec<(usize, usize, LinkId, i64)> = t
        .links
        .iter()
        .enumerate()
        .filter(|(i, _)| t.is_bridge_link(LinkId(*i)))
        .map(|(i, l)| {
            let (u, v) = (index[l.a.as_str()], index[l.b.as_str()]);
            (u.min(v), u.max(v), LinkId(i), l.latency_us as i64)
        })
        .collect();
    edges.sort_unstable();
    for (u, v, link, cost) in edges {
        res.add_edge(u, v, link, cost);
    }
    for out in &mut res.out {
        let arcs = &res.arcs;
        out.sort_by_key(|&ai| (arcs[ai].to, ai));
    }

    let (src, dst) = (index[a], index[b]);
    for found in 0..k {
        let Some(aug) = res.shortest(src, dst) else {
            return Err(PlacementError::InsufficientDisjointness { found });
        };
        for ai in aug {
            res.arcs[ai].cap -= 1;
            res.arcs[ai ^ 1].cap += 1;
        }
    }

    // Flow on a forward arc shows up as capacity on its twin. Opposite
    // flows over one link cancel.
    let mut flow: BTreeMap<(usize, usize), LinkId> = BTreeMap::new();
    for (ai, arc) in res.arcs.iter().enumerate().step_by(2) {
        if arc.cap == 0 {
            let from = res.arcs[ai + 1].to;
            flow.insert((from, arc.to), arc.link);
        }
    }
    let cancelled: Vec<(usize, usize)> =
        flow.keys().filter(|(u, v)| flow.contains_key(&(*v, *u))).copied().collect();
    for key in cancelled {
        flow.remove(&key);
    }

    let mut paths = Vec::with_capacity(k);
    for _ in 0..k {
        let mut path = Vec::new();
        let mut hops = vec![names[src]];
        let mut at = src;
        while at != dst {
            let Some((&(u, v), &link)) = flow.range((at, 0)..(at + 1, 0)).next() else {
                return Err(PlacementError::InsufficientDisjointness { found: paths.len() });
            };
            flow.remove(&(u, v));
            path.push(link);
            hops.push(names[v]);
            at = v;
        }
        paths.push((t.path_latency(&path), hops, path));
    }
    paths.sort();
    Ok(paths.into_iter().map(|(_, _, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fig1_topology, LinkSpec};

    #[test]
    fn fig1_ring_pair() {
        let t = fig1_topology();
        let paths = disjoint_paths(&t, "TSN1", "TSN3", 2).unwrap();
        let direct = t.find_link("TSN1", "TSN3").unwrap();
        let via = vec![t.find_link("TSN1", "TSN2").unwrap(), t.find_link("TSN2", "TSN3").unwrap()];
        assert_eq!(paths, vec![vec![direct], via]);
        assert_eq!(t.path_label("TSN1", &paths[1]), "TSN1-TSN2-TSN3");
    }

    #[test]
    fn ring_has_no_third_path() {
        let t = fig1_topology();
        assert_eq!(disjoint_paths(&t, "TSN1", "TSN3", 3), Err(PlacementError::InsufficientDisjointness { found: 2 }));
    }

    #[test]
    fn same_bridge_degenerates() {
        let t = fig1_topology();
        assert_eq!(disjoint_paths(&t, "TSN1", "TSN1", 1), Ok(vec![vec![]]));
        assert_eq!(disjoint_paths(&t, "TSN1", "TSN1", 2), Err(PlacementError::InsufficientDisjointness { found: 1 }));
    }

    #[test]
    fn unknown_bridge() {
        let t = fig1_topology();
        assert!(matches!(disjoint_paths(&t, "TSN1", "VNode1", 1), Err(PlacementError::InvalidReference(_))));
    }

    #[test]
    fn greedy_trap_is_avoided() {
        // The classic case where the single shortest path blocks any
        // disjoint partner: s-a-b-t is shortest but uses the bridge a-b.
        let mut t = fig1_topology();
        t.bridges = ["s", "a", "b", "t"].into_iter().map(Into::into).collect();
        t.vnodes.clear();
        t.supervisor_attachment = "s".into();
        t.links = vec![
            LinkSpec::new("s", "a", 1),
            LinkSpec::new("a", "b", 1),
            LinkSpec::new("b", "t", 1),
            LinkSpec::new("s", "b", 5),
            LinkSpec::new("a", "t", 5),
        ];
        let paths = disjoint_paths(&t, "s", "t", 2).unwrap();
        assert_eq!(paths.iter().map(|p| t.path_latency(p)).sum::<u64>(), 12);
        assert!(crate::model::pairwise_disjoint(&paths));
    }
}
