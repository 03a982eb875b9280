//! Hierarchical containment redundancy filter.
//!
//! A containment graph links every area to the smaller areas it (softly)
//! contains. A depth-first walk from the roots keeps a parent whose children
//! cover little of it and otherwise replaces the parent by its children.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::geometry::{union_area, Area, AreaSet};
use crate::matcher::{Match, MatchSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HcrfConfig {
    /// Minimum `|R_p ∩ R_c| / |R_c|` for `p` to contain `c`.
    pub delta_contain: f64,
    /// Children covering at least this fraction of the parent replace it.
    pub delta_cover: f64,
}

impl Default for HcrfConfig {
    fn default() -> Self {
        Self {
            delta_contain: 0.9,
            delta_cover: 0.4,
        }
    }
}

impl HcrfConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta_contain", self.delta_contain), ("delta_cover", self.delta_cover)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Fraction of `child` covered by `parent`.
pub fn containment_ratio(parent: &Area, child: &Area) -> f64 {
    parent.intersection(child) / child.size()
}

/// Whether `p` may be the parent of `c`: strictly larger, or equal size and lower id.
fn outranks(p: &Area, c: &Area) -> bool {
    let (sp, sc) = (p.size(), c.size());
    sp > sc || (sp == sc && p.id < c.id)
}

/// Directed containment relation over the areas of one image.
///
/// Nodes are area ids `0..len`. Edges run parent to child and are kept even
/// when implied transitively.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainmentGraph {
    children: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
}

impl ContainmentGraph {
    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn parents(&self, id: usize) -> &[usize] {
        &self.parents[id]
    }

    /// Nodes without a parent, ascending.
    pub fn roots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| self.parents[v].is_empty()).collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.children
            .iter()
            .enumerate()
            .flat_map(|(p, cs)| cs.iter().map(move |&c| (p, c)))
            .collect()
    }

    /// Every node reachable from `id` through at least one edge.
    fn descendants_into(&self, id: usize, seen: &mut [bool]) {
        let mut stack: Vec<usize> = self.children[id].clone();
        while let Some(v) = stack.pop() {
            if !seen[v] {
                seen[v] = true;
                stack.extend_from_slice(&self.children[v]);
            }
        }
    }
}

pub fn build_graph(set: &AreaSet, cfg: &HcrfConfig) -> ContainmentGraph {
    let areas = set.areas();
    let n = areas.len();
    let mut children = vec![Vec::new(); n];
    let mut parents = vec![Vec::new(); n];
    for p in areas {
        for c in areas {
            if p.id != c.id && outranks(p, c) && containment_ratio(p, c) >= cfg.delta_contain {
                children[p.id].push(c.id);
                parents[c.id].push(p.id);
            }
        }
    }
    ContainmentGraph { children, parents }
}

/// Ratio of the union of `p`'s children to `p`'s own size.
pub fn coverage_ratio(graph: &ContainmentGraph, set: &AreaSet, p: usize) -> f64 {
    let areas = set.areas();
    let kids: Vec<Area> = graph.children(p).iter().map(|&c| areas[c]).collect();
    union_area(&kids) / areas[p].size()
}

/// Ids of the areas surviving the coverage rule, ascending.
///
/// The walk starts at each root in id order. A childless node is kept. A node
/// whose children cover less than `delta_cover` of it is kept and its subtree
/// is not visited; otherwise it is dropped and the walk continues into its
/// children. A node reachable from two parents may be kept through one path
/// while lying under a kept node of another, so the final set also removes
/// every descendant of a kept node. The result never contains both ends of an
/// edge.
pub fn filter_areas(graph: &ContainmentGraph, set: &AreaSet, cfg: &HcrfConfig) -> BTreeSet<usize> {
    let n = graph.len();
    let mut visited = vec![false; n];
    let mut kept = vec![false; n];
    let mut stack: Vec<usize> = graph.roots().into_iter().rev().collect();
    while let Some(v) = stack.pop() {
        if visited[v] {
            continue;
        }
        visited[v] = true;
        let kids = graph.children(v);
        if kids.is_empty() || coverage_ratio(graph, set, v) < cfg.delta_cover {
            kept[v] = true;
        } else {
            stack.extend(kids.iter().rev().filter(|&&c| !visited[c]));
        }
    }

    let mut shadowed = vec![false; n];
    for v in (0..n).filter(|&v| kept[v]) {
        graph.descendants_into(v, &mut shadowed);
    }
    (0..n).filter(|&v| kept[v] && !shadowed[v]).collect()
}

/// Matches whose image-A index survived the filter; probabilities unchanged.
pub fn prune_matches(matches: &MatchSet, retained_a: &BTreeSet<usize>) -> MatchSet {
    MatchSet(matches.iter().filter(|m| retained_a.contains(&m.i)).copied().collect())
}

/// Which image of a pair the filter runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterSide {
    #[default]
    A,
    B,
}

fn side_index(m: &Match, side: FilterSide) -> usize {
    match side {
        FilterSide::A => m.i,
        FilterSide::B => m.j,
    }
}

/// Matched areas of the chosen image that survive the filter.
///
/// The graph is built on the matched areas only; unmatched areas cannot
/// cover a matched parent.
pub fn retained_areas(matches: &MatchSet, set: &AreaSet, side: FilterSide, cfg: &HcrfConfig) -> BTreeSet<usize> {
    let ids: Vec<usize> = matches
        .iter()
        .map(|m| side_index(m, side))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let sub = set.subset(&ids);
    let graph = build_graph(&sub, cfg);
    filter_areas(&graph, &sub, cfg).into_iter().map(|k| ids[k]).collect()
}

/// Drops the matches whose area on `side` was filtered out.
pub fn filter_matches(matches: &MatchSet, set: &AreaSet, side: FilterSide, cfg: &HcrfConfig) -> MatchSet {
    let retained = retained_areas(matches, set, side, cfg);
    MatchSet(matches.iter().filter(|m| retained.contains(&side_index(m, side))).copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Area {
        Area { x0, y0, x1, y1, id: 0 }
    }

    fn set(rects: &[Area]) -> AreaSet {
        AreaSet::new(200.0, 200.0, rects.iter().copied()).unwrap()
    }

    fn cfg() -> HcrfConfig {
        HcrfConfig::default()
    }

    #[test]
    fn full_nesting_gives_edge() {
        let s = set(&[rect(0.0, 0.0, 100.0, 100.0), rect(10.0, 10.0, 50.0, 50.0)]);
        let g = build_graph(&s, &cfg());
        assert_eq!(g.edges(), vec![(0, 1)]);
        assert_eq!(containment_ratio(&s.areas()[0], &s.areas()[1]), 1.0);
    }

    #[test]
    fn partial_overlap_below_threshold() {
        let s = set(&[rect(0.0, 0.0, 100.0, 100.0), rect(60.0, 60.0, 110.0, 110.0)]);
        let ratio = containment_ratio(&s.areas()[0], &s.areas()[1]);
        assert!((ratio - 1600.0 / 2500.0).abs() < 1e-15);
        assert!(build_graph(&s, &cfg()).edges().is_empty());
    }

    #[test]
    fn disjoint_has_no_edges() {
        let s = set(&[rect(0.0, 0.0, 10.0, 10.0), rect(20.0, 20.0, 30.0, 30.0)]);
        let g = build_graph(&s, &cfg());
        assert!(g.edges().is_empty());
        assert_eq!(filter_areas(&g, &s, &cfg()), BTreeSet::from([0, 1]));
    }

    #[test]
    fn equal_rectangles_do_not_form_a_cycle() {
        let s = set(&[rect(0.0, 0.0, 10.0, 10.0), rect(0.0, 0.0, 10.0, 10.0)]);
        let g = build_graph(&s, &cfg());
        assert_eq!(g.edges(), vec![(0, 1)]);
    }

    #[test]
    fn covering_children_replace_parent() {
        let s = set(&[
            rect(0.0, 0.0, 100.0, 100.0),
            rect(0.0, 0.0, 50.0, 100.0),
            rect(50.0, 0.0, 100.0, 100.0),
        ]);
        let g = build_graph(&s, &cfg());
        // inclusion-exclusion: 5000 + 5000 - 0 over 10000
        let expected = (5000.0 + 5000.0 - 0.0) / 10000.0;
        assert!((coverage_ratio(&g, &s, 0) - expected).abs() < 1e-12);
        assert_eq!(filter_areas(&g, &s, &cfg()), BTreeSet::from([1, 2]));
    }

    #[test]
    fn sparse_child_keeps_parent() {
        let s = set(&[rect(0.0, 0.0, 100.0, 100.0), rect(0.0, 0.0, 30.0, 100.0)]);
        let g = build_graph(&s, &cfg());
        assert!((coverage_ratio(&g, &s, 0) - 0.3).abs() < 1e-12);
        assert_eq!(filter_areas(&g, &s, &cfg()), BTreeSet::from([0]));
    }

    #[test]
    fn shared_child_under_kept_parent_is_dropped() {
        // 0 is covered by its children and dropped; 1 is kept (sparse cover);
        // 2 is a child of both and would otherwise survive through 0.
        let s = set(&[
            rect(0.0, 0.0, 100.0, 100.0),
            rect(0.0, 0.0, 95.0, 95.0),
            rect(0.0, 0.0, 20.0, 20.0),
            rect(0.0, 0.0, 100.0, 99.0),
        ]);
        let g = build_graph(&s, &cfg());
        let kept = filter_areas(&g, &s, &cfg());
        for (p, c) in g.edges() {
            assert!(!(kept.contains(&p) && kept.contains(&c)), "edge {p}->{c} in {kept:?}");
        }
        let sub = s.subset(&kept.iter().copied().collect::<Vec<_>>());
        let again = filter_areas(&build_graph(&sub, &cfg()), &sub, &cfg());
        assert_eq!(again.len(), kept.len());
    }

    #[test]
    fn prune_keeps_retained_rows() {
        let m = MatchSet(vec![
            Match { i: 0, j: 3, p: 0.9 },
            Match { i: 1, j: 0, p: 0.5 },
            Match { i: 4, j: 2, p: 0.7 },
        ]);
        assert_eq!(prune_matches(&m, &BTreeSet::from([0, 1, 2, 3, 4])), m);
        assert!(prune_matches(&m, &BTreeSet::new()).is_empty());
        let kept = prune_matches(&m, &BTreeSet::from([1, 4]));
        assert_eq!(kept.0, vec![m.0[1], m.0[2]]);
    }

    #[test]
    fn filter_matches_uses_matched_areas_only() {
        // The big area is matched, its covering children are not: nothing to replace it with.
        let s = set(&[
            rect(0.0, 0.0, 100.0, 100.0),
            rect(0.0, 0.0, 50.0, 100.0),
            rect(50.0, 0.0, 100.0, 100.0),
        ]);
        let only_parent = MatchSet(vec![Match { i: 0, j: 0, p: 0.8 }]);
        assert_eq!(filter_matches(&only_parent, &s, FilterSide::A, &cfg()), only_parent);
        let all = MatchSet(vec![
            Match { i: 0, j: 0, p: 0.8 },
            Match { i: 1, j: 1, p: 0.8 },
            Match { i: 2, j: 2, p: 0.8 },
        ]);
        let kept = filter_matches(&all, &s, FilterSide::A, &cfg());
        assert_eq!(kept.0, all.0[1..].to_vec());
        assert_eq!(filter_matches(&all, &s, FilterSide::B, &cfg()), kept);
    }

    fn nested_layout() -> impl Strategy<Value = Vec<Area>> {
        let top = (0.0f64..150.0, 0.0f64..150.0, 20.0f64..50.0, 20.0f64..50.0);
        let child = (0.0f64..1.0, 0.0f64..1.0, 0.15f64..0.8, 0.15f64..0.8);
        prop::collection::vec((top, prop::collection::vec(child, 0..4)), 1..6).prop_map(|tops| {
            let mut out = Vec::new();
            for ((x, y, w, h), kids) in tops {
                let p = rect(x, y, x + w, y + h);
                out.push(p);
                for (fx, fy, fw, fh) in kids {
                    let cw = w * fw;
                    let ch = h * fh;
                    let cx = x + fx * (w - cw);
                    let cy = y + fy * (h - ch);
                    out.push(rect(cx, cy, cx + cw, cy + ch));
                }
            }
            out
        })
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(rects in nested_layout()) {
            let s = set(&rects);
            let c = cfg();
            let kept: Vec<usize> = filter_areas(&build_graph(&s, &c), &s, &c).into_iter().collect();
            let sub = s.subset(&kept);
            let again: Vec<usize> = filter_areas(&build_graph(&sub, &c), &sub, &c).into_iter().collect();
            prop_assert_eq!(again, (0..kept.len()).collect::<Vec<_>>());
        }

        #[test]
        fn retained_set_has_no_redundant_pair(rects in nested_layout()) {
            let s = set(&rects);
            let c = cfg();
            let g = build_graph(&s, &c);
            let kept = filter_areas(&g, &s, &c);
            for (p, ch) in g.edges() {
                prop_assert!(!(kept.contains(&p) && kept.contains(&ch)));
            }
        }

        #[test]
        fn filtering_never_grows_matches(rects in nested_layout(), keep in prop::collection::vec(any::<bool>(), 30)) {
            let s = set(&rects);
            let m = MatchSet(
                (0..s.len())
                    .filter(|&i| keep[i % keep.len()])
                    .map(|i| Match { i, j: i, p: 0.5 })
                    .collect(),
            );
            let out = filter_matches(&m, &s, FilterSide::A, &cfg());
            prop_assert!(out.len() <= m.len());
            prop_assert!(out.iter().all(|x| m.0.contains(x)));
        }
    }
}
