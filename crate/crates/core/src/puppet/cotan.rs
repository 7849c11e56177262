use std::collections::BTreeMap;

use crate::geom::{self, Point2};

use super::{Puppet, PuppetError};

/// Cotangent weight per undirected edge, with per-vertex adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    map: BTreeMap<(usize, usize), f64>,
    /// `neighbors[i]` lists `(j, w_ij)` for every edge incident to `i`, in
    /// increasing `j`.
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

impl EdgeWeights {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.map.get(&(i.min(j), i.max(j))).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.map.iter().map(|(k, v)| (*k, *v))
    }
}

fn cot(apex: Point2, a: Point2, b: Point2) -> f64 {
    let u = geom::sub(a, apex);
    let v = geom::sub(b, apex);
    geom::dot(u, v) / geom::cross(u, v).abs()
}

/// `w_ij = ½ Σ cot(opposite angle)` over the faces sharing edge `ij`,
/// computed on the rest pose and clamped at zero.
pub fn cotangent_weights(puppet: &Puppet) -> Result<EdgeWeights, PuppetError> {
    let v = &puppet.rest_vertices;
    let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (f, &[a, b, c]) in puppet.faces.iter().enumerate() {
        if geom::orient(v[a], v[b], v[c]) == 0.0 {
            return Err(PuppetError::DegenerateFace { face: f });
        }
        for (i, j, k) in [(a, b, c), (b, c, a), (c, a, b)] {
            *map.entry((i.min(j), i.max(j))).or_insert(0.0) += 0.5 * cot(v[k], v[i], v[j]);
        }
    }
    let mut neighbors = vec![Vec::new(); v.len()];
    for (&(i, j), w) in map.iter_mut() {
        *w = w.max(0.0);
        neighbors[i].push((j, *w));
        neighbors[j].push((i, *w));
    }
    for list in &mut neighbors {
        list.sort_by_key(|e| e.0);
    }
    Ok(EdgeWeights { map, neighbors })
}
