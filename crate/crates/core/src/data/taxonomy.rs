//! Class taxonomy as an undirected graph; path similarity 1/(p+1).

use super::DataError;
use ndarray::Array2;
use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

#[derive(Clone, Debug, Default)]
pub struct Taxonomy {
    nodes: Vec<String>,
    index: BTreeMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
}

impl Taxonomy {
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self, DataError> {
        let mut tax = Taxonomy::default();
        for (a, b) in edges {
            let (a, b) = (a.as_ref(), b.as_ref());
            if a == b {
                return Err(DataError::SelfLoop(a.to_string()));
            }
            let ia = tax.intern(a);
            let ib = tax.intern(b);
            if !tax.adjacency[ia].contains(&ib) {
                tax.adjacency[ia].push(ib);
                tax.adjacency[ib].push(ia);
            }
        }
        Ok(tax)
    }

    /// Reads a plain edge-list file: `parent\tchild` per line, `#`
    /// comments and blank lines skipped.
    pub fn from_file(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        let mut edges = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let a = parts.next().unwrap_or_default().trim().to_string();
            let b = parts.next().unwrap_or_default().trim().to_string();
            if !a.is_empty() && !b.is_empty() {
                edges.push((a, b));
            }
        }
        Self::from_edges(&edges)
    }

    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(name.to_string());
        self.index.insert(name.to_string(), i);
        self.adjacency.push(Vec::new());
        i
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    fn shortest_path(&self, a: usize, b: usize) -> Option<usize> {
        if a == b {
            return Some(0);
        }
        let mut dist = vec![usize::MAX; self.nodes.len()];
        dist[a] = 0;
        let mut q = VecDeque::from([a]);
        while let Some(u) = q.pop_front() {
            for &v in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    if v == b {
                        return Some(dist[v]);
                    }
                    q.push_back(v);
                }
            }
        }
        None
    }

    /// s = 1/(p+1) with p the shortest path length; 0 when no path
    /// exists; 1 for a class compared with itself.
    pub fn path_similarity(&self, class_a: &str, class_b: &str) -> Result<f64, DataError> {
        let a = *self
            .index
            .get(class_a)
            .ok_or_else(|| DataError::UnknownTaxonomyClass(class_a.to_string()))?;
        let b = *self
            .index
            .get(class_b)
            .ok_or_else(|| DataError::UnknownTaxonomyClass(class_b.to_string()))?;
        Ok(match self.shortest_path(a, b) {
            Some(p) => 1.0 / (p as f64 + 1.0),
            None => 0.0,
        })
    }

    /// Symmetric pairwise path-similarity matrix, diagonal 1.
    pub fn similarity_matrix(&self, classes: &[String]) -> Result<Array2<f64>, DataError> {
        let k = classes.len();
        let mut m = Array2::zeros((k, k));
        for i in 0..k {
            m[(i, i)] = 1.0;
            for j in (i + 1)..k {
                let s = self.path_similarity(&classes[i], &classes[j])?;
                m[(i, j)] = s;
                m[(j, i)] = s;
            }
        }
        Ok(m)
    }
}
