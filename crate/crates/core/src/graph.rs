//! Category–attribute knowledge graph.
//!
//! Nodes are laid out with categories first (`[0, C)`) followed by attributes
//! (`[C, C + A)`). Edges only run from a category to an attribute and carry the
//! normalized confidence that the category exhibits the attribute.
//!
//! The on-disk format is plain text:
//!
//! ```text
//! kerl-graph 1
//! categories <C>
//! <one category name per line>
//! attributes <A>
//! <one attribute name per line>
//! matrix <C> <A>
//! <C rows of A whitespace-separated values>
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the identical `f64`, so a save/load cycle is bit-exact.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayViewMut, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{KerlError, Result};

const MAGIC: &str = "kerl-graph";
const VERSION: u32 = 1;

/// Ordered category and attribute names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRegistry {
    categories: Vec<String>,
    attributes: Vec<String>,
}

impl NodeRegistry {
    pub fn new(categories: Vec<String>, attributes: Vec<String>) -> Result<Self> {
        check_unique("category", &categories)?;
        check_unique("attribute", &attributes)?;
        Ok(Self {
            categories,
            attributes,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.categories.len() + self.attributes.len()
    }

    /// Node index of attribute `a`.
    pub fn attribute_node(&self, a: usize) -> usize {
        self.categories.len() + a
    }

    /// Splits an attribute name of the form `part::value`. Names without a
    /// separator are treated as a value with an empty part.
    pub fn attribute_part_value(&self, a: usize) -> (&str, &str) {
        let name = &self.attributes[a];
        match name.split_once("::") {
            Some((part, value)) => (part, value),
            None => ("", name.as_str()),
        }
    }
}

fn check_unique(kind: &str, names: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(names.len());
    for name in names {
        if name.trim().is_empty() || name.contains('\n') {
            return Err(KerlError::Invalid(format!("{kind} name {name:?} is not usable")));
        }
        if !seen.insert(name.as_str()) {
            return Err(KerlError::Invalid(format!("duplicate {kind} name {name:?}")));
        }
    }
    Ok(())
}

/// How raw category/attribute score sums are mapped to `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// One linear map over the whole matrix.
    #[default]
    Global,
    /// Each attribute column is mapped independently.
    PerColumn,
}

/// Dense `C × A` matrix with every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix(Array2<f64>);

impl ConfidenceMatrix {
    pub fn new(s: Array2<f64>) -> Result<Self> {
        if let Some(v) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(KerlError::Invalid(format!(
                "confidence entry {v} outside [0, 1]"
            )));
        }
        Ok(Self(s))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Linearly maps a non-negative raw score matrix to `[0, 1]`.
///
/// When the range collapses (`max == min`) the output is all ones if the
/// common value is positive and all zeros otherwise.
pub fn normalize_scores(raw: &Array2<f64>, mode: Normalization) -> Result<ConfidenceMatrix> {
    for (idx, &v) in raw.indexed_iter() {
        if !v.is_finite() || v < 0.0 {
            return Err(KerlError::Invalid(format!(
                "raw score at ({}, {}) is {v}; expected finite and >= 0",
                idx.0, idx.1
            )));
        }
    }
    let mut out = raw.clone();
    match mode {
        Normalization::Global => rescale(out.view_mut()),
        Normalization::PerColumn => {
            for col in out.columns_mut() {
                rescale(col);
            }
        }
    }
    ConfidenceMatrix::new(out)
}

fn rescale<D: Dimension>(mut values: ArrayViewMut<f64, D>) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    if !lo.is_finite() {
        return;
    }
    if hi == lo {
        values.fill(if hi > 0.0 { 1.0 } else { 0.0 });
    } else {
        let span = hi - lo;
        values.mapv_inplace(|v| ((v - lo) / span).clamp(0.0, 1.0));
    }
}

/// Notes gathered while building a graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildReport {
    pub instances: usize,
    pub instances_per_category: Vec<usize>,
    /// Categories with no training instance; their rows are all zero.
    pub empty_categories: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    registry: NodeRegistry,
    s: ConfidenceMatrix,
}

/// Forward adjacency and its concatenation with the transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyPair {
    /// `|V| × |V|`, non-zero only in the category→attribute block.
    pub a_c: Array2<f64>,
    /// `|V| × 2|V|`, `[a_c | a_cᵀ]`.
    pub a_full: Array2<f64>,
}

impl KnowledgeGraph {
    pub fn new(registry: NodeRegistry, s: ConfidenceMatrix) -> Result<Self> {
        let dim = s.as_array().dim();
        if dim != (registry.num_categories(), registry.num_attributes()) {
            return Err(KerlError::Shape(format!(
                "confidence matrix is {}x{} but registry has {} categories and {} attributes",
                dim.0,
                dim.1,
                registry.num_categories(),
                registry.num_attributes()
            )));
        }
        Ok(Self { registry, s })
    }

    pub fn registry(&self) -> &NodeRegistry {
        &self.registry
    }

    pub fn confidence(&self) -> &Array2<f64> {
        self.s.as_array()
    }

    pub fn num_categories(&self) -> usize {
        self.registry.num_categories()
    }

    pub fn num_nodes(&self) -> usize {
        self.registry.num_nodes()
    }

    pub fn adjacency(&self) -> AdjacencyPair {
        adjacency(self)
    }

    /// Weighted edges `(category, attribute, weight)` for every non-zero entry.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.s
            .as_array()
            .indexed_iter()
            .filter(|(_, &w)| w != 0.0)
            .map(|((c, a), &w)| (c, a, w))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {VERSION}");
        let _ = writeln!(out, "categories {}", self.registry.num_categories());
        for name in self.registry.categories() {
            let _ = writeln!(out, "{name}");
        }
        let _ = writeln!(out, "attributes {}", self.registry.num_attributes());
        for name in self.registry.attributes() {
            let _ = writeln!(out, "{name}");
        }
        let (c, a) = self.s.as_array().dim();
        let _ = writeln!(out, "matrix {c} {a}");
        for row in self.s.as_array().rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| KerlError::parse(origin, 0, format!("unexpected end of file, expected {what}")))
        };

        let (ln, header) = next("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(KerlError::parse(origin, ln, format!("expected '{MAGIC}' header")));
        }
        match parts.next().map(str::parse::<u32>) {
            Some(Ok(VERSION)) => {}
            _ => return Err(KerlError::parse(origin, ln, "unsupported graph file version")),
        }

        let count = |line: (usize, &str), key: &str| -> Result<usize> {
            let (ln, text) = line;
            let mut it = text.split_whitespace();
            if it.next() != Some(key) {
                return Err(KerlError::parse(origin, ln, format!("expected '{key} <count>'")));
            }
            it.next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| KerlError::parse(origin, ln, format!("bad {key} count")))
        };

        let n_cat = count(next("categories")?, "categories")?;
        let mut categories = Vec::with_capacity(n_cat);
        for _ in 0..n_cat {
            categories.push(next("category name")?.1.to_string());
        }
        let n_attr = count(next("attributes")?, "attributes")?;
        let mut attributes = Vec::with_capacity(n_attr);
        for _ in 0..n_attr {
            attributes.push(next("attribute name")?.1.to_string());
        }

        let (ln, dims) = next("matrix header")?;
        let fields: Vec<&str> = dims.split_whitespace().collect();
        let (rows, cols) = match fields.as_slice() {
            ["matrix", r, c] => match (r.parse::<usize>(), c.parse::<usize>()) {
                (Ok(r), Ok(c)) => (r, c),
                _ => return Err(KerlError::parse(origin, ln, "bad matrix dimensions")),
            },
            _ => return Err(KerlError::parse(origin, ln, "expected 'matrix <rows> <cols>'")),
        };
        if rows != n_cat || cols != n_attr {
            return Err(KerlError::parse(
                origin,
                ln,
                format!("matrix is {rows}x{cols} but header declares {n_cat} categories and {n_attr} attributes"),
            ));
        }

        let mut s = Array2::<f64>::zeros((rows, cols));
        for r in 0..rows {
            let (ln, row) = next("matrix row")?;
            let values: Vec<&str> = row.split_whitespace().collect();
            if values.len() != cols {
                return Err(KerlError::parse(
                    origin,
                    ln,
                    format!("row {r} has {} values, expected {cols}", values.len()),
                ));
            }
            for (c, v) in values.iter().enumerate() {
                let v: f64 = v.parse().map_err(|_| {
                    KerlError::parse(origin, ln, format!("field {} ({v:?}) is not a number", c + 1))
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(KerlError::parse(
                        origin,
                        ln,
                        format!("field {} = {v} outside [0, 1]", c + 1),
                    ));
                }
                s[[r, c]] = v;
            }
        }

        let registry = NodeRegistry::new(categories, attributes)
            .map_err(|e| KerlError::parse(origin, 0, e.to_string()))?;
        KnowledgeGraph::new(registry, ConfidenceMatrix::new(s)?)
    }

    /// Graphviz rendering with one weighted edge per non-zero confidence.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph knowledge {\n  rankdir=LR;\n");
        for (i, name) in self.registry.categories().iter().enumerate() {
            let _ = writeln!(out, "  c{i} [label={name:?}, shape=box];");
        }
        for (j, name) in self.registry.attributes().iter().enumerate() {
            let _ = writeln!(out, "  a{j} [label={name:?}, shape=ellipse];");
        }
        for (c, a, w) in self.edges() {
            let _ = writeln!(out, "  c{c} -> a{a} [weight={w:?}, penwidth={:.3}];", 0.5 + 2.5 * w);
        }
        out.push_str("}\n");
        out
    }
}

/// Sums per-instance attribute scores by category and normalizes the result.
pub fn build_graph(
    instances: &[(usize, Vec<f64>)],
    registry: NodeRegistry,
    mode: Normalization,
) -> Result<(KnowledgeGraph, BuildReport)> {
    if instances.is_empty() {
        return Err(KerlError::Invalid("cannot build a graph from zero instances".into()));
    }
    let (n_cat, n_attr) = (registry.num_categories(), registry.num_attributes());
    let mut raw = Array2::<f64>::zeros((n_cat, n_attr));
    let mut per_category = vec![0usize; n_cat];
    for (i, (label, scores)) in instances.iter().enumerate() {
        if *label >= n_cat {
            return Err(KerlError::Invalid(format!(
                "instance {i} has category {label} but only {n_cat} categories exist"
            )));
        }
        if scores.len() != n_attr {
            return Err(KerlError::Shape(format!(
                "instance {i} has {} attribute scores, expected {n_attr}",
                scores.len()
            )));
        }
        if let Some(v) = scores.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(KerlError::Invalid(format!("instance {i} has attribute score {v}")));
        }
        per_category[*label] += 1;
        let mut row = raw.row_mut(*label);
        for (acc, v) in row.iter_mut().zip(scores) {
            *acc += v;
        }
    }
    let report = BuildReport {
        instances: instances.len(),
        empty_categories: (0..n_cat).filter(|&c| per_category[c] == 0).collect(),
        instances_per_category: per_category,
    };
    let s = normalize_scores(&raw, mode)?;
    Ok((KnowledgeGraph::new(registry, s)?, report))
}

pub fn adjacency(graph: &KnowledgeGraph) -> AdjacencyPair {
    let n_cat = graph.num_categories();
    let n = graph.num_nodes();
    let mut a_c = Array2::<f64>::zeros((n, n));
    a_c.slice_mut(s![..n_cat, n_cat..]).assign(graph.confidence());
    let mut a_full = Array2::<f64>::zeros((n, 2 * n));
    a_full.slice_mut(s![.., ..n]).assign(&a_c);
    a_full.slice_mut(s![.., n..]).assign(&a_c.t());
    AdjacencyPair { a_c, a_full }
}

pub fn save_graph(graph: &KnowledgeGraph, path: &Path) -> Result<()> {
    fs::write(path, graph.to_text()).map_err(|e| KerlError::io(path, e))
}

pub fn load_graph(path: &Path) -> Result<KnowledgeGraph> {
    let text = fs::read_to_string(path).map_err(|e| KerlError::io(path, e))?;
    KnowledgeGraph::parse(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn registry(c: usize, a: usize) -> NodeRegistry {
        NodeRegistry::new(
            (0..c).map(|i| format!("cat{i}")).collect(),
            (0..a).map(|i| format!("part{}::v{i}", i % 2)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn build_two_categories() {
        let instances = vec![
            (0, vec![1.0, 0.0]),
            (0, vec![1.0, 1.0]),
            (1, vec![0.0, 1.0]),
        ];
        let (g, report) = build_graph(&instances, registry(2, 2), Normalization::Global).unwrap();
        assert_eq!(g.confidence(), &array![[1.0, 0.5], [0.0, 0.5]]);
        assert!(report.empty_categories.is_empty());
        assert_eq!(report.instances_per_category, vec![2, 1]);
    }

    #[test]
    fn single_zero_instance_gives_zero_matrix() {
        let (g, _) = build_graph(&[(0, vec![0.0, 0.0, 0.0])], registry(1, 3), Normalization::Global)
            .unwrap();
        assert!(g.confidence().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_category_is_reported() {
        let (g, report) =
            build_graph(&[(0, vec![1.0, 2.0])], registry(3, 2), Normalization::Global).unwrap();
        assert_eq!(report.empty_categories, vec![1, 2]);
        assert!(g.confidence().row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(build_graph(&[], registry(2, 2), Normalization::Global).is_err());
        assert!(build_graph(&[(2, vec![0.0, 0.0])], registry(2, 2), Normalization::Global).is_err());
        assert!(build_graph(&[(0, vec![-1.0, 0.0])], registry(2, 2), Normalization::Global).is_err());
        assert!(build_graph(&[(0, vec![f64::NAN, 0.0])], registry(2, 2), Normalization::Global).is_err());
    }

    #[test]
    fn normalization_examples() {
        let out = normalize_scores(&array![[2.0, 4.0, 6.0]], Normalization::Global).unwrap();
        assert_eq!(out.as_array(), &array![[0.0, 0.5, 1.0]]);
        let out = normalize_scores(&Array2::from_elem((2, 2), 3.0), Normalization::Global).unwrap();
        assert!(out.as_array().iter().all(|&v| v == 1.0));
        let out = normalize_scores(&Array2::zeros((2, 2)), Normalization::Global).unwrap();
        assert!(out.as_array().iter().all(|&v| v == 0.0));
        assert!(normalize_scores(&array![[1.0, f64::NAN]], Normalization::Global).is_err());
        assert!(normalize_scores(&array![[1.0, -0.5]], Normalization::Global).is_err());
    }

    #[test]
    fn per_column_normalization() {
        let raw = array![[2.0, 10.0], [4.0, 10.0], [6.0, 20.0]];
        let out = normalize_scores(&raw, Normalization::PerColumn).unwrap();
        assert_eq!(out.as_array(), &array![[0.0, 0.0], [0.5, 0.0], [1.0, 1.0]]);
    }

    #[test]
    fn adjacency_block_layout() {
        let s = array![[1.0, 0.0, 0.5], [0.0, 1.0, 0.0]];
        let g = KnowledgeGraph::new(registry(2, 3), ConfidenceMatrix::new(s.clone()).unwrap()).unwrap();
        let adj = g.adjacency();
        assert_eq!(adj.a_c.dim(), (5, 5));
        assert_eq!(adj.a_full.dim(), (5, 10));
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i < 2 && j >= 2 { s[[i, j - 2]] } else { 0.0 };
                assert_eq!(adj.a_c[[i, j]], expected);
                assert_eq!(adj.a_full[[i, j]], expected);
                assert_eq!(adj.a_full[[j, 5 + i]], expected);
            }
        }
        assert_eq!(g.to_dot().matches("->").count(), 3);
    }

    #[test]
    fn adjacency_of_zero_graph_is_zero() {
        let g = KnowledgeGraph::new(registry(2, 3), ConfidenceMatrix::new(Array2::zeros((2, 3))).unwrap())
            .unwrap();
        assert!(g.adjacency().a_c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_scale_adjacency_dims() {
        let g = KnowledgeGraph::new(
            registry(200, 312),
            ConfidenceMatrix::new(Array2::zeros((200, 312))).unwrap(),
        )
        .unwrap();
        let adj = g.adjacency();
        assert_eq!(adj.a_c.dim(), (512, 512));
        assert_eq!(adj.a_full.dim(), (512, 1024));
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(NodeRegistry::new(vec!["a".into(), "a".into()], vec![]).is_err());
        assert!(NodeRegistry::new(vec!["a".into()], vec!["x".into(), "x".into()]).is_err());
    }

    #[test]
    fn parse_reports_shape_mismatch() {
        let text = "kerl-graph 1\ncategories 1\nc\nattributes 2\nx\ny\nmatrix 1 3\n0 0 0\n";
        let err = KnowledgeGraph::parse(text, Path::new("g.txt")).unwrap_err();
        match err {
            KerlError::Parse { line, .. } => assert_eq!(line, 7),
            other => panic!("unexpected error {other:?}"),
        }
        let text = "kerl-graph 1\ncategories 1\nc\nattributes 2\nx\ny\nmatrix 1 2\n0 zz\n";
        let err = KnowledgeGraph::parse(text, Path::new("g.txt")).unwrap_err();
        assert!(err.to_string().contains("g.txt:8"), "{err}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.kg");
        let s = array![[0.1 + 0.2, 1.0 / 3.0, 0.0], [1.0, 2.0f64.sqrt() / 2.0, 1e-17]];
        let g = KnowledgeGraph::new(registry(2, 3), ConfidenceMatrix::new(s).unwrap()).unwrap();
        save_graph(&g, &path).unwrap();
        assert_eq!(load_graph(&path).unwrap(), g);
    }

    proptest! {
        #[test]
        fn built_graphs_respect_block_structure_and_range(
            rows in proptest::collection::vec((0usize..3, proptest::collection::vec(0.0f64..5.0, 4)), 1..12)
        ) {
            let (g, _) = build_graph(&rows, registry(3, 4), Normalization::Global).unwrap();
            let adj = g.adjacency();
            for ((i, j), &v) in adj.a_c.indexed_iter() {
                if v != 0.0 {
                    prop_assert!(i < 3 && j >= 3);
                }
            }
            let s = g.confidence();
            prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
            let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let raw_constant = {
                let mut raw = Array2::<f64>::zeros((3, 4));
                for (c, v) in &rows {
                    for (a, x) in v.iter().enumerate() { raw[[*c, a]] += x; }
                }
                raw.iter().all(|&v| v == raw[[0, 0]])
            };
            if !raw_constant {
                prop_assert_eq!(lo, 0.0);
                prop_assert_eq!(hi, 1.0);
            }
        }

        #[test]
        fn increasing_a_raw_count_never_decreases_its_entry(
            raw in proptest::collection::vec(0.0f64..10.0, 6),
            idx in 0usize..6,
            bump in 0.0f64..5.0,
        ) {
            let before = Array2::from_shape_vec((2, 3), raw.clone()).unwrap();
            let mut after = before.clone();
            after[[idx / 3, idx % 3]] += bump;
            let nb = normalize_scores(&before, Normalization::Global).unwrap();
            let na = normalize_scores(&after, Normalization::Global).unwrap();
            prop_assert!(na.as_array()[[idx / 3, idx % 3]] >= nb.as_array()[[idx / 3, idx % 3]] - 1e-12);
        }

        #[test]
        fn text_round_trip(values in proptest::collection::vec(0.0f64..=1.0, 6)) {
            let s = Array2::from_shape_vec((2, 3), values).unwrap();
            let g = KnowledgeGraph::new(registry(2, 3), ConfidenceMatrix::new(s).unwrap()).unwrap();
            let back = KnowledgeGraph::parse(&g.to_text(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
