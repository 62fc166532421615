//! Decision-tree meta-model mapping dataset characteristics to the
//! best-performing algorithm.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricRecord;
use crate::splits::Manifest;

pub const FEATURE_NAMES: [&str; 6] = [
    "n_sessions_train",
    "avg_session_length_train",
    "avg_session_length_test",
    "avg_item_frequency_train",
    "avg_item_frequency_test",
    "n_items_train",
];

/// Tie-break order for labels; unknown names follow alphabetically.
pub const CLASS_ORDER: [&str; 7] = ["S-POP", "VSKNN", "NARM", "STAMP", "NextItNet", "SRGNN", "CSRM"];

/// The cutoff labels are chosen at.
pub const LABEL_CUTOFF: usize = 5;

fn class_key(name: &str) -> (usize, &str) {
    let pos = CLASS_ORDER.iter().position(|c| *c == name).unwrap_or(CLASS_ORDER.len());
    (pos, name)
}

pub fn class_cmp(a: &str, b: &str) -> Ordering {
    class_key(a).cmp(&class_key(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaInstance {
    pub name: String,
    pub features: Vec<f64>,
    pub label: String,
}

/// One instance per evaluated split: features from its manifest, label the
/// model with the best MRR@5 (ties: HR@5, then class order).
pub fn build_meta_table(records: &[MetricRecord], manifests: &HashMap<String, Manifest>) -> Result<Vec<MetaInstance>> {
    let mut by_split: BTreeMap<(String, String), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.k == LABEL_CUTOFF) {
        by_split
            .entry((r.split.clone(), r.manifest.clone()))
            .or_default()
            .push(r);
    }
    if by_split.is_empty() {
        return Err(Error::Empty(format!("no metric records at cutoff {LABEL_CUTOFF}")));
    }
    by_split
        .into_iter()
        .map(|((split, manifest_id), rows)| {
            let manifest = manifests
                .get(&manifest_id)
                .ok_or_else(|| Error::Config(format!("missing manifest {manifest_id} for split {split}")))?;
            let best = rows
                .iter()
                .max_by(|a, b| {
                    a.mrr
                        .total_cmp(&b.mrr)
                        .then(a.hr.total_cmp(&b.hr))
                        .then_with(|| class_cmp(&b.model, &a.model))
                })
                .expect("non-empty group");
            let (tr, te) = (&manifest.train, &manifest.test);
            Ok(MetaInstance {
                name: split,
                features: vec![
                    tr.sessions as f64,
                    tr.avg_session_length,
                    te.avg_session_length,
                    tr.avg_item_frequency,
                    te.avg_item_frequency,
                    tr.items as f64,
                ],
                label: best.model.clone(),
            })
        })
        .collect()
}

pub fn write_meta_table<W: Write>(table: &[MetaInstance], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["name"];
    header.extend(FEATURE_NAMES);
    header.push("label");
    let csv_err = |e: csv::Error| Error::Source(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for inst in table {
        let mut row = vec![inst.name.clone()];
        row.extend(inst.features.iter().map(f64::to_string));
        row.push(inst.label.clone());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<meta table>", e))?;
    Ok(())
}

pub fn read_meta_table<R: std::io::Read>(input: R) -> Result<Vec<MetaInstance>> {
    let mut r = csv::Reader::from_reader(input);
    let mut table = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Source(e.to_string()))?;
        if rec.len() < 3 {
            return Err(Error::Source("meta table row too short".into()));
        }
        let features = (1..rec.len() - 1)
            .map(|i| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Source(format!("feature `{}`: {e}", &rec[i])))
            })
            .collect::<Result<Vec<f64>>>()?;
        table.push(MetaInstance {
            name: rec[0].to_string(),
            features,
            label: rec[rec.len() - 1].to_string(),
        });
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    /// Nodes with Gini impurity below this are never split.
    pub min_impurity: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: 6,
            min_impurity: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        label: usize,
        counts: Vec<usize>,
    },
    Split {
        feature: usize,
        threshold: f64,
        counts: Vec<usize>,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn counts(&self) -> &[usize] {
        match self {
            TreeNode::Leaf { counts, .. } | TreeNode::Split { counts, .. } => counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub classes: Vec<String>,
    pub feature_names: Vec<String>,
    pub root: TreeNode,
}

pub fn gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let s: u128 = counts.iter().map(|&c| (c as u128) * (c as u128)).sum();
    let n2 = (n as u128) * (n as u128);
    (n2 - s) as f64 / n2 as f64
}

/// `Σ c²` and `n` of a child, whose ratio measures purity.
#[derive(Clone, Copy)]
struct Purity {
    sq: u128,
    n: u128,
}

impl Purity {
    fn of(counts: &[usize]) -> Self {
        Self {
            sq: counts.iter().map(|&c| (c as u128) * (c as u128)).sum(),
            n: counts.iter().sum::<usize>() as u128,
        }
    }
}

/// Weighted child impurity is `n − (sqL/nL + sqR/nR)`; this is the
/// bracketed sum as an exact fraction.
fn split_gain(l: Purity, r: Purity) -> (u128, u128) {
    (l.sq * r.n + r.sq * l.n, l.n * r.n)
}

fn frac_cmp(a: (u128, u128), b: (u128, u128)) -> Ordering {
    (a.0 * b.1).cmp(&(b.0 * a.1))
}

fn majority(counts: &[usize]) -> usize {
    // classes are already in tie-break order, so the first maximum wins
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

struct Fitter<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    config: TreeConfig,
}

impl Fitter<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    /// Best `(feature, threshold)` strictly reducing impurity, if any.
    fn best_split(&self, idx: &[usize], parent: &[usize]) -> Option<(usize, f64)> {
        let parent_p = Purity::of(parent);
        let mut best: Option<((u128, u128), usize, f64)> = None;
        let n_features = self.x[idx[0]].len();
        for f in 0..n_features {
            let mut order = idx.to_vec();
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left = vec![0usize; self.n_classes];
            for (pos, &i) in order.iter().enumerate().take(order.len() - 1) {
                left[self.y[i]] += 1;
                let (v, next) = (self.x[i][f], self.x[order[pos + 1]][f]);
                if v == next {
                    continue;
                }
                let right: Vec<usize> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
                let gain = split_gain(Purity::of(&left), Purity::of(&right));
                // strictly better than leaving the node whole
                if frac_cmp(gain, (parent_p.sq, parent_p.n)) != Ordering::Greater {
                    continue;
                }
                let threshold = v + (next - v) / 2.0;
                let better = match &best {
                    None => true,
                    Some((g, _, _)) => frac_cmp(gain, *g) == Ordering::Greater,
                };
                if better {
                    best = Some((gain, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&self, idx: &[usize], depth: usize) -> TreeNode {
        let counts = self.counts(idx);
        let leaf = |counts: Vec<usize>| TreeNode::Leaf {
            label: majority(&counts),
            counts,
        };
        if depth >= self.config.max_depth || idx.len() < 2 || gini(&counts) < self.config.min_impurity {
            return leaf(counts);
        }
        let Some((feature, threshold)) = self.best_split(idx, &counts) else {
            return leaf(counts);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        TreeNode::Split {
            feature,
            threshold,
            counts,
            left: Box::new(self.grow(&l, depth + 1)),
            right: Box::new(self.grow(&r, depth + 1)),
        }
    }
}

/// CART with Gini impurity. Ties between equally good splits go to the
/// lower feature index, then the lower threshold.
pub fn fit_tree(table: &[MetaInstance], config: &TreeConfig) -> Result<DecisionTree> {
    let first = table
        .first()
        .ok_or_else(|| Error::Empty("meta table is empty".into()))?;
    let dim = first.features.len();
    if table
        .iter()
        .any(|t| t.features.len() != dim || t.features.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Config(
            "meta instances need finite features of equal length".into(),
        ));
    }
    let mut classes: Vec<String> = table.iter().map(|t| t.label.clone()).collect();
    classes.sort_by(|a, b| class_cmp(a, b));
    classes.dedup();
    let y: Vec<usize> = table
        .iter()
        .map(|t| classes.iter().position(|c| *c == t.label).expect("label interned"))
        .collect();
    let x: Vec<Vec<f64>> = table.iter().map(|t| t.features.clone()).collect();
    let fitter = Fitter {
        x: &x,
        y: &y,
        n_classes: classes.len(),
        config: *config,
    };
    let idx: Vec<usize> = (0..table.len()).collect();
    let root = fitter.grow(&idx, 0);
    let feature_names = if dim == FEATURE_NAMES.len() {
        FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..dim).map(|i| format!("f{i}")).collect()
    };
    Ok(DecisionTree {
        classes,
        feature_names,
        root,
    })
}

impl DecisionTree {
    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn predict(&self, features: &[f64]) -> &str {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { label, .. } => return &self.classes[*label],
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    let v = features.get(*feature).copied().unwrap_or(f64::NAN);
                    node = if v <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn accuracy(&self, table: &[MetaInstance]) -> f64 {
        if table.is_empty() {
            return 0.0;
        }
        let hits = table.iter().filter(|t| self.predict(&t.features) == t.label).count();
        hits as f64 / table.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.text_node(&self.root, 0, &mut out);
        out
    }

    fn text_node(&self, node: &TreeNode, indent: usize, out: &mut String) {
        let pad = "  ".repeat(indent);
        match node {
            TreeNode::Leaf { label, counts } => {
                let _ = writeln!(out, "{pad}predict {} {:?}", self.classes[*label], counts);
            }
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let name = &self.feature_names[*feature];
                let _ = writeln!(out, "{pad}if {name} <= {threshold}:");
                self.text_node(left, indent + 1, out);
                let _ = writeln!(out, "{pad}else:  # {name} > {threshold}");
                self.text_node(right, indent + 1, out);
            }
        }
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph tree {\n  node [shape=box];\n");
        let mut next = 0usize;
        self.dot_node(&self.root, &mut next, &mut out);
        out.push_str("}\n");
        out
    }

    fn dot_node(&self, node: &TreeNode, next: &mut usize, out: &mut String) -> usize {
        let id = *next;
        *next += 1;
        match node {
            TreeNode::Leaf { label, counts } => {
                let _ = writeln!(
                    out,
                    "  n{id} [label=\"{}\\ncounts = {:?}\"];",
                    self.classes[*label], counts
                );
            }
            TreeNode::Split {
                feature,
                threshold,
                counts,
                left,
                right,
            } => {
                let _ = writeln!(
                    out,
                    "  n{id} [label=\"{} <= {threshold}\\ngini = {:.4}\"];",
                    self.feature_names[*feature],
                    gini(counts)
                );
                let l = self.dot_node(left, next, out);
                let r = self.dot_node(right, next, out);
                let _ = writeln!(out, "  n{id} -> n{l} [label=\"yes\"];");
                let _ = writeln!(out, "  n{id} -> n{r} [label=\"no\"];");
            }
        }
        id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

/// Seeded shuffled k-fold cross-validation.
pub fn cross_validate(table: &[MetaInstance], folds: usize, seed: u64, config: &TreeConfig) -> Result<CvResult> {
    let n = table.len();
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("{folds} folds for {n} instances")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut start = 0;
    let (mut train_acc, mut hold_acc) = (0.0, 0.0);
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        let hold: Vec<MetaInstance> = order[start..start + size].iter().map(|&i| table[i].clone()).collect();
        let fit: Vec<MetaInstance> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .map(|&i| table[i].clone())
            .collect();
        start += size;
        let tree = fit_tree(&fit, config)?;
        train_acc += tree.accuracy(&fit);
        hold_acc += tree.accuracy(&hold);
    }
    Ok(CvResult {
        train_accuracy: train_acc / folds as f64,
        holdout_accuracy: hold_acc / folds as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(features: &[f64], label: &str) -> MetaInstance {
        MetaInstance {
            name: String::new(),
            features: features.to_vec(),
            label: label.into(),
        }
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini(&[4, 0]), 0.0);
        assert_eq!(gini(&[3, 3]), 0.5);
        assert!((gini(&[1, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_labels_give_a_leaf() {
        let t = vec![inst(&[1.0], "SR"), inst(&[2.0], "SR"), inst(&[3.0], "SR")];
        let tree = fit_tree(&t, &TreeConfig::default()).unwrap();
        assert_eq!(tree.depth(), 0);
        assert_eq!(tree.predict(&[100.0]), "SR");
    }

    #[test]
    fn separable_data_splits_at_midpoint() {
        let t = vec![
            inst(&[1.0], "A"),
            inst(&[2.0], "A"),
            inst(&[4.0], "B"),
            inst(&[6.0], "B"),
        ];
        let tree = fit_tree(&t, &TreeConfig::default()).unwrap();
        match &tree.root {
            TreeNode::Split { feature, threshold, .. } => {
                assert_eq!((*feature, *threshold), (0, 3.0));
            }
            other => panic!("expected split, got {other:?}"),
        }
        assert_eq!(tree.depth(), 1);
        assert_eq!(tree.predict(&[3.0]), "A");
        assert_eq!(tree.predict(&[3.0001]), "B");
    }

    #[test]
    fn low_impurity_node_is_a_leaf() {
        // 9 vs 1: gini = 0.18 < 0.3
        let mut t: Vec<MetaInstance> = (0..9).map(|i| inst(&[i as f64], "A")).collect();
        t.push(inst(&[20.0], "B"));
        let tree = fit_tree(&t, &TreeConfig::default()).unwrap();
        assert_eq!(tree.depth(), 0);
        assert_eq!(tree.predict(&[20.0]), "A");
    }

    #[test]
    fn majority_ties_follow_class_order() {
        let t = vec![inst(&[1.0], "VSKNN"), inst(&[1.0], "S-POP")];
        let tree = fit_tree(&t, &TreeConfig::default()).unwrap();
        assert_eq!(tree.predict(&[1.0]), "S-POP");
        assert_eq!(class_cmp("CSRM", "AR"), Ordering::Less);
        assert_eq!(class_cmp("AR", "SR"), Ordering::Less);
    }

    #[test]
    fn hand_built_tree_trace() {
        let tree = DecisionTree {
            classes: vec!["S-POP".into(), "VSKNN".into(), "NARM".into()],
            feature_names: vec!["a".into(), "b".into()],
            root: TreeNode::Split {
                feature: 0,
                threshold: 5.0,
                counts: vec![],
                left: Box::new(TreeNode::Leaf {
                    label: 0,
                    counts: vec![],
                }),
                right: Box::new(TreeNode::Split {
                    feature: 1,
                    threshold: 2.0,
                    counts: vec![],
                    left: Box::new(TreeNode::Leaf {
                        label: 1,
                        counts: vec![],
                    }),
                    right: Box::new(TreeNode::Leaf {
                        label: 2,
                        counts: vec![],
                    }),
                }),
            },
        };
        assert_eq!(tree.predict(&[5.0, 9.0]), "S-POP");
        assert_eq!(tree.predict(&[6.0, 2.0]), "VSKNN");
        assert_eq!(tree.predict(&[6.0, 2.5]), "NARM");
        assert!(tree.to_text().contains("if b <= 2:"));
        assert!(tree.to_dot().starts_with("digraph"));
    }

    #[test]
    fn cross_validation_on_separable_table() {
        let t: Vec<MetaInstance> = (0..20)
            .map(|i| {
                if i < 10 {
                    inst(&[i as f64], "A")
                } else {
                    inst(&[100.0 + i as f64], "B")
                }
            })
            .collect();
        let cv = cross_validate(&t, 10, 1, &TreeConfig::default()).unwrap();
        assert_eq!(cv.train_accuracy, 1.0);
        assert_eq!(cv.holdout_accuracy, 1.0);
        assert!(cross_validate(&t, 20, 1, &TreeConfig::default()).is_ok());
        assert!(cross_validate(&t, 21, 1, &TreeConfig::default()).is_err());
    }

    #[test]
    fn meta_table_round_trip() {
        let t = vec![MetaInstance {
            name: "s1".into(),
            features: vec![1.0, 2.5, 3.0, 4.0, 5.0, 6.0],
            label: "SR".into(),
        }];
        let mut buf = Vec::new();
        write_meta_table(&t, &mut buf).unwrap();
        assert_eq!(read_meta_table(&buf[..]).unwrap(), t);
    }
}
