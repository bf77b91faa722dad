//! Feature errors, macro structural metrics, the compound score and
//! degree-rank tables.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::KvConfig;
use crate::graph::Relation;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("no class has both positive and negative samples")]
    Degenerate,
    #[error("empty input")]
    Empty,
}

fn check_shapes(pred: &Tensor, target: &Tensor) -> Result<(), MetricsError> {
    if pred.shape() != target.shape() {
        return Err(MetricsError::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64, MetricsError> {
    check_shapes(pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.len() as f64)
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64, MetricsError> {
    check_shapes(pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

/// Confusion counts: per class (true positives, predicted count, target count).
fn class_counts(preds: &[usize], targets: &[usize], n_classes: usize) -> Vec<(usize, usize, usize)> {
    let mut c = vec![(0, 0, 0); n_classes];
    for (&p, &t) in preds.iter().zip(targets) {
        if p < n_classes {
            c[p].1 += 1;
        }
        if t < n_classes {
            c[t].2 += 1;
            if p == t {
                c[t].0 += 1;
            }
        }
    }
    c
}

/// Mean per-class recall over classes that occur in `targets`.
pub fn macro_accuracy(preds: &[usize], targets: &[usize], n_classes: usize) -> f64 {
    let c = class_counts(preds, targets, n_classes);
    let present: Vec<_> = c.iter().filter(|x| x.2 > 0).collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().map(|&&(tp, _, n)| tp as f64 / n as f64).sum::<f64>() / present.len() as f64
}

/// Mean per-class precision over classes that occur in `targets`; a class
/// that is never predicted has precision 0.
pub fn macro_precision(preds: &[usize], targets: &[usize], n_classes: usize) -> f64 {
    let c = class_counts(preds, targets, n_classes);
    let present: Vec<_> = c.iter().filter(|x| x.2 > 0).collect();
    if present.is_empty() {
        return 0.0;
    }
    present
        .iter()
        .map(|&&(tp, np, _)| if np == 0 { 0.0 } else { tp as f64 / np as f64 })
        .sum::<f64>()
        / present.len() as f64
}

/// One-vs-rest AUROC of a single score column, ties counted as one half.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tied runs.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUROC over classes with both positives and negatives.
/// `scores` is `n_samples × n_classes`.
pub fn macro_auroc(scores: &Tensor, targets: &[usize], n_classes: usize) -> Result<f64, MetricsError> {
    if scores.rows() != targets.len() || scores.cols() != n_classes {
        return Err(MetricsError::ShapeMismatch {
            left: scores.shape().to_vec(),
            right: vec![targets.len(), n_classes],
        });
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut column = vec![0.0; targets.len()];
    for c in 0..n_classes {
        let positive: Vec<bool> = targets.iter().map(|&t| t == c).collect();
        for (r, slot) in column.iter_mut().enumerate() {
            *slot = scores.at(r, c);
        }
        if let Some(a) = binary_auroc(&column, &positive) {
            total += a;
            used += 1;
        }
    }
    if used == 0 {
        return Err(MetricsError::Degenerate);
    }
    Ok(total / used as f64)
}

/// `0.25·acc + 0.25·auroc + 0.5·(1 − mae)`, with `mae` clipped to `[0, 1]`.
pub fn compound_score(acc: f64, auroc: f64, mae: f64) -> f64 {
    0.25 * acc + 0.25 * auroc + 0.5 * (1.0 - mae.clamp(0.0, 1.0))
}

/// One row of a degree table.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeRow {
    pub node_id: usize,
    pub actual: f64,
    pub predicted: f64,
}

/// Actual and predicted degrees per node, sorted by actual degree
/// (descending, ties by node id).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DegreeTable {
    pub rows: Vec<DegreeRow>,
}

impl DegreeTable {
    /// Builds the table from per-node degree vectors of equal length.
    pub fn from_degrees(actual: &[f64], predicted: &[f64]) -> Self {
        let mut rows: Vec<DegreeRow> = actual
            .iter()
            .zip(predicted)
            .enumerate()
            .filter(|(_, (a, p))| **a > 0.0 || **p > 0.0)
            .map(|(node_id, (&actual, &predicted))| DegreeRow {
                node_id,
                actual,
                predicted,
            })
            .collect();
        rows.sort_by(|a, b| b.actual.total_cmp(&a.actual).then(a.node_id.cmp(&b.node_id)));
        Self { rows }
    }

    pub fn actual_sum(&self) -> f64 {
        self.rows.iter().map(|r| r.actual).sum()
    }

    pub fn predicted_sum(&self) -> f64 {
        self.rows.iter().map(|r| r.predicted).sum()
    }

    /// Top `k` node ids by actual degree.
    pub fn top_actual(&self, k: usize) -> Vec<usize> {
        self.rows.iter().take(k).map(|r| r.node_id).collect()
    }

    /// Top `k` node ids by predicted degree (ties by node id).
    pub fn top_predicted(&self, k: usize) -> Vec<usize> {
        let mut rows: Vec<&DegreeRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.predicted.total_cmp(&a.predicted).then(a.node_id.cmp(&b.node_id)));
        rows.into_iter().take(k).map(|r| r.node_id).collect()
    }

    /// CSV with columns `rank,node_id,actual_degree,predicted_degree`.
    pub fn write_csv(&self, path: &Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rank", "node_id", "actual_degree", "predicted_degree"])?;
        for (i, r) in self.rows.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                r.node_id.to_string(),
                r.actual.to_string(),
                r.predicted.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            let (_, node_id, actual, predicted): (usize, usize, f64, f64) = rec?;
            rows.push(DegreeRow {
                node_id,
                actual,
                predicted,
            });
        }
        Ok(Self { rows })
    }
}

/// Degree of each node: how many connections attach to it.
pub fn degree_counts(attachments: &[usize], n_nodes: usize) -> Vec<f64> {
    let mut d = vec![0.0; n_nodes];
    for &a in attachments {
        if a < n_nodes {
            d[a] += 1.0;
        }
    }
    d
}

/// Degree table of one window: actual attachments vs predicted ones.
pub fn degree_rank(actual: &[usize], predicted: &[usize], n_nodes: usize) -> DegreeTable {
    DegreeTable::from_degrees(&degree_counts(actual, n_nodes), &degree_counts(predicted, n_nodes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    /// `None` when no class has both positives and negatives.
    pub auroc: Option<f64>,
}

/// Running sums for evaluation; [`EvalAccumulator::merge`] is associative.
#[derive(Debug, Clone, Default)]
pub struct EvalAccumulator {
    abs_err: f64,
    sq_err: f64,
    n_values: usize,
    n_pairs: usize,
    n_classes: [usize; 4],
    preds: [Vec<usize>; 4],
    targets: [Vec<usize>; 4],
    probs: [Vec<f64>; 4],
    actual_degree: [Vec<f64>; 4],
    predicted_degree: [Vec<f64>; 4],
}

impl EvalAccumulator {
    /// `n_classes` per relation in [`Relation`] order.
    pub fn new(n_classes: [usize; 4]) -> Self {
        Self {
            n_classes,
            actual_degree: std::array::from_fn(|r| vec![0.0; n_classes[r]]),
            predicted_degree: std::array::from_fn(|r| vec![0.0; n_classes[r]]),
            ..Self::default()
        }
    }

    /// Adds one forecast pair: predicted vs actual numerics and, per relation,
    /// the score matrix and target classes.
    pub fn add(
        &mut self,
        pred_numerics: &Tensor,
        next_numerics: &Tensor,
        scores: &[Tensor; 4],
        targets: &[Vec<usize>; 4],
    ) -> Result<(), MetricsError> {
        check_shapes(pred_numerics, next_numerics)?;
        for (a, b) in pred_numerics.data().iter().zip(next_numerics.data()) {
            self.abs_err += (a - b).abs();
            self.sq_err += (a - b) * (a - b);
        }
        self.n_values += pred_numerics.len();
        self.n_pairs += 1;
        for r in 0..4 {
            let s = &scores[r];
            if s.cols() != self.n_classes[r] || s.rows() != targets[r].len() {
                return Err(MetricsError::ShapeMismatch {
                    left: s.shape().to_vec(),
                    right: vec![targets[r].len(), self.n_classes[r]],
                });
            }
            let pred = s.argmax_rows();
            for (&p, &t) in pred.iter().zip(&targets[r]) {
                self.predicted_degree[r][p] += 1.0;
                if t < self.n_classes[r] {
                    self.actual_degree[r][t] += 1.0;
                }
            }
            self.preds[r].extend(pred);
            self.targets[r].extend(&targets[r]);
            self.probs[r].extend_from_slice(s.softmax_rows().data());
        }
        Ok(())
    }

    pub fn merge(&mut self, other: EvalAccumulator) {
        self.abs_err += other.abs_err;
        self.sq_err += other.sq_err;
        self.n_values += other.n_values;
        self.n_pairs += other.n_pairs;
        for r in 0..4 {
            self.preds[r].extend(other.preds[r].iter());
            self.targets[r].extend(other.targets[r].iter());
            self.probs[r].extend(other.probs[r].iter());
            for (a, b) in self.actual_degree[r].iter_mut().zip(&other.actual_degree[r]) {
                *a += b;
            }
            for (a, b) in self.predicted_degree[r].iter_mut().zip(&other.predicted_degree[r]) {
                *a += b;
            }
        }
    }

    pub fn finish(&self) -> Result<MetricsReport, MetricsError> {
        if self.n_pairs == 0 {
            return Err(MetricsError::Empty);
        }
        let n = self.n_values as f64;
        let per_relation: [RelationMetrics; 4] = std::array::from_fn(|r| {
            let k = self.n_classes[r];
            let probs = Tensor::matrix(self.targets[r].len(), k, self.probs[r].clone());
            RelationMetrics {
                accuracy: macro_accuracy(&self.preds[r], &self.targets[r], k),
                precision: macro_precision(&self.preds[r], &self.targets[r], k),
                auroc: macro_auroc(&probs, &self.targets[r], k).ok(),
            }
        });
        let mean = |f: &dyn Fn(&RelationMetrics) -> f64| per_relation.iter().map(f).sum::<f64>() / 4.0;
        let aurocs: Vec<f64> = per_relation.iter().filter_map(|m| m.auroc).collect();
        let macro_auroc = if aurocs.is_empty() {
            0.5
        } else {
            aurocs.iter().sum::<f64>() / aurocs.len() as f64
        };
        let pairs = self.n_pairs as f64;
        let degree = |r: usize| {
            let a: Vec<f64> = self.actual_degree[r].iter().map(|d| d / pairs).collect();
            let p: Vec<f64> = self.predicted_degree[r].iter().map(|d| d / pairs).collect();
            (a, p)
        };
        let per_rel_degree: [DegreeTable; 4] = std::array::from_fn(|r| {
            let (a, p) = degree(r);
            DegreeTable::from_degrees(&a, &p)
        });
        let combined = |r1: usize, r2: usize| {
            let (a1, p1) = degree(r1);
            let (a2, p2) = degree(r2);
            let a: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
            let p: Vec<f64> = p1.iter().zip(&p2).map(|(x, y)| x + y).collect();
            DegreeTable::from_degrees(&a, &p)
        };
        let mae = self.abs_err / n;
        let macro_accuracy = mean(&|m| m.accuracy);
        Ok(MetricsReport {
            mae,
            mse: self.sq_err / n,
            macro_accuracy,
            macro_auroc,
            macro_precision: mean(&|m| m.precision),
            compound_score: compound_score(macro_accuracy, macro_auroc, mae),
            n_pairs: self.n_pairs,
            ip_degree: combined(0, 1),
            port_degree: combined(2, 3),
            per_relation,
            relation_degree: per_rel_degree,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub macro_accuracy: f64,
    pub macro_auroc: f64,
    pub macro_precision: f64,
    pub compound_score: f64,
    pub n_pairs: usize,
    pub per_relation: [RelationMetrics; 4],
    /// Per relation; degrees averaged over pairs, so each sums to the window length.
    pub relation_degree: [DegreeTable; 4],
    /// Source and destination IP degrees combined.
    pub ip_degree: DegreeTable,
    pub port_degree: DegreeTable,
}

impl MetricsReport {
    pub fn to_config(&self) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("mae", self.mae);
        c.set("mse", self.mse);
        c.set("macro_accuracy", self.macro_accuracy);
        c.set("macro_auroc", self.macro_auroc);
        c.set("macro_precision", self.macro_precision);
        c.set("compound_score", self.compound_score);
        c.set("n_pairs", self.n_pairs);
        for rel in Relation::ALL {
            let m = &self.per_relation[rel.index()];
            c.set(&format!("{}.accuracy", rel.name()), m.accuracy);
            c.set(&format!("{}.precision", rel.name()), m.precision);
            c.set(
                &format!("{}.auroc", rel.name()),
                m.auroc.map_or("none".to_string(), |a| a.to_string()),
            );
        }
        c
    }

    /// Writes `metrics.txt` and the degree-rank CSVs into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), std::io::Error> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.txt"), self.to_config().render())?;
        let io = |e: csv::Error| std::io::Error::other(e.to_string());
        for rel in Relation::ALL {
            self.relation_degree[rel.index()]
                .write_csv(&dir.join(format!("degree_{}.csv", rel.name())))
                .map_err(io)?;
        }
        self.ip_degree.write_csv(&dir.join("degree_ip.csv")).map_err(io)?;
        self.port_degree.write_csv(&dir.join("degree_port.csv")).map_err(io)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_offset_errors() {
        let t = Tensor::matrix(2, 2, vec![0.0, 0.5, 1.0, 0.2]);
        let p = t.map(|x| x + 0.1);
        assert!((mae(&p, &t).unwrap() - 0.1).abs() < 1e-12);
        assert!((mse(&p, &t).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert!(mae(&t, &Tensor::zeros(1, 4)).is_err());
    }

    #[test]
    fn one_class_always_predicted() {
        assert_eq!(macro_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1], 2), 0.5);
        assert_eq!(macro_accuracy(&[3, 3], &[3, 3], 5), 1.0);
    }

    #[test]
    fn auroc_conventions() {
        let s = Tensor::matrix(4, 2, vec![0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.1, 0.9]);
        assert_eq!(macro_auroc(&s, &[0, 0, 1, 1], 2).unwrap(), 1.0);
        let flat = Tensor::full(4, 2, 0.5);
        assert_eq!(macro_auroc(&flat, &[0, 0, 1, 1], 2).unwrap(), 0.5);
        assert_eq!(macro_auroc(&flat, &[1, 1, 1, 1], 2), Err(MetricsError::Degenerate));
    }

    #[test]
    fn compound_score_endpoints() {
        assert_eq!(compound_score(1.0, 1.0, 0.0), 1.0);
        assert_eq!(compound_score(0.0, 0.0, 1.0), 0.0);
        assert_eq!(compound_score(0.0, 0.0, 3.0), 0.0);
    }

    #[test]
    fn concentrated_degrees() {
        let t = degree_rank(&[2, 2, 2], &[2, 1, 2], 4);
        assert_eq!(t.rows[0], DegreeRow { node_id: 2, actual: 3.0, predicted: 2.0 });
        assert_eq!(t.actual_sum(), 3.0);
        assert_eq!(t.predicted_sum(), 3.0);
        assert_eq!(t.top_predicted(1), vec![2]);
    }
}
