//! External clustering metrics: best-mapping accuracy (ACC), adjusted Rand
//! index (ARI) and one-vs-rest precision/recall/F for a single class.

use serde::Serialize;

use crate::error::{Error, Result};

/// Largest side of the contingency table the exact matcher accepts.
pub const MAX_MATCH_CLUSTERS: usize = 2048;

/// `counts[c][l]` = number of points in predicted cluster `c` with true label `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub cluster_sizes: Vec<u64>,
    pub class_sizes: Vec<u64>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new(labels: &[usize], assignments: &[usize]) -> Result<Self> {
        if labels.len() != assignments.len() {
            return Err(Error::dim("contingency", (labels.len(), 1), (assignments.len(), 1)));
        }
        let kp = assignments.iter().max().map_or(0, |&m| m + 1);
        let kt = labels.iter().max().map_or(0, |&m| m + 1);
        let mut counts = vec![vec![0u64; kt]; kp];
        let mut cluster_sizes = vec![0u64; kp];
        let mut class_sizes = vec![0u64; kt];
        for (&l, &c) in labels.iter().zip(assignments) {
            counts[c][l] += 1;
            cluster_sizes[c] += 1;
            class_sizes[l] += 1;
        }
        Ok(ContingencyTable {
            counts,
            cluster_sizes,
            class_sizes,
            n: labels.len() as u64,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_sizes.len()
    }
}

/// One-to-one map from predicted cluster to true label; `None` for clusters
/// left unmatched when there are more clusters than labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterMapping {
    pub cluster_to_label: Vec<Option<usize>>,
}

impl ClusterMapping {
    pub fn label_of(&self, cluster: usize) -> Option<usize> {
        self.cluster_to_label.get(cluster).copied().flatten()
    }

    pub fn cluster_of(&self, label: usize) -> Option<usize> {
        self.cluster_to_label.iter().position(|&l| l == Some(label))
    }
}

/// Fraction of points whose label equals the mapped label of their cluster,
/// maximized over one-to-one mappings.
pub fn accuracy(labels: &[usize], assignments: &[usize]) -> Result<(f64, ClusterMapping)> {
    let table = ContingencyTable::new(labels, assignments)?;
    let size = table.n_clusters().max(table.n_classes());
    if size > MAX_MATCH_CLUSTERS {
        return Err(Error::invalid(format!(
            "{size} clusters/classes exceed the matcher cap of {MAX_MATCH_CLUSTERS}"
        )));
    }
    if table.n == 0 {
        return Ok((0.0, ClusterMapping { cluster_to_label: Vec::new() }));
    }
    // Square, zero-padded profit matrix; minimizing the negated counts maximizes matches.
    let cost: Vec<Vec<i64>> = (0..size)
        .map(|c| {
            (0..size)
                .map(|l| -(table.counts.get(c).and_then(|r| r.get(l)).copied().unwrap_or(0) as i64))
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let mut matched = 0u64;
    let cluster_to_label = (0..table.n_clusters())
        .map(|c| {
            let l = assignment[c];
            if l < table.n_classes() {
                matched += table.counts[c][l];
                Some(l)
            } else {
                None
            }
        })
        .collect();
    Ok((matched as f64 / table.n as f64, ClusterMapping { cluster_to_label }))
}

/// Minimum-cost perfect matching on a square matrix (shortest augmenting
/// paths with potentials, O(n³)). Returns the column chosen for each row.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials; index 0 is the virtual source column.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of_col[col0];
            let mut delta = INF;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[r - 1][col - 1] - u[r] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            row_of_col[col0] = row_of_col[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for col in 1..=n {
        out[row_of_col[col] - 1] = col - 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ari {
    pub value: f64,
    /// Set when the chance-corrected denominator vanishes, which happens only when both
    /// partitions are all singletons (scored 1) or both a single cluster (scored 0).
    pub degenerate: bool,
}

fn pairs(x: u64) -> i128 {
    let x = x as i128;
    x * (x - 1) / 2
}

/// Pair-counting adjusted Rand index, evaluated in exact integer arithmetic
/// up to the final division.
pub fn adjusted_rand_index_detailed(labels: &[usize], assignments: &[usize]) -> Result<Ari> {
    let table = ContingencyTable::new(labels, assignments)?;
    if table.n < 2 {
        return Err(Error::invalid("ARI needs at least two points"));
    }
    let index: i128 = table.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let a: i128 = table.cluster_sizes.iter().map(|&c| pairs(c)).sum();
    let b: i128 = table.class_sizes.iter().map(|&c| pairs(c)).sum();
    let total = pairs(table.n);
    // (index − ab/N) / ((a+b)/2 − ab/N), scaled by 2N.
    let num = 2 * total * index - 2 * a * b;
    let den = total * (a + b) - 2 * a * b;
    if den == 0 {
        return Ok(Ari {
            value: if a == 0 { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    Ok(Ari {
        value: num as f64 / den as f64,
        degenerate: false,
    })
}

pub fn adjusted_rand_index(labels: &[usize], assignments: &[usize]) -> Result<f64> {
    Ok(adjusted_rand_index_detailed(labels, assignments)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassScores {
    pub recall: f64,
    pub precision: f64,
    pub f_measure: f64,
}

/// One-vs-rest scores of `class_id` against the cluster `mapping` sends to it.
pub fn per_class_prf(labels: &[usize], assignments: &[usize], mapping: &ClusterMapping, class_id: usize) -> Result<ClassScores> {
    if labels.len() != assignments.len() {
        return Err(Error::dim("per_class_prf", (labels.len(), 1), (assignments.len(), 1)));
    }
    let members = labels.iter().filter(|&&l| l == class_id).count();
    if members == 0 {
        return Err(Error::invalid(format!("class {class_id} does not occur in the labels")));
    }
    let Some(cluster) = mapping.cluster_of(class_id) else {
        return Ok(ClassScores {
            recall: 0.0,
            precision: 0.0,
            f_measure: 0.0,
        });
    };
    let cluster_size = assignments.iter().filter(|&&c| c == cluster).count();
    let tp = labels
        .iter()
        .zip(assignments)
        .filter(|&(&l, &c)| l == class_id && c == cluster)
        .count();
    let recall = tp as f64 / members as f64;
    let precision = if cluster_size == 0 {
        0.0
    } else {
        tp as f64 / cluster_size as f64
    };
    let f_measure = if recall + precision > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassScores {
        recall,
        precision,
        f_measure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_basic_cases() {
        let l = [0, 0, 1, 1];
        assert_eq!(accuracy(&l, &l).unwrap().0, 1.0);
        let (acc, m) = accuracy(&l, &[1, 1, 0, 0]).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(m.cluster_to_label, vec![Some(1), Some(0)]);
        assert_eq!(accuracy(&l, &[0, 1, 0, 1]).unwrap().0, 0.5);
        assert!(accuracy(&l, &[0, 1]).is_err());
    }

    #[test]
    fn acc_with_unequal_cluster_counts() {
        // Three clusters, two labels: one cluster must stay unmatched.
        let l = [0, 0, 0, 1, 1, 1];
        let c = [0, 0, 2, 1, 1, 1];
        let (acc, m) = accuracy(&l, &c).unwrap();
        assert!((acc - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.label_of(2), None);
        // One cluster, two labels.
        assert_eq!(accuracy(&l, &[0; 6]).unwrap().0, 0.5);
    }

    #[test]
    fn ari_cases() {
        let l = [0, 0, 1, 1];
        assert_eq!(adjusted_rand_index(&l, &l).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&l, &[0, 1, 0, 1]).unwrap(), -0.5);
        // Index equals its expectation for a single cluster.
        let single = adjusted_rand_index_detailed(&l, &[0; 4]).unwrap();
        assert_eq!(single.value, 0.0);
        // Both partitions trivial: Max = Expected, formula undefined.
        let trivial = adjusted_rand_index_detailed(&[0; 4], &[0; 4]).unwrap();
        assert_eq!(trivial.value, 0.0);
        assert!(trivial.degenerate);
        let singletons = adjusted_rand_index_detailed(&[0, 1, 2], &[2, 0, 1]).unwrap();
        assert_eq!(singletons.value, 1.0);
        assert!(singletons.degenerate);
        assert!(adjusted_rand_index(&[0], &[0]).is_err());
        assert!(adjusted_rand_index(&l, &[0]).is_err());
    }

    #[test]
    fn prf_cases() {
        let l = [0, 0, 1, 1, 1];
        let (_, m) = accuracy(&l, &l).unwrap();
        let s = per_class_prf(&l, &l, &m, 0).unwrap();
        assert_eq!((s.recall, s.precision, s.f_measure), (1.0, 1.0, 1.0));

        // Cluster 0 holds one of the two class-0 points and nothing else.
        let c = [0, 1, 1, 1, 1];
        let (_, m) = accuracy(&l, &c).unwrap();
        let s = per_class_prf(&l, &c, &m, 0).unwrap();
        assert_eq!(s.recall, 0.5);
        assert_eq!(s.precision, 1.0);
        assert!((s.f_measure - 2.0 / 3.0).abs() < 1e-15);

        assert!(per_class_prf(&l, &c, &m, 7).is_err());
    }

    #[test]
    fn hungarian_small() {
        let cost = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let a = hungarian(&cost);
        let total: i64 = a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        assert_eq!(total, 5);
    }
}
