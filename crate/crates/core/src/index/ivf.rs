use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::IndexEntry;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub n_list: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            n_list: 16,
            iters: 20,
            seed: 0,
        }
    }
}

/// Spherical k-means coarse quantizer: unit centroids, one cell per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub config: QuantizerConfig,
    pub centroids: Vec<Vec<f64>>,
    /// Cell of each entry, in entry order.
    pub assignments: Vec<usize>,
    /// Entry positions per cell, ascending.
    pub lists: Vec<Vec<usize>>,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = dot(&v, &v).sqrt();
    if n < 1e-12 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Highest inner product; lowest index on ties.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let s = dot(point, centroid);
        if s > best_score {
            best = c;
            best_score = s;
        }
    }
    best
}

impl Quantizer {
    pub(crate) fn train(entries: &[IndexEntry], d_model: usize, config: QuantizerConfig) -> Result<Self> {
        let n = entries.len();
        if config.n_list == 0 || config.n_list > n {
            return Err(Error::Configuration(format!(
                "n_list {} must be within 1..={n}",
                config.n_list
            )));
        }
        let points: Vec<Vec<f64>> = entries.iter().map(|e| to_f64(&e.embedding)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut seeds = sample(&mut rng, n, config.n_list).into_vec();
        seeds.sort_unstable();
        let mut centroids: Vec<Vec<f64>> = seeds.iter().map(|&i| points[i].clone()).collect();
        let mut assignments = vec![0usize; n];

        for _ in 0..config.iters {
            for (a, p) in assignments.iter_mut().zip(&points) {
                *a = nearest(p, &centroids);
            }
            reseed_empty(&points, &mut centroids, &mut assignments);
            let mut sums = vec![vec![0.0; d_model]; centroids.len()];
            for (p, &a) in points.iter().zip(&assignments) {
                for (s, x) in sums[a].iter_mut().zip(p) {
                    *s += x;
                }
            }
            for (c, sum) in centroids.iter_mut().zip(sums) {
                if let Some(u) = normalized(sum) {
                    *c = u;
                }
            }
        }
        for (a, p) in assignments.iter_mut().zip(&points) {
            *a = nearest(p, &centroids);
        }
        let mut lists = vec![Vec::new(); centroids.len()];
        for (i, &a) in assignments.iter().enumerate() {
            lists[a].push(i);
        }
        Ok(Self {
            config,
            centroids,
            assignments,
            lists,
        })
    }

    /// The `n_probe` best cells for `query`, best first.
    pub fn nearest_cells(&self, query: &[f64], n_probe: usize) -> Vec<usize> {
        let mut cells: Vec<(usize, f64)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(c, centroid)| (c, dot(query, centroid)))
            .collect();
        cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cells.into_iter().take(n_probe).map(|(c, _)| c).collect()
    }

    pub(crate) fn from_parts(config: QuantizerConfig, centroids: Vec<Vec<f64>>, assignments: Vec<usize>) -> Result<Self> {
        let mut lists = vec![Vec::new(); centroids.len()];
        for (i, &a) in assignments.iter().enumerate() {
            let list = lists
                .get_mut(a)
                .ok_or_else(|| Error::Ingestion(format!("assignment {a} out of range")))?;
            list.push(i);
        }
        Ok(Self {
            config,
            centroids,
            assignments,
            lists,
        })
    }
}

/// Moves the point farthest from the largest cluster's centroid into each
/// empty cluster and makes it that cluster's centroid.
fn reseed_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    loop {
        let mut sizes = vec![0usize; centroids.len()];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        let largest = (0..sizes.len()).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
        if sizes[largest] < 2 {
            return;
        }
        let farthest = (0..points.len())
            .filter(|&i| assignments[i] == largest)
            .min_by(|&a, &b| {
                dot(&points[a], &centroids[largest])
                    .total_cmp(&dot(&points[b], &centroids[largest]))
                    .then(a.cmp(&b))
            })
            .unwrap();
        assignments[farthest] = empty;
        centroids[empty] = points[farthest].clone();
    }
}
