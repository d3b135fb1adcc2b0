use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Float, Mat};

/// Low-rank update `Δ(x) = scale · (x · downᵀ) · upᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    /// rank × hidden_dim
    pub down: Mat<T>,
    /// hidden_dim × rank
    pub up: Mat<T>,
}

impl<T: Float> LoraPair<T> {
    fn zeros(rank: usize, d: usize) -> Self {
        Self {
            down: Mat::zeros(rank, d),
            up: Mat::zeros(d, rank),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLora<T> {
    pub query: LoraPair<T>,
    pub value: LoraPair<T>,
}

/// Adapters on the query and value projections of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters<T> {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LayerLora<T>>,
}

impl<T: Float> LoraAdapters<T> {
    /// Gaussian `down` (std 0.02), zero `up`: the adapted model starts out
    /// identical to the base model.
    pub fn init(n_layers: usize, hidden_dim: usize, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, 0.02).expect("valid std");
        let mut pair = || {
            let mut p = LoraPair::zeros(rank, hidden_dim);
            for v in p.down.data_mut() {
                *v = T::lit(dist.sample(rng));
            }
            p
        };
        let layers = (0..n_layers)
            .map(|_| LayerLora {
                query: pair(),
                value: pair(),
            })
            .collect();
        Self { rank, alpha, layers }
    }

    pub fn seeded(n_layers: usize, hidden_dim: usize, rank: usize, alpha: f64, seed: u64) -> Self {
        Self::init(n_layers, hidden_dim, rank, alpha, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.layers.first().map_or(0, |l| l.query.down.cols());
        Self {
            rank: self.rank,
            alpha: self.alpha,
            layers: (0..self.layers.len())
                .map(|_| LayerLora {
                    query: LoraPair::zeros(self.rank, d),
                    value: LoraPair::zeros(self.rank, d),
                })
                .collect(),
        }
    }

    pub fn scale(&self) -> T {
        T::lit(self.alpha / self.rank as f64)
    }

    pub fn cast<U: Float>(&self) -> LoraAdapters<U> {
        let pair = |p: &LoraPair<T>| LoraPair {
            down: p.down.cast(),
            up: p.up.cast(),
        };
        LoraAdapters {
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|l| LayerLora {
                    query: pair(&l.query),
                    value: pair(&l.value),
                })
                .collect(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (which, p) in [("query", &l.query), ("value", &l.value)] {
                out.push((format!("lora.{i}.{which}.down"), vec![p.down.rows(), p.down.cols()], p.down.data()));
                out.push((format!("lora.{i}.{which}.up"), vec![p.up.rows(), p.up.cols()], p.up.data()));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let LayerLora { query, value } = l;
            for (which, p) in [("query", query), ("value", value)] {
                out.push((format!("lora.{i}.{which}.down"), p.down.data_mut()));
                out.push((format!("lora.{i}.{which}.up"), p.up.data_mut()));
            }
        }
        out
    }

    /// Applies `x · W + Δ(x)`, returning the projection and the rank-space
    /// activations `x · downᵀ` needed for the backward pass.
    pub(crate) fn project(&self, pair: &LoraPair<T>, x: &Mat<T>, base: &Mat<T>) -> (Mat<T>, Mat<T>) {
        let mut y = x.matmul(base);
        let u = x.matmul_t(&pair.down);
        let mut delta = u.matmul_t(&pair.up);
        delta.scale(self.scale());
        y.add_assign(&delta);
        (y, u)
    }
}
