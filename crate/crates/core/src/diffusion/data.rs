//! Synthetic conditional Gaussian mixtures.
//!
//! Condition `c` picks a cluster centre drawn once from `semantic_seed`, so
//! two datasets sharing that seed agree on what each condition means. The
//! style is the shape of every cluster: coordinates are paired and each pair
//! is an ellipse with std `spread` along its major axis, `spread·aspect`
//! along the minor one, rotated by `tilt`, then offset by `shift`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub data_dim: usize,
    /// Condition ids used are `0..classes`.
    pub classes: usize,
    pub size: usize,
    pub semantic_seed: u64,
    /// Std of the cluster centres.
    pub mean_scale: f64,
    pub spread: f64,
    pub aspect: f64,
    pub tilt: f64,
    pub shift: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            data_dim: 8,
            classes: 8,
            size: 2048,
            semantic_seed: 11,
            mean_scale: 1.0,
            spread: 0.5,
            aspect: 1.0,
            tilt: 0.0,
            shift: 0.0,
            seed: 12,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.classes == 0 || self.size == 0 {
            return Err(Error::Config("dataset data_dim, classes and size must be positive".into()));
        }
        let finite = [self.mean_scale, self.spread, self.aspect, self.tilt, self.shift];
        if finite.iter().any(|v| !v.is_finite()) || self.spread < 0.0 || self.aspect < 0.0 || self.mean_scale < 0.0 {
            return Err(Error::Config("dataset scales must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Cluster centre of every class, `classes × data_dim`.
    pub fn centres(&self) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(self.semantic_seed);
        (0..self.classes)
            .map(|_| rng.normals(self.data_dim).into_iter().map(|v| v * self.mean_scale).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    spec: DatasetSpec,
    /// `size × data_dim`
    samples: Tensor,
    conds: Vec<usize>,
}

impl ToyDataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let centres = spec.centres();
        let mut rng = SeededRng::new(spec.seed);
        let (cos, sin) = (spec.tilt.cos(), spec.tilt.sin());
        let dd = spec.data_dim;
        let mut data = Vec::with_capacity(spec.size * dd);
        let mut conds = Vec::with_capacity(spec.size);
        for _ in 0..spec.size {
            let c = rng.below(spec.classes);
            let xi = rng.normals(dd);
            let mut row = vec![0.0; dd];
            let mut j = 0;
            while j + 1 < dd {
                let (u, v) = (spec.spread * xi[j], spec.spread * spec.aspect * xi[j + 1]);
                row[j] = cos * u - sin * v;
                row[j + 1] = sin * u + cos * v;
                j += 2;
            }
            if j < dd {
                row[j] = spec.spread * xi[j];
            }
            for (k, r) in row.iter_mut().enumerate() {
                *r += centres[c][k] + spec.shift;
            }
            data.extend(row);
            conds.push(c);
        }
        Ok(ToyDataset {
            spec: spec.clone(),
            samples: Tensor::new(vec![spec.size, dd], data)?,
            conds,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn conds(&self) -> &[usize] {
        &self.conds
    }

    /// Rows `idx` as a `len × data_dim` tensor plus their conditions.
    pub fn rows(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::Degenerate("empty batch".into()));
        }
        let dd = self.spec.data_dim;
        let mut data = Vec::with_capacity(idx.len() * dd);
        let mut conds = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.samples.data()[i * dd..(i + 1) * dd]);
            conds.push(self.conds[i]);
        }
        Ok((Tensor::new(vec![idx.len(), dd], data)?, conds))
    }

    /// `size` rows drawn uniformly with replacement.
    pub fn sample_batch(&self, rng: &mut SeededRng, size: usize) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..size).map(|_| rng.below(self.len())).collect();
        self.rows(&idx)
    }

    /// Rewrites every condition id through `map` (e.g. into another
    /// encoder's vocabulary).
    pub fn relabel(&self, map: impl Fn(usize) -> Result<usize>) -> Result<Self> {
        let conds = self.conds.iter().map(|&c| map(c)).collect::<Result<Vec<_>>>()?;
        let mut spec = self.spec.clone();
        spec.classes = conds.iter().copied().max().map_or(0, |m| m + 1).max(spec.classes);
        Ok(ToyDataset {
            spec,
            samples: self.samples.clone(),
            conds,
        })
    }

    /// Keeps the first `per_class` samples of each class (few-shot subsets).
    pub fn few_shot(&self, per_class: usize) -> Result<Self> {
        let mut seen = vec![0usize; self.spec.classes];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.conds[i];
                seen[c] += 1;
                seen[c] <= per_class
            })
            .collect();
        let (samples, conds) = self.rows(&idx)?;
        let mut spec = self.spec.clone();
        spec.size = idx.len();
        Ok(ToyDataset { spec, samples, conds })
    }
}
