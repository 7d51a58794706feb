//! Per-class Mixture-of-Gaussians fitted by Expectation-Maximization, used to
//! generate synthetic features for replay.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::ClassId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CovarianceKind {
    #[default]
    Diagonal,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmConfig {
    pub components: usize,
    pub max_iters: usize,
    /// Stop once `(ll_k − ll_{k−1}) / |ll_{k−1}|` falls below this.
    pub tol: f64,
    pub var_floor: f64,
    pub seed: u64,
    pub covariance: CovarianceKind,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            components: 5,
            max_iters: 100,
            tol: 1e-4,
            var_floor: 1e-6,
            seed: 0,
            covariance: CovarianceKind::Diagonal,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.var_floor.is_nan() || self.var_floor <= 0.0 {
            return Err(Error::Config(
                "EM tolerance and variance floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    /// Full matrix with its lower Cholesky factor.
    Full {
        cov: DMatrix<f64>,
        chol: DMatrix<f64>,
    },
}

impl Covariance {
    fn full(cov: DMatrix<f64>, floor: f64) -> Self {
        let dim = cov.nrows();
        let mut c = cov;
        let mut jitter = 0.0;
        loop {
            if let Some(ch) = c.clone().cholesky() {
                let l = ch.l();
                if (0..dim).all(|i| l[(i, i)] * l[(i, i)] >= floor) {
                    return Covariance::Full { cov: c, chol: l };
                }
            }
            let bump = if jitter == 0.0 { floor } else { jitter };
            for i in 0..dim {
                c[(i, i)] += bump;
            }
            jitter = bump * 2.0;
        }
    }

    fn log_density(&self, x: &[f64], mean: &[f64]) -> f64 {
        let k = x.len() as f64;
        match self {
            Covariance::Diagonal(v) => {
                let mut acc = k * (2.0 * PI).ln();
                for j in 0..x.len() {
                    let d = x[j] - mean[j];
                    acc += v[j].ln() + d * d / v[j];
                }
                -0.5 * acc
            }
            Covariance::Full { chol, .. } => {
                let diff = DVector::from_iterator(x.len(), x.iter().zip(mean).map(|(a, b)| a - b));
                let y = chol
                    .solve_lower_triangular(&diff)
                    .expect("nonsingular factor");
                let logdet: f64 = (0..x.len()).map(|i| chol[(i, i)].ln()).sum::<f64>() * 2.0;
                -0.5 * (k * (2.0 * PI).ln() + logdet + y.norm_squared())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mog {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Covariance>,
}

#[derive(Clone, Debug)]
pub struct MogFit {
    pub mog: Mog,
    /// Log-likelihood of the data under the parameters of each iteration; the
    /// last entry belongs to the returned mixture.
    pub log_likelihoods: Vec<f64>,
    /// Components re-seeded after collapsing to zero responsibility.
    pub reseeds: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Farthest-point seeding: a random first pick, then repeatedly the sample
/// farthest from every pick so far. Stops early when only duplicates remain.
fn farthest_point_seeds(samples: &[Vec<f64>], m: usize, rng: &mut Rng) -> Vec<usize> {
    let mut picks = vec![rng.below(samples.len())];
    let mut min_d: Vec<f64> = samples
        .iter()
        .map(|s| sq_dist(s, &samples[picks[0]]))
        .collect();
    while picks.len() < m {
        let (best, &dist) =
            min_d.iter().enumerate().fold(
                (0, &-1.0),
                |acc, (i, d)| if *d > *acc.1 { (i, d) } else { acc },
            );
        if dist <= 0.0 {
            break;
        }
        picks.push(best);
        for (i, s) in samples.iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(s, &samples[best]));
        }
    }
    picks
}

fn validate_samples(samples: &[Vec<f64>]) -> Result<usize> {
    let first = samples.first().ok_or(Error::EmptySamples)?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::EmptySamples);
    }
    for (i, s) in samples.iter().enumerate() {
        if s.len() != dim {
            return Err(Error::shape(
                "fit_em",
                format!("row {i} has {} entries, expected {dim}", s.len()),
            ));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample(i));
        }
    }
    Ok(dim)
}

/// Rows of a tensor as `f64` vectors.
pub fn rows_of(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_f64(r)).collect()
}

impl Mog {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `log p(x)` with log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|m| self.weights[m].ln() + self.covs[m].log_density(x, &self.means[m]))
            .collect();
        log_sum_exp(&terms)
    }

    /// Sum of per-sample log densities.
    pub fn log_likelihood(&self, samples: &[Vec<f64>]) -> Result<f64> {
        for (i, s) in samples.iter().enumerate() {
            if s.len() != self.dim() {
                return Err(Error::shape(
                    "log_likelihood",
                    format!("row {i} has {} entries", s.len()),
                ));
            }
        }
        Ok(samples.iter().map(|s| self.log_density(s)).sum())
    }

    /// Draws `n` vectors: a component by its weight, then a Gaussian draw.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let m = rng.categorical(&self.weights);
                let mean = &self.means[m];
                let eps: Vec<f64> = (0..mean.len()).map(|_| rng.normal()).collect();
                match &self.covs[m] {
                    Covariance::Diagonal(v) => mean
                        .iter()
                        .zip(v)
                        .zip(&eps)
                        .map(|((mu, var), e)| mu + var.sqrt() * e)
                        .collect(),
                    Covariance::Full { chol, .. } => {
                        let shift = chol * DVector::from_vec(eps);
                        mean.iter()
                            .zip(shift.iter())
                            .map(|(mu, s)| mu + s)
                            .collect()
                    }
                }
            })
            .collect()
    }

    /// Posterior over components for `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let terms: Vec<f64> = (0..self.components())
            .map(|m| self.weights[m].ln() + self.covs[m].log_density(x, &self.means[m]))
            .collect();
        let lse = log_sum_exp(&terms);
        terms.iter().map(|t| (t - lse).exp()).collect()
    }
}

/// Fits a mixture to `samples` by EM.
pub fn fit_em(samples: &[Vec<f64>], cfg: &EmConfig) -> Result<MogFit> {
    cfg.validate()?;
    let dim = validate_samples(samples)?;
    let n = samples.len();
    let mut rng = Rng::new(cfg.seed);
    let seeds = farthest_point_seeds(samples, cfg.components.min(n), &mut rng);
    let m = seeds.len();

    let global_mean: Vec<f64> = (0..dim)
        .map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n as f64)
        .collect();
    let global_var: Vec<f64> = (0..dim)
        .map(|j| {
            let v = samples
                .iter()
                .map(|s| (s[j] - global_mean[j]).powi(2))
                .sum::<f64>()
                / n as f64;
            v.max(cfg.var_floor)
        })
        .collect();
    let init_cov = || match cfg.covariance {
        CovarianceKind::Diagonal => Covariance::Diagonal(global_var.clone()),
        CovarianceKind::Full => Covariance::full(
            DMatrix::from_diagonal(&DVector::from_vec(global_var.clone())),
            cfg.var_floor,
        ),
    };
    let mut mog = Mog {
        weights: vec![1.0 / m as f64; m],
        means: seeds.iter().map(|&i| samples[i].clone()).collect(),
        covs: (0..m).map(|_| init_cov()).collect(),
    };

    let mut trace = Vec::new();
    let mut reseeds = 0;
    let mut resp = vec![vec![0.0; m]; n];
    loop {
        // E-step
        let mut ll = 0.0;
        for (i, x) in samples.iter().enumerate() {
            let terms: Vec<f64> = (0..m)
                .map(|k| mog.weights[k].ln() + mog.covs[k].log_density(x, &mog.means[k]))
                .collect();
            let lse = log_sum_exp(&terms);
            ll += lse;
            for k in 0..m {
                resp[i][k] = (terms[k] - lse).exp();
            }
        }
        if let Some(&prev) = trace.last() {
            trace.push(ll);
            let gain = (ll - prev) / f64::abs(prev).max(f64::MIN_POSITIVE);
            if gain < cfg.tol {
                break;
            }
        } else {
            trace.push(ll);
        }
        if trace.len() > cfg.max_iters {
            break;
        }

        // M-step
        let mut next_weights = Vec::with_capacity(m);
        let mut next_means = Vec::with_capacity(m);
        let mut next_covs = Vec::with_capacity(m);
        for k in 0..m {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk <= 0.0 {
                reseeds += 1;
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = mog
                            .means
                            .iter()
                            .map(|mu| sq_dist(&samples[a], mu))
                            .fold(f64::INFINITY, f64::min);
                        let db = mog
                            .means
                            .iter()
                            .map(|mu| sq_dist(&samples[b], mu))
                            .fold(f64::INFINITY, f64::min);
                        da.partial_cmp(&db)
                            .expect("finite distances")
                            .then(b.cmp(&a))
                    })
                    .expect("nonempty");
                next_weights.push(1.0 / n as f64);
                next_means.push(samples[far].clone());
                next_covs.push(init_cov());
                continue;
            }
            let mean: Vec<f64> = (0..dim)
                .map(|j| {
                    samples
                        .iter()
                        .zip(&resp)
                        .map(|(x, r)| r[k] * x[j])
                        .sum::<f64>()
                        / nk
                })
                .collect();
            let cov = match cfg.covariance {
                CovarianceKind::Diagonal => Covariance::Diagonal(
                    (0..dim)
                        .map(|j| {
                            let v = samples
                                .iter()
                                .zip(&resp)
                                .map(|(x, r)| r[k] * (x[j] - mean[j]).powi(2))
                                .sum::<f64>()
                                / nk;
                            v.max(cfg.var_floor)
                        })
                        .collect(),
                ),
                CovarianceKind::Full => {
                    let mut c = DMatrix::zeros(dim, dim);
                    for (x, r) in samples.iter().zip(&resp) {
                        let d =
                            DVector::from_iterator(dim, x.iter().zip(&mean).map(|(a, b)| a - b));
                        c += (&d * d.transpose()) * r[k];
                    }
                    Covariance::full(c / nk, cfg.var_floor)
                }
            };
            next_weights.push(nk / n as f64);
            next_means.push(mean);
            next_covs.push(cov);
        }
        let total: f64 = next_weights.iter().sum();
        mog = Mog {
            weights: next_weights.iter().map(|w| w / total).collect(),
            means: next_means,
            covs: next_covs,
        };
    }
    Ok(MogFit {
        mog,
        log_likelihoods: trace,
        reseeds,
    })
}

/// Fitted mixtures keyed by class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MogBank {
    pub mixtures: BTreeMap<ClassId, Mog>,
}

const BANK_MAGIC: &[u8; 8] = b"STARMOGB";

impl MogBank {
    pub fn insert(&mut self, class: ClassId, mog: Mog) {
        self.mixtures.insert(class, mog);
    }

    pub fn get(&self, class: ClassId) -> Result<&Mog> {
        self.mixtures.get(&class).ok_or(Error::MissingMog(class))
    }

    pub fn len(&self) -> usize {
        self.mixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixtures.is_empty()
    }

    /// `n` synthetic rows per class of `classes`, grouped by class, with the
    /// class of each row.
    pub fn sample_classes(
        &self,
        classes: &[ClassId],
        n: usize,
        rng: &mut Rng,
    ) -> Result<(Vec<Vec<f64>>, Vec<ClassId>)> {
        let mut rows = Vec::with_capacity(classes.len() * n);
        let mut labels = Vec::with_capacity(classes.len() * n);
        for &c in classes {
            rows.extend(self.get(c)?.sample(n, rng));
            labels.extend(std::iter::repeat_n(c, n));
        }
        Ok((rows, labels))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(BANK_MAGIC, 1);
        w.u32(self.mixtures.len() as u32);
        for (&class, mog) in &self.mixtures {
            let full = matches!(mog.covs.first(), Some(Covariance::Full { .. }));
            w.u64(class as u64);
            w.u32(mog.components() as u32);
            w.u32(mog.dim() as u32);
            w.u8(full as u8);
            w.f64s(&mog.weights);
            for (mean, cov) in mog.means.iter().zip(&mog.covs) {
                w.f64s(mean);
                match cov {
                    Covariance::Diagonal(v) => w.f64s(v),
                    Covariance::Full { cov, .. } => w.f64s(cov.as_slice()),
                }
            }
        }
        w.save(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let mut r = Reader::new(&bytes, BANK_MAGIC, 1, "mixture bank")?;
        let mut bank = Self::default();
        for _ in 0..r.u32()? {
            let class = r.u64()? as ClassId;
            let m = r.u32()? as usize;
            let dim = r.u32()? as usize;
            let full = r.u8()? != 0;
            let weights = r.f64s(m)?;
            let mut means = Vec::with_capacity(m);
            let mut covs = Vec::with_capacity(m);
            for _ in 0..m {
                means.push(r.f64s(dim)?);
                covs.push(if full {
                    let cov = DMatrix::from_vec(dim, dim, r.f64s(dim * dim)?);
                    let chol = cov
                        .clone()
                        .cholesky()
                        .ok_or_else(|| {
                            Error::Format(format!(
                                "class {class}: covariance not positive definite"
                            ))
                        })?
                        .l();
                    Covariance::Full { cov, chol }
                } else {
                    Covariance::Diagonal(r.f64s(dim)?)
                });
            }
            bank.insert(
                class,
                Mog {
                    weights,
                    means,
                    covs,
                },
            );
        }
        r.finish()?;
        Ok(bank)
    }
}
