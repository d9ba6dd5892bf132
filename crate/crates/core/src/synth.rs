//! Synthetic C-STS benchmark with a planted low-rank answer space.
//!
//! Each record gets two unit "answer" vectors `a1, a2` in a `latent`-dim
//! space whose cosine `t` is drawn uniformly from [-1, 1]; the rating is `t`
//! mapped linearly onto [1, 5] and rounded to `rating_step`. A fixed random
//! orthonormal `R` (d x latent) embeds answers into the store:
//!
//! ```text
//! cond_given_si      = R a_i + b_c + noise
//! sent_i_given_c     = 0.6 R a_i + q_i + b_c + noise     (q_i: sentence-specific content)
//! cond_unconditional = b_c
//! ```
//!
//! `b_c` is a per-condition bias: a shared offset of norm `common_offset`
//! plus a per-condition deviation of norm `condition_spread`. The linear map
//! `R^T` is emitted as the ground-truth projection.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CstsRecord;
use crate::embstore::{EmbeddingStore, Role, StoreError};
use crate::projection::{HeadKind, HeadSpec, ProjectionModel};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_records: usize,
    pub d: usize,
    pub latent: usize,
    /// Per-coordinate standard deviation of the noise on conditional rows.
    pub noise_sigma: f64,
    pub n_conditions: usize,
    pub seed: u64,
    pub common_offset: f64,
    pub condition_spread: f64,
    /// Rating quantum on the 1–5 scale; 0 keeps ratings continuous.
    pub rating_step: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_records: 2500,
            d: 64,
            latent: 16,
            noise_sigma: 0.05,
            n_conditions: 250,
            seed: 0,
            common_offset: 3.0,
            condition_spread: 1.0,
            rating_step: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::ConfigInvalid(m));
        if self.n_records == 0 {
            return bad("n_records must be positive".into());
        }
        if self.latent < 2 || self.latent > self.d {
            return bad(format!("need 2 <= latent <= d, got latent {} d {}", self.latent, self.d));
        }
        if self.n_conditions == 0 || self.n_conditions > self.n_records {
            return bad(format!(
                "need 1 <= n_conditions <= n_records, got {}",
                self.n_conditions
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("common_offset", self.common_offset),
            ("condition_spread", self.condition_spread),
            ("rating_step", self.rating_step),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub records: Vec<CstsRecord>,
    pub store: EmbeddingStore,
    /// Linear head `R^T`; recovers the answer vectors from noiseless
    /// condition-subtracted rows.
    pub ground_truth: ProjectionModel,
    /// Exact `cos(a1, a2)` per record, before rating quantization.
    pub answer_cosines: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn scaled_direction(rng: &mut ChaCha8Rng, n: usize, length: f64) -> Vec<f64> {
    let mut v = gaussian(rng, n);
    normalize(&mut v);
    v.iter_mut().for_each(|x| *x *= length);
    v
}

/// Columns form an orthonormal basis of a random `cols`-dim subspace.
fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((rows, cols));
    for j in 0..cols {
        let mut v = gaussian(rng, rows);
        // modified Gram-Schmidt, twice for stability
        for _ in 0..2 {
            for i in 0..j {
                let col = q.column(i);
                let proj: f64 = col.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(col.iter()).for_each(|(x, c)| *x -= proj * c);
            }
        }
        normalize(&mut v);
        q.column_mut(j).assign(&ndarray::aview1(&v));
    }
    q
}

/// Unit `a1` and unit `a2` with `a1 . a2 = t`.
fn answer_pair(rng: &mut ChaCha8Rng, latent: usize, t: f64) -> (Vec<f64>, Vec<f64>) {
    let mut a1 = gaussian(rng, latent);
    normalize(&mut a1);
    let mut o = gaussian(rng, latent);
    for _ in 0..2 {
        let proj: f64 = o.iter().zip(&a1).map(|(x, y)| x * y).sum();
        o.iter_mut().zip(&a1).for_each(|(x, y)| *x -= proj * y);
    }
    normalize(&mut o);
    let s = (1.0 - t * t).max(0.0).sqrt();
    let a2 = a1.iter().zip(&o).map(|(x, y)| t * x + s * y).collect();
    (a1, a2)
}

fn quantize(t: f64, step: f64) -> f64 {
    let raw = 1.0 + 2.0 * (t + 1.0);
    let r = if step > 0.0 { (raw / step).round() * step } else { raw };
    r.clamp(1.0, 5.0)
}

pub fn synth(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    let SynthConfig { d, latent, .. } = *config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let r = random_orthonormal(&mut rng, d, latent);
    let common = scaled_direction(&mut rng, d, config.common_offset);
    let biases: Vec<Vec<f64>> = (0..config.n_conditions)
        .map(|_| {
            let spread = scaled_direction(&mut rng, d, config.condition_spread);
            common.iter().zip(spread).map(|(a, b)| a + b).collect()
        })
        .collect();

    let embed = |a: &[f64], scale: f64| -> Vec<f64> {
        r.dot(&ndarray::aview1(a)).iter().map(|x| x * scale).collect()
    };

    let mut records = Vec::with_capacity(config.n_records);
    let mut answer_cosines = Vec::with_capacity(config.n_records);
    let mut store = EmbeddingStore::new(d)?;
    for i in 0..config.n_records {
        let c = i % config.n_conditions;
        let condition = format!("condition {c}");
        let t: f64 = rng.random_range(-1.0..=1.0);
        let (a1, a2) = answer_pair(&mut rng, latent, t);
        let record = CstsRecord {
            id: i.to_string(),
            sentence1: format!("sentence {i}a"),
            sentence2: format!("sentence {i}b"),
            condition: condition.clone(),
            rating: quantize(t, config.rating_step),
        };
        let bias = &biases[c];
        let row = |base: Vec<f64>, extra: Option<&[f64]>, rng: &mut ChaCha8Rng| -> Vec<f32> {
            base.iter()
                .enumerate()
                .map(|(j, x)| {
                    let noise: f64 = StandardNormal.sample(rng);
                    let e = extra.map_or(0.0, |v| v[j]);
                    (x + e + bias[j] + config.noise_sigma * noise) as f32
                })
                .collect()
        };
        let cond1 = row(embed(&a1, 1.0), None, &mut rng);
        let cond2 = row(embed(&a2, 1.0), None, &mut rng);
        let q1 = scaled_direction(&mut rng, d, 1.0);
        let q2 = scaled_direction(&mut rng, d, 1.0);
        let sent1 = row(embed(&a1, 0.6), Some(&q1), &mut rng);
        let sent2 = row(embed(&a2, 0.6), Some(&q2), &mut rng);
        store.push(record.id.clone(), Role::CondGivenS1, &condition, &cond1)?;
        store.push(record.id.clone(), Role::CondGivenS2, &condition, &cond2)?;
        store.push(record.id.clone(), Role::Sent1GivenC, &condition, &sent1)?;
        store.push(record.id.clone(), Role::Sent2GivenC, &condition, &sent2)?;
        let unconditional: Vec<f32> = bias.iter().map(|&x| x as f32).collect();
        store.push_unconditional(&condition, &unconditional)?;
        answer_cosines.push(a1.iter().zip(&a2).map(|(x, y)| x * y).sum());
        records.push(record);
    }

    let ground_truth = ProjectionModel::from_weights(
        HeadSpec::new(HeadKind::Linear, latent),
        0.0,
        vec![r.t().to_owned()],
    )
    .expect("orthonormal embedding is a valid head");
    Ok(SynthOutput {
        records,
        store,
        ground_truth,
        answer_cosines,
    })
}
