//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use idguide::metrics::EmbeddingSet;
use idguide::testbed::{ConditionSet, MixtureWorld};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mixture density evaluated directly (no log-sum-exp), over the modes whose
/// labels match every non-null condition.
pub struct Oracle<'a> {
    pub world: &'a MixtureWorld,
    pub ab: f64,
    pub temperature: f64,
}

impl Oracle<'_> {
    fn components(&self, cond: &ConditionSet) -> Vec<(f64, Vec<f64>, f64)> {
        self.world
            .modes()
            .iter()
            .zip(self.world.prior())
            .filter(|(m, _)| {
                cond.text_class.as_ref().is_none_or(|c| *c == m.text_class)
                    && cond.identity.as_ref().is_none_or(|c| *c == m.identity)
            })
            .map(|(m, &p)| {
                let mean = m.mean.iter().map(|v| self.ab.sqrt() * v).collect();
                let var = self.ab * m.std * m.std * self.temperature + (1.0 - self.ab);
                (p, mean, var)
            })
            .collect()
    }

    pub fn density(&self, x: &[f64], cond: &ConditionSet) -> f64 {
        let d = x.len() as f64;
        self.components(cond)
            .iter()
            .map(|(p, mean, var)| {
                let r2: f64 = x.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
                p * (2.0 * std::f64::consts::PI * var).powf(-d / 2.0) * (-0.5 * r2 / var).exp()
            })
            .sum()
    }

    /// `sum_k w_k N_k (m_k - x) / v_k / sum_k w_k N_k`.
    pub fn score(&self, x: &[f64], cond: &ConditionSet) -> Vec<f64> {
        let d = x.len() as f64;
        let mut num = vec![0.0; x.len()];
        let mut den = 0.0;
        for (p, mean, var) in self.components(cond) {
            let r2: f64 = x.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
            let w = p * (2.0 * std::f64::consts::PI * var).powf(-d / 2.0) * (-0.5 * r2 / var).exp();
            den += w;
            for i in 0..x.len() {
                num[i] += w * (mean[i] - x[i]) / var;
            }
        }
        num.into_iter().map(|v| v / den).collect()
    }
}

pub fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|a| a / n).collect()
}

/// A vector whose cosine to `reference` is exactly `c`, with length `scale`.
pub fn at_cosine(rng: &mut impl Rng, reference: &[f64], c: f64, scale: f64) -> Vec<f64> {
    let r = unit(reference);
    let mut u = gaussian_vec(rng, r.len());
    let proj = dot(&u, &r);
    u.iter_mut().zip(&r).for_each(|(a, b)| *a -= proj * b);
    let u = unit(&u);
    let s = (1.0 - c * c).max(0.0).sqrt();
    r.iter().zip(&u).map(|(a, b)| scale * (c * a + s * b)).collect()
}

/// Twenty embedding sets with prescribed frame cosines, paired with the
/// hand-computed mean of the clamped cosines.
pub fn identity_fixtures() -> Vec<(EmbeddingSet, f64)> {
    let cosine_sets: [&[f64]; 20] = [
        &[1.0],
        &[0.0],
        &[0.8, 0.6, -0.2],
        &[0.5, 0.5],
        &[-0.9, -0.1],
        &[0.25, 0.75],
        &[0.1, 0.2, 0.3, 0.4],
        &[0.9, -0.9, 0.9, -0.9],
        &[0.33, 0.66, 0.99],
        &[0.7],
        &[0.45, 0.55, 0.65, 0.35, 0.15],
        &[-0.5, 0.5, 0.0],
        &[0.95, 0.94, 0.93, 0.92, 0.91, 0.9],
        &[0.2, -0.3, 0.4, -0.5, 0.6],
        &[0.123, 0.456],
        &[0.6, 0.6, 0.6, 0.6],
        &[0.05, 0.15, 0.25],
        &[0.81, 0.0, 0.0, 0.19],
        &[1.0, 0.0, -1.0],
        &[0.3125, 0.6875, 0.5, 0.875, 0.125, 0.25, 0.75, 0.0625],
    ];
    let expected: [f64; 20] = [
        1.0,
        0.0,
        1.4 / 3.0,
        0.5,
        0.0,
        0.5,
        0.25,
        0.45,
        0.66,
        0.7,
        0.43,
        0.5 / 3.0,
        0.925,
        0.24,
        0.2895,
        0.6,
        0.15,
        0.25,
        1.0 / 3.0,
        0.4453125,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    cosine_sets
        .iter()
        .zip(expected)
        .enumerate()
        .map(|(i, (cosines, want))| {
            let dim = 3 + i % 6;
            let reference = gaussian_vec(&mut rng, dim);
            let frames: Vec<Vec<f64>> = cosines
                .iter()
                .map(|&c| {
                    let scale = rng.random_range(0.5..3.0);
                    at_cosine(&mut rng, &reference, c, scale)
                })
                .collect();
            (EmbeddingSet::new(&reference, &frames, "fixture").unwrap(), want)
        })
        .collect()
}

/// Haar-ish random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_rotation(rng: &mut impl Rng, dim: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

pub fn rotate(q: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (q * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec()
}

pub const PE_PROMPTS: [&str; 10] = [
    "A woman jogs along a beach at sunrise.",
    "A man plays the violin in a park.",
    "A chef slices vegetables in a busy kitchen.",
    "A girl rides a bicycle down a hill.",
    "An old man reads a newspaper on a bench.",
    "A boy kicks a ball across a field.",
    "A woman paints a mural on a brick wall.",
    "A man climbs a rocky cliff.",
    "A dancer spins on a wooden stage.",
    "A student writes notes in a library.",
];

pub const FACIAL_CLAUSES: [&str; 5] = [
    "with a round face and thick eyebrows",
    "who has freckles across the nose and green eyes",
    "with deep-set brown eyes and a square jaw",
    "with short curly hair and a high forehead",
    "with a thin mustache and sharp cheekbones",
];

fn stem(prompt: &str) -> &str {
    prompt.trim_end_matches('.')
}

/// Fifty `(T, T_c)` pairs in which `T` survives verbatim and only facial cues are added.
pub fn pe_accept_cases() -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (i, p) in PE_PROMPTS.iter().enumerate() {
        for (j, clause) in FACIAL_CLAUSES.iter().enumerate() {
            let t_c = match (i + j) % 3 {
                0 => format!("{} {clause}.", stem(p)),
                1 => format!("{}, {clause}.", stem(p)),
                _ => format!("{}  {clause}", stem(p)),
            };
            out.push((p.to_string(), t_c));
        }
    }
    out
}

/// Fifty `(T, T_c)` pairs that each break one rule.
pub fn pe_mutated_cases() -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (i, p) in PE_PROMPTS.iter().enumerate() {
        let clause = FACIAL_CLAUSES[i % FACIAL_CLAUSES.len()];
        let words: Vec<&str> = stem(p).split(' ').collect();
        for k in 0..5 {
            let t_c = match k {
                // one word of T replaced
                0 => {
                    let mut w = words.clone();
                    w[1] = "person";
                    format!("{} {clause}.", w.join(" "))
                }
                // one word of T dropped
                1 => {
                    let mut w = words.clone();
                    w.remove(words.len() - 1);
                    format!("{} {clause}.", w.join(" "))
                }
                // clothing added
                2 => format!("{} {clause}, wearing a red jacket.", stem(p)),
                // a second sentence
                3 => format!("{} {clause}. The light is soft.", stem(p)),
                // T paraphrased by reordering two words
                _ => {
                    let mut w = words.clone();
                    w.swap(1, 2);
                    format!("{} {clause}.", w.join(" "))
                }
            };
            out.push((p.to_string(), t_c));
        }
    }
    out
}

pub fn idguide(args: &[&str], cwd: &Path, envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_idguide"));
    cmd.args(args).current_dir(cwd).env_remove("RUST_LOG");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn idguide")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
