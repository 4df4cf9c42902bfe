//! Temperature-scaled cosine discriminator and in-batch contrastive losses.
//!
//! Row `n` of one view batch and row `n` of another are the congruent
//! pair; every other row of the second batch is a non-congruent view. The
//! directional loss is
//!
//! ```text
//! L(Z1, Z2) = (1/k) Σ_n −log( h(z1_n, z2_n) / Σ_{m≠n} h(z1_n, z2_m) ),
//! h(a, b)   = exp(cos(a, b) / τ)
//! ```
//!
//! with [`Denominator::IncludePositive`] adding the `m = n` term to the sum.
//! Plain functions over slices serve evaluation and checks; the `*_tape`
//! variants record the same arithmetic for training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastiveError {
    #[error("embedding has zero norm")]
    ZeroNormEmbedding,
    #[error("contrastive batch needs k >= 2, got {0}")]
    DegenerateBatch(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self, ContrastiveError> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(ContrastiveError::InvalidTemperature(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(DEFAULT_TAU)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = ContrastiveError;

    fn try_from(tau: f64) -> Result<Self, Self::Error> {
        Self::new(tau)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Which terms the loss denominator sums over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Non-congruent pairs only (`m ≠ n`).
    #[default]
    ExcludePositive,
    /// All `k` pairs including the congruent one.
    IncludePositive,
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64, ContrastiveError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(ContrastiveError::ShapeMismatch(format!(
            "embedding lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ContrastiveError::ZeroNormEmbedding);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `exp(cos(z1, z2) / τ)`.
pub fn discriminator(z1: &[f64], z2: &[f64], tau: Temperature) -> Result<f64, ContrastiveError> {
    Ok((cosine(z1, z2)? / tau.0).exp())
}

fn check_batch(z1: &[Vec<f64>], z2: &[Vec<f64>]) -> Result<usize, ContrastiveError> {
    if z1.len() != z2.len() {
        return Err(ContrastiveError::ShapeMismatch(format!(
            "batch sizes {} and {}",
            z1.len(),
            z2.len()
        )));
    }
    if z1.len() < 2 {
        return Err(ContrastiveError::DegenerateBatch(z1.len()));
    }
    Ok(z1.len())
}

/// Loss anchored on `z1`, iterating the non-congruent views over `z2`.
pub fn directional_loss(
    z1: &[Vec<f64>],
    z2: &[Vec<f64>],
    tau: Temperature,
    denominator: Denominator,
) -> Result<f64, ContrastiveError> {
    let k = check_batch(z1, z2)?;
    let mut total = 0.0;
    for n in 0..k {
        let logits = z2
            .iter()
            .map(|b| cosine(&z1[n], b).map(|c| c / tau.0))
            .collect::<Result<Vec<f64>, _>>()?;
        let terms = logits
            .iter()
            .enumerate()
            .filter(|&(m, _)| denominator == Denominator::IncludePositive || m != n)
            .map(|(_, &l)| l);
        let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
        let log_den = max + terms.map(|l| (l - max).exp()).sum::<f64>().ln();
        total += log_den - logits[n];
    }
    Ok(total / k as f64)
}

/// Sum of both directional losses.
pub fn total_loss(
    z1: &[Vec<f64>],
    z2: &[Vec<f64>],
    tau: Temperature,
    denominator: Denominator,
) -> Result<f64, ContrastiveError> {
    Ok(directional_loss(z1, z2, tau, denominator)? + directional_loss(z2, z1, tau, denominator)?)
}

/// Total loss summed over the three view pairs.
pub fn multiview_loss(
    z1: &[Vec<f64>],
    z2: &[Vec<f64>],
    z3: &[Vec<f64>],
    tau: Temperature,
    denominator: Denominator,
) -> Result<f64, ContrastiveError> {
    check_batch(z1, z3)?;
    Ok(total_loss(z1, z2, tau, denominator)?
        + total_loss(z1, z3, tau, denominator)?
        + total_loss(z2, z3, tau, denominator)?)
}

fn identity(k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[k, k]);
    for i in 0..k {
        t.data_mut()[i * k + i] = 1.0;
    }
    t
}

/// Directional loss over two `k x d'` batch matrices recorded on `tape`.
pub fn directional_loss_tape(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    tau: Temperature,
    denominator: Denominator,
) -> Result<Var, AutodiffError> {
    let (k, d1) = tape.value(z1).dims();
    let (k2, d2) = tape.value(z2).dims();
    if k != k2 || d1 != d2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "directional_loss",
            detail: format!("{k}x{d1} vs {k2}x{d2}"),
        });
    }
    if k < 2 {
        return Err(AutodiffError::InvalidArgument(format!("contrastive batch needs k >= 2, got {k}")));
    }
    let n1 = tape.row_normalize(z1)?;
    let n2 = tape.row_normalize(z2)?;
    let n2t = tape.transpose(n2)?;
    let cos = tape.matmul(n1, n2t)?;
    let logits = tape.scale(cos, 1.0 / tau.0)?;
    let h = tape.exp(logits)?;
    let eye = identity(k);
    let mask = match denominator {
        Denominator::ExcludePositive => {
            let data = eye.data().iter().map(|x| 1.0 - x).collect();
            Tensor::matrix(k, k, data)?
        }
        Denominator::IncludePositive => Tensor::matrix(k, k, vec![1.0; k * k])?,
    };
    let mask = tape.constant(mask);
    let eye = tape.constant(eye);
    let negatives = tape.mul(h, mask)?;
    let den = tape.sum_rows(negatives)?;
    let log_den = tape.log(den)?;
    let diag = tape.mul(logits, eye)?;
    let positive = tape.sum_rows(diag)?;
    let terms = tape.sub(log_den, positive)?;
    tape.mean(terms)
}

pub fn total_loss_tape(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    tau: Temperature,
    denominator: Denominator,
) -> Result<Var, AutodiffError> {
    let a = directional_loss_tape(tape, z1, z2, tau, denominator)?;
    let b = directional_loss_tape(tape, z2, z1, tau, denominator)?;
    tape.add(a, b)
}

/// Total loss over every pair of the given views.
pub fn multiview_loss_tape(
    tape: &mut Tape,
    views: &[Var],
    tau: Temperature,
    denominator: Denominator,
) -> Result<Var, AutodiffError> {
    if views.len() < 2 {
        return Err(AutodiffError::InvalidArgument("multiview loss needs at least two views".into()));
    }
    let mut acc: Option<Var> = None;
    for i in 0..views.len() {
        for j in i + 1..views.len() {
            let l = total_loss_tape(tape, views[i], views[j], tau, denominator)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, l)?,
                None => l,
            });
        }
    }
    Ok(acc.expect("at least one pair"))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::seed;
    use rand::Rng;

    const EX: Denominator = Denominator::ExcludePositive;

    fn t(tau: f64) -> Temperature {
        Temperature::new(tau).unwrap()
    }

    #[test]
    fn discriminator_examples() {
        let z = [0.3, -1.2, 2.0];
        assert!((discriminator(&z, &z, t(0.07)).unwrap() - (1.0f64 / 0.07).exp()).abs() < 1e-6);
        assert!((discriminator(&[1.0, 0.0], &[0.0, 3.0], t(0.07)).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = z.iter().map(|x| -x).collect();
        assert!((discriminator(&z, &neg, t(0.07)).unwrap() - (-1.0f64 / 0.07).exp()).abs() < 1e-15);
        assert_eq!(
            discriminator(&[0.0, 0.0], &[1.0, 0.0], t(0.07)),
            Err(ContrastiveError::ZeroNormEmbedding)
        );
        assert!(Temperature::new(0.0).is_err());
    }

    #[test]
    fn two_by_two_example() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((directional_loss(&z, &z, t(1.0), EX).unwrap() + 1.0).abs() < 1e-15);
        assert!((total_loss(&z, &z, t(1.0), EX).unwrap() + 2.0).abs() < 1e-15);
        assert!((multiview_loss(&z, &z, &z, t(1.0), EX).unwrap() + 6.0).abs() < 1e-14);
    }

    #[test]
    fn identical_embeddings_give_log_k_minus_one() {
        let z = vec![vec![0.5, 0.5, 0.1]; 5];
        assert!((directional_loss(&z, &z, t(0.07), EX).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((directional_loss(&z, &z, t(0.07), Denominator::IncludePositive).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let one = vec![vec![1.0, 0.0]];
        assert_eq!(directional_loss(&one, &one, t(0.07), EX), Err(ContrastiveError::DegenerateBatch(1)));
        let two = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let three = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        assert!(matches!(
            multiview_loss(&two, &two, &three, t(0.07), EX),
            Err(ContrastiveError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tape_matches_plain() {
        let mut rng = seed::rng(3);
        for denominator in [EX, Denominator::IncludePositive] {
            let z1: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let z2: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::from_rows(&z1).unwrap());
            let b = tape.constant(Tensor::from_rows(&z2).unwrap());
            let l = total_loss_tape(&mut tape, a, b, t(0.07), denominator).unwrap();
            let expected = total_loss(&z1, &z2, t(0.07), denominator).unwrap();
            assert!((tape.value(l).item() - expected).abs() < 1e-10);
        }
    }

    fn batch(seed: u64, k: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed);
        (0..k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn sharper_temperature_lowers_loss_when_positives_dominate() {
        // positives are small perturbations of their anchors
        let z1 = batch(5, 6, 4);
        let mut rng = seed::rng(6);
        let z2: Vec<Vec<f64>> = z1
            .iter()
            .map(|r| r.iter().map(|x| x + rng.gen_range(-0.01..0.01)).collect())
            .collect();
        for n in 0..6 {
            let pos = cosine(&z1[n], &z2[n]).unwrap();
            assert!((0..6).filter(|&m| m != n).all(|m| cosine(&z1[n], &z2[m]).unwrap() < pos));
        }
        let l: Vec<f64> = [0.08, 0.07, 0.05]
            .iter()
            .map(|&tau| directional_loss(&z1, &z2, t(tau), EX).unwrap())
            .collect();
        assert!(l[0] > l[1] && l[1] > l[2]);
    }

    proptest! {
        #[test]
        fn scale_invariance(seed in any::<u64>(), a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let z = batch(seed, 2, 5);
            let za: Vec<f64> = z[0].iter().map(|x| a * x).collect();
            let zb: Vec<f64> = z[1].iter().map(|x| b * x).collect();
            let base = discriminator(&z[0], &z[1], t(0.07)).unwrap();
            let scaled = discriminator(&za, &zb, t(0.07)).unwrap();
            prop_assert!(((base - scaled) / base).abs() < 1e-12);
        }

        #[test]
        fn row_permutation_leaves_loss_unchanged(seed in any::<u64>(), k in 2usize..6) {
            let z1 = batch(seed, k, 3);
            let z2 = batch(seed ^ 1, k, 3);
            let perm: Vec<usize> = (0..k).rev().collect();
            let p1: Vec<Vec<f64>> = perm.iter().map(|&i| z1[i].clone()).collect();
            let p2: Vec<Vec<f64>> = perm.iter().map(|&i| z2[i].clone()).collect();
            let a = total_loss(&z1, &z2, t(0.07), EX).unwrap();
            let b = total_loss(&p1, &p2, t(0.07), EX).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn aligning_the_positive_lowers_loss(seed in any::<u64>(), angle in 0.1f64..3.0, step in 0.05f64..0.95) {
            // row 0 lives in the (e3, e4) plane and the others in (e1, e2), so
            // only the congruent cosine of row 0 moves
            let mut rng = seed::rng(seed);
            let mut z1: Vec<Vec<f64>> = Vec::new();
            let mut z2: Vec<Vec<f64>> = Vec::new();
            z1.push(vec![0.0, 0.0, 1.0, 0.0]);
            z2.push(vec![0.0, 0.0, angle.cos(), angle.sin()]);
            for _ in 0..3 {
                z1.push(vec![rng.gen_range(0.1..1.0), rng.gen_range(-1.0..1.0), 0.0, 0.0]);
                z2.push(vec![rng.gen_range(0.1..1.0), rng.gen_range(-1.0..1.0), 0.0, 0.0]);
            }
            let before = directional_loss(&z1, &z2, t(0.07), EX).unwrap();
            let closer = angle * (1.0 - step);
            z2[0] = vec![0.0, 0.0, closer.cos(), closer.sin()];
            let after = directional_loss(&z1, &z2, t(0.07), EX).unwrap();
            prop_assert!(after < before);
        }
    }
}
