//! Token-level divergences between a teacher distribution `p_φ` and a
//! student distribution `p_ψ`, and their closed-form gradients with respect
//! to the student's logits.
//!
//! All logs use a probability floor of [`PROB_FLOOR`]; the finite-difference
//! oracles evaluate [`div_value`] and therefore see the same floor.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `Σp = 1` accepted by [`TokenDistPair::new`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Generator `f` of an f-divergence `D_f = Σ_k p_ψ,k · f(p_φ,k / p_ψ,k)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum FGenerator {
    /// `u log u`
    ForwardKl,
    /// `−log u`
    ReverseKl,
    /// `((1 − β)u − β) log u`
    Jeffrey { beta: f64 },
    /// `−(u + 1) log((1 + u)/2) + u log u`
    JensenShannon,
    /// `(√u − 1)²`
    SquaredHellinger,
    /// `(u^(1−α) − (1 − α)u − α) / (α(α − 1))`, `α ∉ {0, 1}`
    Alpha { alpha: f64 },
    /// User-supplied `f` and `f′`.
    #[serde(skip)]
    Custom {
        f: fn(f64) -> f64,
        df: fn(f64) -> f64,
    },
}

impl PartialEq for FGenerator {
    /// Custom generators compare by function address.
    fn eq(&self, other: &Self) -> bool {
        use FGenerator::*;
        match (self, other) {
            (ForwardKl, ForwardKl) | (ReverseKl, ReverseKl) | (JensenShannon, JensenShannon) => true,
            (SquaredHellinger, SquaredHellinger) => true,
            (Jeffrey { beta: a }, Jeffrey { beta: b }) => a == b,
            (Alpha { alpha: a }, Alpha { alpha: b }) => a == b,
            (Custom { f, df }, Custom { f: g, df: dg }) => {
                std::ptr::fn_addr_eq(*f, *g) && std::ptr::fn_addr_eq(*df, *dg)
            }
            _ => false,
        }
    }
}

impl FGenerator {
    pub fn f(&self, u: f64) -> f64 {
        match *self {
            FGenerator::ForwardKl => u * u.ln(),
            FGenerator::ReverseKl => -u.ln(),
            FGenerator::Jeffrey { beta } => ((1.0 - beta) * u - beta) * u.ln(),
            FGenerator::JensenShannon => -(u + 1.0) * ((1.0 + u) / 2.0).ln() + u * u.ln(),
            FGenerator::SquaredHellinger => (u.sqrt() - 1.0).powi(2),
            FGenerator::Alpha { alpha } => (u.powf(1.0 - alpha) - (1.0 - alpha) * u - alpha) / (alpha * (alpha - 1.0)),
            FGenerator::Custom { f, .. } => f(u),
        }
    }

    pub fn df(&self, u: f64) -> f64 {
        match *self {
            FGenerator::ForwardKl => u.ln() + 1.0,
            FGenerator::ReverseKl => -1.0 / u,
            FGenerator::Jeffrey { beta } => (1.0 - beta) * u.ln() + ((1.0 - beta) * u - beta) / u,
            FGenerator::JensenShannon => u.ln() - ((1.0 + u) / 2.0).ln(),
            FGenerator::SquaredHellinger => 1.0 - 1.0 / u.sqrt(),
            FGenerator::Alpha { alpha } => (1.0 - alpha) * (u.powf(-alpha) - 1.0) / (alpha * (alpha - 1.0)),
            FGenerator::Custom { df, .. } => df(u),
        }
    }

    /// Checks `f(1) = 0` (and `α ∉ {0, 1}`).
    pub fn validate(&self) -> Result<()> {
        if let FGenerator::Alpha { alpha } = self {
            if *alpha == 0.0 || *alpha == 1.0 {
                return Err(invalid("alpha-divergence needs alpha outside {0, 1}"));
            }
        }
        let f1 = self.f(1.0);
        if !(f1.abs() < 1e-12) {
            return Err(invalid(format!("generator must satisfy f(1) = 0, got f(1) = {f1}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DivergenceSpec {
    /// `KL(p_φ ‖ p_ψ)`
    Fkl,
    /// `KL(p_ψ ‖ p_φ)`
    Rkl,
    /// `(1 − β)·FKL + β·RKL`
    Jeffrey { beta: f64 },
    FDiv { generator: FGenerator },
}

impl DivergenceSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DivergenceSpec::FDiv { generator } => generator.validate(),
            DivergenceSpec::Jeffrey { beta } if !beta.is_finite() => Err(invalid("beta must be finite")),
            _ => Ok(()),
        }
    }
}

/// Teacher and student distributions at one token position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistPair {
    teacher: Vec<f64>,
    student: Vec<f64>,
}

fn check_dist(p: &[f64], who: &str) -> Result<()> {
    if p.is_empty() {
        return Err(invalid(format!("{who} distribution is empty")));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(invalid(format!("{who} distribution has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(invalid(format!("{who} distribution sums to {s}")));
    }
    Ok(())
}

impl TokenDistPair {
    pub fn new(teacher: Vec<f64>, student: Vec<f64>) -> Result<Self> {
        if teacher.len() != student.len() {
            return Err(invalid(format!(
                "teacher has {} entries, student {}",
                teacher.len(),
                student.len()
            )));
        }
        check_dist(&teacher, "teacher")?;
        check_dist(&student, "student")?;
        Ok(Self { teacher, student })
    }

    pub fn teacher(&self) -> &[f64] {
        &self.teacher
    }

    pub fn student(&self) -> &[f64] {
        &self.student
    }

    pub fn vocab(&self) -> usize {
        self.teacher.len()
    }
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn fkl(pair: &TokenDistPair) -> f64 {
    pair.teacher
        .iter()
        .zip(&pair.student)
        .filter(|(t, _)| **t > 0.0)
        .map(|(&t, &s)| t * (floored_ln(t) - floored_ln(s)))
        .sum()
}

fn rkl(pair: &TokenDistPair) -> f64 {
    pair.teacher
        .iter()
        .zip(&pair.student)
        .filter(|(_, s)| **s > 0.0)
        .map(|(&t, &s)| s * (floored_ln(s) - floored_ln(t)))
        .sum()
}

fn ratios(pair: &TokenDistPair) -> impl Iterator<Item = f64> + '_ {
    pair.teacher
        .iter()
        .zip(&pair.student)
        .map(|(&t, &s)| t.max(PROB_FLOOR) / s.max(PROB_FLOOR))
}

pub fn div_value(spec: &DivergenceSpec, pair: &TokenDistPair) -> f64 {
    match spec {
        DivergenceSpec::Fkl => fkl(pair),
        DivergenceSpec::Rkl => rkl(pair),
        DivergenceSpec::Jeffrey { beta } => (1.0 - beta) * fkl(pair) + beta * rkl(pair),
        DivergenceSpec::FDiv { generator } => pair
            .student
            .iter()
            .zip(ratios(pair))
            .map(|(&s, u)| s * generator.f(u))
            .sum(),
    }
}

/// `∇_z FKL = p_ψ − p_φ`
pub fn fkl_grad(pair: &TokenDistPair) -> Vec<f64> {
    pair.student.iter().zip(&pair.teacher).map(|(s, t)| s - t).collect()
}

/// `∇_z RKL_j = p_ψ,j · (log(p_ψ,j / p_φ,j) − RKL)`
pub fn rkl_grad(pair: &TokenDistPair) -> Vec<f64> {
    let d = rkl(pair);
    pair.student
        .iter()
        .zip(&pair.teacher)
        .map(|(&s, &t)| s * (floored_ln(s) - floored_ln(t) - d))
        .collect()
}

/// `(1 − β)·∇FKL + β·∇RKL`; any real `β` is accepted.
pub fn jeffrey_grad(beta: f64, pair: &TokenDistPair) -> Vec<f64> {
    fkl_grad(pair)
        .into_iter()
        .zip(rkl_grad(pair))
        .map(|(f, r)| (1.0 - beta) * f + beta * r)
        .collect()
}

/// `∇_z D_f,j = p_ψ,j · (h_j − Σ_k p_ψ,k h_k)` with `h = f(u) − u f′(u)`,
/// `u = p_φ / p_ψ`.
pub fn fdiv_grad(generator: &FGenerator, pair: &TokenDistPair) -> Result<Vec<f64>> {
    let h: Vec<f64> = ratios(pair).map(|u| generator.f(u) - u * generator.df(u)).collect();
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "f-divergence gradient overflowed: density ratio outside the representable range".into(),
        ));
    }
    let mean: f64 = pair.student.iter().zip(&h).map(|(s, h)| s * h).sum();
    Ok(pair.student.iter().zip(&h).map(|(s, h)| s * (h - mean)).collect())
}

/// Closed-form gradient for any spec.
pub fn div_grad(spec: &DivergenceSpec, pair: &TokenDistPair) -> Result<Vec<f64>> {
    match spec {
        DivergenceSpec::Fkl => Ok(fkl_grad(pair)),
        DivergenceSpec::Rkl => Ok(rkl_grad(pair)),
        DivergenceSpec::Jeffrey { beta } => Ok(jeffrey_grad(*beta, pair)),
        DivergenceSpec::FDiv { generator } => fdiv_grad(generator, pair),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(t: &[f64], s: &[f64]) -> TokenDistPair {
        TokenDistPair::new(t.to_vec(), s.to_vec()).unwrap()
    }

    #[test]
    fn worked_examples() {
        let p = pair(&[0.9, 0.1], &[0.5, 0.5]);
        assert!((div_value(&DivergenceSpec::Fkl, &p) - 0.368064).abs() < 1e-6);
        assert!((div_value(&DivergenceSpec::Rkl, &p) - 0.510826).abs() < 1e-6);
        let g = rkl_grad(&p);
        assert!((g[0] + 0.549306).abs() < 1e-6 && (g[1] - 0.549306).abs() < 1e-6);
        let g = fkl_grad(&pair(&[0.75, 0.25], &[0.5, 0.5]));
        assert_eq!(g, vec![-0.25, 0.25]);
    }

    #[test]
    fn identical_pair_has_zero_value_and_gradient() {
        let p = pair(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]);
        for spec in [
            DivergenceSpec::Fkl,
            DivergenceSpec::Rkl,
            DivergenceSpec::Jeffrey { beta: 0.3 },
            DivergenceSpec::FDiv {
                generator: FGenerator::SquaredHellinger,
            },
        ] {
            assert_eq!(div_value(&spec, &p), 0.0);
            assert!(div_grad(&spec, &p).unwrap().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn invalid_pairs_rejected() {
        assert!(TokenDistPair::new(vec![0.5, 0.5], vec![1.0]).is_err());
        assert!(TokenDistPair::new(vec![0.5, 0.6], vec![0.5, 0.5]).is_err());
        assert!(TokenDistPair::new(vec![1.5, -0.5], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn generators_vanish_at_one() {
        for g in [
            FGenerator::ForwardKl,
            FGenerator::ReverseKl,
            FGenerator::Jeffrey { beta: -0.2 },
            FGenerator::JensenShannon,
            FGenerator::SquaredHellinger,
            FGenerator::Alpha { alpha: 0.5 },
        ] {
            g.validate().unwrap();
        }
        assert!(FGenerator::Alpha { alpha: 1.0 }.validate().is_err());
        let bad = FGenerator::Custom { f: |u| u, df: |_| 1.0 };
        assert!(bad.validate().is_err());
    }
}
