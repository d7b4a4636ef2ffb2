use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Constant,
    /// `1 / (mean_i |p_ψ(x_θ^i | x̃_t) − p_φ(x_θ^i | x̃_t)| + δ)`
    DmdNormalizer,
}

/// Per-sequence scale `w(t)` on the divergence gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeight {
    #[serde(default)]
    pub mode: WeightMode,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    1e-3
}

impl Default for LossWeight {
    fn default() -> Self {
        Self {
            mode: WeightMode::Constant,
            delta: default_delta(),
        }
    }
}

/// `p_psi_sel` and `p_phi_sel` are the two models' probabilities of the
/// generated token at each masked position.
pub fn loss_weight(weight: &LossWeight, p_psi_sel: &[f64], p_phi_sel: &[f64]) -> f64 {
    match weight.mode {
        WeightMode::Constant => 1.0,
        WeightMode::DmdNormalizer => {
            let n = p_psi_sel.len().min(p_phi_sel.len());
            let mean = if n == 0 {
                0.0
            } else {
                p_psi_sel.iter().zip(p_phi_sel).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64
            };
            1.0 / (mean + weight.delta)
        }
    }
}
