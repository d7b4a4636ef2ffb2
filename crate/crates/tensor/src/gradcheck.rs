//! Central finite differences, used as an independent oracle for the
//! backward rules.

use crate::array::Array;
use crate::error::Result;
use crate::tape::{Tape, Var};

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `max|a - b| / max(max|b|, floor)`: error relative to the oracle's scale.
pub fn relative_error(a: &[f64], oracle: &[f64], floor: f64) -> f64 {
    let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    let diff = a.iter().zip(oracle).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all inputs.
    pub max_rel_error: f64,
    pub analytic: Vec<Array>,
    pub numeric: Vec<Vec<f64>>,
}

/// Compares `backward` against central differences for a scalar function
/// built on a fresh tape from `inputs`.
pub fn check_gradients<F>(inputs: &[Array], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|a| tape.leaf(a.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Array> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("leaf requires grad"))
        .collect();

    let eval = |values: &[Array]| -> f64 {
        let mut t = Tape::unchecked();
        let vs: Vec<Var> = values.iter().map(|a| t.leaf(a.clone(), false).expect("leaf")).collect();
        build(&mut t, &vs).map(|r| t.value(r).item()).unwrap_or(f64::NAN)
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let fd = finite_difference(
            |x| {
                let mut values = inputs.to_vec();
                values[which] = Array::new(input.shape().to_vec(), x.to_vec()).expect("same shape");
                eval(&values)
            },
            input.data(),
            step,
        );
        max_rel_error = max_rel_error.max(relative_error(analytic[which].data(), &fd, 1e-8));
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error,
        analytic,
        numeric,
    })
}
