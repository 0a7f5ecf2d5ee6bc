//! Central finite-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::params::{Bindings, ParameterSet};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |numeric|) over checked coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the taped gradient of the scalar function `f` with central
/// differences of step `h` for every trainable parameter.
///
/// At most `coords_per_param` coordinates of each tensor are perturbed,
/// spread evenly across it. `f` is evaluated twice at the unperturbed point
/// and must return bit-identical values.
pub fn grad_check<F, E>(
    params: &mut ParameterSet,
    h: f64,
    coords_per_param: usize,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var, E>,
    E: From<TensorError>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(TensorError::Contract(format!("grad_check step {h} outside [1e-7, 1e-4]")).into());
    }
    let eval = |params: &ParameterSet| -> Result<f64, E> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = f(&mut tape, &b)?;
        Ok(tape.item(out)?)
    };

    let mut tape = Tape::new();
    let bindings = params.bind(&mut tape);
    let out = f(&mut tape, &bindings)?;
    let base = tape.item(out)?;
    tape.backward(out)?;
    let repeat = eval(params)?;
    if base.to_bits() != repeat.to_bits() {
        return Err(TensorError::Determinism {
            first: base,
            second: repeat,
        }
        .into());
    }

    let names: Vec<String> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for name in names {
        let var = bindings.get(&name)?;
        let numel = params.get(&name).map(|t| t.numel()).unwrap_or(0);
        let analytic = tape.grad(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let stride = (numel / coords_per_param.max(1)).max(1);
        for idx in (0..numel).step_by(stride).take(coords_per_param.max(1)) {
            let original = params.get(&name).expect("present").values()[idx];
            set(params, &name, idx, original + h);
            let plus = eval(params)?;
            set(params, &name, idx, original - h);
            let minus = eval(params)?;
            set(params, &name, idx, original);
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[idx] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

fn set(params: &mut ParameterSet, name: &str, idx: usize, value: f64) {
    params.get_mut(name).expect("present").values_mut()[idx] = value;
}
