use super::{Matrix, Tape, TensorError, Var};

/// Compares the tape gradient of a scalar function against central differences.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|)` over every coordinate
/// of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Matrix], h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Matrix]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).get(0, 0))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars
        .iter()
        .zip(inputs)
        .map(|(v, m)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();

    let mut probe: Vec<Matrix> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        for idx in 0..probe[k].len() {
            let orig = probe[k].data()[idx];
            probe[k].data_mut()[idx] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[idx] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Matrix, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    grad_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(x), h)
}
