use super::{Gradients, Inputs, NumericsError, ParameterStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Constant added to every input tensor before checking, to move data
    /// off relu kinks.
    pub input_offset: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            input_offset: 1e-3,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub failures: usize,
    pub pass: bool,
}

/// Checks backward-pass gradients of `output` against central differences
/// over every trainable coordinate.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check(
    tape: &mut Tape,
    params: &ParameterStore,
    inputs: &Inputs,
    output: &str,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError> {
    let shifted: Inputs = inputs
        .iter()
        .map(|(k, v)| (k.clone(), v.map(|x| x + opts.input_offset)))
        .collect();
    tape.forward_eval(params, &shifted)?;
    let analytic = tape.backward(params, output)?;
    compare_gradients(tape, params, &shifted, output, &analytic, opts)
}

/// Compares caller-supplied gradients against central differences. Inputs
/// are used as given.
pub fn compare_gradients(
    tape: &mut Tape,
    params: &ParameterStore,
    inputs: &Inputs,
    output: &str,
    analytic: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError> {
    let h = opts.step;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        failures: 0,
        pass: true,
    };
    let eval = |work: &ParameterStore, tape: &mut Tape| -> Result<f64, NumericsError> {
        let out = tape.forward_eval(work, inputs)?;
        out.get(output)
            .map(|t| t.data()[0])
            .ok_or_else(|| NumericsError::UnknownOutput(output.into()))
    };

    for name in params.trainable_names() {
        let grad = analytic.get(&name);
        let len = params.get(&name).unwrap().len();
        for i in 0..len {
            let orig = work.values_mut(&name).unwrap()[i];
            work.values_mut(&name).unwrap()[i] = orig + h;
            let plus = eval(&work, tape)?;
            work.values_mut(&name).unwrap()[i] = orig - h;
            let minus = eval(&work, tape)?;
            work.values_mut(&name).unwrap()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel >= opts.tolerance || !rel.is_finite() {
                report.failures += 1;
            }
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    tape.forward_eval(params, inputs)?;
    report.pass = report.failures == 0;
    Ok(report)
}
