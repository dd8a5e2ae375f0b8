use super::{Array, NumError, Tape, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub param: usize,
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because `±step` crossed a non-smooth point.
    pub near_kink: Vec<usize>,
}

impl ParamCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed(self.tol))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed(self.tol))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F, E>(f: &F, params: &[Array]) -> Result<(f64, Vec<bool>), E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(NumError::NotScalar { shape: v.shape() }.into());
    }
    Ok((v.item(), tape.kink_signature()))
}

/// Compares reverse-mode gradients of `f` against central differences with
/// the given `step`, coordinate by coordinate.
pub fn grad_check<F, E>(f: F, params: &[Array], step: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Array> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut check = ParamCheck {
            param: pi,
            max_rel_error: 0.0,
            worst_coord: None,
            checked: 0,
            near_kink: Vec::new(),
        };
        for c in 0..params[pi].len() {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + step;
            let (plus, sig_plus) = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig - step;
            let (minus, sig_minus) = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig;
            if sig_plus != sig_minus {
                check.near_kink.push(c);
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.data()[c], numeric);
            check.checked += 1;
            if err > check.max_rel_error || check.worst_coord.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst_coord = Some(c);
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { tol, params: report })
}
