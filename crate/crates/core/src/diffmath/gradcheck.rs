//! Central finite-difference oracle for taped gradients.

use rand::Rng;

use super::{MathError, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor: below this magnitude errors are effectively absolute.
pub const DEFAULT_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error < tol
    }
}

fn eval<F, E>(f: &F, points: &[Tensor<f64>]) -> Result<f64, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the taped gradient of `f` with central differences at
/// `samples` random coordinates drawn across all `points` (every
/// coordinate when `samples` covers them all).
pub fn finite_diff_check_many<F, R, E>(
    f: F,
    points: &[Tensor<f64>],
    samples: usize,
    step: f64,
    floor: f64,
    rng: &mut R,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    R: Rng + ?Sized,
    E: From<MathError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        non_finite: !value.is_finite(),
    };
    if report.non_finite {
        report.max_rel_error = f64::INFINITY;
        return Ok(report);
    }
    tape.backward(out)?;
    let grads: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let total: usize = points.iter().map(Tensor::len).sum();
    let coords: Vec<(usize, usize)> = if samples >= total {
        points
            .iter()
            .enumerate()
            .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
            .collect()
    } else {
        (0..samples)
            .map(|_| {
                let mut flat = rng.random_range(0..total);
                let mut t = 0;
                while flat >= points[t].len() {
                    flat -= points[t].len();
                    t += 1;
                }
                (t, flat)
            })
            .collect()
    };

    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (t, i) in coords {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + step;
        let up = eval(&f, &work)?;
        work[t].data_mut()[i] = orig - step;
        let down = eval(&f, &work)?;
        work[t].data_mut()[i] = orig;
        report.coordinates += 1;
        let numeric = (up - down) / (2.0 * step);
        if !numeric.is_finite() {
            report.non_finite = true;
            report.max_rel_error = f64::INFINITY;
            report.worst = Some((t, i));
            continue;
        }
        let analytic = grads[t].data()[i];
        let rel = (analytic - numeric).abs() / (numeric.abs() + floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((t, i));
        }
    }
    Ok(report)
}

/// Single-tensor form of [`finite_diff_check_many`].
pub fn finite_diff_check<F, R, E>(f: F, point: &Tensor<f64>, samples: usize, rng: &mut R) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, E>,
    R: Rng + ?Sized,
    E: From<MathError>,
{
    finite_diff_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        samples,
        DEFAULT_STEP,
        DEFAULT_FLOOR,
        rng,
    )
}
