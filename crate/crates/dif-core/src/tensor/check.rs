//! Central finite-difference verification of tape gradients.

use super::{Array, Tape, TensorError, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Leaf index and flat coordinate of the worst entry.
    pub worst: (usize, usize),
    pub pass: bool,
    pub tol: f64,
}

/// Checks the adjoints of a scalar-valued computation against central
/// differences, coordinate by coordinate.
///
/// `build` must construct the same computation for any leaf values; it
/// receives a fresh tape plus the leaf vars in the order of `leaves`.
pub fn grad_check<F>(
    build: F,
    leaves: &[Array],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |points: &[Array]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|a| tape.constant(a.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    // Reverse-mode gradients at the base point.
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut max_rel_err: f64 = 0.0;
    let mut worst = (0, 0);
    let mut points: Vec<Array> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let ad = grads.get(vars[li]);
        for ci in 0..leaf.len() {
            let base = leaf.data()[ci];
            points[li].data_mut()[ci] = base + h;
            let up = eval(&points)?;
            points[li].data_mut()[ci] = base - h;
            let down = eval(&points)?;
            points[li].data_mut()[ci] = base;
            let fd = (up - down) / (2.0 * h);
            let ad_val = ad.map(|g| g.data()[ci]).unwrap_or(0.0);
            let rel = (ad_val - fd).abs() / ad_val.abs().max(fd.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (li, ci);
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst,
        pass: max_rel_err <= tol,
        tol,
    })
}
