use crate::error::{invalid_shape, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where the largest relative error occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn evaluate<F, E>(f: &F, point: Tensor<f64>) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let x = g.constant(point);
    let y = f(&mut g, x)?;
    scalar_of(&g, y).map_err(E::from)
}

fn scalar_of(g: &Graph<f64>, y: Var) -> Result<f64, TensorError> {
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(invalid_shape("grad_check", v.shape(), "function must return a scalar"));
    }
    let s = v.item();
    if !s.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(s)
}

/// Compares reverse-mode gradients of the scalar function `f` at `point`
/// against central differences with step `eps`. Returns the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)` over all coordinates.
pub fn grad_check<F, E>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_report(f, point, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F, E>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            reason: format!("step must be positive, got {eps}"),
        }
        .into());
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; point.numel()],
    };

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = evaluate(&f, probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = evaluate(&f, probe.clone())?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let (mut worst, mut worst_index) = (0.0f64, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
        if rel > worst {
            worst = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        analytic,
        numeric,
    })
}
