use super::{Graph, NumericsError, Tensor, Var};

/// Largest elementwise `|a - g| / max(1, |a|, |g|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &g)| (a - g).abs() / 1f64.max(a.abs()).max(g.abs()))
        .fold(0.0, f64::max)
}

/// Compares the reverse-mode gradient of `f` at `x` with central differences
/// of step `h`, returning the maximum relative error.
pub fn finite_difference_check<F>(x: &Tensor, h: f64, f: F) -> Result<f64, NumericsError>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, NumericsError>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NumericsError::Invalid {
            op: "finite_difference_check",
            msg: format!("step {h} outside [1e-7, 1e-3]"),
        });
    }
    let leaf = x.clone().with_grad();
    let analytic = {
        let graph = Graph::new();
        let xv = graph.leaf(&leaf);
        let loss = f(&graph, xv)?;
        let grads = graph.backward(loss)?;
        grads
            .get(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval = |t: &Tensor| -> Result<f64, NumericsError> {
        let graph = Graph::new();
        let xv = graph.constant(t);
        Ok(f(&graph, xv)?.item())
    };
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    Ok(max_relative_error(&analytic, &numeric))
}
