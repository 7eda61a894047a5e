use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Classical fourth-order Runge–Kutta with `steps` uniform steps from
/// `t_start` to `t_end`.
///
/// Step increments are accumulated with compensated summation so that a
/// constant field lands on the exact endpoint.
pub fn rk4_integrate<F>(mut field: F, y0: &Tensor, t_start: f64, t_end: f64, steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::invalid("rk4 needs at least one step"));
    }
    if !(t_start < t_end) {
        return Err(Error::invalid(format!(
            "rk4 interval must be increasing, got [{t_start}, {t_end}]"
        )));
    }
    let h = (t_end - t_start) / steps as f64;
    let mut y = y0.clone();
    let mut comp = vec![0.0; y.len()];
    let mut eval = |state: &Tensor, t: f64, step: usize| -> Result<Tensor> {
        let k = field(state, t)?;
        if k.shape() != state.shape() {
            return Err(Error::shape(
                "rk4_integrate",
                format!("field returned {:?} for state {:?}", k.shape(), state.shape()),
            ));
        }
        k.check_finite(|| format!("rk4 derivative at step {step}"))?;
        Ok(k)
    };
    let offset = |y: &Tensor, k: &Tensor, s: f64| -> Tensor {
        let mut out = y.clone();
        for (o, v) in out.data_mut().iter_mut().zip(k.data()) {
            *o += s * v;
        }
        out
    };
    for step in 0..steps {
        let t = t_start + step as f64 * h;
        let k1 = eval(&y, t, step)?;
        let k2 = eval(&offset(&y, &k1, 0.5 * h), t + 0.5 * h, step)?;
        let k3 = eval(&offset(&y, &k2, 0.5 * h), t + 0.5 * h, step)?;
        let k4 = eval(&offset(&y, &k3, h), t + h, step)?;
        let (d1, d2, d3, d4) = (k1.data(), k2.data(), k3.data(), k4.data());
        for (i, (yi, c)) in y.data_mut().iter_mut().zip(comp.iter_mut()).enumerate() {
            let incr = h * ((d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]) / 6.0);
            // Kahan-compensated accumulation
            let adj = incr - *c;
            let sum = *yi + adj;
            *c = (sum - *yi) - adj;
            *yi = sum;
        }
        y.check_finite(|| format!("rk4 state at step {step}"))?;
    }
    Ok(y)
}
