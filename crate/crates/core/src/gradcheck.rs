//! Central finite-difference checks for autodiff gradients (double precision).

use candle_core::{DType, Tensor, Var};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` seen.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares the autodiff gradient of `f` at `x` with central differences for
/// up to `max_coords` evenly spread coordinates. `f` must return a scalar.
pub fn check_gradient<F>(
    x: &Tensor,
    step: f64,
    max_coords: usize,
    floor: f64,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if x.dtype() != DType::F64 {
        bail!(Config, "gradient checks run in f64");
    }
    let var = Var::from_tensor(x)?;
    let y = f(var.as_tensor())?;
    if y.elem_count() != 1 {
        bail!(
            Shape,
            "gradient check needs a scalar output, got {:?}",
            y.dims()
        );
    }
    let grads = y.backward()?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1()?,
        None => vec![0.0; x.elem_count()],
    };
    let base: Vec<f64> = x.flatten_all()?.to_vec1()?;
    let n = base.len();
    let stride = n.div_ceil(max_coords.max(1)).max(1);
    let eval = |v: &[f64]| -> Result<f64> {
        let t = Tensor::from_slice(v, x.dims(), x.device())?;
        Ok(f(&t)?.flatten_all()?.to_vec1::<f64>()?[0])
    };
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
    };
    let mut probe = base.clone();
    for i in (0..n).step_by(stride) {
        probe[i] = base[i] + step;
        let up = eval(&probe)?;
        probe[i] = base[i] - step;
        let down = eval(&probe)?;
        probe[i] = base[i];
        let numeric = (up - down) / (2.0 * step);
        let scale = analytic[i].abs().max(numeric.abs()).max(floor);
        out.max_rel_err = out.max_rel_err.max((analytic[i] - numeric).abs() / scale);
        out.checked += 1;
    }
    Ok(out)
}
