use super::{NnError, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T: Real> {
    pub total: f64,
    pub reconstruction: f64,
    pub actions: f64,
    pub grad_actions: Tensor<T>,
    pub grad_depth: Option<Tensor<T>>,
}

/// Mean squared depth error plus mean squared and mean absolute action error.
pub fn loss_total<T: Real>(y: &Tensor<T>, y_star: &Tensor<T>, depth: Option<(&Tensor<T>, &Tensor<T>)>) -> Result<LossOutput<T>, NnError> {
    if y.shape != y_star.shape {
        return Err(NnError::Shape(format!("actions {:?} vs targets {:?}", y.shape, y_star.shape)));
    }
    let n = y.len().max(1) as f64;
    let mut grad_y = Tensor::zeros(&y.shape);
    let (mut mse, mut mae) = (0.0f64, 0.0f64);
    for i in 0..y.len() {
        let e = (y.data[i] - y_star.data[i]).to_f64();
        mse += e * e;
        mae += e.abs();
        let s = if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 };
        grad_y.data[i] = T::from_f64((2.0 * e + s) / n);
    }
    let actions = (mse + mae) / n;
    let (reconstruction, grad_depth) = match depth {
        Some((d, d_star)) => {
            if d.shape != d_star.shape {
                return Err(NnError::Shape(format!("depth {:?} vs targets {:?}", d.shape, d_star.shape)));
            }
            let m = d.len().max(1) as f64;
            let mut g = Tensor::zeros(&d.shape);
            let mut s = 0.0f64;
            for i in 0..d.len() {
                let e = (d.data[i] - d_star.data[i]).to_f64();
                s += e * e;
                g.data[i] = T::from_f64(2.0 * e / m);
            }
            (s / m, Some(g))
        }
        None => (0.0, None),
    };
    Ok(LossOutput {
        total: reconstruction + actions,
        reconstruction,
        actions,
        grad_actions: grad_y,
        grad_depth,
    })
}
