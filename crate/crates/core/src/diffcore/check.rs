//! Finite-difference gradient verification.
//!
//! Runs in 64-bit only: central differences at eps=1e-4 resolve gradients to
//! well below the 1e-4 acceptance tolerance, which 32-bit noise would swamp.

use std::collections::BTreeMap;

use crate::diffcore::array::Array;
use crate::diffcore::tape::Grads;
use crate::error::{Error, Result};

/// A scalar function of named f64 parameters that also reports its analytic
/// gradients (typically: build a tape, run forward, call backward).
pub type GradFn<'a> = dyn FnMut(&BTreeMap<String, Array<f64>>) -> Result<(f64, Grads<f64>)> + 'a;

/// Compare analytic gradients against central differences at `point`.
///
/// Returns the max over all coordinates of
/// |analytic − numeric| / (|analytic| + 1e-8).
pub fn finite_diff_check(
    f: &mut GradFn,
    point: &BTreeMap<String, Array<f64>>,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference eps must be positive, got {eps}")));
    }
    let (_, analytic) = f(point)?;
    let mut worst = 0.0f64;
    for (name, base) in point {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for '{name}'")))?;
        if a.shape() != base.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} mismatches parameter '{name}' {:?}",
                a.shape(),
                base.shape()
            )));
        }
        for i in 0..base.len() {
            let mut plus = point.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += eps;
            let (fp, _) = f(&plus)?;
            let mut minus = point.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= eps;
            let (fm, _) = f(&minus)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (a.data()[i] - numeric).abs() / (a.data()[i].abs() + 1e-8);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Convenience: single-parameter point.
pub fn point_of(name: &str, value: Array<f64>) -> BTreeMap<String, Array<f64>> {
    let mut m = BTreeMap::new();
    m.insert(name.to_string(), value);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tape::Tape;

    #[test]
    fn square_function_checks_out() {
        // f(x) = sum(x^2): analytic 2x vs central difference.
        let mut f = |p: &BTreeMap<String, Array<f64>>| {
            let mut t = Tape::<f64>::new();
            let x = t.param("x", p["x"].clone())?;
            let sq = t.mul(x, x)?;
            let s = t.sum(sq)?;
            Ok((t.value(s).item()?, t.backward(s)?))
        };
        let p = point_of("x", Array::from_f64(vec![1], &[3.0]).unwrap());
        let err = finite_diff_check(&mut f, &p, 1e-3).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_both_ways() {
        let mut f = |p: &BTreeMap<String, Array<f64>>| {
            let mut t = Tape::<f64>::new();
            let _x = t.param("x", p["x"].clone())?;
            let c = t.leaf(Array::scalar(5.0))?;
            let s = t.sum(c)?;
            Ok((t.value(s).item()?, t.backward(s)?))
        };
        let p = point_of("x", Array::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let err = finite_diff_check(&mut f, &p, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn two_layer_network_with_mse_checks_out() {
        // Fixed input/target, gradient w.r.t. both weight matrices.
        let x0 = Array::from_f64(vec![2, 3], &[0.3, -0.1, 0.8, 1.2, 0.5, -0.7]).unwrap();
        let target = Array::from_f64(vec![2, 2], &[0.1, -0.4, 0.9, 0.2]).unwrap();
        let mut f = move |p: &BTreeMap<String, Array<f64>>| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(x0.clone())?;
            let w1 = t.param("w1", p["w1"].clone())?;
            let w2 = t.param("w2", p["w2"].clone())?;
            let h = t.matmul(x, w1)?;
            let h = t.gelu(h)?;
            let y = t.matmul(h, w2)?;
            let tgt = t.leaf(target.clone())?;
            let loss = t.mse(y, tgt)?;
            Ok((t.value(loss).item()?, t.backward(loss)?))
        };
        let mut p = BTreeMap::new();
        p.insert(
            "w1".to_string(),
            Array::from_f64(vec![3, 4], &[0.2, -0.3, 0.5, 0.1, 0.4, 0.6, -0.2, 0.3, -0.5, 0.1, 0.2, -0.4])
                .unwrap(),
        );
        p.insert(
            "w2".to_string(),
            Array::from_f64(vec![4, 2], &[0.3, -0.1, 0.2, 0.5, -0.4, 0.1, 0.6, -0.2]).unwrap(),
        );
        let err = finite_diff_check(&mut f, &p, 1e-4).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
