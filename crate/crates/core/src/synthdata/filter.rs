//! Savitzky–Golay smoothing: per-channel convolution with the least-squares
//! polynomial-fit coefficients, mirror padding at the edges.

use nalgebra::DMatrix;

use crate::diffcore::Array;
use crate::error::{Error, Result};

/// Center-point smoothing coefficients for an odd `window` and polynomial
/// `order`: the first row of (AᵀA)⁻¹Aᵀ where A[i][j] = (i−h)ʲ.
pub fn savgol_coeffs(window: usize, order: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 {
        return Err(Error::Config(format!("smoothing window {window} must be odd")));
    }
    if order >= window {
        return Err(Error::Config(format!(
            "polynomial order {order} must be below window {window}"
        )));
    }
    let h = (window / 2) as i64;
    // Vandermonde design matrix over offsets −h..=h.
    let a = DMatrix::from_fn(window, order + 1, |i, j| ((i as i64 - h) as f64).powi(j as i32));
    let ata = a.transpose() * &a;
    let inv = ata
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular normal equations in smoothing fit".into()))?;
    let pinv = inv * a.transpose(); // (order+1) × window
    Ok(pinv.row(0).iter().copied().collect())
}

/// Mirror an out-of-range index back into [0, n): reflection about the edge
/// samples, so index −1 maps to 1 and n maps to n−2.
fn mirror(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Smooth each channel of a frames × channels sequence.
pub fn savgol_smooth<F: crate::diffcore::Scalar>(
    seq: &Array<F>,
    window: usize,
    order: usize,
) -> Result<Array<F>> {
    if seq.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "smoothing expects frames × channels, got {:?}",
            seq.shape()
        )));
    }
    let coeffs = savgol_coeffs(window, order)?;
    let (l, d) = (seq.shape()[0], seq.shape()[1]);
    if l < 2 {
        return Ok(seq.clone());
    }
    let h = (window / 2) as i64;
    let data = seq.data();
    let mut out = vec![F::of_f64(0.0); l * d];
    for c in 0..d {
        for t in 0..l {
            let mut acc = 0.0;
            for (k, w) in coeffs.iter().enumerate() {
                let src = mirror(t as i64 + k as i64 - h, l as i64);
                acc += w * data[src * d + c].as_f64();
            }
            out[t * d + c] = F::of_f64(acc);
        }
    }
    Array::new(vec![l, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window5_order2_matches_the_classic_coefficients() {
        let c = savgol_coeffs(5, 2).unwrap();
        let expect = [-3.0 / 35.0, 12.0 / 35.0, 17.0 / 35.0, 12.0 / 35.0, -3.0 / 35.0];
        for (a, b) in c.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn constant_sequence_is_unchanged() {
        let seq = Array::<f64>::full(vec![20, 3], 4.2);
        let out = savgol_smooth(&seq, 9, 3).unwrap();
        for (a, b) in out.data().iter().zip(seq.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_is_reproduced_away_from_edges() {
        let l = 40;
        let vals: Vec<f64> = (0..l).map(|t| 0.3 * (t * t) as f64 - 2.0 * t as f64 + 1.0).collect();
        let seq = Array::<f64>::new(vec![l, 1], vals.clone()).unwrap();
        let out = savgol_smooth(&seq, 5, 2).unwrap();
        for t in 2..l - 2 {
            assert!(
                (out.data()[t] - vals[t]).abs() < 1e-10,
                "frame {t}: {} vs {}",
                out.data()[t],
                vals[t]
            );
        }
    }

    #[test]
    fn even_window_is_a_config_error() {
        assert!(savgol_coeffs(4, 2).is_err());
        assert!(savgol_coeffs(5, 5).is_err());
    }

    #[test]
    fn mirror_padding_reflects_about_the_edge() {
        assert_eq!(mirror(-1, 10), 1);
        assert_eq!(mirror(-2, 10), 2);
        assert_eq!(mirror(10, 10), 8);
        assert_eq!(mirror(11, 10), 7);
        assert_eq!(mirror(0, 10), 0);
    }
}
