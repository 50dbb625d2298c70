//! Plain (non-recording) entry points for the differentiable operations. Each
//! runs the same tape code as training, on a throwaway tape.

use super::{Grid, ParamSet, Tape};
use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn unary(x: &Grid, f: impl FnOnce(&mut Tape<'_>, super::Var) -> Result<super::Var>) -> Result<Grid> {
    let ps = ParamSet::new(0);
    let mut tape = Tape::new(&ps);
    let xv = tape.input(x.clone())?;
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

/// `y[t, j] = Σ_a x[t, a]·w[a, j] + b[j]`
pub fn linear(x: &Grid, w: &Grid, b: &Grid) -> Result<Grid> {
    let ps = ParamSet::new(0);
    let mut tape = Tape::new(&ps);
    let (xv, wv, bv) = (tape.input(x.clone())?, tape.input(w.clone())?, tape.input(b.clone())?);
    let y = tape.linear(xv, wv, Some(bv))?;
    Ok(tape.value(y).clone())
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Grid) -> Grid {
    x.map(super::kernels::gelu)
}

pub fn layer_norm(x: &Grid, gain: &Grid, shift: &Grid, eps: f64) -> Result<Grid> {
    let ps = ParamSet::new(0);
    let mut tape = Tape::new(&ps);
    let (xv, gv, sv) = (
        tape.input(x.clone())?,
        tape.input(gain.clone())?,
        tape.input(shift.clone())?,
    );
    let y = tape.layer_norm(xv, gv, sv, eps)?;
    Ok(tape.value(y).clone())
}

/// Same-padded cross-correlation without bias.
pub fn conv1d(x: &Grid, kernels: &Grid) -> Result<Grid> {
    let ps = ParamSet::new(0);
    let mut tape = Tape::new(&ps);
    let (xv, kv) = (tape.input(x.clone())?, tape.input(kernels.clone())?);
    let y = tape.conv1d(xv, kv, None)?;
    Ok(tape.value(y).clone())
}

pub fn mean_std_pool(x: &Grid) -> Result<Grid> {
    unary(x, |t, v| t.mean_std_pool(v))
}

pub fn softmax_rows(x: &Grid) -> Result<Grid> {
    unary(x, |t, v| t.softmax_rows(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use alloc::vec;

    fn m(rows: &[&[f64]]) -> Grid {
        Grid::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_examples() {
        let x = m(&[&[1.0, 2.0]]);
        let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let zero = Grid::zeros(&[2, 2]);
        let ones = Grid::filled(&[2, 2], 1.0);
        assert_eq!(
            linear(&x, &id, &Grid::vector(vec![0.0, 0.0])).unwrap().data(),
            &[1.0, 2.0]
        );
        assert_eq!(
            linear(&x, &zero, &Grid::vector(vec![3.0, 4.0])).unwrap().data(),
            &[3.0, 4.0]
        );
        assert_eq!(
            linear(&x, &ones, &Grid::vector(vec![0.0, 0.0])).unwrap().data(),
            &[3.0, 3.0]
        );
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let x = m(&[&[1.0, 2.0, 3.0]]);
        let w = Grid::zeros(&[2, 2]);
        match linear(&x, &w, &Grid::zeros(&[2])) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![1, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn gelu_examples() {
        let y = gelu(&Grid::vector(vec![0.0, 10.0, 1.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        // Φ(1) = 0.841344746068543 from a high-precision normal table.
        assert!((y.data()[2] - 0.841_345).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Grid::filled(&[3], 1.0);
        let zeros = Grid::zeros(&[3]);
        let constant = m(&[&[4.0, 4.0, 4.0]]);
        assert_eq!(
            layer_norm(&constant, &ones, &zeros, LAYER_NORM_EPS).unwrap().data(),
            &[0.0; 3]
        );

        let row = m(&[&[1.0, 3.0]]);
        let y = layer_norm(&row, &Grid::filled(&[2], 1.0), &Grid::zeros(&[2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        let any = m(&[&[0.3, -2.0, 7.5]]);
        let y = layer_norm(&any, &zeros, &Grid::filled(&[3], 2.5), LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[2.5; 3]);
    }

    #[test]
    fn conv1d_examples() {
        let x = m(&[&[1.0, 2.0, 3.0]]);
        let ident = Grid::new(vec![1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv1d(&x, &ident).unwrap(), x);
        let box3 = Grid::new(vec![1, 1, 3], vec![1.0; 3]).unwrap();
        assert_eq!(conv1d(&x, &box3).unwrap().data(), &[3.0, 6.0, 5.0]);
        let zero = Grid::zeros(&[2, 1, 3]);
        assert_eq!(conv1d(&x, &zero).unwrap().data(), &[0.0; 6]);
        let even = Grid::zeros(&[1, 1, 2]);
        assert!(matches!(conv1d(&x, &even), Err(Error::Config(_))));
    }

    #[test]
    fn pool_examples() {
        let c = m(&[&[5.0, 5.0, 5.0]]);
        let p = mean_std_pool(&c).unwrap();
        assert_eq!(p.data()[0], 5.0);
        assert!(p.data()[1] < 1e-7);
        let p = mean_std_pool(&m(&[&[1.0, 3.0]])).unwrap();
        assert_eq!(p.data(), &[2.0, 1.0]);
        let a = mean_std_pool(&m(&[&[1.0, 4.0, -2.0, 0.5], &[3.0, 3.0, 1.0, 0.0]])).unwrap();
        let b = mean_std_pool(&m(&[&[0.5, -2.0, 1.0, 4.0], &[0.0, 1.0, 3.0, 3.0]])).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
