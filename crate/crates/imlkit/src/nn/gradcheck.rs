//! Central-difference gradient verification helpers, shared by unit tests
//! and the acceptance suite.

/// Relative error between a finite-difference estimate and an analytic value,
/// with a denominator floor so near-zero pairs compare by absolute error.
pub fn rel_err(fd: f64, analytic: f64, floor: f64) -> f64 {
    let denom = fd.abs().max(analytic.abs()).max(floor);
    (fd - analytic).abs() / denom
}

/// Checks `n` scalar slots against central differences.
///
/// `get`/`set` read and write slot `i`; `eval` recomputes the scalar loss;
/// `analytic` returns the gradient under test for slot `i`. Returns the
/// maximum relative error observed.
pub fn fd_check_flat(
    n: usize,
    get: &mut dyn FnMut(usize) -> f64,
    set: &mut dyn FnMut(usize, f64),
    eval: &mut dyn FnMut() -> f64,
    analytic: &mut dyn FnMut(usize) -> f64,
    eps: f64,
    floor: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        let orig = get(i);
        set(i, orig + eps);
        let lp = eval();
        set(i, orig - eps);
        let lm = eval();
        set(i, orig);
        let fd = (lp - lm) / (2.0 * eps);
        let err = rel_err(fd, analytic(i), floor);
        if err > worst {
            worst = err;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_check_on_quadratic() {
        // loss = sum(x_i^2), grad = 2x
        let x = std::cell::RefCell::new(vec![0.3f64, -1.2, 2.0]);
        let grad: Vec<f64> = x.borrow().iter().map(|v| 2.0 * v).collect();
        let worst = fd_check_flat(
            3,
            &mut |i| x.borrow()[i],
            &mut |i, v| x.borrow_mut()[i] = v,
            &mut || x.borrow().iter().map(|v| v * v).sum::<f64>(),
            &mut |i| grad[i],
            1e-6,
            1e-10,
        );
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn rel_err_floors_small_values() {
        assert!(rel_err(1e-14, 0.0, 1e-10) < 1e-3);
        assert!((rel_err(2.0, 1.0, 1e-10) - 0.5).abs() < 1e-12);
    }
}
