//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` at `points` against central
/// differences with step `step`. Returns the maximum over all coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
///
/// `f` receives one parameter var per point, in order, and must return a
/// scalar var. It is called once for the analytic pass and twice per
/// coordinate, each time on a fresh graph.
pub fn grad_check_multi<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::contract(format!("grad_check step must be positive, got {step}")));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar_value(out)?;
        if !v.is_finite() {
            return Err(Error::numeric("grad_check: non-finite function value"));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.scalar_value(out)?.is_finite() {
        return Err(Error::numeric("grad_check: non-finite function value"));
    }
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor> = points.to_vec();
    let mut worst = 0.0f64;
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .ok_or_else(|| Error::contract("missing gradient for a parameter"))?
            .clone();
        for j in 0..points[pi].len() {
            let orig = points[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-tensor form of [`grad_check_multi`].
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(point), step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(|g, w| g.square(w), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_sum() {
        let p = Tensor::vector(vec![0.1, -2.0, 5.0]).unwrap();
        let err = grad_check(|g, w| g.sum(w), &p, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_value_is_numeric_error() {
        let r = grad_check(
            |g, w| {
                let s = g.scale(w, 1e300)?;
                let s = g.scale(s, 1e300)?;
                g.sum(s)
            },
            &Tensor::scalar(1.0),
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, rng.normals(r * c)).unwrap()
    }

    // Every differentiable op, composed, at 5 seeded points.
    #[test]
    fn every_op_passes_at_random_points() {
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let a = random_matrix(&mut rng, 3, 4);
            let b = random_matrix(&mut rng, 4, 2);
            let bias = Tensor::vector(rng.normals(2)).unwrap();
            let pts = [a, b, bias];
            let err = grad_check_multi(
                |g, v| {
                    let h = g.matmul(v[0], v[1])?;
                    let h = g.add_row(h, v[2])?;
                    let r = g.relu(h)?;
                    let e = g.exp(h)?;
                    let e = g.add_scalar(e, 1.0)?;
                    let l = g.log(e)?;
                    let t = g.transpose(l)?;
                    let tt = g.transpose(t)?;
                    let ls = g.log_softmax_rows(tt)?;
                    let n = g.row_normalize(h, 1e-12)?;
                    let gath = g.gather_rows(n, &[2, 0, 2])?;
                    let cm = g.col_mean(gath)?;
                    let sq = g.square(cm)?;
                    let sq = g.add_scalar(sq, 0.5)?;
                    let rt = g.sqrt(sq)?;
                    let rs = g.row_sum(ls)?;
                    let d = g.row_dot(r, h)?;
                    let s1 = g.sum(rt)?;
                    let s2 = g.mean(rs)?;
                    let s3 = g.sum(d)?;
                    let x = g.sub(s1, s2)?;
                    let x = g.add(x, s3)?;
                    g.scale(x, 0.7)
                },
                &pts,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = Rng::new(5);
        let w = random_matrix(&mut rng, 3, 3);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let v = g.param(w.clone());
            let f = {
                let sq = g.square(v).unwrap();
                g.sum(sq).unwrap()
            };
            let h = {
                let e = g.exp(v).unwrap();
                g.mean(e).unwrap()
            };
            let out = match which {
                0 => f,
                1 => h,
                _ => {
                    let a = g.scale(f, 2.5).unwrap();
                    let b = g.scale(h, -0.75).unwrap();
                    g.add(a, b).unwrap()
                }
            };
            g.backward(out).unwrap().get(v).unwrap().clone()
        };
        let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..gc.len() {
            let expect = 2.5 * gf.data()[i] - 0.75 * gh.data()[i];
            assert!((gc.data()[i] - expect).abs() < 1e-10);
        }
    }
}
