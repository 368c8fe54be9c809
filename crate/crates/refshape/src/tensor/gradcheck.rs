//! Central finite-difference gradient checking. Hand-rolled autodiff earns
//! trust through this module: any scalar-valued computation over a
//! [`ParamSet`] can be checked coordinate by coordinate against a central
//! difference quotient.

use super::{Graph, ParamId, ParamSet, TensorId};
use crate::error::Result;

/// One checked coordinate: analytic gradient, finite difference, and their
/// relative error `|a - fd| / max(|a|, |fd|, floor)`.
#[derive(Debug, Clone, Copy)]
pub struct CoordinateCheck {
    pub param: ParamId,
    pub coordinate: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

/// Builds the loss, runs backward once for analytic gradients, then probes
/// the given `(parameter, coordinate)` pairs with central differences of
/// half-width `h`. The builder must be a pure function of the parameter
/// values.
pub fn check_coordinates(
    params: &mut ParamSet,
    build: &mut dyn FnMut(&mut Graph, &ParamSet) -> Result<TensorId>,
    h: f64,
    probes: &[(ParamId, usize)],
) -> Result<Vec<CoordinateCheck>> {
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    g.backward(loss)?;
    params.zero_grads();
    params.accumulate_grads(&g, 1.0)?;
    let analytic: Vec<f64> = probes
        .iter()
        .map(|&(pid, j)| params.get(pid).grad[j])
        .collect();

    let mut out = Vec::with_capacity(probes.len());
    for (probe_idx, &(pid, j)) in probes.iter().enumerate() {
        let original = params.get(pid).values[j];
        let mut eval = |v: f64| -> Result<f64> {
            params.get_mut(pid).values[j] = v;
            let mut g = Graph::new();
            let loss = build(&mut g, params)?;
            Ok(g.scalar(loss))
        };
        let plus = eval(original + h)?;
        let minus = eval(original - h)?;
        params.get_mut(pid).values[j] = original;
        let fd = (plus - minus) / (2.0 * h);
        let a = analytic[probe_idx];
        let relative_error = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        out.push(CoordinateCheck {
            param: pid,
            coordinate: j,
            analytic: a,
            finite_difference: fd,
            relative_error,
        });
    }
    Ok(out)
}

/// Checks every coordinate of every parameter; returns the worst relative
/// error. Intended for small parameter sets.
pub fn max_relative_error(
    params: &mut ParamSet,
    build: &mut dyn FnMut(&mut Graph, &ParamSet) -> Result<TensorId>,
    h: f64,
) -> Result<f64> {
    let probes: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|pid| (0..params.get(pid).values.len()).map(move |j| (pid, j)))
        .collect();
    let checks = check_coordinates(params, build, h, &probes)?;
    Ok(checks
        .iter()
        .map(|c| c.relative_error)
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::testmesh::XorShift;

    fn rand_values(rng: &mut XorShift, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.range(-1.0, 1.0)).collect()
    }

    /// Every differentiable op, finite-difference checked on random inputs.
    /// Each op output is contracted to a scalar through a fixed random
    /// projection so every output element influences the loss.
    #[test]
    fn every_op_passes_finite_difference_checks() {
        let mut rng = XorShift(0xC0FFEE);
        for trial in 0..5 {
            let seed_offset = trial as u64;
            let _ = seed_offset;

            // add / sub / mul / scalar ops / relu / reshape over [3, 4]
            let mut params = ParamSet::new();
            let a = params.add_raw("a", vec![3, 4], rand_values(&mut rng, 12));
            let b = params.add_raw("b", vec![3, 4], rand_values(&mut rng, 12));
            let proj = rand_values(&mut rng, 12);
            let mut build = |g: &mut Graph, p: &ParamSet| {
                let ta = g.parameter(p, a);
                let tb = g.parameter(p, b);
                let sum = g.add(ta, tb)?;
                let dif = g.sub(sum, tb)?;
                let prod = g.mul(dif, tb)?;
                let scaled = g.mul_scalar(prod, 0.7);
                let shifted = g.add_scalar(scaled, 0.11);
                let act = g.relu(shifted);
                let reshaped = g.reshape(act, vec![4, 3])?;
                let pr = g.constant(vec![4, 3], proj.clone());
                let weighted = g.mul(reshaped, pr)?;
                Ok(g.sum(weighted))
            };
            let err = max_relative_error(&mut params, &mut build, 1e-5).unwrap();
            assert!(err < 1e-4, "elementwise chain: {err}");

            // matmul + add_bias + norm_rows + mean
            let mut params = ParamSet::new();
            let w = params.add_raw("w", vec![4, 3], rand_values(&mut rng, 12));
            let x = params.add_raw("x", vec![5, 4], rand_values(&mut rng, 20));
            let bias = params.add_raw("bias", vec![3], rand_values(&mut rng, 3));
            let mut build = |g: &mut Graph, p: &ParamSet| {
                let tx = g.parameter(p, x);
                let tw = g.parameter(p, w);
                let tb = g.parameter(p, bias);
                let y = g.matmul(tx, tw)?;
                let y = g.add_bias(y, tb)?;
                let n = g.norm_rows(y)?;
                Ok(g.mean(n))
            };
            let err = max_relative_error(&mut params, &mut build, 1e-5).unwrap();
            assert!(err < 1e-4, "matmul chain: {err}");

            // gather_rows (with repeats) + concat_cols + group_max + sum
            let mut params = ParamSet::new();
            let x = params.add_raw("x", vec![4, 2], rand_values(&mut rng, 8));
            let y = params.add_raw("y", vec![6, 1], rand_values(&mut rng, 6));
            let proj = rand_values(&mut rng, 9);
            let mut build = |g: &mut Graph, p: &ParamSet| {
                let tx = g.parameter(p, x);
                let ty = g.parameter(p, y);
                let gathered = g.gather_rows(tx, vec![0, 2, 2, 1, 3, 0])?;
                let cat = g.concat_cols(gathered, ty)?;
                let mx = g.group_max(cat, 2)?;
                let pr = g.constant(vec![3, 3], proj.clone());
                let weighted = g.mul(mx, pr)?;
                Ok(g.sum(weighted))
            };
            let err = max_relative_error(&mut params, &mut build, 1e-5).unwrap();
            assert!(err < 1e-4, "gather chain: {err}");

            // zero_rows + interpolate_rows
            let mut params = ParamSet::new();
            let x = params.add_raw("x", vec![5, 3], rand_values(&mut rng, 15));
            let proj = rand_values(&mut rng, 6);
            let iw = crate::sampling::InterpolationWeights {
                indices: vec![[0, 2, 4], [1, 1, 3]],
                weights: vec![[0.5, 0.3, 0.2], [0.25, 0.25, 0.5]],
            };
            let mut build = |g: &mut Graph, p: &ParamSet| {
                let tx = g.parameter(p, x);
                let z = g.zero_rows(tx, vec![1])?;
                let up = g.interpolate_rows(z, &iw)?;
                let pr = g.constant(vec![2, 3], proj.clone());
                let weighted = g.mul(up, pr)?;
                Ok(g.sum(weighted))
            };
            let err = max_relative_error(&mut params, &mut build, 1e-5).unwrap();
            assert!(err < 1e-4, "zero/interp chain: {err}");
        }
    }

    #[test]
    fn check_reports_probe_details() {
        // loss = w0^2 + 3 w1, gradients (2 w0, 3)
        let mut params = ParamSet::new();
        let w = params.add_raw("w", vec![2], rand_values(&mut XorShift(1), 2));
        let mut build = |g: &mut Graph, p: &ParamSet| {
            let t = g.parameter(p, w);
            let sq = g.mul(t, t)?;
            let lin = g.mul_scalar(t, 3.0);
            let sq = g.reshape(sq, vec![1, 2])?;
            let lin = g.reshape(lin, vec![1, 2])?;
            let both = g.concat_cols(sq, lin)?;
            let mask = g.constant(vec![1, 4], vec![1.0, 0.0, 0.0, 1.0]);
            let picked = g.mul(both, mask)?;
            Ok(g.sum(picked))
        };
        let checks =
            check_coordinates(&mut params, &mut build, 1e-6, &[(w, 0), (w, 1)]).unwrap();
        let w0 = params.get(w).values[0];
        assert!((checks[0].analytic - 2.0 * w0).abs() < 1e-9);
        assert!((checks[1].analytic - 3.0).abs() < 1e-12);
        assert!(checks.iter().all(|c| c.relative_error < 1e-6));
    }
}
