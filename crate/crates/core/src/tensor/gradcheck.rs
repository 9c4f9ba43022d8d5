use std::collections::BTreeMap;

use thiserror::Error;

use super::{BoundParams, ParamSet, Tape, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("function is not finite at coordinate {coordinate} of `{param}` (offset {offset:+e})")]
    NonFinite {
        param: String,
        coordinate: usize,
        offset: f64,
    },
}

fn eval<F>(f: &F, shape: (usize, usize), x: Vec<f64>, param: &str, coordinate: usize, offset: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(shape.0, shape.1, x, false);
    let out = f(&mut tape, leaf).map_err(|e| match e {
        TensorError::NonFinite { .. } => GradCheckError::NonFinite {
            param: param.to_string(),
            coordinate,
            offset,
        },
        other => GradCheckError::Tensor(other),
    })?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(GradCheckError::NonFinite {
            param: param.to_string(),
            coordinate,
            offset,
        });
    }
    Ok(v)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the tape gradient of scalar `f` at `point` against central
/// differences with step `step`, returning
/// `max |analytic − numeric| / max(1, |numeric|)` over all coordinates.
pub fn grad_check<F>(f: F, shape: (usize, usize), point: &[f64], step: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    assert_eq!(point.len(), shape.0 * shape.1);
    let mut tape = Tape::new();
    let x = tape.leaf(shape.0, shape.1, point.to_vec(), true);
    let out = f(&mut tape, x)?;
    let analytic = tape.backward(out)?.get(x);
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        plus[i] += step;
        let mut minus = point.to_vec();
        minus[i] -= step;
        let fp = eval(&f, shape, plus, "input", i, step)?;
        let fm = eval(&f, shape, minus, "input", i, -step)?;
        let numeric = (fp - fm) / (2.0 * step);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

fn probe_coordinates(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    // evenly spaced, always including both ends
    (0..max).map(|k| k * (len - 1) / (max - 1).max(1)).collect()
}

/// Per-parameter-group finite-difference check of a model loss.
///
/// `f` builds the loss from bound parameters. Each group named in
/// `groups` is probed at up to `max_coords` evenly spaced coordinates;
/// the result maps group name to its worst relative error.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamSet,
    groups: &[&str],
    step: f64,
    max_coords: usize,
) -> Result<BTreeMap<String, f64>, GradCheckError>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, Some(groups))?;
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let mut report = BTreeMap::new();
    for &name in groups {
        let analytic = grads.get(bound.var(name));
        let base = params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
            .to_f64();
        let mut worst: f64 = 0.0;
        for i in probe_coordinates(base.len(), max_coords) {
            let at = |offset: f64| -> Result<f64, GradCheckError> {
                let mut x = base.clone();
                x[i] += offset;
                let mut t = Tape::new();
                let b = params.bind_with(&mut t, Some(&[]), Some((name, &x)))?;
                let out = f(&mut t, &b).map_err(|e| match e {
                    TensorError::NonFinite { .. } => GradCheckError::NonFinite {
                        param: name.to_string(),
                        coordinate: i,
                        offset,
                    },
                    other => GradCheckError::Tensor(other),
                })?;
                let v = t.scalar(out);
                if !v.is_finite() {
                    return Err(GradCheckError::NonFinite {
                        param: name.to_string(),
                        coordinate: i,
                        offset,
                    });
                }
                Ok(v)
            };
            let numeric = (at(step)? - at(-step)?) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
        report.insert(name.to_string(), worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn exact_quadratic() {
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            (1, 1),
            &[3.0],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_perturbation_is_reported() {
        // log(x) at x = 5e-4 with step 1e-3 hits a negative argument
        let err = grad_check(
            |t, x| {
                let l = t.log(x)?;
                t.sum(l)
            },
            (1, 1),
            &[5e-4],
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, GradCheckError::NonFinite { coordinate: 0, .. }), "{err}");
    }

    #[test]
    fn probes_include_endpoints() {
        assert_eq!(probe_coordinates(3, 10), vec![0, 1, 2]);
        let p = probe_coordinates(100, 5);
        assert_eq!(p.first(), Some(&0));
        assert_eq!(p.last(), Some(&99));
        assert_eq!(p.len(), 5);
    }

    #[test]
    fn param_groups_checked_independently() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2, 2], vec![0.5, -0.3, 0.8, 0.1]).unwrap());
        p.insert("b", Tensor::new(vec![1, 2], vec![0.2, -0.1]).unwrap());
        let report = grad_check_params(
            |t, b| {
                let x = t.leaf(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.3, -0.7], false);
                let h = t.matmul(x, b.var("w"))?;
                let h = t.add_bias(h, b.var("b"))?;
                let s = t.sigmoid(h)?;
                t.sum(s)
            },
            &p,
            &["w", "b"],
            1e-4,
            16,
        )
        .unwrap();
        assert!(report.values().all(|&e| e < 1e-6), "{report:?}");
    }
}
