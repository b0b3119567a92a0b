use super::graph::{Graph, Var};
use super::tensor::{Module, Real};
use crate::error::{Error, Result};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error with an absolute floor of `1e-8` in the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backward gradients of the scalar built by `f` against
/// `(f(p+eps) − f(p−eps)) / 2eps` for every element of every trainable
/// parameter in `module`.
///
/// `f` must be deterministic: two evaluations at the unperturbed point that
/// disagree bit-wise make the oracle invalid.
pub fn grad_check<T, M, F>(module: &mut M, eps: f64, f: F) -> Result<GradCheckReport>
where
    T: Real,
    M: Module<T>,
    F: Fn(&mut Graph<T>, &M) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract("grad_check eps must be positive".into()));
    }
    let eval = |m: &M| -> Result<T> {
        let mut g = Graph::new();
        let out = f(&mut g, m)?;
        if g.value(out).len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let out = f(&mut g, module)?;
    let base = g.value(out).item();
    let grads = g.backward(out)?;
    let again = eval(module)?;
    if base.f64().to_bits() != again.f64().to_bits() {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }

    let mut targets = Vec::new();
    module.visit(&mut |p| {
        if p.trainable {
            targets.push((p.name().to_string(), p.value.len()));
        }
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let h = T::of(eps);
    for (name, len) in targets {
        let analytic = grads.get(&name).map(|t| t.to_f64());
        for i in 0..len {
            let orig = set_elem(module, &name, i, None);
            set_elem(module, &name, i, Some(orig + h));
            let plus = eval(module)?;
            set_elem(module, &name, i, Some(orig - h));
            let minus = eval(module)?;
            set_elem(module, &name, i, Some(orig));
            let numeric = (plus.f64() - minus.f64()) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |v| v[i]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn set_elem<T: Real, M: Module<T>>(module: &mut M, name: &str, i: usize, v: Option<T>) -> T {
    let mut old = T::zero();
    module.visit_mut(&mut |p| {
        if p.name() == name {
            old = p.value.data()[i];
            if let Some(v) = v {
                p.value.data_mut()[i] = v;
            }
        }
    });
    old
}
