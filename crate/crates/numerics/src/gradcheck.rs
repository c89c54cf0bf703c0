//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{invalid, Result};
use crate::param::{Graph, ParamId, ParamStore};
use crate::tape::{OpKind, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to round-off are judged on absolute error instead.
    pub floor: f64,
    /// Negative control: break the backward rule of this op kind.
    pub corrupt: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tol: 1e-3,
            floor: 1e-6,
            corrupt: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub tensors: usize,
    pub elements: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    /// Aggregates per-tensor results by `group_of(name)`.
    pub fn groups(&self, group_of: impl Fn(&str) -> String) -> Vec<GroupCheck> {
        let mut groups: BTreeMap<String, GroupCheck> = BTreeMap::new();
        for p in &self.params {
            let key = group_of(&p.name);
            let g = groups.entry(key.clone()).or_insert(GroupCheck {
                group: key,
                tensors: 0,
                elements: 0,
                max_rel_err: 0.0,
                passed: true,
            });
            g.tensors += 1;
            g.elements += p.elements;
            g.max_rel_err = g.max_rel_err.max(p.max_rel_err);
            g.passed &= p.max_rel_err <= self.tol;
        }
        groups.into_values().collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<48} n={:<6} rel={:.3e} abs={:.3e} {}",
                p.name,
                p.elements,
                p.max_rel_err,
                p.max_abs_err,
                if p.max_rel_err <= self.tol {
                    "ok"
                } else {
                    "FAIL"
                }
            )?;
        }
        Ok(())
    }
}

/// Compares tape gradients of `loss` against central differences for every
/// element of every trainable parameter in `store`.
///
/// `loss` must be deterministic given the store contents.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    mut loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'a> FnMut(&mut Graph<'a, f64>) -> Result<Var>,
{
    if opts.h <= 0.0 {
        return invalid("finite_diff_check", format!("step h = {}", opts.h));
    }
    let analytic: BTreeMap<ParamId, Vec<f64>> = {
        let mut g = Graph::new(store);
        g.corrupt_backward(opts.corrupt);
        let out = loss(&mut g)?;
        g.backward(out)?;
        g.param_grads()
            .into_iter()
            .map(|(id, t)| (id, t.into_data()))
            .collect()
    };

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(store);
        let out = loss(&mut g)?;
        Ok(g.value(out).item())
    };

    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| store.get(id).trainable())
        .collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).numel();
        let zeros = vec![0.0; n];
        let grad = analytic.get(&id).unwrap_or(&zeros);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - opts.h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            max_abs = max_abs.max((grad[i] - numeric).abs());
            max_rel = max_rel.max(relative_error(grad[i], numeric, opts.floor));
        }
        params.push(ParamCheck {
            name: store.get(id).name().to_string(),
            elements: n,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradCheckReport {
        params,
        tol: opts.tol,
    })
}
