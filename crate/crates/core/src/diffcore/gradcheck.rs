use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Compares analytic gradients against central differences.
///
/// Returns the maximum over all entries of the listed parameters of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<L>(
    loss_fn: L,
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    eps: f64,
) -> Result<f64>
where
    L: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Invalid(format!(
            "grad_check: epsilon {eps} outside (0, 1e-3]"
        )));
    }
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFiniteGrad {
                param: String::from("<unperturbed>"),
                index: 0,
            });
        }
        g.backward(loss)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(store);
        let loss = loss_fn(&mut g)?;
        Ok(g.scalar(loss))
    };
    let mut worst = 0.0f64;
    for &id in params {
        let n = store.get(id).len();
        let grad = analytic
            .get(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteGrad {
                    param: store.name(id).to_string(),
                    index: i,
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((grad[i] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
