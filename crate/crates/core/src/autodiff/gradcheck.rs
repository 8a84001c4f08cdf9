use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::ParamStore;

/// Compares reverse-mode gradients with central finite differences.
///
/// `loss` builds a scalar from the parameters in `store`. Returns
/// `max_i |g_ad,i − g_fd,i| / max(1, |g_fd,i|)` over every parameter scalar.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let analytic = {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        finite(g.scalar(l)?)?;
        g.backward(l)?.to_param_grads(store)
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        finite(g.scalar(l)?)
    };
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let fd = (up? - down?) / (2.0 * h);
            let ad = analytic.0[id.index()][i];
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(format!("loss evaluated to {v}")))
    }
}
