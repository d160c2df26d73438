use super::{Graph, OpKind, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used by every gradient check.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients against central finite differences.
///
/// The reported error for one coordinate is `|a − n| / max(1, |a|, |n|)`;
/// the checker returns the worst coordinate.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Corrupt this op's backward rule (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: GRAD_CHECK_STEP,
            fault: None,
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn scalar_of(g: &Graph, out: Var) -> Result<f64> {
    g.value(out).item().map_err(|_| {
        Error::Argument(format!(
            "gradient check needs a scalar output, got shape {:?}",
            g.shape(out)
        ))
    })
}

impl GradCheck {
    pub fn with_fault(fault: OpKind) -> Self {
        GradCheck {
            fault: Some(fault),
            ..Self::default()
        }
    }

    /// Checks `f` with respect to each tensor in `inputs`.
    pub fn inputs<F>(&self, inputs: &[Tensor], f: F) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            scalar_of(&g, out)
        };

        let mut g = Graph::new();
        g.inject_fault(self.fault);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)?;
        g.backward(out)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let mut work = inputs.to_vec();
        let mut worst = 0.0f64;
        for (slot, grad) in analytic.iter().enumerate() {
            for k in 0..grad.numel() {
                let orig = work[slot].data()[k];
                work[slot].data_mut()[k] = orig + self.step;
                let plus = eval(&work)?;
                work[slot].data_mut()[k] = orig - self.step;
                let minus = eval(&work)?;
                work[slot].data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                worst = worst.max(rel_err(grad.data()[k], numeric));
            }
        }
        Ok(worst)
    }

    /// Checks `f` with respect to every parameter in `store`.
    pub fn params<F>(&self, store: &ParamStore, f: F) -> Result<f64>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    {
        let mut g = Graph::new();
        g.inject_fault(self.fault);
        let out = f(&mut g, store)?;
        scalar_of(&g, out)?;
        g.backward(out)?;
        let mut grads = store.clone();
        grads.zero_grads();
        grads.accumulate_grads(&g)?;

        let mut work = store.clone();
        let mut worst = 0.0f64;
        for id in store.ids() {
            let analytic = grads
                .get(id)
                .grad
                .clone()
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
            for k in 0..analytic.numel() {
                let orig = work.value(id).data()[k];
                let mut at = |v: f64| -> Result<f64> {
                    work.get_mut(id).value.data_mut()[k] = v;
                    let mut g = Graph::new();
                    let out = f(&mut g, &work)?;
                    scalar_of(&g, out)
                };
                let plus = at(orig + self.step)?;
                let minus = at(orig - self.step)?;
                work.get_mut(id).value.data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                worst = worst.max(rel_err(analytic.data()[k], numeric));
            }
        }
        Ok(worst)
    }
}

/// Worst relative gradient error of the scalar function `f` at `inputs`.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    GradCheck::default().inputs(inputs, f)
}
