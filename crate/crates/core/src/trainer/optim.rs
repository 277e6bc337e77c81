use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

/// Adam with bias correction and no weight decay. State is per parameter;
/// a parameter without a gradient in a step is left untouched.
pub struct Adam {
    params: Vec<Var>,
    state: Vec<Option<Moments>>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

struct Moments {
    m: Tensor,
    v: Tensor,
    step: i32,
}

impl Adam {
    pub fn new(params: Vec<Var>, lr: f64) -> Self {
        let state = params.iter().map(|_| None).collect();
        Self {
            params,
            state,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> candle_core::Result<()> {
        for (var, state) in self.params.iter().zip(self.state.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let st = match state {
                Some(st) => st,
                None => state.insert(Moments {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                    step: 0,
                }),
            };
            st.step += 1;
            st.m = ((&st.m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            st.v = ((&st.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let bc1 = 1.0 - self.beta1.powi(st.step);
            let bc2 = 1.0 - self.beta2.powi(st.step);
            let denom = ((st.v.sqrt()? / bc2.sqrt())? + self.eps)?;
            let update = ((&st.m / denom)? * (self.lr / bc1))?;
            var.set(&(var.as_tensor() - update)?)?;
        }
        Ok(())
    }
}
