use ndarray::ArrayD;

use super::value::Value;

/// Serializable optimizer state: first/second moments per parameter plus the
/// step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

/// Adam over a fixed set of tape leaves. Parameters with no accumulated
/// gradient are treated as having zero gradient; with fresh moments they do
/// not move.
pub struct Adam {
    params: Vec<Value>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: Vec<Value>, lr: f64) -> Self {
        Self::with_hyper(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: Vec<Value>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        assert!(lr > 0.0, "adam: learning rate must be positive, got {lr}");
        assert!(
            (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2),
            "adam: betas must be in [0, 1), got ({beta1}, {beta2})"
        );
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(p.data().raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|p| ArrayD::zeros(p.data().raw_dim()))
            .collect();
        Adam {
            params,
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m,
            v,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        assert!(lr > 0.0, "adam: learning rate must be positive, got {lr}");
        self.lr = lr;
    }

    pub fn params(&self) -> &[Value] {
        &self.params
    }

    /// One update from the currently accumulated gradients, which are then
    /// cleared.
    pub fn step(&mut self) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in self.params.iter().enumerate() {
            let g = p.grad();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m)
                .and(&g)
                .for_each(|m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            ndarray::Zip::from(&mut *v)
                .and(&g)
                .for_each(|v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut data = p.data();
            ndarray::Zip::from(&mut data)
                .and(&*m)
                .and(&*v)
                .for_each(|d, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *d -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            p.set_data(data);
            p.zero_grad();
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// Restores moments and step counter saved by [`Adam::state`]. The
    /// parameter list must match the one the state was taken from.
    pub fn restore(&mut self, state: AdamState) {
        assert_eq!(
            state.m.len(),
            self.params.len(),
            "adam restore: state holds {} parameters, optimizer has {}",
            state.m.len(),
            self.params.len()
        );
        for (i, p) in self.params.iter().enumerate() {
            assert_eq!(
                state.m[i].shape(),
                p.data().shape(),
                "adam restore: moment shape {:?} does not match parameter shape {:?}",
                state.m[i].shape(),
                p.data().shape()
            );
        }
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
    }

    /// Re-binds the parameter handles after a tape truncation invalidated
    /// them, keeping moments. Shapes must match pairwise.
    pub fn rebind(&mut self, params: Vec<Value>) {
        assert_eq!(
            params.len(),
            self.params.len(),
            "adam rebind: got {} parameters, expected {}",
            params.len(),
            self.params.len()
        );
        self.params = params;
    }
}
