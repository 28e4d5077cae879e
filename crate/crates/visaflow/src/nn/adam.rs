//! Adam with bias correction; weight decay 0, moments kept in the working
//! precision.

use ndarray::Array2;

use super::{ParamSet, Real};

pub struct Adam<T> {
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64) -> Self {
        Adam {
            m: params.values.iter().map(|p| Array2::from_elem(p.dim(), T::zero())).collect(),
            v: params.values.iter().map(|p| Array2::from_elem(p.dim(), T::zero())).collect(),
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64) {
        self.t += 1;
        let b1 = T::from64(self.beta1);
        let b2 = T::from64(self.beta2);
        let one = T::one();
        let corr1 = T::from64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = T::from64(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::from64(lr);
        let eps = T::from64(self.eps);
        for i in 0..params.values.len() {
            let g = &params.grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut params.values[i];
            for ((pv, gv), (mv, vv)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mv = b1 * *mv + (one - b1) * *gv;
                *vv = b2 * *vv + (one - b2) * *gv * *gv;
                let mhat = *mv / corr1;
                let vhat = *vv / corr2;
                *pv = *pv - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
