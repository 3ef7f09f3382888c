use super::params::{Component, Grads, Init, Layout, LinearParams, ParamStore};
use crate::error::Result;
use crate::numerics::kernels::{gelu, gelu_backward};
use crate::numerics::{Scalar, Tensor};

pub const MLP_RATIO: usize = 4;

/// `GELU(x W_up + b_up) W_down + b_down` with a 4x hidden width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MlpParams {
    pub up: LinearParams,
    pub down: LinearParams,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T: Scalar> {
    x: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl MlpParams {
    pub fn register(layout: &mut Layout, name: &str, width: usize) -> Self {
        let hidden = MLP_RATIO * width;
        Self {
            up: LinearParams::register(layout, &format!("{name}.up"), width, hidden, Component::Mlp, Init::Xavier),
            down: LinearParams::register(layout, &format!("{name}.down"), hidden, width, Component::Mlp, Init::Xavier),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let pre = self.up.forward(store, x)?;
        let act = gelu(&pre);
        let y = self.down.forward(store, &act)?;
        Ok((
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &MlpCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dact = self.down.backward(store, grads, &cache.act, dy)?;
        let dpre = gelu_backward(&cache.pre, &dact);
        self.up.backward(store, grads, &cache.x, &dpre)
    }
}

/// Stateless form of [`MlpParams::forward`].
pub fn mlp<T: Scalar>(store: &ParamStore<T>, params: &MlpParams, x: &Tensor<T>) -> Result<Tensor<T>> {
    params.forward(store, x).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Rng};

    fn setup(d: usize, seed: u64) -> (ParamStore<f64>, MlpParams) {
        let mut layout = Layout::new();
        let p = MlpParams::register(&mut layout, "mlp", d);
        let mut store = ParamStore::materialize(layout, &Rng::new(seed));
        let mut rng = Rng::new(seed + 1);
        for id in [p.up.bias, p.down.bias] {
            *store.get_mut(id) = Tensor::randn(store.get(id).shape(), 0.5, &mut rng);
        }
        (store, p)
    }

    fn gelu_ref(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn zero_input_takes_bias_path() {
        let (store, p) = setup(4, 1);
        let y = mlp(&store, &p, &Tensor::zeros(&[1, 4])).unwrap();
        let b_up = store.get(p.up.bias).data();
        let w = store.get(p.down.weight).data();
        for o in 0..4 {
            let expect: f64 = store.get(p.down.bias).data()[o]
                + (0..16).map(|h| gelu_ref(b_up[h]) * w[h * 4 + o]).sum::<f64>();
            assert!((y.data()[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_evaluation() {
        let (store, p) = setup(4, 2);
        let x = [0.3, -1.2, 0.7, 2.0];
        let y = mlp(&store, &p, &Tensor::new(&[1, 4], x.to_vec()).unwrap()).unwrap();
        let (wu, bu) = (store.get(p.up.weight).data(), store.get(p.up.bias).data());
        let (wd, bd) = (store.get(p.down.weight).data(), store.get(p.down.bias).data());
        let hidden: Vec<f64> = (0..16)
            .map(|h| gelu_ref(bu[h] + (0..4).map(|i| x[i] * wu[i * 16 + h]).sum::<f64>()))
            .collect();
        for o in 0..4 {
            let expect = bd[o] + (0..16).map(|h| hidden[h] * wd[h * 4 + o]).sum::<f64>();
            assert!((y.data()[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_in_down_projection() {
        let (mut store, p) = setup(4, 3);
        *store.get_mut(p.down.bias) = Tensor::zeros(&[4]);
        let mut rng = Rng::new(9);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let y1 = mlp(&store, &p, &x).unwrap();
        *store.get_mut(p.down.weight) = store.get(p.down.weight).scale(2.5);
        let y2 = mlp(&store, &p, &x).unwrap();
        assert!(y2.max_abs_diff(&y1.scale(2.5)).unwrap() < 1e-12);
    }

    #[test]
    fn gradient() {
        let (store, p) = setup(4, 4);
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let r = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let loss = |flat: &[f64]| {
            let mut s = store.clone();
            s.load_flat(&flat[12..]).unwrap();
            let x = Tensor::new(&[3, 4], flat[..12].to_vec()).unwrap();
            let y = mlp(&s, &p, &x).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = p.forward(&store, &x).unwrap();
        let mut grads = Grads::zeros_like(&store);
        let dx = p.backward(&store, &mut grads, &cache, &r).unwrap();
        let mut analytic = dx.into_data();
        analytic.extend(grads.flatten());
        let mut params = x.data().to_vec();
        params.extend(store.flatten());
        let report = grad_check(loss, &analytic, &params, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
