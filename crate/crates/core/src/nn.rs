//! Minimal fully connected networks with hand-written backward passes.
//!
//! All parameters of one network live in a single flat vector so a single
//! Adam state and a single checkpoint tensor list cover them.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// SiLU, `z * sigmoid(z)`.
#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// Multilayer perceptron with SiLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`. Hidden layers draw from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; the output layer starts at zero.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut layers = Vec::new();
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            layers.push(Layer {
                fan_in,
                fan_out,
                w: off,
                b: off + fan_in * fan_out,
            });
            off += fan_in * fan_out + fan_out;
        }
        let mut params = vec![0.0; off];
        let last = layers.len() - 1;
        for l in &layers[..last] {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for p in &mut params[l.w..l.b + l.fan_out] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Mlp { layers, params }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(name, shape, range)` for each weight and bias tensor.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("w{i}"), vec![l.fan_out, l.fan_in], l.w..l.b));
            out.push((format!("b{i}"), vec![l.fan_out], l.b..l.b + l.fan_out));
        }
        out
    }

    /// Mutable access to the output layer bias.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let l = *self.layers.last().expect("non-empty");
        &mut self.params[l.b..l.b + l.fan_out]
    }

    fn weight(&self, l: &Layer) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((l.fan_out, l.fan_in), &self.params[l.w..l.b]).expect("layer shape")
    }

    fn bias(&self, l: &Layer) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[l.b..l.b + l.fan_out])
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&self.weight(l).t());
            z += &self.bias(l);
            cache.inputs.push(h);
            if i < last {
                h = z.mapv(silu);
                cache.pre.push(z);
            } else {
                h = z;
            }
        }
        (h, cache)
    }

    pub fn infer(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&self.weight(l).t());
            z += &self.bias(l);
            h = if i < last { z.mapv(silu) } else { z };
        }
        h
    }

    /// Accumulates parameter gradients of `<dy, forward(x)>` into `grad`
    /// and returns the input gradient when `want_input_grad` is set.
    pub fn backward(
        &self,
        cache: &MlpCache,
        dy: ArrayView2<f64>,
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        assert_eq!(grad.len(), self.params.len());
        let mut dz = dy.to_owned();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let input = &cache.inputs[i];
            {
                let (gw, gb) = grad[l.w..l.b + l.fan_out].split_at_mut(l.fan_in * l.fan_out);
                let mut gw = ArrayViewMut2::from_shape((l.fan_out, l.fan_in), gw).expect("shape");
                gw += &dz.t().dot(input);
                let mut gb = ArrayViewMut1::from(gb);
                gb += &dz.sum_axis(Axis(0));
            }
            if i == 0 && !want_input_grad {
                return None;
            }
            let mut dh = dz.dot(&self.weight(l));
            if i > 0 {
                let pre = &cache.pre[i - 1];
                dh.zip_mut_with(pre, |d, &z| *d *= silu_grad(z));
            }
            dz = dh;
        }
        Some(dz)
    }
}
