use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Layer, Pass};
use super::tensor::Tensor;

/// A feed-forward stack of layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

/// Gradient buffers aligned with [`Network::visit_params`] order.
#[derive(Clone, Debug)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zero(&mut self) {
        for g in &mut self.0 {
            g.fill(0.0);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.0 {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Everything a training or attribution pass needs to run backward.
pub struct Trace {
    pub output: Tensor,
    pub caches: Vec<Cache>,
    /// Outputs of the requested tap layers, in request order.
    pub taps: Vec<Tensor>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }

    pub fn zero_grads(&self) -> Grads {
        let mut v = Vec::new();
        self.visit_params(&mut |p| v.push(vec![0.0; p.len()]));
        Grads(v)
    }

    /// Output shape for an input of the given shape.
    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        self.layers
            .iter()
            .fold(input.to_vec(), |s, l| l.output_shape(&s))
    }

    /// Shape after layer `index` for the given input shape.
    pub fn shape_after(&self, input: &[usize], index: usize) -> Vec<usize> {
        self.layers[..=index]
            .iter()
            .fold(input.to_vec(), |s, l| l.output_shape(&s))
    }

    /// Inference pass; no caches are kept.
    pub fn predict(&self, x: &Tensor) -> Tensor {
        self.run(x.clone(), false, false, None, &[]).output
    }

    /// Inference pass that also returns the outputs of `taps` layers.
    pub fn predict_with_taps(&self, x: &Tensor, taps: &[usize]) -> (Tensor, Vec<Tensor>) {
        let t = self.run(x.clone(), false, false, None, taps);
        (t.output, t.taps)
    }

    /// Forward pass that keeps caches for a later [`Network::backward`].
    pub fn forward(
        &self,
        x: &Tensor,
        train: bool,
        rng: Option<&mut ChaCha8Rng>,
        taps: &[usize],
    ) -> Trace {
        self.run(x.clone(), train, true, rng, taps)
    }

    fn run(
        &self,
        x: Tensor,
        train: bool,
        keep_cache: bool,
        rng: Option<&mut ChaCha8Rng>,
        taps: &[usize],
    ) -> Trace {
        let mut pass = Pass {
            train,
            keep_cache,
            rng,
        };
        let mut caches = Vec::with_capacity(if keep_cache { self.layers.len() } else { 0 });
        let mut tapped: Vec<Option<Tensor>> = vec![None; taps.len()];
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let (o, c) = l.forward(h, &mut pass);
            if keep_cache {
                caches.push(c);
            }
            for (slot, &t) in taps.iter().enumerate() {
                if t == i {
                    tapped[slot] = Some(o.clone());
                }
            }
            h = o;
        }
        Trace {
            output: h,
            caches,
            taps: tapped
                .into_iter()
                .map(|t| t.expect("tap index out of range"))
                .collect(),
        }
    }

    /// Applies running-statistic updates recorded by a training pass.
    pub fn absorb_batch_stats(&mut self, trace: &Trace) {
        for (l, c) in self.layers.iter_mut().zip(&trace.caches) {
            l.absorb_batch_stats(c);
        }
    }

    /// Backward pass from `grad_out` (w.r.t. the network output).
    ///
    /// `inject` adds extra upstream gradient to the output of the named
    /// layer indices before that layer is differentiated.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: Tensor,
        inject: &[(usize, &Tensor)],
        grads: Option<&mut Grads>,
        want_input_grad: bool,
    ) -> Tensor {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offsets.push(acc);
            acc += l.param_slots();
        }
        let first_param = self
            .layers
            .iter()
            .position(|l| l.param_slots() > 0)
            .unwrap_or(0);
        let lowest = if want_input_grad { 0 } else { first_param };
        let mut grads = grads;
        let mut g = grad_out;
        for i in (lowest..self.layers.len()).rev() {
            for (at, extra) in inject {
                if *at == i {
                    g.add_assign(extra);
                }
            }
            let l = &self.layers[i];
            let slots = l.param_slots();
            let gs = match grads.as_deref_mut() {
                Some(gr) if slots > 0 => Some(&mut gr.0[offsets[i]..offsets[i] + slots]),
                _ => None,
            };
            let want = want_input_grad || i > lowest;
            g = l.backward(&trace.caches[i], g, gs, want);
        }
        g
    }
}
