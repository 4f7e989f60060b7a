//! Scalar planar normalizing flows `z ↦ z + u·tanh(c·z + b)`.

use serde::{Deserialize, Serialize};

/// Lower bound on `u·c + 1`, so the log-det argument stays ≥ this margin.
pub const INVERTIBILITY_MARGIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarLayer {
    pub u: f64,
    pub c: f64,
    pub b: f64,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl PlanarLayer {
    pub fn identity() -> Self {
        PlanarLayer { u: 0.0, c: 0.0, b: 0.0 }
    }

    /// Projects `u` so that `u·c > −1`.
    ///
    /// Layers already satisfying `u·c ≥ −1 + margin` are returned unchanged;
    /// otherwise `u` is replaced by `u + (m(u·c) − u·c)·c/c²` with
    /// `m(x) = −1 + log(1 + eˣ)`, floored at `−1 + margin`.
    pub fn enforce_invertibility(&self) -> PlanarLayer {
        let w = self.u * self.c;
        if self.c == 0.0 || w >= -1.0 + INVERTIBILITY_MARGIN * (1.0 - 1e-6) {
            return *self;
        }
        let target = (-1.0 + softplus(w)).max(-1.0 + INVERTIBILITY_MARGIN);
        PlanarLayer {
            u: self.u + (target - w) / self.c,
            ..*self
        }
    }

    /// Partial derivatives of `(value, logdet)` at `z` with respect to
    /// `(u, c, b)`.
    pub fn param_grad(&self, z: f64) -> (LayerGrad, LayerGrad) {
        let t = (self.c * z + self.b).tanh();
        let dt = 1.0 - t * t;
        let det = 1.0 + self.u * self.c * dt;
        // d(dt)/d(cz+b) = −2·t·dt
        let ddt = -2.0 * t * dt;
        let value = LayerGrad {
            u: t,
            c: self.u * dt * z,
            b: self.u * dt,
        };
        let logdet = LayerGrad {
            u: self.c * dt / det,
            c: (self.u * dt + self.u * self.c * ddt * z) / det,
            b: self.u * self.c * ddt / det,
        };
        (value, logdet)
    }

    pub fn is_invertible(&self) -> bool {
        self.u * self.c >= -1.0 + INVERTIBILITY_MARGIN * (1.0 - 1e-9) || self.c == 0.0
    }

    /// `(value, log|dvalue/dz|)`.
    #[inline]
    pub fn forward(&self, z: f64) -> (f64, f64) {
        let t = (self.c * z + self.b).tanh();
        let det = 1.0 + self.u * self.c * (1.0 - t * t);
        (z + self.u * t, det.abs().ln())
    }
}

pub fn enforce_invertibility(layer: &PlanarLayer) -> PlanarLayer {
    layer.enforce_invertibility()
}

pub fn planar_forward(z: f64, layer: &PlanarLayer) -> (f64, f64) {
    layer.forward(z)
}

/// Gradient of a downstream scalar with respect to one layer's parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerGrad {
    pub u: f64,
    pub c: f64,
    pub b: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowStack {
    pub layers: Vec<PlanarLayer>,
}

impl FlowStack {
    pub fn identity() -> Self {
        FlowStack { layers: Vec::new() }
    }

    pub fn new(layers: Vec<PlanarLayer>) -> Self {
        FlowStack { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn enforce_all(&mut self) {
        for l in &mut self.layers {
            *l = l.enforce_invertibility();
        }
    }

    /// Value only; the hot path during sampling.
    #[inline]
    pub fn apply(&self, mut z: f64) -> f64 {
        for l in &self.layers {
            z += l.u * (l.c * z + l.b).tanh();
        }
        z
    }

    pub fn forward(&self, z: f64) -> (f64, f64) {
        let mut v = z;
        let mut total = 0.0;
        for l in &self.layers {
            let (nv, ld) = l.forward(v);
            v = nv;
            total += ld;
        }
        (v, total)
    }

    /// Pulls `dvalue` (adjoint of the output) back through the stack.
    ///
    /// Returns the adjoint of the input `z` and accumulates per-layer
    /// parameter gradients into `grads` (length = depth).
    pub fn backward(&self, z: f64, dvalue: f64, grads: &mut [LayerGrad]) -> f64 {
        debug_assert_eq!(grads.len(), self.layers.len());
        let k = self.layers.len();
        let mut inputs = [0.0f64; 16];
        let mut heap;
        let ins: &mut [f64] = if k <= 16 {
            &mut inputs[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        let mut v = z;
        for (i, l) in self.layers.iter().enumerate() {
            ins[i] = v;
            v += l.u * (l.c * v + l.b).tanh();
        }
        let mut adj = dvalue;
        for i in (0..k).rev() {
            let l = &self.layers[i];
            let x = ins[i];
            let t = (l.c * x + l.b).tanh();
            let dt = 1.0 - t * t;
            grads[i].u += adj * t;
            grads[i].c += adj * l.u * dt * x;
            grads[i].b += adj * l.u * dt;
            adj *= 1.0 + l.u * l.c * dt;
        }
        adj
    }
}

pub fn stack_forward(z: f64, stack: &FlowStack) -> (f64, f64) {
    stack.forward(z)
}

/// Log-density of the flow output, given the base log-density at `z`.
pub fn transformed_log_density(z: f64, base_logpdf_at_z: f64, stack: &FlowStack) -> f64 {
    base_logpdf_at_z - stack.forward(z).1
}
