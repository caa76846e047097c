//! Small dense networks evaluated one point at a time, with a hand-written
//! backward pass.

use serde::{Deserialize, Serialize};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Softplus,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputMap {
    Linear,
    Sigmoid,
}

/// Fully connected network. Each layer stores its weight matrix row-major
/// (`out x in`) followed by its bias, contiguously from `offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub offset: usize,
    pub hidden: Activation,
    pub output: OutputMap,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTape {
    /// `inputs[k]` is the input of layer `k`.
    inputs: Vec<Vec<f64>>,
    /// `pre[k]` is the pre-activation output of layer `k`.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, offset: usize, hidden: Activation, output: OutputMap) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            sizes,
            offset,
            hidden,
            output,
        }
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_len(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weight offset, bias offset)` of layer `k`.
    pub fn layer_offsets(&self, k: usize) -> (usize, usize) {
        let mut off = self.offset;
        for w in self.sizes.windows(2).take(k) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.sizes[k] * self.sizes[k + 1])
    }

    pub fn forward_into(&self, params: &[f64], x: &[f64], tape: &mut MlpTape) {
        debug_assert_eq!(x.len(), self.input_len());
        let n = self.layers();
        tape.inputs.resize_with(n, Vec::new);
        tape.pre.resize_with(n, Vec::new);
        tape.inputs[0].clear();
        tape.inputs[0].extend_from_slice(x);
        let mut off = self.offset;
        for k in 0..n {
            let (nin, nout) = (self.sizes[k], self.sizes[k + 1]);
            let w = &params[off..off + nin * nout];
            let b = &params[off + nin * nout..off + nin * nout + nout];
            off += nin * nout + nout;
            let (before, after) = tape.inputs.split_at_mut(k + 1);
            let input = &before[k];
            let pre = &mut tape.pre[k];
            pre.clear();
            for o in 0..nout {
                let row = &w[o * nin..(o + 1) * nin];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(input.iter()) {
                    acc += wi * xi;
                }
                pre.push(acc);
            }
            if k + 1 < n {
                let next = &mut after[0];
                next.clear();
                next.extend(pre.iter().map(|&v| self.hidden.apply(v)));
            }
        }
        tape.output.clear();
        let last = &tape.pre[n - 1];
        match self.output {
            OutputMap::Linear => tape.output.extend_from_slice(last),
            OutputMap::Sigmoid => tape.output.extend(last.iter().map(|&v| sigmoid(v))),
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut tape = MlpTape::default();
        self.forward_into(params, x, &mut tape);
        tape.output
    }

    /// Accumulates parameter gradients into `grad` and, if given, writes the
    /// input adjoint into `d_input`.
    pub fn backward(
        &self,
        params: &[f64],
        tape: &MlpTape,
        d_output: &[f64],
        grad: &mut [f64],
        mut d_input: Option<&mut [f64]>,
    ) {
        let n = self.layers();
        let mut delta: Vec<f64> = match self.output {
            OutputMap::Linear => d_output.to_vec(),
            OutputMap::Sigmoid => d_output
                .iter()
                .zip(&tape.output)
                .map(|(d, y)| d * y * (1.0 - y))
                .collect(),
        };
        for k in (0..n).rev() {
            let (nin, nout) = (self.sizes[k], self.sizes[k + 1]);
            let (w_off, b_off) = self.layer_offsets(k);
            let input = &tape.inputs[k];
            for o in 0..nout {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[b_off + o] += d;
                let g = &mut grad[w_off + o * nin..w_off + (o + 1) * nin];
                for (gi, xi) in g.iter_mut().zip(input.iter()) {
                    *gi += d * xi;
                }
            }
            let need_input = k > 0 || d_input.is_some();
            if !need_input {
                break;
            }
            let w = &params[w_off..w_off + nin * nout];
            let mut d_in = vec![0.0; nin];
            for o in 0..nout {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (di, wi) in d_in.iter_mut().zip(&w[o * nin..(o + 1) * nin]) {
                    *di += d * wi;
                }
            }
            if k > 0 {
                let pre = &tape.pre[k - 1];
                for (di, &p) in d_in.iter_mut().zip(pre) {
                    *di *= self.hidden.derivative(p);
                }
                delta = d_in;
            } else if let Some(out) = d_input.as_deref_mut() {
                out.copy_from_slice(&d_in);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Mlp, Vec<f64>) {
        let mlp = Mlp::new(vec![3, 4, 2], 0, Activation::Softplus, OutputMap::Linear);
        let params: Vec<f64> = (0..mlp.param_len())
            .map(|i| ((i * 37 % 17) as f64 - 8.0) / 10.0)
            .collect();
        (mlp, params)
    }

    #[test]
    fn softplus_is_stable() {
        assert!((Activation::Softplus.apply(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(Activation::Softplus.apply(800.0), 800.0);
        assert!(Activation::Softplus.apply(-800.0) >= 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (mlp, params) = toy();
        let x = [0.3, -0.7, 1.1];
        let d_out = [1.0, -0.5];
        let loss = |p: &[f64], x: &[f64]| {
            let y = mlp.forward(p, x);
            y[0] - 0.5 * y[1]
        };
        let mut tape = MlpTape::default();
        mlp.forward_into(&params, &x, &mut tape);
        let mut grad = vec![0.0; params.len()];
        let mut d_in = [0.0; 3];
        mlp.backward(&params, &tape, &d_out, &mut grad, Some(&mut d_in));
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&p, &x);
            p[i] -= 2.0 * h;
            let down = loss(&p, &x);
            assert!(
                ((up - down) / (2.0 * h) - grad[i]).abs() < 1e-7,
                "param {i}"
            );
        }
        for a in 0..3 {
            let mut xp = x;
            xp[a] += h;
            let up = loss(&params, &xp);
            xp[a] -= 2.0 * h;
            let down = loss(&params, &xp);
            assert!(
                ((up - down) / (2.0 * h) - d_in[a]).abs() < 1e-7,
                "input {a}"
            );
        }
    }
}
