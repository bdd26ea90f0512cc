//! Single-layer message-passing network over a [`StarGraph`].
//!
//! Forward pass:
//!
//! ```text
//! m_l  = ReLU-MLP_msg([x_l, y_l, d_l])            one per anchor
//! a    = mean_l m_l                               (or sum)
//! u    = ReLU-MLP_upd([a, dummy])
//! out  = sigmoid(MLP_read([u, dummy]))            normalized [x̂, ŷ]
//! ```
//!
//! All parameters live in one flat vector, layer by layer (weights row-major
//! `out × in`, then biases), which is also the on-disk order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::StarGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

/// Layer widths of the three MLP stacks, input width first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub message: Vec<usize>,
    pub update: Vec<usize>,
    pub readout: Vec<usize>,
}

impl Widths {
    /// `{3,16,64}`, `{66,32,16}`, `{18,8,2}`.
    pub fn standard() -> Self {
        Self {
            message: vec![3, 16, 64],
            update: vec![66, 32, 16],
            readout: vec![18, 8, 2],
        }
    }

    /// Small variant used for exhaustive gradient checks.
    pub fn reduced() -> Self {
        Self {
            message: vec![3, 4, 8],
            update: vec![10, 4, 4],
            readout: vec![6, 4, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.message.len() >= 2
            && self.update.len() >= 2
            && self.readout.len() >= 2
            && self.message[0] == 3
            && self.update[0] == self.message[self.message.len() - 1] + 2
            && self.readout[0] == self.update[self.update.len() - 1] + 2
            && self.readout[self.readout.len() - 1] == 2
            && self.message.iter().chain(&self.update).chain(&self.readout).all(|&w| w > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("inconsistent GNN widths {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

fn layout(widths: &[usize], offset: &mut usize) -> Vec<Dense> {
    widths
        .windows(2)
        .map(|w| {
            let d = Dense {
                fan_in: w[0],
                fan_out: w[1],
                w: *offset,
                b: *offset + w[0] * w[1],
            };
            *offset += d.len();
            d
        })
        .collect()
}

/// Activations of one MLP pass; `acts[0]` is the input.
type Trace = Vec<Vec<f64>>;

struct GraphTrace {
    messages: Vec<Trace>,
    update: Trace,
    readout: Trace,
    output: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    widths: Widths,
    aggregation: Aggregation,
    message: Vec<Dense>,
    update: Vec<Dense>,
    readout: Vec<Dense>,
    params: Vec<f64>,
}

/// Beyond this logit the sigmoid would round to exactly 0 or 1.
const LOGIT_LIMIT: f64 = 36.0;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-LOGIT_LIMIT, LOGIT_LIMIT)).exp())
}

impl GnnModel {
    /// All-zero parameters.
    pub fn zeros(widths: Widths, aggregation: Aggregation) -> Result<Self> {
        widths.validate()?;
        let mut offset = 0;
        let message = layout(&widths.message, &mut offset);
        let update = layout(&widths.update, &mut offset);
        let readout = layout(&widths.readout, &mut offset);
        Ok(Self {
            widths,
            aggregation,
            message,
            update,
            readout,
            params: vec![0.0; offset],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(widths: Widths, aggregation: Aggregation, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(widths, aggregation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Dense> = model.layers().copied().collect();
        for d in layers {
            let limit = (6.0 / (d.fan_in + d.fan_out) as f64).sqrt();
            for p in &mut model.params[d.w..d.b] {
                *p = rng.random_range(-limit..limit);
            }
        }
        Ok(model)
    }

    pub fn from_params(widths: Widths, aggregation: Aggregation, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeros(widths, aggregation)?;
        if params.len() != model.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn widths(&self) -> &Widths {
        &self.widths
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Parameter tensors as `(name, start, len)` in storage order.
    pub fn tensors(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (stack, layers) in [("message", &self.message), ("update", &self.update), ("readout", &self.readout)] {
            for (i, d) in layers.iter().enumerate() {
                out.push((format!("{stack}.{i}.weight"), d.w, d.fan_in * d.fan_out));
                out.push((format!("{stack}.{i}.bias"), d.b, d.fan_out));
            }
        }
        out
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.message.iter().chain(&self.update).chain(&self.readout)
    }

    fn mlp_forward(&self, layers: &[Dense], input: Vec<f64>, relu_last: bool) -> Trace {
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(input);
        for (i, d) in layers.iter().enumerate() {
            let x = &acts[i];
            let w = &self.params[d.w..d.b];
            let b = &self.params[d.b..d.b + d.fan_out];
            let relu = relu_last || i + 1 < layers.len();
            let y: Vec<f64> = (0..d.fan_out)
                .map(|o| {
                    let row = &w[o * d.fan_in..(o + 1) * d.fan_in];
                    let z = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    if relu { z.max(0.0) } else { z }
                })
                .collect();
            acts.push(y);
        }
        acts
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the MLP input.
    fn mlp_backward(&self, layers: &[Dense], acts: &Trace, relu_last: bool, mut delta: Vec<f64>, grads: &mut [f64]) -> Vec<f64> {
        for (i, d) in layers.iter().enumerate().rev() {
            if relu_last || i + 1 < layers.len() {
                for (g, &a) in delta.iter_mut().zip(&acts[i + 1]) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let x = &acts[i];
            let w = &self.params[d.w..d.b];
            let mut dx = vec![0.0; d.fan_in];
            for (o, &g) in delta.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grads[d.b + o] += g;
                let gw = &mut grads[d.w + o * d.fan_in..d.w + (o + 1) * d.fan_in];
                for (gw, &xi) in gw.iter_mut().zip(x) {
                    *gw += g * xi;
                }
                for (dxi, &wi) in dx.iter_mut().zip(&w[o * d.fan_in..(o + 1) * d.fan_in]) {
                    *dxi += g * wi;
                }
            }
            delta = dx;
        }
        delta
    }

    fn trace(&self, g: &StarGraph) -> Result<GraphTrace> {
        if g.anchor_feats.is_empty() {
            return Err(Error::Graph("a star graph needs at least one anchor".into()));
        }
        let messages: Vec<Trace> = g
            .anchor_feats
            .iter()
            .map(|row| self.mlp_forward(&self.message, row.to_vec(), true))
            .collect();
        let width = self.message.last().map(|d| d.fan_out).unwrap_or_default();
        // Each channel is summed in sorted order so that permuting the
        // anchors cannot change the result, not even by rounding.
        let mut column = Vec::with_capacity(messages.len());
        let mut agg: Vec<f64> = (0..width)
            .map(|c| {
                column.clear();
                column.extend(messages.iter().map(|m| m.last().map_or(0.0, |out| out[c])));
                column.sort_by(f64::total_cmp);
                column.iter().sum()
            })
            .collect();
        if self.aggregation == Aggregation::Mean {
            let inv = 1.0 / messages.len() as f64;
            agg.iter_mut().for_each(|a| *a *= inv);
        }
        agg.extend_from_slice(&g.agv_dummy);
        let update = self.mlp_forward(&self.update, agg, true);
        let mut r_in = update.last().cloned().unwrap_or_default();
        r_in.extend_from_slice(&g.agv_dummy);
        let readout = self.mlp_forward(&self.readout, r_in, false);
        let z = readout.last().map(|z| [z[0], z[1]]).unwrap_or_default();
        Ok(GraphTrace {
            messages,
            update,
            readout,
            output: [sigmoid(z[0]), sigmoid(z[1])],
        })
    }

    /// Normalized position estimate in `(0, 1)²`.
    pub fn forward(&self, g: &StarGraph) -> Result<[f64; 2]> {
        Ok(self.trace(g)?.output)
    }

    fn backward(&self, t: &GraphTrace, d_out: [f64; 2], grads: &mut [f64]) {
        let dz: Vec<f64> = (0..2).map(|c| d_out[c] * t.output[c] * (1.0 - t.output[c])).collect();
        let d_rin = self.mlp_backward(&self.readout, &t.readout, false, dz, grads);
        let upd_out = self.update.last().map(|d| d.fan_out).unwrap_or_default();
        let d_uin = self.mlp_backward(&self.update, &t.update, true, d_rin[..upd_out].to_vec(), grads);
        let msg_out = self.message.last().map(|d| d.fan_out).unwrap_or_default();
        let scale = match self.aggregation {
            Aggregation::Mean => 1.0 / t.messages.len() as f64,
            Aggregation::Sum => 1.0,
        };
        let d_msg: Vec<f64> = d_uin[..msg_out].iter().map(|v| v * scale).collect();
        for m in &t.messages {
            self.mlp_backward(&self.message, m, true, d_msg.clone(), grads);
        }
    }

    /// Mean over the batch of the squared Euclidean error in normalized
    /// coordinates, with its gradient in parameter storage order.
    pub fn loss_and_gradients(&self, batch: &[&StarGraph]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let n = batch.len() as f64;
        let mut grads = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for g in batch {
            let label = g.label.ok_or_else(|| Error::Contract("training graph has no label".into()))?;
            let t = self.trace(g)?;
            let err = [t.output[0] - label[0], t.output[1] - label[1]];
            loss += err[0] * err[0] + err[1] * err[1];
            self.backward(&t, [2.0 * err[0] / n, 2.0 * err[1] / n], &mut grads);
        }
        Ok((loss / n, grads))
    }

    /// Loss only; same definition as [`Self::loss_and_gradients`].
    pub fn loss(&self, batch: &[&StarGraph]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut total = 0.0;
        for g in batch {
            let label = g.label.ok_or_else(|| Error::Contract("graph has no label".into()))?;
            let y = self.forward(g)?;
            total += (y[0] - label[0]).powi(2) + (y[1] - label[1]).powi(2);
        }
        Ok(total / batch.len() as f64)
    }
}
