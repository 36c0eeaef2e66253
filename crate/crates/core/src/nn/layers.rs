use std::rc::Rc;

use rand::Rng;

use super::graph::{Activation, Graph, Segment, Var, GATHER_ZERO};
use super::params::{init_weight, ones_row, zeros_row, ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        trainable: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_weight(rng, fan_in, fan_out, 1.0), trainable);
        let b = bias.then(|| store.add(format!("{name}.b"), zeros_row(fan_out), trainable));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = g.param(store, b);
                g.add_row(y, bv)
            }
            None => y,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, trainable: bool) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), ones_row(width), trainable),
            beta: store.add(format!("{name}.beta"), zeros_row(width), trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Spatial extent of a feature map batch stored as a `(batch*h*w, channels)` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapShape {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }
}

pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// im2col gather index; columns ordered (ky, kx, channel).
pub fn im2col_index(input: MapShape, kernel: usize, stride: usize, pad: usize) -> (usize, usize, Vec<u32>) {
    let ho = conv_out(input.height, kernel, stride, pad);
    let wo = conv_out(input.width, kernel, stride, pad);
    let cols = kernel * kernel * input.channels;
    let rows = input.batch * ho * wo;
    let mut index = Vec::with_capacity(rows * cols);
    for b in 0..input.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < input.height
                            && (ix as usize) < input.width;
                        for c in 0..input.channels {
                            index.push(if inside {
                                let r = (b * input.height + iy as usize) * input.width + ix as usize;
                                (r * input.channels + c) as u32
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    (rows, cols, index)
}

/// Gather index realizing a transposed convolution as a dense product:
/// output `(oy, ox)` receives input `(iy, ix)` through tap `(ky, kx)` when
/// `oy = iy*stride - pad + ky`.
pub fn conv_transpose_index(
    input: MapShape,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> (usize, usize, Vec<u32>) {
    let cols = kernel * kernel * input.channels;
    let rows = input.batch * out_h * out_w;
    let mut index = Vec::with_capacity(rows * cols);
    let src = |o: usize, k: usize, size: usize| -> Option<usize> {
        let t = o as isize + pad as isize - k as isize;
        if t < 0 || t % stride as isize != 0 {
            return None;
        }
        let i = (t / stride as isize) as usize;
        (i < size).then_some(i)
    };
    for b in 0..input.batch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let hit = src(oy, ky, input.height).zip(src(ox, kx, input.width));
                        for c in 0..input.channels {
                            index.push(match hit {
                                Some((iy, ix)) => {
                                    let r = (b * input.height + iy) * input.width + ix;
                                    (r * input.channels + c) as u32
                                }
                                None => GATHER_ZERO,
                            });
                        }
                    }
                }
            }
        }
    }
    (rows, cols, index)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub linear: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
    pub transposed: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let linear = Linear::new(store, rng, name, fan_in, out_channels, true, true);
        Conv2d {
            linear,
            kernel,
            stride,
            pad,
            out_channels,
            transposed,
        }
    }

    /// Strided convolution. Returns the output map and its shape.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, shape: MapShape) -> (Var, MapShape) {
        assert!(!self.transposed);
        let (rows, cols, index) = im2col_index(shape, self.kernel, self.stride, self.pad);
        let patches = g.gather(x, rows, cols, Rc::new(index));
        let y = self.linear.forward(g, store, patches);
        let out = MapShape {
            batch: shape.batch,
            height: conv_out(shape.height, self.kernel, self.stride, self.pad),
            width: conv_out(shape.width, self.kernel, self.stride, self.pad),
            channels: self.out_channels,
        };
        (y, out)
    }

    /// Transposed convolution to an explicit output size.
    pub fn forward_transposed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        shape: MapShape,
        out_h: usize,
        out_w: usize,
    ) -> (Var, MapShape) {
        assert!(self.transposed);
        let (rows, cols, index) =
            conv_transpose_index(shape, self.kernel, self.stride, self.pad, out_h, out_w);
        let patches = g.gather(x, rows, cols, Rc::new(index));
        let y = self.linear.forward(g, store, patches);
        let out = MapShape {
            batch: shape.batch,
            height: out_h,
            width: out_w,
            channels: self.out_channels,
        };
        (y, out)
    }
}

/// Post-norm self-attention block: `LayerNorm(x + W_o · MHA(x W_q, x W_k, x W_v))`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub norm: LayerNorm,
    pub heads: usize,
    pub causal: bool,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        causal: bool,
        trainable: bool,
    ) -> Self {
        let mut w = |suffix: &str, store: &mut ParamStore| {
            store.add(format!("{name}.{suffix}"), init_weight(rng, width, width, 1.0), trainable)
        };
        let w_q = w("w_q", store);
        let w_k = w("w_k", store);
        let w_v = w("w_v", store);
        let w_o = w("w_o", store);
        let norm = LayerNorm::new(store, &format!("{name}.ln"), width, trainable);
        AttentionBlock {
            w_q,
            w_k,
            w_v,
            w_o,
            norm,
            heads,
            causal,
        }
    }

    pub fn self_attention(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &Rc<Vec<Segment>>) -> Var {
        let wq = g.param(store, self.w_q);
        let wk = g.param(store, self.w_k);
        let wv = g.param(store, self.w_v);
        let wo = g.param(store, self.w_o);
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let a = g.attention(q, k, v, self.heads, segments.clone(), self.causal);
        g.matmul(a, wo)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &Rc<Vec<Segment>>) -> Var {
        let sa = self.self_attention(g, store, x, segments);
        let r = g.add(x, sa);
        self.norm.forward(g, store, r)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w_q, self.w_k, self.w_v, self.w_o];
        v.extend(self.norm.ids());
        v
    }
}

/// Two-layer position-wise feed-forward network.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.act(h, self.act);
        self.down.forward(g, store, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.up.ids();
        v.extend(self.down.ids());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn strided_conv_geometry_round_trips_through_transpose() {
        assert_eq!(conv_out(10, 3, 2, 1), 5);
        assert_eq!(conv_out(5, 3, 2, 1), 3);
        assert_eq!(conv_out(3, 3, 2, 1), 2);
        let shape = MapShape { batch: 2, height: 3, width: 3, channels: 1 };
        let (rows, cols, index) = conv_transpose_index(shape, 3, 2, 1, 5, 5);
        assert_eq!((rows, cols), (50, 9));
        // Output (0,0) is only fed by input (0,0) through the centre tap.
        let hits: Vec<_> = index[..9].iter().enumerate().filter(|(_, &i)| i != GATHER_ZERO).collect();
        assert_eq!(hits, vec![(4, &0)]);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv^T(y)> for matching index maps with identity weights.
        let inp = MapShape { batch: 1, height: 5, width: 5, channels: 1 };
        let (r1, c1, fwd) = im2col_index(inp, 3, 2, 1);
        let small = MapShape { batch: 1, height: 3, width: 3, channels: 1 };
        let (r2, c2, bwd) = conv_transpose_index(small, 3, 2, 1, 5, 5);
        let x = Array2::from_shape_fn((25, 1), |(i, _)| (i as f64 * 0.37).sin());
        let y = Array2::from_shape_fn((9, 1), |(i, _)| (i as f64 * 0.91).cos());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let px = g.gather(xv, r1, c1, Rc::new(fwd));
        let py = g.gather(yv, r2, c2, Rc::new(bwd));
        let lhs: f64 = (0..9)
            .map(|o| (0..9).map(|t| g.value(px)[[o, t]] * y[[o, 0]]).sum::<f64>())
            .sum();
        let rhs: f64 = (0..25).map(|o| (0..9).map(|t| g.value(py)[[o, t]] * x[[o, 0]]).sum::<f64>()).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}
