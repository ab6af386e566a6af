//! Layer primitives with hand-written backward passes and LRP rules.
//!
//! Tensors are `[N, C, H, W]` arrays of `f64`. Convolutions use zero padding
//! of `k / 2` and stride 1, and are computed as one GEMM per batch over an
//! im2col matrix whose columns are ordered `(n, h, w)`.

use std::fmt;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array4, ArrayView4, Axis, Zip};
use rand::Rng as _;

use crate::config::ParamGroup;
use crate::error::{Error, Result};
use crate::repro::Rng;

/// Stabilizer for the z⁺ and z^B relevance rules.
pub const LRP_STABILIZER: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2d {
            weight: Array4::zeros((out_channels, in_channels, kernel, kernel)),
            bias: Array1::zeros(out_channels),
        }
    }

    /// He-uniform weights, zero bias.
    pub fn init(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut Rng) -> Self {
        let mut conv = Conv2d::zeros(in_channels, out_channels, kernel);
        let bound = (6.0 / (in_channels * kernel * kernel) as f64).sqrt();
        conv.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
        conv
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn weight_matrix(weight: &Array4<f64>) -> Array2<f64> {
        let (o, c, k, _) = weight.dim();
        weight
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, c * k * k))
            .unwrap()
    }

    fn check_input(&self, x: &ArrayView4<f64>) -> Result<()> {
        if x.dim().1 != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels(),
                x.dim().1
            )));
        }
        Ok(())
    }

    /// Returns the output and the im2col matrix needed by [`Conv2d::backward`].
    pub fn forward(&self, x: ArrayView4<f64>) -> Result<(Array4<f64>, Array2<f64>)> {
        self.check_input(&x)?;
        let cols = im2col(x, self.kernel());
        let out = self.apply_cols(&self.weight, &cols, x.dim(), true);
        Ok((out, cols))
    }

    fn apply_cols(
        &self,
        weight: &Array4<f64>,
        cols: &Array2<f64>,
        (n, _, h, w): (usize, usize, usize, usize),
        with_bias: bool,
    ) -> Array4<f64> {
        let o = weight.dim().0;
        let mut out2d = Self::weight_matrix(weight).dot(cols);
        if with_bias {
            for (mut row, b) in out2d.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
                row += *b;
            }
        }
        out2d
            .into_shape_with_order((o, n, h, w))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
    }

    /// Convolution of `x` with an alternative weight tensor and no bias.
    pub fn forward_with(&self, weight: &Array4<f64>, x: ArrayView4<f64>) -> Array4<f64> {
        let cols = im2col(x, self.kernel());
        self.apply_cols(weight, &cols, x.dim(), false)
    }

    /// Gradients w.r.t. weight, bias and (optionally) the input.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        input_dim: (usize, usize, usize, usize),
        grad_out: ArrayView4<f64>,
        want_input: bool,
    ) -> (Option<Array4<f64>>, Array4<f64>, Array1<f64>) {
        let g2d = out_to_matrix(grad_out);
        let gw = g2d
            .dot(&cols.t())
            .into_shape_with_order(self.weight.dim())
            .unwrap();
        let gb = g2d.sum_axis(Axis(1));
        let gx = want_input.then(|| self.transpose_with(&self.weight, g2d.view(), input_dim));
        (gx, gw, gb)
    }

    /// Transposed convolution of `grad_out` with `weight` (the input-gradient map).
    pub fn input_grad_with(
        &self,
        weight: &Array4<f64>,
        grad_out: ArrayView4<f64>,
        input_dim: (usize, usize, usize, usize),
    ) -> Array4<f64> {
        let g2d = out_to_matrix(grad_out);
        self.transpose_with(weight, g2d.view(), input_dim)
    }

    fn transpose_with(
        &self,
        weight: &Array4<f64>,
        g2d: ndarray::ArrayView2<f64>,
        input_dim: (usize, usize, usize, usize),
    ) -> Array4<f64> {
        let gcols = Self::weight_matrix(weight).t().dot(&g2d);
        col2im(&gcols, input_dim, self.kernel())
    }
}

fn out_to_matrix(grad_out: ArrayView4<f64>) -> Array2<f64> {
    let (n, o, h, w) = grad_out.dim();
    grad_out
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, n * h * w))
        .unwrap()
}

/// `[C*k*k, N*H*W]` patch matrix; row `c*k*k + i*k + j`, column `n*H*W + h*W + w`.
pub fn im2col(x: ArrayView4<f64>, k: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = Array2::<f64>::zeros((c * k * k, n * hw));
    for ci in 0..c {
        for i in 0..k {
            for j in 0..k {
                let row = ci * k * k + i * k + j;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().unwrap();
                for ni in 0..n {
                    let plane = x.slice(s![ni, ci, .., ..]);
                    for y in 0..h {
                        let sy = y as isize + i as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + j as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dst[ni * hw + y * w + xx] = plane[[sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &Array2<f64>, (n, c, h, w): (usize, usize, usize, usize), k: usize) -> Array4<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        for i in 0..k {
            for j in 0..k {
                let row = cols.row(ci * k * k + i * k + j);
                for ni in 0..n {
                    let mut plane = x.slice_mut(s![ni, ci, .., ..]);
                    for y in 0..h {
                        let sy = y as isize + i as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + j as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            plane[[sy as usize, sx as usize]] += row[ni * hw + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// A parameter-free layer supplied from outside the crate. It takes part in
/// forward and backward passes but has no relevance rule.
pub trait CustomLayer: Send + Sync {
    fn kind(&self) -> &str;
    fn forward(&self, x: ArrayView4<f64>) -> Array4<f64>;
    /// Gradient w.r.t. the input given the input and the output gradient.
    fn backward(&self, x: ArrayView4<f64>, grad_out: ArrayView4<f64>) -> Array4<f64>;
    fn output_channels(&self, input_channels: usize) -> usize {
        input_channels
    }
}

#[derive(Clone)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    Sigmoid,
    /// 2×2 window, stride 2, floor on odd sizes; ties go to the lowest (h, w).
    MaxPool2,
    Custom(Arc<dyn CustomLayer>),
}

impl fmt::Debug for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv(c) => write!(
                f,
                "Conv({}→{}, k={})",
                c.in_channels(),
                c.out_channels(),
                c.kernel()
            ),
            Layer::Relu => write!(f, "Relu"),
            Layer::Sigmoid => write!(f, "Sigmoid"),
            Layer::MaxPool2 => write!(f, "MaxPool2"),
            Layer::Custom(c) => write!(f, "Custom({})", c.kind()),
        }
    }
}

impl Layer {
    pub fn kind(&self) -> String {
        match self {
            Layer::Conv(c) if c.kernel() == 1 => "conv1x1".into(),
            Layer::Conv(c) => format!("conv{0}x{0}", c.kernel()),
            Layer::Relu => "relu".into(),
            Layer::Sigmoid => "sigmoid".into(),
            Layer::MaxPool2 => "maxpool2".into(),
            Layer::Custom(c) => c.kind().to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NamedLayer {
    pub name: String,
    pub group: ParamGroup,
    pub layer: Layer,
}

impl NamedLayer {
    pub fn new(name: impl Into<String>, group: ParamGroup, layer: Layer) -> Self {
        NamedLayer {
            name: name.into(),
            group,
            layer,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn maxpool2(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    Array4::from_shape_fn((n, c, ho, wo), |(ni, ci, y, xx)| {
        let (sy, sx) = pool_argmax(&x, ni, ci, y, xx);
        x[[ni, ci, sy, sx]]
    })
}

fn pool_argmax(x: &ArrayView4<f64>, n: usize, c: usize, y: usize, xx: usize) -> (usize, usize) {
    let mut best = (2 * y, 2 * xx);
    for dy in 0..2 {
        for dx in 0..2 {
            let (sy, sx) = (2 * y + dy, 2 * xx + dx);
            if x[[n, c, sy, sx]] > x[[n, c, best.0, best.1]] {
                best = (sy, sx);
            }
        }
    }
    best
}

/// Routes each output value back to its window's argmax.
pub fn maxpool2_backward(x: ArrayView4<f64>, grad_out: ArrayView4<f64>) -> Array4<f64> {
    let mut gx = Array4::<f64>::zeros(x.dim());
    for ((ni, ci, y, xx), g) in grad_out.indexed_iter() {
        let (sy, sx) = pool_argmax(&x, ni, ci, y, xx);
        gx[[ni, ci, sy, sx]] += *g;
    }
    gx
}

/// Activations recorded during a forward pass through a layer stack.
pub struct Trace {
    /// Input of every layer, in order.
    pub inputs: Vec<Array4<f64>>,
    /// im2col matrices for convolution layers.
    pub cols: Vec<Option<Array2<f64>>>,
    pub output: Array4<f64>,
}

/// Forward through `layers`, keeping what the backward pass needs.
pub fn forward_trace(layers: &[NamedLayer], x: Array4<f64>) -> Result<Trace> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut cols = Vec::with_capacity(layers.len());
    let mut cur = x;
    for l in layers {
        let (next, c) = match &l.layer {
            Layer::Conv(conv) => {
                let (o, c) = conv.forward(cur.view())?;
                (o, Some(c))
            }
            Layer::Relu => (cur.mapv(|v| v.max(0.0)), None),
            Layer::Sigmoid => (cur.mapv(sigmoid), None),
            Layer::MaxPool2 => {
                check_poolable(&cur, &l.name)?;
                (maxpool2(cur.view()), None)
            }
            Layer::Custom(custom) => (custom.forward(cur.view()), None),
        };
        inputs.push(cur);
        cols.push(c);
        cur = next;
    }
    Ok(Trace {
        inputs,
        cols,
        output: cur,
    })
}

/// Forward without keeping intermediates.
pub fn forward(layers: &[NamedLayer], x: Array4<f64>) -> Result<Array4<f64>> {
    let mut cur = x;
    for l in layers {
        cur = match &l.layer {
            Layer::Conv(conv) => conv.forward(cur.view())?.0,
            Layer::Relu => cur.mapv(|v| v.max(0.0)),
            Layer::Sigmoid => cur.mapv(sigmoid),
            Layer::MaxPool2 => {
                check_poolable(&cur, &l.name)?;
                maxpool2(cur.view())
            }
            Layer::Custom(custom) => custom.forward(cur.view()),
        };
    }
    Ok(cur)
}

fn check_poolable(x: &Array4<f64>, name: &str) -> Result<()> {
    let (_, _, h, w) = x.dim();
    if h < 2 || w < 2 {
        return Err(Error::ShapeMismatch(format!(
            "{name}: spatial size {h}x{w} too small to pool"
        )));
    }
    Ok(())
}

/// Per-layer parameter gradients; `None` for parameter-free layers.
pub type LayerGrads = Vec<Option<(Array4<f64>, Array1<f64>)>>;

/// Backward through `layers`. Parameter gradients are only computed for
/// layers whose group is in `trainable`; the input gradient only if
/// `want_input`.
pub fn backward(
    layers: &[NamedLayer],
    trace: &Trace,
    grad_out: Array4<f64>,
    trainable: &dyn Fn(ParamGroup) -> bool,
    want_input: bool,
) -> (Option<Array4<f64>>, LayerGrads) {
    let mut grads: LayerGrads = vec![None; layers.len()];
    // Gradients below the lowest trainable layer are not needed unless the input gradient is.
    let lowest_needed = if want_input {
        0
    } else {
        layers
            .iter()
            .position(|l| matches!(l.layer, Layer::Conv(_)) && trainable(l.group))
            .unwrap_or(layers.len())
    };
    let mut g = grad_out;
    for i in (lowest_needed..layers.len()).rev() {
        let x = &trace.inputs[i];
        let need_below = i > lowest_needed || want_input;
        g = match &layers[i].layer {
            Layer::Conv(conv) => {
                let cols = trace.cols[i].as_ref().expect("conv layers record im2col");
                if trainable(layers[i].group) {
                    let (gx, gw, gb) = conv.backward(cols, x.dim(), g.view(), need_below);
                    grads[i] = Some((gw, gb));
                    match gx {
                        Some(gx) => gx,
                        None => break,
                    }
                } else if need_below {
                    conv.input_grad_with(&conv.weight, g.view(), x.dim())
                } else {
                    break;
                }
            }
            Layer::Relu => {
                Zip::from(&mut g).and(x).for_each(|g, &v| {
                    if v <= 0.0 {
                        *g = 0.0
                    }
                });
                g
            }
            Layer::Sigmoid => {
                Zip::from(&mut g).and(x).for_each(|g, &v| {
                    let s = sigmoid(v);
                    *g *= s * (1.0 - s);
                });
                g
            }
            Layer::MaxPool2 => maxpool2_backward(x.view(), g.view()),
            Layer::Custom(custom) => custom.backward(x.view(), g.view()),
        };
        if i == lowest_needed && !want_input {
            break;
        }
    }
    (want_input.then_some(g), grads)
}

/// Per-channel bounds of the network input, for the z^B rule.
#[derive(Debug, Clone, Copy)]
pub struct InputBounds {
    pub low: [f64; 3],
    pub high: [f64; 3],
}

/// Relevance bookkeeping for one convolution layer.
#[derive(Debug, Clone)]
pub struct LayerRelevance {
    pub name: String,
    pub rule: &'static str,
    pub relevance_out: f64,
    pub relevance_in: f64,
}

/// Propagate relevance from the stack output back to its input.
///
/// Convolutions use the z⁺ rule, except the first layer when `bounds` is
/// given, which uses the z^B rule for bounded (possibly negative) inputs.
/// ReLU and sigmoid pass relevance through; max-pooling routes it to the
/// window winner. Returns the input relevance and per-convolution sums.
pub fn relevance_backward(
    layers: &[NamedLayer],
    trace: &Trace,
    relevance: Array4<f64>,
    bounds: Option<InputBounds>,
) -> Result<(Array4<f64>, Vec<LayerRelevance>)> {
    let mut r = relevance;
    let mut report = Vec::new();
    for i in (0..layers.len()).rev() {
        let x = &trace.inputs[i];
        r = match &layers[i].layer {
            Layer::Conv(conv) => {
                let out_sum = r.sum();
                let (rule, r_in) = match bounds {
                    Some(b) if i == 0 => ("zB", zb_rule(conv, x, &r, b)),
                    _ => ("z+", zplus_rule(conv, x, &r)),
                };
                report.push(LayerRelevance {
                    name: layers[i].name.clone(),
                    rule,
                    relevance_out: out_sum,
                    relevance_in: r_in.sum(),
                });
                r_in
            }
            Layer::Relu | Layer::Sigmoid => r,
            Layer::MaxPool2 => maxpool2_backward(x.view(), r.view()),
            Layer::Custom(c) => return Err(Error::UnsupportedLayer(format!("{} ({})", layers[i].name, c.kind()))),
        };
    }
    report.reverse();
    Ok((r, report))
}

fn stabilized_ratio(r: &Array4<f64>, z: &Array4<f64>) -> Array4<f64> {
    let mut s = r.clone();
    Zip::from(&mut s).and(z).for_each(|s, &z| {
        let denom = z + LRP_STABILIZER * if z >= 0.0 { 1.0 } else { -1.0 };
        *s /= denom;
    });
    s
}

/// z⁺ rule. The share `δ / (z + δ)` of each output's relevance that the
/// stabilizer would absorb is passed down by the w² rule instead, so
/// outputs whose positive contributions are all zero still conserve.
fn zplus_rule(conv: &Conv2d, a: &Array4<f64>, r: &Array4<f64>) -> Array4<f64> {
    let wp = conv.weight.mapv(|w| w.max(0.0));
    let z = conv.forward_with(&wp, a.view());
    let s = stabilized_ratio(r, &z);
    let c = conv.input_grad_with(&wp, s.view(), a.dim());

    let w2 = conv.weight.mapv(|w| w * w);
    let coverage = conv.forward_with(&w2, Array4::ones(a.dim()).view());
    let mut rest = r.clone();
    Zip::from(&mut rest).and(&z).and(&coverage).for_each(|r, &z, &cov| {
        *r *= LRP_STABILIZER / (z + LRP_STABILIZER);
        *r = if cov > 0.0 { *r / cov } else { 0.0 };
    });
    a * &c + conv.input_grad_with(&w2, rest.view(), a.dim())
}

fn zb_rule(conv: &Conv2d, x: &Array4<f64>, r: &Array4<f64>, b: InputBounds) -> Array4<f64> {
    let wp = conv.weight.mapv(|w| w.max(0.0));
    let wn = conv.weight.mapv(|w| w.min(0.0));
    let fill = |vals: [f64; 3]| {
        Array4::from_shape_fn(x.dim(), |(_, c, _, _)| vals[c.min(2)])
    };
    let low = fill(b.low);
    let high = fill(b.high);
    let z = conv.forward_with(&conv.weight, x.view())
        - conv.forward_with(&wp, low.view())
        - conv.forward_with(&wn, high.view());
    let s = stabilized_ratio(r, &z);
    let dim = x.dim();
    let c = conv.input_grad_with(&conv.weight, s.view(), dim);
    let cp = conv.input_grad_with(&wp, s.view(), dim);
    let cn = conv.input_grad_with(&wn, s.view(), dim);
    x * &c - &low * &cp - &high * &cn
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution.
    fn naive_conv(conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (o, _, k, _) = conv.weight.dim();
        let pad = (k / 2) as isize;
        Array4::from_shape_fn((n, o, h, w), |(ni, oi, y, xx)| {
            let mut acc = conv.bias[oi];
            for ci in 0..c {
                for i in 0..k {
                    for j in 0..k {
                        let sy = y as isize + i as isize - pad;
                        let sx = xx as isize + j as isize - pad;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += conv.weight[[oi, ci, i, j]] * x[[ni, ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = Rng::seed_from_u64(1);
        let mut conv = Conv2d::init(3, 4, 3, &mut rng);
        conv.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let x = random((2, 3, 5, 6), 2);
        let (out, _) = conv.forward(x.view()).unwrap();
        let expected = naive_conv(&conv, &x);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(3);
        let conv = Conv2d::init(2, 3, 3, &mut rng);
        let x = random((1, 2, 4, 4), 4);
        let gout = random((1, 3, 4, 4), 5);
        let (_, cols) = conv.forward(x.view()).unwrap();
        let (gx, gw, _) = conv.backward(&cols, x.dim(), gout.view(), true);
        let gx = gx.unwrap();
        let loss = |conv: &Conv2d, x: &Array4<f64>| (naive_conv(conv, x) * &gout).sum();
        let h = 1e-6;
        for idx in [(0, 0, 1, 2), (0, 1, 3, 3), (0, 1, 0, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6, "{fd} vs {}", gx[idx]);
        }
        for idx in [(0, 0, 0, 0), (2, 1, 2, 1)] {
            let mut cp = conv.clone();
            cp.weight[idx] += h;
            let mut cm = conv.clone();
            cm.weight[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - gw[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = Array4::from_elem((1, 1, 2, 2), 1.0);
        let g = maxpool2_backward(x.view(), Array4::from_elem((1, 1, 1, 1), 1.0).view());
        assert_eq!(g[[0, 0, 0, 0]], 1.0);
        assert_eq!(g.sum(), 1.0);
    }

    #[test]
    fn zplus_conserves_on_positive_inputs() {
        let mut rng = Rng::seed_from_u64(8);
        let conv = Conv2d::init(3, 5, 3, &mut rng);
        let a = random((1, 3, 6, 6), 9).mapv(f64::abs);
        let r = random((1, 5, 6, 6), 10).mapv(f64::abs);
        let rin = zplus_rule(&conv, &a, &r);
        assert!(((rin.sum() - r.sum()) / r.sum()).abs() < 1e-6);
        assert!(rin.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn zb_conserves_and_is_nonnegative() {
        let mut rng = Rng::seed_from_u64(11);
        let conv = Conv2d::init(3, 4, 3, &mut rng);
        let b = InputBounds {
            low: [-2.0; 3],
            high: [2.0; 3],
        };
        let x = random((1, 3, 5, 5), 12);
        let r = random((1, 4, 5, 5), 13).mapv(f64::abs);
        let rin = zb_rule(&conv, &x, &r, b);
        assert!(((rin.sum() - r.sum()) / r.sum()).abs() < 1e-6);
    }
}
