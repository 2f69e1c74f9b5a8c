// Per-sample forward, backward and R-operator passes.

use super::{Activation, Label, LossKind, ModelSpec, ParamVector, Sample};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    pub inp: usize,
    pub out: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Layer {
    pub fn new(inp: usize, out: usize, offset: usize) -> Self {
        Self {
            inp,
            out,
            w_off: offset,
            b_off: offset + inp * out,
        }
    }

    pub fn end(&self) -> usize {
        self.b_off + self.out
    }

    #[inline]
    fn w(&self, theta: &[f64], o: usize, i: usize) -> f64 {
        theta[self.w_off + o * self.inp + i]
    }
}

pub(crate) struct Workspace {
    // pre[l]: pre-activation out of layer l; act[l]: input into layer l.
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    r_pre: Vec<Vec<f64>>,
    r_act: Vec<Vec<f64>>,
    delta: Vec<f64>,
    r_delta: Vec<f64>,
    back: Vec<f64>,
    r_back: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &ModelSpec) -> Self {
        let sizes = &spec.layer_sizes;
        let widest = sizes.iter().copied().max().unwrap_or(0);
        Self {
            pre: sizes[1..].iter().map(|&w| vec![0.0; w]).collect(),
            act: sizes.iter().map(|&w| vec![0.0; w]).collect(),
            r_pre: sizes[1..].iter().map(|&w| vec![0.0; w]).collect(),
            r_act: sizes.iter().map(|&w| vec![0.0; w]).collect(),
            delta: Vec::with_capacity(widest),
            r_delta: Vec::with_capacity(widest),
            back: Vec::with_capacity(widest),
            r_back: Vec::with_capacity(widest),
        }
    }

    pub fn min_abs_hidden_pre(&self) -> f64 {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

#[inline]
fn d1(act: Activation, z: f64, a: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - a * a,
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[inline]
fn d2(act: Activation, a: f64) -> f64 {
    match act {
        Activation::Tanh => -2.0 * a * (1.0 - a * a),
        Activation::Relu => 0.0,
    }
}

#[inline]
fn apply(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(0.0),
    }
}

pub(crate) fn forward<'a>(spec: &ModelSpec, theta: &ParamVector, x: &[f64], ws: &'a mut Workspace) -> &'a [f64] {
    let th = theta.as_slice();
    let last = spec.layers.len() - 1;
    ws.act[0].copy_from_slice(x);
    for (l, layer) in spec.layers.iter().enumerate() {
        for o in 0..layer.out {
            let mut z = th[layer.b_off + o];
            for i in 0..layer.inp {
                z += layer.w(th, o, i) * ws.act[l][i];
            }
            ws.pre[l][o] = z;
            ws.act[l + 1][o] = if l == last { z } else { apply(spec.activation, z) };
        }
    }
    &ws.act[last + 1]
}

fn onehot_or_target(label: Label, i: usize) -> f64 {
    match label {
        Label::Target(v) => v,
        Label::Class(c) if c == i => 1.0,
        Label::Class(_) => 0.0,
    }
}

fn softmax(z: &[f64]) -> (Vec<f64>, f64) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (e.iter().map(|v| v / s).collect(), m + s.ln())
}

pub(crate) fn sample_loss(spec: &ModelSpec, theta: &ParamVector, s: &Sample, ws: &mut Workspace) -> f64 {
    let out = forward(spec, theta, &s.features, ws);
    match spec.loss {
        LossKind::SquaredError => {
            0.5 * out
                .iter()
                .enumerate()
                .map(|(i, z)| (z - onehot_or_target(s.label, i)).powi(2))
                .sum::<f64>()
        }
        LossKind::CrossEntropy => {
            let c = s.label.class().expect("checked class label");
            let (_, lse) = softmax(out);
            lse - out[c]
        }
    }
}

// Writes dℓ/dz_out into ws.delta; returns softmax probabilities for cross-entropy.
fn output_delta(spec: &ModelSpec, s: &Sample, ws: &mut Workspace) -> Option<Vec<f64>> {
    let last = spec.layers.len() - 1;
    let z = &ws.pre[last];
    ws.delta.clear();
    match spec.loss {
        LossKind::SquaredError => {
            ws.delta
                .extend(z.iter().enumerate().map(|(i, v)| v - onehot_or_target(s.label, i)));
            None
        }
        LossKind::CrossEntropy => {
            let c = s.label.class().expect("checked class label");
            let (p, _) = softmax(z);
            ws.delta
                .extend(p.iter().enumerate().map(|(i, v)| if i == c { v - 1.0 } else { *v }));
            Some(p)
        }
    }
}

pub(crate) fn accumulate_gradient(
    spec: &ModelSpec,
    theta: &ParamVector,
    s: &Sample,
    ws: &mut Workspace,
    g: &mut ParamVector,
) {
    forward(spec, theta, &s.features, ws);
    output_delta(spec, s, ws);
    let th = theta.as_slice();
    for (l, layer) in spec.layers.iter().enumerate().rev() {
        for o in 0..layer.out {
            let d = ws.delta[o];
            if d == 0.0 {
                continue;
            }
            let row = layer.w_off + o * layer.inp;
            for i in 0..layer.inp {
                g.0[row + i] += d * ws.act[l][i];
            }
            g.0[layer.b_off + o] += d;
        }
        if l == 0 {
            break;
        }
        ws.back.clear();
        ws.back.resize(layer.inp, 0.0);
        for o in 0..layer.out {
            let d = ws.delta[o];
            for i in 0..layer.inp {
                ws.back[i] += layer.w(th, o, i) * d;
            }
        }
        ws.delta.clear();
        for i in 0..layer.inp {
            let deriv = d1(spec.activation, ws.pre[l - 1][i], ws.act[l][i]);
            ws.delta.push(deriv * ws.back[i]);
        }
    }
}

pub(crate) fn accumulate_hvp(
    spec: &ModelSpec,
    theta: &ParamVector,
    s: &Sample,
    v: &ParamVector,
    ws: &mut Workspace,
    hv: &mut ParamVector,
) {
    forward(spec, theta, &s.features, ws);
    let th = theta.as_slice();
    let vv = v.as_slice();
    let last = spec.layers.len() - 1;

    // Directional derivative of every activation along v.
    ws.r_act[0].iter_mut().for_each(|x| *x = 0.0);
    for (l, layer) in spec.layers.iter().enumerate() {
        for o in 0..layer.out {
            let mut rz = vv[layer.b_off + o];
            for i in 0..layer.inp {
                rz += layer.w(vv, o, i) * ws.act[l][i] + layer.w(th, o, i) * ws.r_act[l][i];
            }
            ws.r_pre[l][o] = rz;
            ws.r_act[l + 1][o] = if l == last {
                rz
            } else {
                d1(spec.activation, ws.pre[l][o], ws.act[l + 1][o]) * rz
            };
        }
    }

    let probs = output_delta(spec, s, ws);
    let rz = &ws.r_pre[last];
    ws.r_delta.clear();
    match probs {
        None => ws.r_delta.extend_from_slice(rz),
        Some(p) => {
            let mean: f64 = p.iter().zip(rz).map(|(a, b)| a * b).sum();
            ws.r_delta.extend(p.iter().zip(rz).map(|(a, b)| a * (b - mean)));
        }
    }

    for (l, layer) in spec.layers.iter().enumerate().rev() {
        for o in 0..layer.out {
            let (d, rd) = (ws.delta[o], ws.r_delta[o]);
            let row = layer.w_off + o * layer.inp;
            for i in 0..layer.inp {
                hv.0[row + i] += rd * ws.act[l][i] + d * ws.r_act[l][i];
            }
            hv.0[layer.b_off + o] += rd;
        }
        if l == 0 {
            break;
        }
        ws.back.clear();
        ws.back.resize(layer.inp, 0.0);
        ws.r_back.clear();
        ws.r_back.resize(layer.inp, 0.0);
        for o in 0..layer.out {
            let (d, rd) = (ws.delta[o], ws.r_delta[o]);
            for i in 0..layer.inp {
                let w = layer.w(th, o, i);
                ws.back[i] += w * d;
                ws.r_back[i] += layer.w(vv, o, i) * d + w * rd;
            }
        }
        ws.delta.clear();
        ws.r_delta.clear();
        for i in 0..layer.inp {
            let (z, a) = (ws.pre[l - 1][i], ws.act[l][i]);
            let s1 = d1(spec.activation, z, a);
            let s2 = d2(spec.activation, a);
            ws.delta.push(s1 * ws.back[i]);
            ws.r_delta
                .push(s2 * ws.r_pre[l - 1][i] * ws.back[i] + s1 * ws.r_back[i]);
        }
    }
}
