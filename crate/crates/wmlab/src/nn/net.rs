//! Classifier network built from an architecture descriptor string.
//!
//! Descriptors:
//! - `smallresnet:base=16,k=10,in=3x32x32` — 8-conv residual net with global
//!   average pooling (the default desk architecture).
//! - `mlp:in=2,hidden=32,k=2` — two-layer perceptron for toy problems.
//! - `linear:in=2,k=2` — a single linear map.

use ndarray::{Array2, Array4};

use super::layers::{global_avg_pool, global_avg_pool_backward, Conv2d, Linear, Relu4};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct ClassifierNet {
    descriptor: String,
    k: usize,
    /// (C, H, W)
    input: (usize, usize, usize),
    body: Body,
}

#[derive(Debug, Clone)]
enum Body {
    SmallResNet(Box<SmallResNet>),
    Mlp { l1: Linear, l2: Linear, relu_mask: Option<Array2<f32>> },
    LinearNet { l: Linear },
}

#[derive(Debug, Clone)]
struct SmallResNet {
    stem: Conv2d,
    stem_relu: Relu4,
    stages: Vec<Stage>,
    fc: Linear,
    // caches
    pool_hw: (usize, usize),
    pooled: Option<Array2<f32>>,
}

#[derive(Debug, Clone)]
struct Stage {
    down: Option<(Conv2d, Relu4)>,
    c1: Conv2d,
    r1: Relu4,
    c2: Conv2d,
    out_relu: Relu4,
    skip: Option<Array4<f32>>,
}

fn parse_kv(desc: &str) -> Result<(String, std::collections::HashMap<String, String>)> {
    let (name, rest) = desc
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("bad architecture descriptor `{desc}`")))?;
    let mut map = std::collections::HashMap::new();
    for part in rest.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad descriptor field `{part}`")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok((name.to_string(), map))
}

fn parse_in(v: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("bad input shape `{v}`")));
    }
    Ok((
        parts[0].parse().map_err(|_| Error::Config(format!("bad input shape `{v}`")))?,
        parts[1].parse().map_err(|_| Error::Config(format!("bad input shape `{v}`")))?,
        parts[2].parse().map_err(|_| Error::Config(format!("bad input shape `{v}`")))?,
    ))
}

impl ClassifierNet {
    pub fn from_descriptor(desc: &str, seed: u64) -> Result<Self> {
        let mut rng = rng::derive(seed, &format!("init:{desc}"));
        let (name, kv) = parse_kv(desc)?;
        let get = |key: &str| -> Result<usize> {
            kv.get(key)
                .ok_or_else(|| Error::Config(format!("descriptor `{desc}` missing `{key}`")))?
                .parse()
                .map_err(|_| Error::Config(format!("bad `{key}` in `{desc}`")))
        };
        match name.as_str() {
            "smallresnet" => {
                let base = get("base")?;
                let k = get("k")?;
                let input = parse_in(
                    kv.get("in")
                        .ok_or_else(|| Error::Config(format!("descriptor `{desc}` missing `in`")))?,
                )?;
                let (cin, h, w) = input;
                let stem = Conv2d::new(cin, base, 3, 1, 1, &mut rng);
                let mut stages = Vec::new();
                let mut ch = base;
                let mut hw = (h, w);
                for s in 0..3 {
                    let down = if s == 0 {
                        None
                    } else {
                        let d = Conv2d::new(ch, ch * 2, 3, 2, 1, &mut rng);
                        ch *= 2;
                        hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
                        Some((d, Relu4::default()))
                    };
                    stages.push(Stage {
                        down,
                        c1: Conv2d::new(ch, ch, 3, 1, 1, &mut rng),
                        r1: Relu4::default(),
                        c2: Conv2d::new(ch, ch, 3, 1, 1, &mut rng),
                        out_relu: Relu4::default(),
                        skip: None,
                    });
                }
                let fc = Linear::new(ch, k, &mut rng);
                Ok(Self {
                    descriptor: desc.to_string(),
                    k,
                    input,
                    body: Body::SmallResNet(Box::new(SmallResNet {
                        stem,
                        stem_relu: Relu4::default(),
                        stages,
                        fc,
                        pool_hw: hw,
                        pooled: None,
                    })),
                })
            }
            "mlp" => {
                let input = get("in")?;
                let hidden = get("hidden")?;
                let k = get("k")?;
                Ok(Self {
                    descriptor: desc.to_string(),
                    k,
                    input: (1, 1, input),
                    body: Body::Mlp {
                        l1: Linear::new(input, hidden, &mut rng),
                        l2: Linear::new(hidden, k, &mut rng),
                        relu_mask: None,
                    },
                })
            }
            "linear" => {
                let input = get("in")?;
                let k = get("k")?;
                Ok(Self {
                    descriptor: desc.to_string(),
                    k,
                    input: (1, 1, input),
                    body: Body::LinearNet {
                        l: Linear::new(input, k, &mut rng),
                    },
                })
            }
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    /// Expected input shape (C, H, W).
    pub fn input_chw(&self) -> (usize, usize, usize) {
        self.input
    }

    /// Forward pass over a batch, caching intermediates for [`Self::backward`].
    pub fn forward(&mut self, x: &Array4<f32>) -> Array2<f32> {
        match &mut self.body {
            Body::SmallResNet(net) => {
                let mut h = net.stem_relu.forward(&net.stem.forward(x));
                for stage in &mut net.stages {
                    if let Some((down, relu)) = &mut stage.down {
                        h = relu.forward(&down.forward(&h));
                    }
                    stage.skip = Some(h.clone());
                    let a = stage.r1.forward(&stage.c1.forward(&h));
                    let b = stage.c2.forward(&a);
                    h = stage.out_relu.forward(&(&b + stage.skip.as_ref().unwrap()));
                }
                let pooled = global_avg_pool(&h);
                net.pooled = Some(pooled.clone());
                net.fc.forward(&pooled)
            }
            Body::Mlp { l1, l2, relu_mask } => {
                let flat = flatten(x);
                let h = l1.forward(&flat);
                let mask = h.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let h = h.mapv(|v| v.max(0.0));
                *relu_mask = Some(mask);
                l2.forward(&h)
            }
            Body::LinearNet { l } => l.forward(&flatten(x)),
        }
    }

    /// Backward pass from logit gradients. Accumulates parameter gradients and
    /// returns the gradient w.r.t. the input batch.
    pub fn backward(&mut self, dlogits: &Array2<f32>) -> Array4<f32> {
        self.backward_impl(dlogits, None)
    }

    /// Pooled penultimate features cached by the most recent [`Self::forward`]
    /// (residual net only).
    pub fn last_features(&self) -> Option<&Array2<f32>> {
        match &self.body {
            Body::SmallResNet(net) => net.pooled.as_ref(),
            _ => None,
        }
    }

    /// Backward pass from logit gradients plus an extra gradient on the pooled
    /// penultimate features. The feature gradient is ignored for bodies
    /// without a pooled representation.
    pub fn backward_with_feature_grad(
        &mut self,
        dlogits: &Array2<f32>,
        dfeat: &Array2<f32>,
    ) -> Array4<f32> {
        self.backward_impl(dlogits, Some(dfeat))
    }

    fn backward_impl(&mut self, dlogits: &Array2<f32>, dfeat: Option<&Array2<f32>>) -> Array4<f32> {
        let input = self.input;
        match &mut self.body {
            Body::SmallResNet(net) => {
                let mut dpool = net.fc.backward(dlogits);
                if let Some(df) = dfeat {
                    dpool += df;
                }
                let (ph, pw) = net.pool_hw;
                let mut dh = global_avg_pool_backward(&dpool, ph, pw);
                for stage in net.stages.iter_mut().rev() {
                    let dsum = stage.out_relu.backward(&dh);
                    let da = stage.c2.backward(&dsum);
                    let dskip_branch = stage.c1.backward(&stage.r1.backward(&da));
                    let mut dpre = dsum; // skip path
                    dpre += &dskip_branch;
                    if let Some((down, relu)) = &mut stage.down {
                        dpre = down.backward(&relu.backward(&dpre));
                    }
                    dh = dpre;
                }
                net.stem.backward(&net.stem_relu.backward(&dh))
            }
            Body::Mlp { l1, l2, relu_mask } => {
                let dh = l2.backward(dlogits);
                let dh = dh * relu_mask.as_ref().expect("forward before backward");
                let dflat = l1.backward(&dh);
                unflatten(&dflat, input)
            }
            Body::LinearNet { l } => unflatten(&l.backward(dlogits), input),
        }
    }

    pub fn num_params(&self) -> usize {
        match &self.body {
            Body::SmallResNet(net) => {
                let mut n = net.stem.num_params() + net.fc.num_params();
                for s in &net.stages {
                    if let Some((d, _)) = &s.down {
                        n += d.num_params();
                    }
                    n += s.c1.num_params() + s.c2.num_params();
                }
                n
            }
            Body::Mlp { l1, l2, .. } => l1.num_params() + l2.num_params(),
            Body::LinearNet { l } => l.num_params(),
        }
    }

    fn visit<F: FnMut(&[f32])>(&self, mut f: F) {
        match &self.body {
            Body::SmallResNet(net) => {
                f(net.stem.w.as_slice().unwrap());
                f(net.stem.b.as_slice().unwrap());
                for s in &net.stages {
                    if let Some((d, _)) = &s.down {
                        f(d.w.as_slice().unwrap());
                        f(d.b.as_slice().unwrap());
                    }
                    f(s.c1.w.as_slice().unwrap());
                    f(s.c1.b.as_slice().unwrap());
                    f(s.c2.w.as_slice().unwrap());
                    f(s.c2.b.as_slice().unwrap());
                }
                f(net.fc.w.as_slice().unwrap());
                f(net.fc.b.as_slice().unwrap());
            }
            Body::Mlp { l1, l2, .. } => {
                f(l1.w.as_slice().unwrap());
                f(l1.b.as_slice().unwrap());
                f(l2.w.as_slice().unwrap());
                f(l2.b.as_slice().unwrap());
            }
            Body::LinearNet { l } => {
                f(l.w.as_slice().unwrap());
                f(l.b.as_slice().unwrap());
            }
        }
    }

    fn visit_mut<F: FnMut(&mut [f32])>(&mut self, mut f: F) {
        match &mut self.body {
            Body::SmallResNet(net) => {
                f(net.stem.w.as_slice_mut().unwrap());
                f(net.stem.b.as_slice_mut().unwrap());
                for s in &mut net.stages {
                    if let Some((d, _)) = &mut s.down {
                        f(d.w.as_slice_mut().unwrap());
                        f(d.b.as_slice_mut().unwrap());
                    }
                    f(s.c1.w.as_slice_mut().unwrap());
                    f(s.c1.b.as_slice_mut().unwrap());
                    f(s.c2.w.as_slice_mut().unwrap());
                    f(s.c2.b.as_slice_mut().unwrap());
                }
                f(net.fc.w.as_slice_mut().unwrap());
                f(net.fc.b.as_slice_mut().unwrap());
            }
            Body::Mlp { l1, l2, .. } => {
                f(l1.w.as_slice_mut().unwrap());
                f(l1.b.as_slice_mut().unwrap());
                f(l2.w.as_slice_mut().unwrap());
                f(l2.b.as_slice_mut().unwrap());
            }
            Body::LinearNet { l } => {
                f(l.w.as_slice_mut().unwrap());
                f(l.b.as_slice_mut().unwrap());
            }
        }
    }

    fn visit_grads<F: FnMut(&[f32])>(&self, mut f: F) {
        match &self.body {
            Body::SmallResNet(net) => {
                f(net.stem.gw.as_slice().unwrap());
                f(net.stem.gb.as_slice().unwrap());
                for s in &net.stages {
                    if let Some((d, _)) = &s.down {
                        f(d.gw.as_slice().unwrap());
                        f(d.gb.as_slice().unwrap());
                    }
                    f(s.c1.gw.as_slice().unwrap());
                    f(s.c1.gb.as_slice().unwrap());
                    f(s.c2.gw.as_slice().unwrap());
                    f(s.c2.gb.as_slice().unwrap());
                }
                f(net.fc.gw.as_slice().unwrap());
                f(net.fc.gb.as_slice().unwrap());
            }
            Body::Mlp { l1, l2, .. } => {
                f(l1.gw.as_slice().unwrap());
                f(l1.gb.as_slice().unwrap());
                f(l2.gw.as_slice().unwrap());
                f(l2.gb.as_slice().unwrap());
            }
            Body::LinearNet { l } => {
                f(l.gw.as_slice().unwrap());
                f(l.gb.as_slice().unwrap());
            }
        }
    }

    fn visit_grads_mut<F: FnMut(&mut [f32])>(&mut self, mut f: F) {
        match &mut self.body {
            Body::SmallResNet(net) => {
                f(net.stem.gw.as_slice_mut().unwrap());
                f(net.stem.gb.as_slice_mut().unwrap());
                for s in &mut net.stages {
                    if let Some((d, _)) = &mut s.down {
                        f(d.gw.as_slice_mut().unwrap());
                        f(d.gb.as_slice_mut().unwrap());
                    }
                    f(s.c1.gw.as_slice_mut().unwrap());
                    f(s.c1.gb.as_slice_mut().unwrap());
                    f(s.c2.gw.as_slice_mut().unwrap());
                    f(s.c2.gb.as_slice_mut().unwrap());
                }
                f(net.fc.gw.as_slice_mut().unwrap());
                f(net.fc.gb.as_slice_mut().unwrap());
            }
            Body::Mlp { l1, l2, .. } => {
                f(l1.gw.as_slice_mut().unwrap());
                f(l1.gb.as_slice_mut().unwrap());
                f(l2.gw.as_slice_mut().unwrap());
                f(l2.gb.as_slice_mut().unwrap());
            }
            Body::LinearNet { l } => {
                f(l.gw.as_slice_mut().unwrap());
                f(l.gb.as_slice_mut().unwrap());
            }
        }
    }

    pub fn params_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(|s| out.extend_from_slice(s));
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f32]) {
        let mut off = 0;
        self.visit_mut(|s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// Add `delta` to the parameters in place (used by the sharpness-aware step).
    pub fn add_to_params(&mut self, delta: &[f32]) {
        let mut off = 0;
        self.visit_mut(|s| {
            let len = s.len();
            for (p, d) in s.iter_mut().zip(&delta[off..off + len]) {
                *p += d;
            }
            off += len;
        });
    }

    pub fn grads_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_grads(|s| out.extend_from_slice(s));
        out
    }

    pub fn zero_grads(&mut self) {
        self.visit_grads_mut(|s| s.fill(0.0));
    }

    pub fn params_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|s| {
            if s.iter().any(|v| !v.is_finite()) {
                ok = false;
            }
        });
        ok
    }

    /// Per-layer weight standard deviations (used for shadow-model jitter).
    pub fn layer_stds(&self) -> Vec<f32> {
        let mut out = Vec::new();
        self.visit(|s| {
            let mean = s.iter().sum::<f32>() / s.len().max(1) as f32;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / s.len().max(1) as f32;
            out.push(var.sqrt());
        });
        out
    }

    /// Gaussian-jitter every parameter tensor by `scale` x its own std.
    pub fn jitter_params(&mut self, scale: f32, rng: &mut rng::Rng) {
        use rand_distr::{Distribution, Normal};
        let stds = self.layer_stds();
        let mut i = 0;
        self.visit_mut(|s| {
            let sd = (stds[i] * scale).max(1e-8);
            let normal = Normal::new(0.0f32, sd).unwrap();
            for v in s.iter_mut() {
                *v += normal.sample(rng);
            }
            i += 1;
        });
    }

    /// Penultimate features (pre-fc pooled activations) for the default net.
    /// For mlp/linear bodies this is the flattened input.
    pub fn features(&mut self, x: &Array4<f32>) -> Array2<f32> {
        match &mut self.body {
            Body::SmallResNet(net) => {
                let mut h = net.stem_relu.forward(&net.stem.forward(x));
                for stage in &mut net.stages {
                    if let Some((down, relu)) = &mut stage.down {
                        h = relu.forward(&down.forward(&h));
                    }
                    let skip = h.clone();
                    let a = stage.r1.forward(&stage.c1.forward(&h));
                    let b = stage.c2.forward(&a);
                    h = stage.out_relu.forward(&(&b + &skip));
                }
                global_avg_pool(&h)
            }
            _ => flatten(x),
        }
    }

    /// Classifier head applied to (possibly modified) penultimate features, as
    /// produced by [`Self::features`].
    pub fn head_logits(&mut self, features: &Array2<f32>) -> Array2<f32> {
        match &mut self.body {
            Body::SmallResNet(net) => net.fc.forward(features),
            Body::Mlp { l1, l2, .. } => {
                let h = l1.forward(features).mapv(|v| v.max(0.0));
                l2.forward(&h)
            }
            Body::LinearNet { l } => l.forward(features),
        }
    }

    /// Features from only the first `blocks` stages (truncated extractor used
    /// by the anomaly-filtering attack).
    pub fn truncated_features(&mut self, x: &Array4<f32>, blocks: usize) -> Array2<f32> {
        match &mut self.body {
            Body::SmallResNet(net) => {
                let mut h = net.stem_relu.forward(&net.stem.forward(x));
                for stage in net.stages.iter_mut().take(blocks.max(1)) {
                    if let Some((down, relu)) = &mut stage.down {
                        h = relu.forward(&down.forward(&h));
                    }
                    let skip = h.clone();
                    let a = stage.r1.forward(&stage.c1.forward(&h));
                    let b = stage.c2.forward(&a);
                    h = stage.out_relu.forward(&(&b + &skip));
                }
                global_avg_pool(&h)
            }
            _ => flatten(x),
        }
    }

    /// L1 norm of each prunable channel, in a fixed traversal order matching
    /// [`Self::apply_channel_mask`]. Convolution output channels for the
    /// residual net, hidden units for the perceptron; the classifier head is
    /// never prunable.
    pub fn channel_l1_norms(&self) -> Vec<f32> {
        fn conv_norms(c: &Conv2d, out: &mut Vec<f32>) {
            for row in c.w.rows() {
                out.push(row.iter().map(|v| v.abs()).sum());
            }
        }
        let mut out = Vec::new();
        match &self.body {
            Body::SmallResNet(net) => {
                conv_norms(&net.stem, &mut out);
                for s in &net.stages {
                    if let Some((d, _)) = &s.down {
                        conv_norms(d, &mut out);
                    }
                    conv_norms(&s.c1, &mut out);
                    conv_norms(&s.c2, &mut out);
                }
            }
            Body::Mlp { l1, .. } => {
                for row in l1.w.rows() {
                    out.push(row.iter().map(|v| v.abs()).sum());
                }
            }
            Body::LinearNet { .. } => {}
        }
        out
    }

    /// Zero the weights and bias of every channel whose mask entry is true.
    /// The mask indexes channels in [`Self::channel_l1_norms`] order.
    pub fn apply_channel_mask(&mut self, mask: &[bool]) {
        fn zero_conv(c: &mut Conv2d, mask: &[bool], cursor: &mut usize) {
            for ch in 0..c.cout {
                if mask[*cursor] {
                    c.w.row_mut(ch).fill(0.0);
                    c.b[ch] = 0.0;
                }
                *cursor += 1;
            }
        }
        let mut cur = 0usize;
        match &mut self.body {
            Body::SmallResNet(net) => {
                zero_conv(&mut net.stem, mask, &mut cur);
                for s in &mut net.stages {
                    if let Some((d, _)) = &mut s.down {
                        zero_conv(d, mask, &mut cur);
                    }
                    zero_conv(&mut s.c1, mask, &mut cur);
                    zero_conv(&mut s.c2, mask, &mut cur);
                }
            }
            Body::Mlp { l1, .. } => {
                for ch in 0..l1.w.nrows() {
                    if mask[cur] {
                        l1.w.row_mut(ch).fill(0.0);
                        l1.b[ch] = 0.0;
                    }
                    cur += 1;
                }
            }
            Body::LinearNet { .. } => {}
        }
        assert_eq!(cur, mask.len(), "channel mask length mismatch");
    }
}

fn flatten(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    x.to_shape((n, c * h * w)).unwrap().to_owned()
}

fn unflatten(x: &Array2<f32>, chw: (usize, usize, usize)) -> Array4<f32> {
    let (n, _) = x.dim();
    x.to_shape((n, chw.0, chw.1, chw.2)).unwrap().to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_roundtrip_and_shapes() {
        let mut net = ClassifierNet::from_descriptor("smallresnet:base=8,k=10,in=3x32x32", 0).unwrap();
        let x = Array4::<f32>::zeros((2, 3, 32, 32));
        let y = net.forward(&x);
        assert_eq!(y.dim(), (2, 10));
        assert!(net.num_params() > 0);
        let flat = net.params_flat();
        assert_eq!(flat.len(), net.num_params());
        let mut net2 = ClassifierNet::from_descriptor("smallresnet:base=8,k=10,in=3x32x32", 1).unwrap();
        net2.set_params_flat(&flat);
        assert_eq!(net2.params_flat(), flat);
    }

    #[test]
    fn same_seed_same_init() {
        let a = ClassifierNet::from_descriptor("mlp:in=4,hidden=8,k=3", 5).unwrap();
        let b = ClassifierNet::from_descriptor("mlp:in=4,hidden=8,k=3", 5).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
    }

    #[test]
    fn bad_descriptor_is_config_error() {
        assert!(ClassifierNet::from_descriptor("resnet50", 0).is_err());
        assert!(ClassifierNet::from_descriptor("mlp:in=4", 0).is_err());
    }

    #[test]
    fn full_net_input_gradient_matches_finite_differences() {
        let mut net = ClassifierNet::from_descriptor("smallresnet:base=4,k=3,in=3x8x8", 3).unwrap();
        let x = Array4::from_shape_fn((1, 3, 8, 8), |(_, c, h, w)| {
            ((c * 64 + h * 8 + w) as f32 * 0.13).sin() * 0.5
        });
        let logits = net.forward(&x);
        // loss: logit of class 0
        let mut dl = Array2::<f32>::zeros(logits.dim());
        dl[[0, 0]] = 1.0;
        net.zero_grads();
        let dx = net.backward(&dl);
        let eps = 1e-2f32;
        for &(c, h, w) in &[(0usize, 1usize, 1usize), (2, 5, 3), (1, 7, 7)] {
            let mut xp = x.clone();
            xp[[0, c, h, w]] += eps;
            let mut xm = x.clone();
            xm[[0, c, h, w]] -= eps;
            let lp = net.forward(&xp)[[0, 0]];
            let lm = net.forward(&xm)[[0, 0]];
            let fd = (lp - lm) / (2.0 * eps);
            let an = dx[[0, c, h, w]];
            assert!(
                (fd - an).abs() < 5e-2 * (1.0 + an.abs()),
                "input grad mismatch at ({c},{h},{w}): fd={fd} an={an}"
            );
        }
    }
}
