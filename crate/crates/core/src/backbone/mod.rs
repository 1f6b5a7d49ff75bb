//! 3D encoder-decoder segmentation backbone.
//!
//! A U-shaped network over [`ChannelGrid`] activations: per-stage blocks of
//! 3x3x3 convolution + instance norm + ReLU, strided 2x2x2 convolutions down,
//! transposed 2x2x2 convolutions up, additive skip connections, and a 1x1x1
//! head producing per-class logits. Short in-block residual connections are
//! off by default and available behind a flag.
//!
//! Parameters live in one flat vector with a named layout, which keeps the
//! optimizer, checkpointing, and finite-difference verification trivial. The
//! whole graph is generic over [`Real`]; training uses f32.

pub mod kernels;


use crate::error::{Error, Result};
use crate::grid::{ChannelGrid, GridShape, LabelGrid, VolumeGrid};
use crate::loss::softmax_channels;
use crate::rng::SeedTree;
use kernels::{
    conv1_backward, conv1_forward, conv3_backward, conv3_forward, down2_backward, down2_forward,
    instance_norm_backward, instance_norm_forward, relu_backward, relu_forward, up2_backward,
    up2_forward, NormCache, Real,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub encoder_stages: usize,
    pub base_channels: usize,
    pub use_short_residual: bool,
    pub init_seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_stages < 2 {
            return Err(Error::Config(format!(
                "encoder_stages must be >= 2, got {}",
                self.encoder_stages
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Channel width at encoder stage `s`.
    fn channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Every spatial extent must divide this (the total downsampling factor).
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.encoder_stages - 1)
    }

    pub fn check_input_shape(&self, shape: GridShape) -> Result<()> {
        let d = self.spatial_divisor();
        if shape.h % d != 0 || shape.w % d != 0 || shape.d % d != 0 {
            return Err(Error::Config(format!(
                "input shape {shape} not divisible by {d} (needed by {} encoder stages)",
                self.encoder_stages
            )));
        }
        Ok(())
    }
}

/// One named span inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn of(cfg: &BackboneConfig) -> Self {
        let mut entries = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, len: usize| {
            entries.push(ParamEntry {
                name,
                offset: total,
                len,
            });
            total += len;
        };
        let s_count = cfg.encoder_stages;
        for s in 0..s_count {
            if s > 0 {
                let (ci, co) = (cfg.channels(s - 1), cfg.channels(s));
                push(format!("down{}.conv.w", s - 1), co * ci * 8);
                push(format!("down{}.norm.gamma", s - 1), co);
                push(format!("down{}.norm.beta", s - 1), co);
            }
            let ci = if s == 0 { cfg.in_channels } else { cfg.channels(s) };
            let co = cfg.channels(s);
            push(format!("enc{s}.conv.w"), co * ci * 27);
            push(format!("enc{s}.norm.gamma"), co);
            push(format!("enc{s}.norm.beta"), co);
        }
        for s in (0..s_count - 1).rev() {
            let (ci, co) = (cfg.channels(s + 1), cfg.channels(s));
            push(format!("up{s}.conv.w"), ci * co * 8);
            push(format!("up{s}.norm.gamma"), co);
            push(format!("up{s}.norm.beta"), co);
            push(format!("dec{s}.conv.w"), co * co * 27);
            push(format!("dec{s}.norm.gamma"), co);
            push(format!("dec{s}.norm.beta"), co);
        }
        push("head.w".into(), cfg.classes * cfg.channels(0));
        push("head.b".into(), cfg.classes);
        Self { entries, total }
    }

    pub fn entry(&self, name: &str) -> &ParamEntry {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn slice<'a, T>(&self, data: &'a [T], name: &str) -> &'a [T] {
        let e = self.entry(name);
        &data[e.offset..e.offset + e.len]
    }

    pub fn slice_mut<'a, T>(&self, data: &'a mut [T], name: &str) -> &'a mut [T] {
        let e = self.entry(name);
        &mut data[e.offset..e.offset + e.len]
    }
}

/// The backbone: config, parameter layout, and one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub cfg: BackboneConfig,
    pub layout: ParamLayout,
    pub params: Vec<T>,
}

/// He-normal standard deviation for a convolution weight name; `None` for
/// norm/bias parameters (which get constant init).
fn init_std(cfg: &BackboneConfig, name: &str) -> Option<f64> {
    if name == "head.w" {
        return Some((2.0 / cfg.channels(0) as f64).sqrt());
    }
    if !name.ends_with(".conv.w") {
        return None;
    }
    let stem = name.split('.').next().unwrap();
    let kind_len = stem.chars().take_while(|c| c.is_alphabetic()).count();
    let (kind, digits) = stem.split_at(kind_len);
    let stage: usize = digits.parse().unwrap();
    // fan-in = input channels x taps per output voxel
    let fan_in = match kind {
        "enc" if stage == 0 => cfg.in_channels as f64 * 27.0,
        "enc" | "dec" => cfg.channels(stage) as f64 * 27.0,
        "down" => cfg.channels(stage) as f64 * 8.0,
        // a transposed 2^3/stride-2 conv touches each output voxel once
        "up" => cfg.channels(stage + 1) as f64,
        other => unreachable!("unknown layer kind {other}"),
    };
    Some((2.0 / fan_in).sqrt())
}

impl<T: Real> Model<T> {
    /// Seeded build: same config (including `init_seed`) gives bit-identical
    /// parameters; different seeds give different parameters.
    pub fn build(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::of(&cfg);
        let mut params = vec![T::ZERO; layout.total];
        let tree = SeedTree::new(cfg.init_seed);
        for e in &layout.entries {
            let dst = &mut params[e.offset..e.offset + e.len];
            if let Some(std) = init_std(&cfg, &e.name) {
                let mut rng = tree.stream("init", &[crate::rng::fnv1a64(e.name.as_bytes())]);
                for v in dst.iter_mut() {
                    *v = T::from_f64(std * crate::rng::standard_normal(&mut rng));
                }
            } else if e.name.ends_with("norm.gamma") {
                dst.fill(T::ONE);
            }
            // norm.beta and head.b stay zero
        }
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn p(&self, name: &str) -> &[T] {
        self.layout.slice(&self.params, name)
    }

    /// Logits for one sub-volume; no cache retained.
    pub fn forward(&self, input: &ChannelGrid<T>) -> Result<ChannelGrid<T>> {
        Ok(self.forward_impl(input, false)?.0)
    }

    /// Logits plus everything backward needs.
    pub fn forward_cached(&self, input: &ChannelGrid<T>) -> Result<(ChannelGrid<T>, ForwardCache<T>)> {
        let (logits, cache) = self.forward_impl(input, true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    fn residual_in_block(&self, prefix: &str) -> bool {
        // only blocks with matching channel counts can carry the short
        // residual; enc0 maps in_channels -> base and is excluded
        self.cfg.use_short_residual && !(prefix == "enc0" && self.cfg.in_channels != self.cfg.channels(0))
    }

    fn block_forward(&self, prefix: &str, cout: usize, inp: ChannelGrid<T>) -> (ChannelGrid<T>, BlockCache<T>) {
        let w = self.p(&format!("{prefix}.conv.w"));
        let gamma = self.p(&format!("{prefix}.norm.gamma"));
        let beta = self.p(&format!("{prefix}.norm.beta"));
        let pre = conv3_forward(&inp, w, None, cout);
        let (mut act, norm) = instance_norm_forward(&pre, gamma, beta);
        if self.residual_in_block(prefix) {
            for (a, &x) in act.data.iter_mut().zip(&inp.data) {
                *a += x;
            }
        }
        relu_forward(&mut act);
        let cache = BlockCache {
            inp,
            norm,
            out: act.clone(),
        };
        (act, cache)
    }

    fn block_backward(
        &self,
        prefix: &str,
        cout: usize,
        cache: &BlockCache<T>,
        mut dout: ChannelGrid<T>,
        grads: &mut [T],
    ) -> ChannelGrid<T> {
        relu_backward(&cache.out, &mut dout);
        let residual = self.residual_in_block(prefix);
        let gamma = self.p(&format!("{prefix}.norm.gamma"));
        let mut dpre = ChannelGrid::zeros(cout, dout.shape);
        {
            let e_g = self.layout.entry(&format!("{prefix}.norm.gamma")).clone();
            let e_b = self.layout.entry(&format!("{prefix}.norm.beta")).clone();
            let (dgamma, dbeta) = two_slices(grads, (e_g.offset, e_g.len), (e_b.offset, e_b.len));
            instance_norm_backward(&cache.norm, gamma, &dout, dgamma, dbeta, &mut dpre);
        }
        let w = self.p(&format!("{prefix}.conv.w"));
        let mut dinp = ChannelGrid::zeros(cache.inp.classes, cache.inp.shape);
        {
            let e_w = self.layout.entry(&format!("{prefix}.conv.w"));
            let dw = &mut grads[e_w.offset..e_w.offset + e_w.len];
            conv3_backward(&cache.inp, w, &dpre, cout, dw, None, &mut dinp);
        }
        if residual {
            for (d, &g) in dinp.data.iter_mut().zip(&dout.data) {
                *d += g;
            }
        }
        dinp
    }

    fn resample_forward(&self, prefix: &str, up: bool, cout: usize, inp: ChannelGrid<T>) -> (ChannelGrid<T>, BlockCache<T>) {
        let w = self.p(&format!("{prefix}.conv.w"));
        let gamma = self.p(&format!("{prefix}.norm.gamma"));
        let beta = self.p(&format!("{prefix}.norm.beta"));
        let pre = if up {
            up2_forward(&inp, w, cout)
        } else {
            down2_forward(&inp, w, cout)
        };
        let (mut act, norm) = instance_norm_forward(&pre, gamma, beta);
        relu_forward(&mut act);
        let cache = BlockCache {
            inp,
            norm,
            out: act.clone(),
        };
        (act, cache)
    }

    fn resample_backward(
        &self,
        prefix: &str,
        up: bool,
        cout: usize,
        cache: &BlockCache<T>,
        mut dout: ChannelGrid<T>,
        grads: &mut [T],
    ) -> ChannelGrid<T> {
        relu_backward(&cache.out, &mut dout);
        let gamma = self.p(&format!("{prefix}.norm.gamma"));
        let mut dpre = ChannelGrid::zeros(cout, dout.shape);
        {
            let e_g = self.layout.entry(&format!("{prefix}.norm.gamma")).clone();
            let e_b = self.layout.entry(&format!("{prefix}.norm.beta")).clone();
            let (dgamma, dbeta) = two_slices(grads, (e_g.offset, e_g.len), (e_b.offset, e_b.len));
            instance_norm_backward(&cache.norm, gamma, &dout, dgamma, dbeta, &mut dpre);
        }
        let w = self.p(&format!("{prefix}.conv.w"));
        let mut dinp = ChannelGrid::zeros(cache.inp.classes, cache.inp.shape);
        {
            let e_w = self.layout.entry(&format!("{prefix}.conv.w"));
            let dw = &mut grads[e_w.offset..e_w.offset + e_w.len];
            if up {
                up2_backward(&cache.inp, w, &dpre, cout, dw, &mut dinp);
            } else {
                down2_backward(&cache.inp, w, &dpre, cout, dw, &mut dinp);
            }
        }
        dinp
    }

    fn forward_impl(&self, input: &ChannelGrid<T>, want_cache: bool) -> Result<(ChannelGrid<T>, Option<ForwardCache<T>>)> {
        if input.classes != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, model expects {}",
                input.classes, self.cfg.in_channels
            )));
        }
        self.cfg.check_input_shape(input.shape)?;
        let s_count = self.cfg.encoder_stages;
        let mut enc = Vec::with_capacity(s_count);
        let mut down = Vec::with_capacity(s_count - 1);
        let mut cur = input.clone();
        for s in 0..s_count {
            if s > 0 {
                let (out, c) = self.resample_forward(&format!("down{}", s - 1), false, self.cfg.channels(s), cur);
                cur = out;
                down.push(c);
            }
            let (out, c) = self.block_forward(&format!("enc{s}"), self.cfg.channels(s), cur);
            cur = out;
            enc.push(c);
        }
        let mut up = Vec::with_capacity(s_count - 1);
        let mut dec = Vec::with_capacity(s_count - 1);
        for s in (0..s_count - 1).rev() {
            let (mut out, c) = self.resample_forward(&format!("up{s}"), true, self.cfg.channels(s), cur);
            up.push(c);
            // additive skip from the encoder at the same resolution
            for (o, &e) in out.data.iter_mut().zip(&enc[s].out.data) {
                *o += e;
            }
            let (out2, c2) = self.block_forward(&format!("dec{s}"), self.cfg.channels(s), out);
            cur = out2;
            dec.push(c2);
        }
        let logits = conv1_forward(&cur, self.p("head.w"), self.p("head.b"), self.cfg.classes);
        let cache = want_cache.then_some(ForwardCache {
            enc,
            down,
            up,
            dec,
            head_in: cur,
        });
        Ok((logits, cache))
    }

    /// Backpropagate `dlogits` through the cached forward, accumulating into
    /// the flat `grads` vector (same layout as `params`).
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &ChannelGrid<T>, grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len());
        let s_count = self.cfg.encoder_stages;
        let mut dcur = ChannelGrid::zeros(self.cfg.channels(0), cache.head_in.shape);
        {
            let e_w = self.layout.entry("head.w").clone();
            let e_b = self.layout.entry("head.b").clone();
            let (dw, db) = two_slices(grads, (e_w.offset, e_w.len), (e_b.offset, e_b.len));
            conv1_backward(&cache.head_in, self.p("head.w"), dlogits, self.cfg.classes, dw, db, &mut dcur);
        }
        // decoder ran s = s_count-2 .. 0, so caches are stored in that order;
        // walk them back in reverse (s ascending)
        let mut dskip: Vec<Option<ChannelGrid<T>>> = (0..s_count - 1).map(|_| None).collect();
        for s in 0..s_count - 1 {
            let idx = s_count - 2 - s; // position of stage s in up/dec vecs
            dcur = self.block_backward(&format!("dec{s}"), self.cfg.channels(s), &cache.dec[idx], dcur, grads);
            dskip[s] = Some(dcur.clone());
            dcur = self.resample_backward(&format!("up{s}"), true, self.cfg.channels(s), &cache.up[idx], dcur, grads);
        }
        for s in (0..s_count).rev() {
            dcur = self.block_backward(&format!("enc{s}"), self.cfg.channels(s), &cache.enc[s], dcur, grads);
            if s > 0 {
                dcur = self.resample_backward(&format!("down{}", s - 1), false, self.cfg.channels(s), &cache.down[s - 1], dcur, grads);
                // the encoder output at stage s-1 also fed the skip
                if let Some(dskip_s) = dskip[s - 1].take() {
                    for (d, g) in dcur.data.iter_mut().zip(dskip_s.data) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Per-block cached activations: the block input, instance-norm internals,
/// and the post-ReLU output (for the ReLU mask).
pub struct BlockCache<T> {
    inp: ChannelGrid<T>,
    norm: NormCache<T>,
    out: ChannelGrid<T>,
}

/// Everything [`Model::backward`] needs from a forward pass.
pub struct ForwardCache<T> {
    enc: Vec<BlockCache<T>>,
    down: Vec<BlockCache<T>>,
    up: Vec<BlockCache<T>>,
    dec: Vec<BlockCache<T>>,
    head_in: ChannelGrid<T>,
}

/// Two disjoint mutable sub-slices of one buffer.
fn two_slices<T>(data: &mut [T], a: (usize, usize), b: (usize, usize)) -> (&mut [T], &mut [T]) {
    assert!(a.0 + a.1 <= b.0 || b.0 + b.1 <= a.0, "overlapping slices");
    if a.0 < b.0 {
        let (lo, hi) = data.split_at_mut(b.0);
        (&mut lo[a.0..a.0 + a.1], &mut hi[..b.1])
    } else {
        let (lo, hi) = data.split_at_mut(a.0);
        (&mut hi[..a.1], &mut lo[b.0..b.0 + b.1])
    }
}

/// Argmax over channels with ties broken toward the lowest class index.
pub fn argmax_channels<T: Real>(logits: &ChannelGrid<T>) -> LabelGrid {
    let n = logits.shape.voxels();
    let mut out = LabelGrid::zeros(logits.shape);
    for v in 0..n {
        let mut best_c = 0usize;
        let mut best = logits.data[v];
        for c in 1..logits.classes {
            let val = logits.data[c * n + v];
            if val > best {
                best = val;
                best_c = c;
            }
        }
        out.data_mut()[v] = best_c as u8;
    }
    out
}

impl Model<f32> {
    /// Inference entry point: probabilities (channel softmax, f64) and the
    /// argmax pseudo label. Non-finite logits abort with diagnostics.
    pub fn forward_probs(&self, input: &VolumeGrid) -> Result<(ChannelGrid<f64>, LabelGrid)> {
        let logits = self.forward(&volume_as_input(input))?;
        let probs = finite_probs(&logits)?;
        let pseudo = argmax_channels(&logits);
        Ok((probs, pseudo))
    }
}

/// Wrap a raw volume as a single-channel network input.
pub fn volume_as_input(v: &VolumeGrid) -> ChannelGrid<f32> {
    ChannelGrid::from_vec(1, v.shape(), v.data().to_vec())
}

/// Check logits for non-finite values, then softmax in f64.
pub fn finite_probs(logits: &ChannelGrid<f32>) -> Result<ChannelGrid<f64>> {
    let bad = logits.data.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        let first = logits.data.iter().position(|v| !v.is_finite()).unwrap();
        return Err(Error::NonFinite(format!(
            "{bad} non-finite logits (first at flat index {first} of {})",
            logits.data.len()
        )));
    }
    let as_f64 = ChannelGrid::from_vec(
        logits.classes,
        logits.shape,
        logits.data.iter().map(|&v| f64::from(v)).collect(),
    );
    Ok(softmax_channels(&as_f64))
}
