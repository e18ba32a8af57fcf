//! U-Net generators, PatchGAN discriminators and the profile regressor.
//!
//! Layer tables (k = kernel, s = stride, p = padding; IN = instance norm
//! without affine parameters; LReLU slope 0.2). `w` is the base width and
//! `d` the depth.
//!
//! U-Net:
//!
//! | layer            | op        | in → out                         | k/s/p | post        |
//! |------------------|-----------|----------------------------------|-------|-------------|
//! | `enc0`           | conv      | in_bands → w                     | 4/2/1 | LReLU       |
//! | `enc{i}`, 0<i<d-1| conv      | w·2^(i-1) → w·2^i                | 4/2/1 | IN, LReLU   |
//! | `enc{d-1}`, d>1  | conv      | w·2^(d-2) → w·2^(d-1)            | 4/2/1 | LReLU       |
//! | `dec{d-1}`, d>1  | deconv    | w·2^(d-1) → w·2^(d-2)            | 4/2/1 | IN, ReLU, ⧺ enc{d-2} |
//! | `dec{i}`, 0<i<d-1| deconv    | 2·w·2^i → w·2^(i-1)              | 4/2/1 | IN, ReLU, ⧺ enc{i-1} |
//! | `out`            | deconv    | (d>1 ? 2w : w) → out_bands       | 4/2/1 | sigmoid     |
//!
//! PatchGAN:
//!
//! | layer            | op   | in → out               | k/s/p | post      |
//! |------------------|------|------------------------|-------|-----------|
//! | `conv0`          | conv | in_bands → w           | 4/2/1 | LReLU     |
//! | `conv{i}`, 0<i<d | conv | w·2^(i-1) → w·2^i      | 4/2/1 | IN, LReLU |
//! | `head`           | conv | w·2^(d-1) → 1          | 4/1/1 | (logits)  |
//!
//! A side of length `n` shrinks to `n/2` (floor) through each stride-2
//! level and to `n - 1` through the head.
//!
//! Profile regressor: `stem` conv 3/1/1 in_bands → w + ReLU, then `d`
//! residual blocks `res{i}.a`, `res{i}.b` (conv 3/1/1, IN, ReLU, conv 3/1/1,
//! IN, add, ReLU), global average pooling and a 1×1 `head` w → out_bands.
//!
//! Weights are drawn from N(0, 0.02²) with a ChaCha8 stream seeded by the
//! spec; biases start at zero.

use std::io::Write;
use std::path::Path;

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{batch_tensor, conv_out_len, Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::image::MultiBandImage;

pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkKind {
    Unet,
    PatchGan,
    ProfileResnet,
}

impl NetworkKind {
    fn code(self) -> u8 {
        match self {
            NetworkKind::Unet => 0,
            NetworkKind::PatchGan => 1,
            NetworkKind::ProfileResnet => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(NetworkKind::Unet),
            1 => Ok(NetworkKind::PatchGan),
            2 => Ok(NetworkKind::ProfileResnet),
            _ => Err(Error::Format(format!("unknown network kind code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub in_bands: usize,
    pub out_bands: usize,
    pub depth: usize,
    pub base_width: usize,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn unet(in_bands: usize, out_bands: usize, depth: usize, base_width: usize, seed: u64) -> Self {
        Self {
            kind: NetworkKind::Unet,
            in_bands,
            out_bands,
            depth,
            base_width,
            seed,
        }
    }

    pub fn patchgan(in_bands: usize, depth: usize, base_width: usize, seed: u64) -> Self {
        Self {
            kind: NetworkKind::PatchGan,
            in_bands,
            out_bands: 1,
            depth,
            base_width,
            seed,
        }
    }

    pub fn profile_resnet(in_bands: usize, bins: usize, depth: usize, base_width: usize, seed: u64) -> Self {
        Self {
            kind: NetworkKind::ProfileResnet,
            in_bands,
            out_bands: bins,
            depth,
            base_width,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bands == 0 || self.out_bands == 0 || self.base_width == 0 {
            return Err(Error::contract(format!(
                "network bands and width must be positive: {self:?}"
            )));
        }
        if self.kind != NetworkKind::ProfileResnet && self.depth == 0 {
            return Err(Error::contract("U-Net and PatchGAN need depth >= 1"));
        }
        if self.kind == NetworkKind::PatchGan && self.out_bands != 1 {
            return Err(Error::contract("PatchGAN emits a single score band"));
        }
        if self.depth > 12 {
            return Err(Error::contract(format!("depth {} is unreasonably large", self.depth)));
        }
        Ok(())
    }

    /// Score-map side length for an input side of `n`, or `None` when the
    /// input is too small.
    pub fn patchgan_out_len(depth: usize, n: usize) -> Option<usize> {
        let mut len = n;
        for _ in 0..depth {
            len = conv_out_len(len, 4, 2, 1).filter(|&v| v > 0)?;
        }
        conv_out_len(len, 4, 1, 1).filter(|&v| v > 0)
    }

    /// Every parameter tensor in order: (name, shape).
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                let wshape = if l.transposed {
                    vec![l.cin, l.cout, l.k, l.k]
                } else {
                    vec![l.cout, l.cin, l.k, l.k]
                };
                [
                    (format!("{}.weight", l.name), wshape),
                    (format!("{}.bias", l.name), vec![l.cout]),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let (d, w) = (self.depth, self.base_width);
        let width = |i: usize| w << i;
        let mut out = Vec::new();
        match self.kind {
            NetworkKind::Unet => {
                for i in 0..d {
                    let cin = if i == 0 { self.in_bands } else { width(i - 1) };
                    out.push(Layer::conv(format!("enc{i}"), cin, width(i), 4));
                }
                for i in (1..d).rev() {
                    let cin = if i == d - 1 { width(d - 1) } else { 2 * width(i) };
                    out.push(Layer::deconv(format!("dec{i}"), cin, width(i - 1)));
                }
                let cin = if d > 1 { 2 * w } else { w };
                out.push(Layer::deconv("out".into(), cin, self.out_bands));
            }
            NetworkKind::PatchGan => {
                for i in 0..d {
                    let cin = if i == 0 { self.in_bands } else { width(i - 1) };
                    out.push(Layer::conv(format!("conv{i}"), cin, width(i), 4));
                }
                out.push(Layer::conv("head".into(), width(d - 1), 1, 4));
            }
            NetworkKind::ProfileResnet => {
                out.push(Layer::conv("stem".into(), self.in_bands, w, 3));
                for i in 0..d {
                    out.push(Layer::conv(format!("res{i}.a"), w, w, 3));
                    out.push(Layer::conv(format!("res{i}.b"), w, w, 3));
                }
                out.push(Layer::conv("head".into(), w, self.out_bands, 1));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Layer {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    transposed: bool,
}

impl Layer {
    fn conv(name: String, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            name,
            cin,
            cout,
            k,
            transposed: false,
        }
    }

    fn deconv(name: String, cin: usize, cout: usize) -> Self {
        Self {
            name,
            cin,
            cout,
            k: 4,
            transposed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// A network's spec and its learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    spec: NetworkSpec,
    params: Vec<Parameter>,
}

pub fn build(spec: NetworkSpec) -> Result<NetworkState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let params = spec
        .parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let value = if name.ends_with(".bias") {
                Tensor::zeros(IxDyn(&shape))
            } else {
                Tensor::from_shape_simple_fn(IxDyn(&shape), || normal.sample(&mut rng))
            };
            Parameter { name, value }
        })
        .collect();
    Ok(NetworkState { spec, params })
}

impl NetworkState {
    /// Rebuilds a state from explicit tensors, checking names and shapes
    /// against the spec's layer table.
    pub fn from_parameters(spec: NetworkSpec, params: Vec<Parameter>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match layer table entry {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph) -> BoundNetwork<'a> {
        let vars = self.params.iter().map(|p| g.leaf(p.value.clone())).collect();
        BoundNetwork { state: self, vars }
    }

    /// Gradient-free forward pass on a batch tensor.
    pub fn run(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let net = self.bind(&mut g);
        let x = g.leaf(input.clone());
        let y = net.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return Err(Error::contract(format!("expected [N,C,H,W] input, got {shape:?}")));
        };
        if c != self.spec.in_bands {
            return Err(Error::contract(format!(
                "network expects {} input bands, got {c}",
                self.spec.in_bands
            )));
        }
        match self.spec.kind {
            NetworkKind::Unet => {
                let m = 1usize << self.spec.depth;
                if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
                    return Err(Error::contract(format!(
                        "U-Net of depth {} needs sides divisible by {m}, got {h}x{w}",
                        self.spec.depth
                    )));
                }
            }
            NetworkKind::PatchGan => {
                let d = self.spec.depth;
                if NetworkSpec::patchgan_out_len(d, h).is_none() || NetworkSpec::patchgan_out_len(d, w).is_none() {
                    return Err(Error::contract(format!(
                        "PatchGAN of depth {d} needs sides of at least {}, got {h}x{w}",
                        1usize << (d + 1)
                    )));
                }
            }
            NetworkKind::ProfileResnet => {}
        }
        Ok(())
    }
}

/// A network whose parameters live on a particular graph.
pub struct BoundNetwork<'a> {
    state: &'a NetworkState,
    vars: Vec<Var>,
}

impl BoundNetwork<'_> {
    pub fn state(&self) -> &NetworkState {
        self.state
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Parameter gradients in parameter order; zeros where unused.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&self.state.params)
            .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.raw_dim())))
            .collect()
    }

    fn wb(&self, layer: usize) -> (Var, Var) {
        (self.vars[2 * layer], self.vars[2 * layer + 1])
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.state.check_input(g.value(x).shape())?;
        let spec = &self.state.spec;
        let d = spec.depth;
        match spec.kind {
            NetworkKind::Unet => {
                let mut skips = Vec::with_capacity(d);
                let mut h = x;
                for i in 0..d {
                    let (w, b) = self.wb(i);
                    h = g.conv2d(h, w, b, 2, 1)?;
                    if i > 0 && i < d - 1 {
                        h = g.instance_norm(h)?;
                    }
                    h = g.leaky_relu(h, LEAKY_SLOPE);
                    skips.push(h);
                }
                let mut layer = d;
                for i in (1..d).rev() {
                    let (w, b) = self.wb(layer);
                    layer += 1;
                    h = g.conv_transpose2d(h, w, b, 2, 1)?;
                    h = g.instance_norm(h)?;
                    h = g.relu(h);
                    h = g.concat(&[h, skips[i - 1]])?;
                }
                let (w, b) = self.wb(layer);
                let out = g.conv_transpose2d(h, w, b, 2, 1)?;
                Ok(g.sigmoid(out))
            }
            NetworkKind::PatchGan => {
                let mut h = x;
                for i in 0..d {
                    let (w, b) = self.wb(i);
                    h = g.conv2d(h, w, b, 2, 1)?;
                    if i > 0 {
                        h = g.instance_norm(h)?;
                    }
                    h = g.leaky_relu(h, LEAKY_SLOPE);
                }
                let (w, b) = self.wb(d);
                g.conv2d(h, w, b, 1, 1)
            }
            NetworkKind::ProfileResnet => {
                let (w, b) = self.wb(0);
                let mut h = g.conv2d(x, w, b, 1, 1)?;
                h = g.relu(h);
                for i in 0..d {
                    let (wa, ba) = self.wb(1 + 2 * i);
                    let (wb, bb) = self.wb(2 + 2 * i);
                    let mut r = g.conv2d(h, wa, ba, 1, 1)?;
                    r = g.instance_norm(r)?;
                    r = g.relu(r);
                    r = g.conv2d(r, wb, bb, 1, 1)?;
                    r = g.instance_norm(r)?;
                    let sum = g.add(h, r)?;
                    h = g.relu(sum);
                }
                let pooled = g.spatial_mean(h)?;
                let (w, b) = self.wb(1 + 2 * d);
                g.conv2d(pooled, w, b, 1, 0)
            }
        }
    }
}

/// Single image as a `[1, C, H, W]` tensor.
pub fn image_tensor(img: &MultiBandImage) -> Tensor {
    batch_tensor(&[img.to_f64()], img.bands(), img.height(), img.width())
}

pub fn images_tensor(imgs: &[&MultiBandImage]) -> Result<Tensor> {
    let first = imgs.first().ok_or_else(|| Error::contract("empty batch"))?;
    if imgs.iter().any(|i| !i.same_shape(first)) {
        return Err(Error::contract("batch images differ in shape"));
    }
    let samples: Vec<Vec<f64>> = imgs.iter().map(|i| i.to_f64()).collect();
    Ok(batch_tensor(&samples, first.bands(), first.height(), first.width()))
}

/// Sample `index` of a batch tensor as an image, clamped into [0,1].
pub fn tensor_image(t: &Tensor, index: usize) -> Result<MultiBandImage> {
    let [_, c, h, w] = *t.shape() else {
        return Err(Error::contract("expected a 4-D tensor"));
    };
    let per = c * h * w;
    let data = &t.as_slice().expect("standard layout")[index * per..(index + 1) * per];
    MultiBandImage::from_f64_clamped(h, w, c, data)
}

pub fn forward_unet(state: &NetworkState, img: &MultiBandImage) -> Result<MultiBandImage> {
    if state.spec.kind != NetworkKind::Unet {
        return Err(Error::contract("forward_unet needs a U-Net state"));
    }
    tensor_image(&state.run(&image_tensor(img))?, 0)
}

/// Raw PatchGAN logits as an h'×w' row-major map.
pub fn forward_patchgan(state: &NetworkState, img: &MultiBandImage) -> Result<(usize, usize, Vec<f64>)> {
    if state.spec.kind != NetworkKind::PatchGan {
        return Err(Error::contract("forward_patchgan needs a PatchGAN state"));
    }
    let out = state.run(&image_tensor(img))?;
    let shape = out.shape().to_vec();
    Ok((shape[2], shape[3], out.into_raw_vec_and_offset().0))
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
// "MBC1" | u32 n_meta | (str key, str value)* | u32 n_nets |
//   ( str name | u8 kind | u32 in | u32 out | u32 depth | u32 width | u64 seed |
//     u32 n_params | ( str name | u32 ndim | u32 dims* | f64 values* )* )*
//
// All integers and floats little-endian; str = u32 byte length + UTF-8.
// Metadata keeps insertion order and networks keep their given order.
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MBC1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub networks: Vec<(String, NetworkState)>,
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Option<&NetworkState> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn encode(&self, w: &mut dyn Write) -> std::io::Result<()> {
        fn put_str(w: &mut dyn Write, s: &str) -> std::io::Result<()> {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())
        }
        let u32le = |v: usize| (v as u32).to_le_bytes();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&u32le(self.metadata.len()))?;
        for (k, v) in &self.metadata {
            put_str(w, k)?;
            put_str(w, v)?;
        }
        w.write_all(&u32le(self.networks.len()))?;
        for (name, state) in &self.networks {
            put_str(w, name)?;
            let s = state.spec;
            w.write_all(&[s.kind.code()])?;
            for v in [s.in_bands, s.out_bands, s.depth, s.base_width] {
                w.write_all(&u32le(v))?;
            }
            w.write_all(&s.seed.to_le_bytes())?;
            w.write_all(&u32le(state.params.len()))?;
            for p in &state.params {
                put_str(w, &p.name)?;
                w.write_all(&u32le(p.value.ndim()))?;
                for &d in p.value.shape() {
                    w.write_all(&u32le(d))?;
                }
                for v in p.value.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing MBC1 checkpoint header".into()));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.metadata.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let kind = NetworkKind::from_code(r.take(1)?[0])?;
            let in_bands = r.u32()?;
            let out_bands = r.u32()?;
            let depth = r.u32()?;
            let base_width = r.u32()?;
            let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let spec = NetworkSpec {
                kind,
                in_bands,
                out_bands,
                depth,
                base_width,
                seed,
            };
            let mut params = Vec::new();
            for _ in 0..r.u32()? {
                let pname = r.string()?;
                let ndim = r.u32()?;
                let shape: Vec<usize> = (0..ndim).map(|_| r.u32()).collect::<Result<_>>()?;
                let len: usize = shape.iter().product();
                let raw = r.take(len * 8)?;
                let data: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                params.push(Parameter {
                    name: pname,
                    value: Tensor::from_shape_vec(IxDyn(&shape), data).unwrap(),
                });
            }
            ck.networks.push((name, NetworkState::from_parameters(spec, params)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), |w| self.encode(w))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}
