//! Two-stream fully-convolutional multispectral detector.
//!
//! ```text
//! visible ─ conv stack ─┬──────────────────────────── visible head ─ sigmoid ─ y_V
//!                       ├─ concat ─ fusion conv ─ multispectral head ─ sigmoid ─ y_M
//! thermal ─ conv stack ─┴──────────────────────────── thermal head ─ sigmoid ─ y_T
//! ```
//!
//! The per-modality supervision heads read the stream features before
//! fusion. All heads predict at `1 / 2^downsamplings` of the input size.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{join_list, KvMap, KvSection};
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, downsample2x, relu, relu_backward, resize_bilinear,
    resize_bilinear_backward, sigmoid, sigmoid_backward, silu, silu_backward, ConvLayer, GradStore,
    Parameterized, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Silu => silu(x),
            Activation::Relu => relu(x),
        }
    }

    fn backward(self, pre: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Silu => silu_backward(pre, upstream),
            Activation::Relu => relu_backward(pre, upstream),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            other => Err(format!(
                "unknown activation {other:?} (expected silu or relu)"
            )),
        }
    }
}

/// Shape of the network and how to initialise it.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    /// Output channels of each conv layer in one stream.
    pub stream_channels: Vec<usize>,
    pub kernel: usize,
    /// A 2x bilinear downsample follows each of the first `downsamplings` stream layers.
    pub downsamplings: usize,
    pub fusion_channels: usize,
    pub fusion_kernel: usize,
    pub head_kernel: usize,
    pub activation: Activation,
    pub init_seed: u64,
    /// Multiplies the Xavier standard deviation.
    pub init_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            stream_channels: vec![8, 16, 16],
            kernel: 3,
            downsamplings: 1,
            fusion_channels: 16,
            fusion_kernel: 3,
            head_kernel: 1,
            activation: Activation::Silu,
            init_seed: 0,
            init_scale: 1.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stream_channels.is_empty() || self.stream_channels.contains(&0) {
            return Err(Error::Config(format!(
                "stream channels must be a non-empty list of positive widths, got {:?}",
                self.stream_channels
            )));
        }
        if self.fusion_channels == 0 {
            return Err(Error::Config("fusion channels must be positive".into()));
        }
        for (name, k) in [
            ("kernel", self.kernel),
            ("fusion kernel", self.fusion_kernel),
            ("head kernel", self.head_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!(
                    "{name} {k} must be odd so that same-padding preserves the grid"
                )));
            }
        }
        if self.downsamplings > self.stream_channels.len() {
            return Err(Error::Config(format!(
                "{} downsamplings but only {} stream layers",
                self.downsamplings,
                self.stream_channels.len()
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "init scale must be positive, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    /// Input extent divided by this gives the prediction extent.
    pub fn scale_factor(&self) -> usize {
        1 << self.downsamplings
    }

    pub fn prediction_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.scale_factor();
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::InvalidInput(format!(
                "image size {h}x{w} is not divisible by the detector scale factor {f}"
            )));
        }
        Ok((h / f, w / f))
    }
}

impl KvSection for ArchConfig {
    fn write_kv(&self, prefix: &str, out: &mut KvMap) {
        out.set(
            format!("{prefix}stream_channels"),
            join_list(&self.stream_channels),
        );
        out.set(format!("{prefix}kernel"), self.kernel);
        out.set(format!("{prefix}downsamplings"), self.downsamplings);
        out.set(format!("{prefix}fusion_channels"), self.fusion_channels);
        out.set(format!("{prefix}fusion_kernel"), self.fusion_kernel);
        out.set(format!("{prefix}head_kernel"), self.head_kernel);
        out.set(format!("{prefix}activation"), self.activation);
        out.set(format!("{prefix}init_seed"), self.init_seed);
        out.set(format!("{prefix}init_scale"), self.init_scale);
    }

    fn take_kv(&mut self, prefix: &str, kv: &mut KvMap) -> Result<()> {
        kv.take_list(
            &format!("{prefix}stream_channels"),
            &mut self.stream_channels,
        )?;
        kv.take(&format!("{prefix}kernel"), &mut self.kernel)?;
        kv.take(&format!("{prefix}downsamplings"), &mut self.downsamplings)?;
        kv.take(
            &format!("{prefix}fusion_channels"),
            &mut self.fusion_channels,
        )?;
        kv.take(&format!("{prefix}fusion_kernel"), &mut self.fusion_kernel)?;
        kv.take(&format!("{prefix}head_kernel"), &mut self.head_kernel)?;
        kv.take(&format!("{prefix}activation"), &mut self.activation)?;
        kv.take(&format!("{prefix}init_seed"), &mut self.init_seed)?;
        kv.take(&format!("{prefix}init_scale"), &mut self.init_scale)?;
        Ok(())
    }
}

/// All learnable weights of the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    arch: ArchConfig,
    pub visible: Vec<ConvLayer>,
    pub thermal: Vec<ConvLayer>,
    pub fusion: ConvLayer,
    pub head_multispectral: ConvLayer,
    pub head_visible: ConvLayer,
    pub head_thermal: ConvLayer,
}

fn same_conv(out_c: usize, in_c: usize, k: usize) -> ConvLayer {
    ConvLayer {
        weight: Tensor::zeros(&[out_c, in_c, k, k]),
        bias: Tensor::zeros(&[out_c]),
        stride: 1,
        padding: k / 2,
    }
}

impl DetectorParams {
    /// All-zero parameters with the shapes `arch` prescribes.
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let stream = || {
            let mut in_c = 1;
            arch.stream_channels
                .iter()
                .map(|&c| {
                    let layer = same_conv(c, in_c, arch.kernel);
                    in_c = c;
                    layer
                })
                .collect::<Vec<_>>()
        };
        let feat = *arch.stream_channels.last().expect("validated non-empty");
        Ok(Self {
            arch: arch.clone(),
            visible: stream(),
            thermal: stream(),
            fusion: same_conv(arch.fusion_channels, 2 * feat, arch.fusion_kernel),
            head_multispectral: same_conv(1, arch.fusion_channels, arch.head_kernel),
            head_visible: same_conv(1, feat, arch.head_kernel),
            head_thermal: same_conv(1, feat, arch.head_kernel),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.visible.iter().chain(&self.thermal).chain([
            &self.fusion,
            &self.head_multispectral,
            &self.head_visible,
            &self.head_thermal,
        ])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.visible
            .iter_mut()
            .chain(self.thermal.iter_mut())
            .chain([
                &mut self.fusion,
                &mut self.head_multispectral,
                &mut self.head_visible,
                &mut self.head_thermal,
            ])
    }

    fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        names.extend((0..self.visible.len()).map(|i| format!("visible.{i}")));
        names.extend((0..self.thermal.len()).map(|i| format!("thermal.{i}")));
        names.extend(
            [
                "fusion",
                "head.multispectral",
                "head.visible",
                "head.thermal",
            ]
            .map(String::from),
        );
        names
    }

    /// Index of the first parameter tensor belonging to each layer group, in
    /// [`Parameterized::parameters`] order.
    pub(crate) fn param_index(&self, group: LayerGroup) -> usize {
        let n = self.visible.len();
        2 * match group {
            LayerGroup::Visible(i) => i,
            LayerGroup::Thermal(i) => n + i,
            LayerGroup::Fusion => 2 * n,
            LayerGroup::HeadMultispectral => 2 * n + 1,
            LayerGroup::HeadVisible => 2 * n + 2,
            LayerGroup::HeadThermal => 2 * n + 3,
        }
    }

    /// SHA-256 over the architecture and the bit patterns of every parameter.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        let mut kv = KvMap::new();
        self.arch.write_kv("", &mut kv);
        hasher.update(kv.render().as_bytes());
        for p in self.parameters() {
            for &d in p.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in p.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum LayerGroup {
    Visible(usize),
    Thermal(usize),
    Fusion,
    HeadMultispectral,
    HeadVisible,
    HeadThermal,
}

impl Parameterized for DetectorParams {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.layer_names()
            .into_iter()
            .flat_map(|n| [format!("{n}.weight"), format!("{n}.bias")])
            .collect()
    }
}

/// Xavier-normal weights (variance `2 / (fan_in + fan_out)`), zero biases.
pub fn init_detector(arch: &ArchConfig, seed: u64) -> Result<DetectorParams> {
    let mut params = DetectorParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in params.layers_mut() {
        let (kh, kw) = layer.kernel();
        let fan_in = layer.in_channels() * kh * kw;
        let fan_out = layer.out_channels() * kh * kw;
        let std = arch.init_scale * (2.0 / (fan_in + fan_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        for w in layer.weight.data_mut() {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Per-pixel pedestrian probabilities from the three heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Fused multispectral head, `(1, h, w)`.
    pub multispectral: Tensor,
    pub visible: Tensor,
    pub thermal: Tensor,
}

impl Prediction {
    pub fn new(multispectral: Tensor, visible: Tensor, thermal: Tensor) -> Result<Self> {
        let shape = multispectral.shape();
        if shape.len() != 3 || shape[0] != 1 || visible.shape() != shape || thermal.shape() != shape
        {
            return Err(Error::InvalidInput(format!(
                "prediction maps must share one (1, h, w) shape, got {:?}, {:?}, {:?}",
                multispectral.shape(),
                visible.shape(),
                thermal.shape()
            )));
        }
        Ok(Self {
            multispectral,
            visible,
            thermal,
        })
    }

    pub fn height(&self) -> usize {
        self.multispectral.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.multispectral.shape()[2]
    }

    pub fn maps(&self) -> [&Tensor; 3] {
        [&self.multispectral, &self.visible, &self.thermal]
    }
}

/// Bilinear upsampling of all three maps to `target_h x target_w`.
pub fn upsample_prediction(
    pred: &Prediction,
    target_h: usize,
    target_w: usize,
) -> Result<Prediction> {
    if target_h < pred.height() || target_w < pred.width() {
        return Err(Error::InvalidInput(format!(
            "cannot upsample {}x{} prediction to smaller {target_h}x{target_w}",
            pred.height(),
            pred.width()
        )));
    }
    Prediction::new(
        resize_bilinear(&pred.multispectral, target_h, target_w)?,
        resize_bilinear(&pred.visible, target_h, target_w)?,
        resize_bilinear(&pred.thermal, target_h, target_w)?,
    )
}

/// Intermediate values of one stream kept for the backward pass.
#[derive(Clone, Debug)]
struct StreamCache {
    /// Input to each conv layer.
    inputs: Vec<Tensor>,
    /// Pre-activation output of each conv layer.
    pre: Vec<Tensor>,
    /// Final stream features.
    features: Tensor,
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    visible: StreamCache,
    thermal: StreamCache,
    fused_input: Tensor,
    fusion_pre: Tensor,
    fused: Tensor,
    prediction: Prediction,
}

impl ForwardCache {
    pub fn prediction(&self) -> &Prediction {
        &self.prediction
    }
}

fn stream_forward(layers: &[ConvLayer], arch: &ArchConfig, input: &Tensor) -> Result<StreamCache> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut x = input.clone();
    for (i, layer) in layers.iter().enumerate() {
        let z = conv2d_forward(&x, layer)?;
        let mut a = arch.activation.apply(&z);
        if i < arch.downsamplings {
            a = downsample2x(&a)?;
        }
        inputs.push(std::mem::replace(&mut x, a));
        pre.push(z);
    }
    Ok(StreamCache {
        inputs,
        pre,
        features: x,
    })
}

/// Returns the gradient with respect to the stream input.
fn stream_backward(
    layers: &[ConvLayer],
    arch: &ArchConfig,
    cache: &StreamCache,
    upstream: Tensor,
    grads: &mut GradStore,
    first_param: usize,
) -> Result<Tensor> {
    let mut g = upstream;
    for i in (0..layers.len()).rev() {
        if i < arch.downsamplings {
            g = resize_bilinear_backward(cache.pre[i].shape(), &g)?;
        }
        let dz = arch.activation.backward(&cache.pre[i], &g)?;
        let cg = conv2d_backward(&cache.inputs[i], &layers[i], &dz)?;
        grads.accumulate(first_param + 2 * i, &cg.weight)?;
        grads.accumulate(first_param + 2 * i + 1, &cg.bias)?;
        g = cg.input;
    }
    Ok(g)
}

fn check_pair(params: &DetectorParams, pair: &ImagePair) -> Result<()> {
    params.arch.prediction_size(pair.height(), pair.width())?;
    Ok(())
}

/// Forward pass that keeps intermediates for [`backward`].
pub fn forward_with_cache(params: &DetectorParams, pair: &ImagePair) -> Result<ForwardCache> {
    check_pair(params, pair)?;
    let arch = &params.arch;
    let visible = stream_forward(&params.visible, arch, pair.visible())?;
    let thermal = stream_forward(&params.thermal, arch, pair.thermal())?;
    let fused_input = Tensor::concat_channels(&[&visible.features, &thermal.features])?;
    let fusion_pre = conv2d_forward(&fused_input, &params.fusion)?;
    let fused = arch.activation.apply(&fusion_pre);

    let prediction = Prediction::new(
        sigmoid(&conv2d_forward(&fused, &params.head_multispectral)?),
        sigmoid(&conv2d_forward(&visible.features, &params.head_visible)?),
        sigmoid(&conv2d_forward(&thermal.features, &params.head_thermal)?),
    )?;
    if !prediction.maps().iter().all(|m| m.is_finite()) {
        return Err(Error::Numeric(
            "forward pass produced non-finite probabilities".into(),
        ));
    }
    Ok(ForwardCache {
        visible,
        thermal,
        fused_input,
        fusion_pre,
        fused,
        prediction,
    })
}

pub fn forward(params: &DetectorParams, pair: &ImagePair) -> Result<Prediction> {
    forward_with_cache(params, pair).map(|c| c.prediction)
}

/// Gradients of the loss with respect to each head's probability map.
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub multispectral: Tensor,
    pub visible: Tensor,
    pub thermal: Tensor,
}

/// Back-propagates head-output gradients into a fresh [`GradStore`].
pub fn backward(
    params: &DetectorParams,
    cache: &ForwardCache,
    head_grads: &HeadGrads,
) -> Result<GradStore> {
    let arch = &params.arch;
    let pred = &cache.prediction;
    let mut grads = GradStore::zeros_like(params);

    let mut head = |layer: &ConvLayer,
                    input: &Tensor,
                    prob: &Tensor,
                    dprob: &Tensor,
                    group|
     -> Result<Tensor> {
        let dlogit = sigmoid_backward(prob, dprob)?;
        let cg = conv2d_backward(input, layer, &dlogit)?;
        let idx = params.param_index(group);
        grads.accumulate(idx, &cg.weight)?;
        grads.accumulate(idx + 1, &cg.bias)?;
        Ok(cg.input)
    };
    let d_fused = head(
        &params.head_multispectral,
        &cache.fused,
        &pred.multispectral,
        &head_grads.multispectral,
        LayerGroup::HeadMultispectral,
    )?;
    let d_vis_head = head(
        &params.head_visible,
        &cache.visible.features,
        &pred.visible,
        &head_grads.visible,
        LayerGroup::HeadVisible,
    )?;
    let d_thm_head = head(
        &params.head_thermal,
        &cache.thermal.features,
        &pred.thermal,
        &head_grads.thermal,
        LayerGroup::HeadThermal,
    )?;

    let dz_fusion = arch.activation.backward(&cache.fusion_pre, &d_fused)?;
    let cg = conv2d_backward(&cache.fused_input, &params.fusion, &dz_fusion)?;
    let fidx = params.param_index(LayerGroup::Fusion);
    grads.accumulate(fidx, &cg.weight)?;
    grads.accumulate(fidx + 1, &cg.bias)?;
    let feat = cache.visible.features.shape()[0];
    let mut split = cg.input.split_channels(&[feat, feat])?.into_iter();
    let mut d_vis = split.next().expect("two halves");
    let mut d_thm = split.next().expect("two halves");
    d_vis.add_scaled(1.0, &d_vis_head)?;
    d_thm.add_scaled(1.0, &d_thm_head)?;

    let vidx = params.param_index(LayerGroup::Visible(0));
    stream_backward(
        &params.visible,
        arch,
        &cache.visible,
        d_vis,
        &mut grads,
        vidx,
    )?;
    let tidx = params.param_index(LayerGroup::Thermal(0));
    stream_backward(
        &params.thermal,
        arch,
        &cache.thermal,
        d_thm,
        &mut grads,
        tidx,
    )?;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImagePair;
    use rand::Rng;

    fn random_pair(seed: u64, h: usize, w: usize) -> ImagePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || {
            Tensor::from_map(
                h,
                w,
                (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap()
        };
        let (v, t) = (img(), img());
        ImagePair::new(format!("r{seed}"), v, t).unwrap()
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            stream_channels: vec![3, 4],
            fusion_channels: 4,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let arch = ArchConfig::default();
        let a = init_detector(&arch, 42).unwrap();
        let b = init_detector(&arch, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(
            a.fingerprint(),
            init_detector(&arch, 43).unwrap().fingerprint()
        );
    }

    #[test]
    fn biases_start_at_zero() {
        let p = init_detector(&ArchConfig::default(), 3).unwrap();
        assert!(p.layers().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn weight_variance_matches_xavier() {
        // fusion layer of the default arch: 16 x 32 x 3 x 3 = 4608 weights.
        let p = init_detector(&ArchConfig::default(), 9).unwrap();
        let w = p.fusion.weight.data();
        assert!(w.len() >= 1000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (w.len() - 1) as f64;
        let want = 2.0 / ((32 * 9 + 16 * 9) as f64);
        assert!((var / want - 1.0).abs() < 0.2, "variance {var} vs {want}");
    }

    #[test]
    fn invalid_arch_is_rejected() {
        let bad = [
            ArchConfig {
                stream_channels: vec![],
                ..ArchConfig::default()
            },
            ArchConfig {
                stream_channels: vec![4, 0],
                ..ArchConfig::default()
            },
            ArchConfig {
                kernel: 4,
                ..ArchConfig::default()
            },
            ArchConfig {
                downsamplings: 4,
                ..ArchConfig::default()
            },
            ArchConfig {
                fusion_channels: 0,
                ..ArchConfig::default()
            },
        ];
        for arch in bad {
            assert!(
                matches!(init_detector(&arch, 0), Err(Error::Config(_))),
                "{arch:?}"
            );
        }
    }

    #[test]
    fn zero_heads_give_one_half() {
        let mut p = init_detector(&ArchConfig::default(), 1).unwrap();
        for head in [
            &mut p.head_multispectral,
            &mut p.head_visible,
            &mut p.head_thermal,
        ] {
            head.weight.data_mut().fill(0.0);
        }
        let pred = forward(&p, &random_pair(1, 16, 16)).unwrap();
        assert_eq!((pred.height(), pred.width()), (8, 8));
        for m in pred.maps() {
            assert!(m.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let p = init_detector(&ArchConfig::default(), 5).unwrap();
        let pair = random_pair(2, 16, 12);
        assert_eq!(forward(&p, &pair).unwrap(), forward(&p, &pair).unwrap());
    }

    #[test]
    fn rejects_indivisible_input() {
        let p = init_detector(&ArchConfig::default(), 5).unwrap();
        assert!(matches!(
            forward(&p, &random_pair(2, 15, 16)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn swapping_modalities_swaps_supervision_heads() {
        let mut p = init_detector(&ArchConfig::default(), 8).unwrap();
        p.thermal = p.visible.clone();
        p.head_thermal = p.head_visible.clone();
        let pair = random_pair(4, 16, 16);
        let swapped = ImagePair::new("s", pair.thermal().clone(), pair.visible().clone()).unwrap();
        let a = forward(&p, &pair).unwrap();
        let b = forward(&p, &swapped).unwrap();
        assert_eq!(a.visible, b.thermal);
        assert_eq!(a.thermal, b.visible);
    }

    #[test]
    fn head_perturbations_stay_local() {
        let p = init_detector(&ArchConfig::default(), 11).unwrap();
        let pair = random_pair(5, 16, 16);
        let base = forward(&p, &pair).unwrap();

        let mut q = p.clone();
        q.head_visible.weight.data_mut()[0] += 0.5;
        let pv = forward(&q, &pair).unwrap();
        assert_ne!(pv.visible, base.visible);
        assert_eq!(pv.thermal, base.thermal);
        assert_eq!(pv.multispectral, base.multispectral);

        let mut q = p.clone();
        q.head_thermal.bias.data_mut()[0] -= 0.5;
        let pt = forward(&q, &pair).unwrap();
        assert_ne!(pt.thermal, base.thermal);
        assert_eq!(pt.visible, base.visible);
        assert_eq!(pt.multispectral, base.multispectral);
    }

    #[test]
    fn thermal_stream_feeds_thermal_and_fused_heads_only() {
        let p = init_detector(&ArchConfig::default(), 12).unwrap();
        let pair = random_pair(6, 16, 16);
        let base = forward(&p, &pair).unwrap();
        let mut q = p.clone();
        q.thermal[1]
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w *= 1.5);
        let pt = forward(&q, &pair).unwrap();
        assert_ne!(pt.thermal, base.thermal);
        assert_ne!(pt.multispectral, base.multispectral);
        assert_eq!(pt.visible, base.visible);
    }

    #[test]
    fn param_index_matches_names() {
        let p = DetectorParams::zeros(&small_arch()).unwrap();
        let names = p.parameter_names();
        assert_eq!(
            names[p.param_index(LayerGroup::Thermal(1))],
            "thermal.1.weight"
        );
        assert_eq!(names[p.param_index(LayerGroup::Fusion) + 1], "fusion.bias");
        assert_eq!(
            names[p.param_index(LayerGroup::HeadThermal)],
            "head.thermal.weight"
        );
        assert_eq!(names.len(), p.parameters().len());
    }

    #[test]
    fn upsample_keeps_constants_and_rejects_shrinking() {
        let c = Tensor::full(&[1, 1, 1], 0.3);
        let pred = Prediction::new(c.clone(), c.clone(), c).unwrap();
        let up = upsample_prediction(&pred, 4, 4).unwrap();
        for m in up.maps() {
            assert_eq!(m.shape(), &[1, 4, 4]);
            assert!(m.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
        assert!(upsample_prediction(&up, 2, 4).is_err());
    }

    #[test]
    fn upsampled_values_stay_within_source_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut m = || {
            Tensor::from_map(3, 3, (0..9).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap()
        };
        let pred = Prediction::new(m(), m(), m()).unwrap();
        let up = upsample_prediction(&pred, 6, 7).unwrap();
        for (src, dst) in pred.maps().iter().zip(up.maps()) {
            let lo = src.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = src.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(dst
                .data()
                .iter()
                .all(|&v| v >= lo - 1e-15 && v <= hi + 1e-15));
        }
    }

    /// Loss `sum(r_M * y_M + r_V * y_V + r_T * y_T)` checked against central differences.
    #[test]
    fn backward_matches_finite_differences() {
        use crate::tensor::{check_gradients, GradCheckConfig};
        let arch = ArchConfig {
            init_scale: 2.0,
            ..small_arch()
        };
        let p = init_detector(&arch, 21).unwrap();
        let pair = random_pair(9, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = || {
            Tensor::from_map(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let weights = HeadGrads {
            multispectral: r(),
            visible: r(),
            thermal: r(),
        };
        let loss = |q: &DetectorParams| {
            let pred = forward(q, &pair).unwrap();
            pred.multispectral.dot(&weights.multispectral).unwrap()
                + pred.visible.dot(&weights.visible).unwrap()
                + pred.thermal.dot(&weights.thermal).unwrap()
        };
        let cache = forward_with_cache(&p, &pair).unwrap();
        let grads = backward(&p, &cache, &weights).unwrap();
        let report = check_gradients(&p, &grads, loss, GradCheckConfig::default());
        assert!(report.passed(), "{report:#?}");
    }
}
