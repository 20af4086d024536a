//! Small fully-convolutional segmentation network with exposed feature taps
//! and a classifier head that grows as classes are added.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kv;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{conv2d, read_tensor_file, write_tensor_file, Tape, Tensor, Var};

/// Layer widths of the feature extractor. Every block is a `kernel x kernel`
/// convolution with stride 1 and "same" padding, so spatial size never changes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            in_channels: 3,
            channels: vec![8, 8, 16],
            kernel: 3,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<S> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> ConvLayer<S> {
    fn he_uniform(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..c_out * c_in * k * k)
            .map(|_| S::of(rng.gen_range(-bound..bound)))
            .collect();
        ConvLayer {
            kernel: Tensor::new(vec![c_out, c_in, k, k], data).expect("sized"),
            bias: Tensor::zeros(vec![c_out]),
        }
    }

    fn padding(&self) -> usize {
        self.kernel.shape()[2] / 2
    }
}

/// Tape handles produced by [`SegNet::forward_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: Var,
    /// Pre-activation outputs of the tapped blocks, then the logits.
    pub taps: Vec<Var>,
    /// Parameter leaves in declaration order (see [`SegNet::params`]).
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<S> {
    pub logits: Tensor<S>,
    /// Pre-activation outputs of the tapped blocks, then the logits.
    pub taps: Vec<Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet<S> {
    arch: Architecture,
    blocks: Vec<ConvLayer<S>>,
    head: ConvLayer<S>,
    tap_indices: Vec<usize>,
    /// Dataset class id predicted by each head channel; channel 0 is background.
    class_ids: Vec<usize>,
    frozen: bool,
}

impl<S: Scalar> SegNet<S> {
    /// Fresh network predicting `class_ids` (which must start with background 0).
    pub fn new(arch: Architecture, class_ids: Vec<usize>, seed: u64) -> Result<Self> {
        arch.validate()?;
        validate_class_ids(&class_ids)?;
        let mut rng = seed::rng(seed, &[seed::INIT]);
        let mut blocks = Vec::with_capacity(arch.channels.len());
        let mut c_in = arch.in_channels;
        for &c_out in &arch.channels {
            blocks.push(ConvLayer::he_uniform(c_out, c_in, arch.kernel, &mut rng));
            c_in = c_out;
        }
        let k = class_ids.len();
        let bound = 1.0 / (c_in as f64).sqrt();
        let head = ConvLayer {
            kernel: Tensor::new(
                vec![k, c_in, 1, 1],
                (0..k * c_in).map(|_| S::of(rng.gen_range(-bound..bound))).collect(),
            )?,
            bias: Tensor::zeros(vec![k]),
        };
        let tap_indices = (0..arch.channels.len()).collect();
        let mut net = SegNet {
            arch,
            blocks,
            head,
            tap_indices,
            class_ids,
            frozen: false,
        };
        net.set_trainable(true);
        Ok(net)
    }

    /// Network with every weight and bias zero.
    pub fn zeros(arch: Architecture, class_ids: Vec<usize>) -> Result<Self> {
        let mut net = Self::new(arch, class_ids, 0)?;
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tap_indices(&self) -> &[usize] {
        &self.tap_indices
    }

    pub fn set_tap_indices(&mut self, taps: Vec<usize>) -> Result<()> {
        if taps.is_empty() || taps.windows(2).any(|w| w[0] >= w[1]) || taps.iter().any(|&t| t >= self.blocks.len()) {
            return Err(Error::invalid(format!("bad tap indices {taps:?}")));
        }
        self.tap_indices = taps;
        Ok(())
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    /// Head width: background plus every class seen so far.
    pub fn n_outputs(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn head(&self) -> &ConvLayer<S> {
        &self.head
    }

    pub fn blocks(&self) -> &[ConvLayer<S>] {
        &self.blocks
    }

    /// Block kernels and biases, then the head kernel and bias.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &self.blocks {
            out.push(&b.kernel);
            out.push(&b.bias);
        }
        out.push(&self.head.kernel);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.push(&mut b.kernel);
            out.push(&mut b.bias);
        }
        out.push(&mut self.head.kernel);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(trainable);
        }
    }

    fn check_image(&self, image: &Tensor<S>) -> Result<()> {
        if image.rank() != 3 || image.shape()[0] != self.arch.in_channels {
            return Err(Error::ShapeMismatch {
                op: "segnet input",
                lhs: vec![self.arch.in_channels, 0, 0],
                rhs: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass without recording; taps are pre-activation block outputs
    /// followed by the logits.
    pub fn forward_with_taps(&self, image: &Tensor<S>) -> Result<ForwardOutput<S>> {
        self.check_image(image)?;
        let mut taps = Vec::with_capacity(self.tap_indices.len() + 1);
        let mut x = image.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            let pre = conv2d(&x, &b.kernel, &b.bias, 1, b.padding())?;
            x = pre.relu();
            if self.tap_indices.contains(&i) {
                taps.push(pre);
            }
        }
        let logits = conv2d(&x, &self.head.kernel, &self.head.bias, 1, 0)?;
        taps.push(logits.clone());
        Ok(ForwardOutput { logits, taps })
    }

    pub fn logits(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward_with_taps(image)?.logits)
    }

    /// Head channel predicted at every pixel.
    pub fn predict(&self, image: &Tensor<S>) -> Result<Vec<usize>> {
        Ok(self.logits(image)?.argmax_channel())
    }

    /// Forward pass recorded on `tape`. Parameters enter as leaves that
    /// require gradients unless the network is frozen.
    pub fn forward_tape(&self, tape: &mut Tape<S>, image: &Tensor<S>) -> Result<TapeForward> {
        self.check_image(image)?;
        let params: Vec<Var> = self.params().into_iter().map(|p| tape.leaf(p.clone())).collect();
        let mut x = tape.constant(image.clone());
        let mut taps = Vec::with_capacity(self.tap_indices.len() + 1);
        for (i, b) in self.blocks.iter().enumerate() {
            let pre = tape.conv2d(x, params[2 * i], params[2 * i + 1], 1, b.padding())?;
            if self.tap_indices.contains(&i) {
                taps.push(pre);
            }
            x = tape.relu(pre);
        }
        let n = params.len();
        let logits = tape.conv2d(x, params[n - 2], params[n - 1], 1, 0)?;
        taps.push(logits);
        Ok(TapeForward { logits, taps, params })
    }

    /// Copy with `new_ids` appended to the head. Existing head channels are
    /// copied verbatim; new channels get weights uniform in [-0.01, 0.01].
    pub fn extend_head(&self, new_ids: &[usize], seed: u64) -> Result<Self> {
        if new_ids.is_empty() {
            return Err(Error::invalid("extend_head needs at least one new class"));
        }
        let mut ids = self.class_ids.clone();
        ids.extend_from_slice(new_ids);
        validate_class_ids(&ids)?;

        let c_in = self.arch.feature_channels();
        let (k_old, k_new) = (self.class_ids.len(), ids.len());
        let mut rng = seed::rng(seed, &[seed::HEAD, k_old as u64]);
        let mut kernel = self.head.kernel.data().to_vec();
        kernel.extend((0..(k_new - k_old) * c_in).map(|_| S::of(rng.gen_range(-0.01..=0.01))));
        let mut bias = self.head.bias.data().to_vec();
        bias.extend((0..k_new - k_old).map(|_| S::of(rng.gen_range(-0.01..=0.01))));

        let mut net = self.clone();
        net.class_ids = ids;
        net.head = ConvLayer {
            kernel: Tensor::new(vec![k_new, c_in, 1, 1], kernel)?,
            bias: Tensor::new(vec![k_new], bias)?,
        };
        net.set_trainable(!self.frozen);
        Ok(net)
    }

    /// Deep copy with gradients disabled everywhere.
    pub fn freeze_as_old(&self) -> Self {
        let mut net = self.clone();
        net.frozen = true;
        net.set_trainable(false);
        net
    }

    /// Trainable deep copy.
    pub fn thawed(&self) -> Self {
        let mut net = self.clone();
        net.frozen = false;
        net.set_trainable(true);
        net
    }

    pub fn save(&self, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "format = css-checkpoint-1");
        let _ = writeln!(manifest, "in_channels = {}", self.arch.in_channels);
        let _ = writeln!(manifest, "channels = {}", kv::join(&self.arch.channels));
        let _ = writeln!(manifest, "kernel = {}", self.arch.kernel);
        let _ = writeln!(manifest, "taps = {}", kv::join(&self.tap_indices));
        let _ = writeln!(manifest, "n_outputs = {}", self.n_outputs());
        let _ = writeln!(manifest, "class_ids = {}", kv::join(&self.class_ids));
        let _ = writeln!(manifest, "initial_classes = {}", kv::join(&meta.initial_classes));
        let _ = writeln!(manifest, "step = {}", meta.step);
        let _ = writeln!(manifest, "seed = {}", meta.seed);
        let _ = writeln!(manifest, "n_params = {}", self.params().len());
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        for (i, p) in self.params().iter().enumerate() {
            write_tensor_file(*p, &dir.join(format!("param_{i:02}.cssf")))?;
        }
        Ok(())
    }

    /// Loads a checkpoint; the result is trainable.
    pub fn load(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m = kv::parse(&text).map_err(|e| Error::data(&path, e.to_string()))?;
        let get = |k: &str| {
            m.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::data(&path, format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::data(&path, format!("bad value for {k}")))
        };
        let nums = |k: &str| -> Result<Vec<usize>> {
            kv::list(get(k)?).ok_or_else(|| Error::data(&path, format!("bad list for {k}")))
        };
        if get("format")? != "css-checkpoint-1" {
            return Err(Error::data(&path, "unknown checkpoint format"));
        }
        let arch = Architecture {
            in_channels: num("in_channels")? as usize,
            channels: nums("channels")?,
            kernel: num("kernel")? as usize,
        };
        let class_ids = nums("class_ids")?;
        if class_ids.len() as u64 != num("n_outputs")? {
            return Err(Error::data(&path, "class_ids disagree with n_outputs"));
        }
        let mut net = SegNet::zeros(arch, class_ids).map_err(|e| Error::data(&path, e.to_string()))?;
        net.set_tap_indices(nums("taps")?)
            .map_err(|e| Error::data(&path, e.to_string()))?;
        let n_params = num("n_params")? as usize;
        if n_params != net.params().len() {
            return Err(Error::data(&path, "parameter count disagrees with architecture"));
        }
        for (i, p) in net.params_mut().into_iter().enumerate() {
            let file = dir.join(format!("param_{i:02}.cssf"));
            let t: Tensor<S> = read_tensor_file(&file)?;
            if t.shape() != p.shape() {
                return Err(Error::data(
                    &file,
                    format!("shape {:?}, expected {:?}", t.shape(), p.shape()),
                ));
            }
            *p = t.with_requires_grad(true);
        }
        let meta = CheckpointMeta {
            step: num("step")? as usize,
            seed: num("seed")?,
            initial_classes: nums("initial_classes")?,
        };
        Ok((net, meta))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub step: usize,
    pub seed: u64,
    /// Non-background classes of the first step.
    pub initial_classes: Vec<usize>,
}

fn validate_class_ids(ids: &[usize]) -> Result<()> {
    if ids.first() != Some(&0) {
        return Err(Error::invalid(format!("class ids must start with background 0, got {ids:?}")));
    }
    let mut seen = ids.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate class ids in {ids:?}")));
    }
    Ok(())
}

/// Frozen network from the previous step paired with the one being trained.
#[derive(Clone, Debug)]
pub struct ModelPair<S> {
    pub old: Option<SegNet<S>>,
    pub current: SegNet<S>,
}

impl<S: Scalar> ModelPair<S> {
    pub fn first(current: SegNet<S>) -> Self {
        ModelPair { old: None, current }
    }

    pub fn new(old: SegNet<S>, current: SegNet<S>) -> Result<Self> {
        if old.tap_indices != current.tap_indices || old.arch != current.arch {
            return Err(Error::invalid("old and current models have incompatible taps"));
        }
        if !old.frozen {
            return Err(Error::invalid("old model must be frozen"));
        }
        Ok(ModelPair {
            old: Some(old),
            current,
        })
    }

    /// Freezes the current model as the new old one; extends the head of the
    /// trainable copy with `new_ids` (none in domain-incremental mode).
    pub fn advance(self, new_ids: &[usize], seed: u64) -> Result<Self> {
        let old = self.current.freeze_as_old();
        let current = if new_ids.is_empty() {
            self.current
        } else {
            self.current.extend_head(new_ids, seed)?
        };
        ModelPair::new(old, current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = seed::rng(seed, &[]);
        let data = (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let net = SegNet::<f64>::zeros(Architecture::default(), vec![0, 1, 2, 3]).unwrap();
        let out = net.forward_with_taps(&image(8, 8, 1)).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        let p = out.logits.softmax_channel().unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn default_shapes_propagate() {
        let net = SegNet::<f64>::new(Architecture::default(), vec![0, 1, 2], 3).unwrap();
        let out = net.forward_with_taps(&image(16, 16, 2)).unwrap();
        assert_eq!(out.logits.shape(), &[3, 16, 16]);
        let shapes: Vec<_> = out.taps.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![8, 16, 16], vec![8, 16, 16], vec![16, 16, 16], vec![3, 16, 16]]
        );
        assert_eq!(out.taps.len(), net.tap_indices().len() + 1);
        assert!(net.param_count() < 50_000);
    }

    #[test]
    fn tape_forward_matches_direct() {
        let net = SegNet::<f64>::new(Architecture::default(), vec![0, 4, 2], 5).unwrap();
        let img = image(8, 8, 7);
        let direct = net.forward_with_taps(&img).unwrap();
        let mut tape = Tape::new();
        let f = net.forward_tape(&mut tape, &img).unwrap();
        assert_eq!(tape.value(f.logits), &direct.logits);
        for (v, t) in f.taps.iter().zip(&direct.taps) {
            assert_eq!(tape.value(*v), t);
        }
    }

    #[test]
    fn extend_head_keeps_old_channels() {
        let net = SegNet::<f64>::new(Architecture::default(), vec![0, 1, 2, 3, 4], 1).unwrap();
        let img = image(8, 8, 3);
        let before = net.logits(&img).unwrap();
        let ext = net.extend_head(&[5], 9).unwrap();
        assert_eq!(ext.n_outputs(), 6);
        assert_eq!(&ext.head().kernel.data()[..5 * 16], net.head().kernel.data());
        let after = ext.logits(&img).unwrap();
        let plane = 64;
        assert_eq!(&after.data()[..5 * plane], before.data());
        assert!(ext.head().kernel.data()[5 * 16..].iter().all(|v| v.abs() <= 0.01));
        assert!(net.extend_head(&[], 1).is_err());
        assert!(net.extend_head(&[3], 1).is_err());
    }

    #[test]
    fn frozen_copy_is_detached() {
        let net = SegNet::<f64>::new(Architecture::default(), vec![0, 1], 1).unwrap();
        let frozen = net.freeze_as_old();
        assert!(frozen.params().iter().all(|p| !p.requires_grad()));
        let img = image(8, 8, 4);
        assert_eq!(frozen.logits(&img).unwrap(), net.logits(&img).unwrap());
        let mut tape = Tape::new();
        let f = frozen.forward_tape(&mut tape, &img).unwrap();
        let s = tape.sum(f.logits);
        let g = tape.backward(s).unwrap();
        assert!(f.params.iter().all(|p| !g.reached(*p)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = SegNet::<f64>::new(Architecture::default(), vec![0, 2, 1], 11)
            .unwrap()
            .extend_head(&[3], 2)
            .unwrap();
        let meta = CheckpointMeta {
            step: 2,
            seed: 11,
            initial_classes: vec![2, 1],
        };
        net.save(dir.path(), &meta).unwrap();
        let (back, m2) = SegNet::<f64>::load(dir.path()).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(back, net);
    }

    #[test]
    fn model_pair_checks_freeze() {
        let net = SegNet::<f64>::new(Architecture::default(), vec![0, 1], 1).unwrap();
        assert!(ModelPair::new(net.clone(), net.clone()).is_err());
        let pair = ModelPair::first(net).advance(&[2], 0).unwrap();
        assert_eq!(pair.old.as_ref().unwrap().n_outputs(), 2);
        assert_eq!(pair.current.n_outputs(), 3);
    }
}
