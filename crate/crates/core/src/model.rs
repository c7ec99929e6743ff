//! The encoder/decoder used for reconstruction pretraining and the
//! attention-pooled multi-class bag classifier that shares the encoder.
//!
//! Per bag of K instances the classifier computes
//!
//! ```text
//! H = encoder(X)                       K x u feature rows, one per instance
//! A = softmax_rows(W2 tanh(W1 H^T))    r x K attention weights
//! M = A H                              r x u pooled features
//! Y = softmax(mlp(flatten(M)))         4 class probabilities
//! ```
//!
//! The pooled average is symmetric in the instances, so bag probabilities
//! are invariant (up to summation order) under any permutation of the bag.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{DenseArray, Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::rng::SeedRng;

pub const CLASS_COUNT: usize = 4;

/// Convolutional encoder geometry. Stage k is a stride-2 3x3 convolution
/// with `channels[k]` outputs followed by relu; after the stages a global
/// average pool and a linear map produce `feature_dim` features per
/// instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_side: usize,
    pub channels: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_side: 64,
            channels: vec![8, 16, 32],
            feature_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        let divisor = 1usize << self.channels.len();
        if self.input_side == 0 || self.input_side % divisor != 0 {
            return Err(Error::Config(format!(
                "input side {} must be divisible by 2^{} = {}",
                self.input_side,
                self.channels.len(),
                divisor
            )));
        }
        Ok(())
    }
}

/// Attention head geometry: `hidden` is the tanh layer width, `rows` the
/// number of attention rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionConfig {
    pub hidden: usize,
    pub rows: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { hidden: 32, rows: 1 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.rows == 0 {
            return Err(Error::Config("attention dims must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            classifier_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attention.validate()?;
        if self.classifier_hidden == 0 {
            return Err(Error::Config("classifier hidden width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Named parameter collection for all four groups (encoder, decoder,
/// attention, classifier).
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    params: BTreeMap<String, DenseArray>,
}

/// Parameter group selector for optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    All,
    /// Encoder and decoder: the pretraining groups.
    Reconstruction,
    /// Encoder, attention and classifier: the fine-tuning groups.
    Classification,
}

impl ParamGroup {
    fn matches(&self, name: &str) -> bool {
        match self {
            ParamGroup::All => true,
            ParamGroup::Reconstruction => {
                name.starts_with("encoder.") || name.starts_with("decoder.")
            }
            ParamGroup::Classification => !name.starts_with("decoder."),
        }
    }
}

impl ModelBundle {
    /// Seeded initialization: every layer is uniform in
    /// (-sqrt(1/fan_in), +sqrt(1/fan_in)).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut shapes: Vec<(String, Vec<usize>, usize)> = Vec::new(); // (name, shape, fan_in)

        let enc = &config.encoder;
        let stages = enc.channels.len();
        let mut in_ch = 1usize;
        for (k, &out_ch) in enc.channels.iter().enumerate() {
            shapes.push((
                format!("encoder.conv{k}.weight"),
                vec![out_ch, in_ch, 3, 3],
                in_ch * 9,
            ));
            shapes.push((format!("encoder.conv{k}.bias"), vec![out_ch], in_ch * 9));
            in_ch = out_ch;
        }
        let last = *enc.channels.last().expect("validated nonempty");
        shapes.push((
            "encoder.fc.weight".into(),
            vec![last, enc.feature_dim],
            last,
        ));
        shapes.push(("encoder.fc.bias".into(), vec![enc.feature_dim], last));

        // Decoder level L consumes upsample(level L+1) concatenated with
        // the skip at level L and emits the skip's channel count (1 for
        // L = 0, where the skip is the input image itself).
        for level in (0..stages).rev() {
            let in_above = enc.channels[level];
            let skip = if level == 0 { 1 } else { enc.channels[level - 1] };
            let out = skip;
            shapes.push((
                format!("decoder.conv{level}.weight"),
                vec![out, in_above + skip, 3, 3],
                (in_above + skip) * 9,
            ));
            shapes.push((
                format!("decoder.conv{level}.bias"),
                vec![out],
                (in_above + skip) * 9,
            ));
        }

        let att = &config.attention;
        shapes.push((
            "attention.w1".into(),
            vec![att.hidden, enc.feature_dim],
            enc.feature_dim,
        ));
        shapes.push(("attention.w2".into(), vec![att.rows, att.hidden], att.hidden));

        let flat = att.rows * enc.feature_dim;
        shapes.push((
            "classifier.fc1.weight".into(),
            vec![flat, config.classifier_hidden],
            flat,
        ));
        shapes.push((
            "classifier.fc1.bias".into(),
            vec![config.classifier_hidden],
            flat,
        ));
        shapes.push((
            "classifier.fc2.weight".into(),
            vec![config.classifier_hidden, CLASS_COUNT],
            config.classifier_hidden,
        ));
        shapes.push((
            "classifier.fc2.bias".into(),
            vec![CLASS_COUNT],
            config.classifier_hidden,
        ));

        // One stream, parameters drawn in sorted-name order so the
        // initialization is a pure function of (config, seed).
        shapes.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = SeedRng::new(seed);
        let mut params = BTreeMap::new();
        for (name, shape, fan_in) in shapes {
            let bound = (1.0 / fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| rng.range_f64(-bound, bound)).collect();
            let mut array = DenseArray::new(shape, data)?;
            array.enable_grad();
            params.insert(name, array);
        }
        Ok(ModelBundle {
            config: config.clone(),
            params,
        })
    }

    pub fn param(&self, name: &str) -> Result<&DenseArray> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut DenseArray> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter_group_mut(
        &mut self,
        group: ParamGroup,
    ) -> impl Iterator<Item = (&str, &mut DenseArray)> {
        self.params
            .iter_mut()
            .filter(move |(name, _)| group.matches(name))
            .map(|(name, array)| (name.as_str(), array))
    }

    pub fn zero_grads(&mut self) {
        for array in self.params.values_mut() {
            array.zero_grad();
        }
    }

    /// Copies another bundle's values into this one; shapes and names must
    /// match exactly.
    pub fn load_values_from(&mut self, other: &ModelBundle) -> Result<()> {
        for (name, array) in &mut self.params {
            let src = other.params.get(name).ok_or_else(|| {
                Error::Container(format!("missing parameter {name:?} in source bundle"))
            })?;
            if src.shape() != array.shape() {
                return Err(Error::Container(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    src.shape(),
                    array.shape()
                )));
            }
            array.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    // -- persistence ------------------------------------------------------

    /// Container layout: magic "FZKM", u32 LE version = 1, u32 LE array
    /// count, then per array: u32 LE name length, UTF-8 name, u32 LE rank,
    /// u32 LE dims, f64 LE payload. Arrays are written in sorted name
    /// order, making the encoding canonical.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"FZKM");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, array) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(array.shape().len() as u32).to_le_bytes());
            for &dim in array.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for v in array.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Loads a container and validates it against `config`: the name set
    /// and all shapes must match the config's initialization layout.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;

        struct Cursor<'a> {
            bytes: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                if self.pos + n > self.bytes.len() {
                    return Err(Error::Container("truncated container".into()));
                }
                let slice = &self.bytes[self.pos..self.pos + n];
                self.pos += n;
                Ok(slice)
            }
            fn u32(&mut self) -> Result<u32> {
                Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
            }
        }
        let mut cursor = Cursor {
            bytes: &bytes,
            pos: 0,
        };

        if cursor.take(4)? != b"FZKM" {
            return Err(Error::BadMagic);
        }
        let version = cursor.u32()?;
        if version != 1 {
            return Err(Error::BadVersion(version));
        }
        let count = cursor.u32()? as usize;
        let mut params: BTreeMap<String, DenseArray> = BTreeMap::new();
        for _ in 0..count {
            let name_len = cursor.u32()? as usize;
            let name = std::str::from_utf8(cursor.take(name_len)?)
                .map_err(|_| Error::Container("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cursor.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cursor.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cursor.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let mut array = DenseArray::new(shape, data)?;
            array.enable_grad();
            if params.insert(name.clone(), array).is_some() {
                return Err(Error::Container(format!("duplicate parameter {name:?}")));
            }
        }

        // Validate against the expected layout: loading never changes
        // shapes.
        let reference = ModelBundle::init(config, 0)?;
        for name in reference.params.keys() {
            let loaded = params
                .get(name)
                .ok_or_else(|| Error::Container(format!("missing parameter {name:?}")))?;
            let expected = reference.params[name].shape();
            if loaded.shape() != expected {
                return Err(Error::Container(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    expected
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Container(format!(
                "container holds {} parameters, expected {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(ModelBundle {
            config: config.clone(),
            params,
        })
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Bundle parameters bound onto a tape for one forward/backward pass.
pub struct BoundModel<'b> {
    bundle: &'b ModelBundle,
    vars: BTreeMap<String, Var>,
}

impl<'b> BoundModel<'b> {
    pub fn bind(tape: &mut Tape, bundle: &'b ModelBundle) -> Self {
        let vars = bundle
            .params
            .iter()
            .map(|(name, array)| (name.clone(), tape.leaf(array)))
            .collect();
        BoundModel { bundle, vars }
    }

    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn config(&self) -> &ModelConfig {
        &self.bundle.config
    }

    /// After `tape.backward`, copies each parameter's leaf gradient into
    /// the bundle's accumulators.
    pub fn harvest_grads(&self, tape: &Tape, bundle: &mut ModelBundle) -> Result<()> {
        for (name, var) in &self.vars {
            let grad = tape.grad(*var)?;
            bundle.param_mut(name)?.accumulate_grad(&grad)?;
        }
        Ok(())
    }

    /// Encoder: per-instance features `[k, u]` plus the skip pyramid
    /// (input, then each stage output) for the decoder.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let enc = &self.bundle.config.encoder;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4
            || shape[1] != 1
            || shape[2] != enc.input_side
            || shape[3] != enc.input_side
        {
            return Err(Error::Contract(format!(
                "encoder expects [k, 1, {side}, {side}] inputs, got {shape:?}",
                side = enc.input_side
            )));
        }
        let mut skips = vec![x];
        let mut t = x;
        for k in 0..enc.channels.len() {
            let w = self.var(&format!("encoder.conv{k}.weight"));
            let b = self.var(&format!("encoder.conv{k}.bias"));
            let conv = tape.conv2d(t, w, b, 2)?;
            t = tape.relu(conv);
            skips.push(t);
        }
        let pooled = tape.global_avg_pool(t)?;
        let fc = tape.matmul(pooled, self.var("encoder.fc.weight"))?;
        let h = tape.add_bias(fc, self.var("encoder.fc.bias"))?;
        Ok((h, skips))
    }

    /// Decoder: mirrors the encoder with nearest-neighbor upsampling and
    /// per-stage skip concatenation; returns a reconstruction with the
    /// input's shape. `skips` is the pyramid from [`BoundModel::encode`].
    pub fn decode(&self, tape: &mut Tape, skips: &[Var]) -> Result<Var> {
        let stages = self.bundle.config.encoder.channels.len();
        if skips.len() != stages + 1 {
            return Err(Error::Contract(format!(
                "decoder expects {} skip levels, got {}",
                stages + 1,
                skips.len()
            )));
        }
        let mut t = skips[stages];
        for level in (0..stages).rev() {
            let up = tape.upsample2x_nearest(t)?;
            let cat = tape.concat_channels(up, skips[level])?;
            let w = self.var(&format!("decoder.conv{level}.weight"));
            let b = self.var(&format!("decoder.conv{level}.bias"));
            let conv = tape.conv2d(cat, w, b, 1)?;
            t = if level > 0 { tape.relu(conv) } else { conv };
        }
        Ok(t)
    }

    /// Attention weights `[r, k]` from features `[k, u]`:
    /// `A = softmax_rows(W2 tanh(W1 H^T))`.
    pub fn attention(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let ht = tape.transpose(h)?;
        let pre = tape.matmul(self.var("attention.w1"), ht)?;
        let act = tape.tanh(pre);
        let logits = tape.matmul(self.var("attention.w2"), act)?;
        tape.softmax_rows(logits)
    }

    /// Class probabilities `[1, 4]` from the pooled features `[r, u]`.
    pub fn classify(&self, tape: &mut Tape, m: Var) -> Result<Var> {
        let logits = self.class_logits(tape, m)?;
        tape.softmax_rows(logits)
    }

    fn class_logits(&self, tape: &mut Tape, m: Var) -> Result<Var> {
        let numel: usize = tape.shape(m).iter().product();
        let flat = tape.reshape(m, vec![1, numel])?;
        let fc1 = tape.matmul(flat, self.var("classifier.fc1.weight"))?;
        let fc1 = tape.add_bias(fc1, self.var("classifier.fc1.bias"))?;
        let act = tape.relu(fc1);
        let fc2 = tape.matmul(act, self.var("classifier.fc2.weight"))?;
        tape.add_bias(fc2, self.var("classifier.fc2.bias"))
    }

    /// `M = A H`.
    pub fn pool(&self, tape: &mut Tape, a: Var, h: Var) -> Result<Var> {
        tape.matmul(a, h)
    }

    /// Full bag scoring pipeline; returns `(probabilities [1, 4],
    /// attention [r, k])`.
    pub fn bag_forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let (h, _) = self.encode(tape, x)?;
        let a = self.attention(tape, h)?;
        let m = self.pool(tape, a, h)?;
        let probs = self.classify(tape, m)?;
        Ok((probs, a))
    }
}

/// `-log p[grade]`, the categorical bag likelihood.
pub fn bag_loss(tape: &mut Tape, probs: Var, grade: usize) -> Result<Var> {
    tape.nll_loss(probs, grade)
}

/// Stacks slices into the `[k, 1, d, d]` network input, scaling
/// intensities to [0, 1].
pub fn slices_to_input(tape: &mut Tape, slices: &[GrayImage]) -> Result<Var> {
    let Some(first) = slices.first() else {
        return Err(Error::Contract("bag_forward on an empty bag".into()));
    };
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(slices.len() * w * h);
    for slice in slices {
        if slice.width() != w || slice.height() != h {
            return Err(Error::Contract(format!(
                "slice dimensions differ: {}x{} vs {w}x{h}",
                slice.width(),
                slice.height()
            )));
        }
        data.extend(slice.pixels().iter().map(|&p| f64::from(p) / 255.0));
    }
    tape.constant(vec![slices.len(), 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_side: 16,
                channels: vec![4, 8],
                feature_dim: 8,
            },
            attention: AttentionConfig { hidden: 8, rows: 1 },
            classifier_hidden: 8,
        }
    }

    fn random_input(tape: &mut Tape, k: usize, side: usize, seed: u64) -> Var {
        let mut rng = SeedRng::new(seed);
        let data = (0..k * side * side).map(|_| rng.uniform()).collect();
        tape.constant(vec![k, 1, side, side], data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let config = small_config();
        let a = ModelBundle::init(&config, 7).unwrap();
        let b = ModelBundle::init(&config, 7).unwrap();
        for name in a.names() {
            assert_eq!(a.param(name).unwrap().data(), b.param(name).unwrap().data());
        }
        let mut bad = config.clone();
        bad.encoder.input_side = 10; // not divisible by 4
        assert!(ModelBundle::init(&bad, 7).is_err());
    }

    #[test]
    fn encode_maps_instances_independently() {
        let config = small_config();
        let bundle = ModelBundle::init(&config, 3).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &bundle);

        // Two identical slices stacked: both H rows must coincide.
        let mut rng = SeedRng::new(5);
        let one: Vec<f64> = (0..16 * 16).map(|_| rng.uniform()).collect();
        let mut data = one.clone();
        data.extend_from_slice(&one);
        let x = tape.constant(vec![2, 1, 16, 16], data).unwrap();
        let (h, _) = bound.encode(&mut tape, x).unwrap();
        let hd = tape.data(h);
        let u = config.encoder.feature_dim;
        assert_eq!(&hd[..u], &hd[u..]);
    }

    #[test]
    fn encode_permutes_rows_with_instances() {
        let config = small_config();
        let bundle = ModelBundle::init(&config, 3).unwrap();
        let mut rng = SeedRng::new(6);
        let a: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();

        let mut tape1 = Tape::new();
        let bound1 = BoundModel::bind(&mut tape1, &bundle);
        let mut ab = a.clone();
        ab.extend_from_slice(&b);
        let x1 = tape1.constant(vec![2, 1, 16, 16], ab).unwrap();
        let (h1, _) = bound1.encode(&mut tape1, x1).unwrap();

        let mut tape2 = Tape::new();
        let bound2 = BoundModel::bind(&mut tape2, &bundle);
        let mut ba = b.clone();
        ba.extend_from_slice(&a);
        let x2 = tape2.constant(vec![2, 1, 16, 16], ba).unwrap();
        let (h2, _) = bound2.encode(&mut tape2, x2).unwrap();

        let u = config.encoder.feature_dim;
        assert_eq!(&tape1.data(h1)[..u], &tape2.data(h2)[u..]);
        assert_eq!(&tape1.data(h1)[u..], &tape2.data(h2)[..u]);
    }

    #[test]
    fn encode_rejects_wrong_spatial_size() {
        let config = small_config();
        let bundle = ModelBundle::init(&config, 3).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &bundle);
        let x = tape.constant(vec![1, 1, 8, 8], vec![0.0; 64]).unwrap();
        assert!(bound.encode(&mut tape, x).is_err());
    }

    #[test]
    fn decode_restores_input_shape() {
        for side in [32usize, 64] {
            let config = ModelConfig {
                encoder: EncoderConfig {
                    input_side: side,
                    channels: vec![4, 8, 8],
                    feature_dim: 8,
                },
                ..small_config()
            };
            let bundle = ModelBundle::init(&config, 11).unwrap();
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &bundle);
            let x = random_input(&mut tape, 2, side, 13);
            let (_, skips) = bound.encode(&mut tape, x).unwrap();
            let recon = bound.decode(&mut tape, &skips).unwrap();
            assert_eq!(tape.shape(recon), &[2, 1, side, side]);
            let loss = tape.mse(recon, x).unwrap();
            let v = tape.scalar_value(loss).unwrap();
            assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn attention_on_single_instance_is_one() {
        let config = small_config();
        let bundle = ModelBundle::init(&config, 17).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &bundle);
        let h = tape
            .constant(vec![1, config.encoder.feature_dim], vec![0.3; 8])
            .unwrap();
        let a = bound.attention(&mut tape, h).unwrap();
        assert_eq!(tape.shape(a), &[1, 1]);
        assert_eq!(tape.data(a), &[1.0]);
    }

    #[test]
    fn attention_with_zero_w2_is_uniform() {
        let config = small_config();
        let mut bundle = ModelBundle::init(&config, 19).unwrap();
        bundle
            .param_mut("attention.w2")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &bundle);
        let mut rng = SeedRng::new(21);
        let h = tape
            .constant(vec![5, 8], (0..40).map(|_| rng.normal()).collect())
            .unwrap();
        let a = bound.attention(&mut tape, h).unwrap();
        for v in tape.data(a) {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    /// H = I2, W1 = I2, W2 = [1, 0]: logits are [tanh 1, 0] and the
    /// attention row is softmax([0.76159.., 0]) = [0.681700.., 0.318299..]
    /// (hand-evaluated: 1 / (1 + e^-tanh(1))).
    #[test]
    fn attention_hand_computed_example() {
        let config = ModelConfig {
            encoder: EncoderConfig {
                input_side: 16,
                channels: vec![4],
                feature_dim: 2,
            },
            attention: AttentionConfig { hidden: 2, rows: 1 },
            classifier_hidden: 4,
        };
        let mut bundle = ModelBundle::init(&config, 1).unwrap();
        bundle
            .param_mut("attention.w1")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        bundle
            .param_mut("attention.w2")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, 0.0]);
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &bundle);
        let h = tape
            .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let a = bound.attention(&mut tape, h).unwrap();
        let expected = 1.0 / (1.0 + (-(1.0f64.tanh())).exp());
        assert!((tape.data(a)[0] - expected).abs() < 1e-12);
        assert!((tape.data(a)[0] - 0.681700).abs() < 1e-4);
        assert!((tape.data(a)[1] - 0.318300).abs() < 1e-4);
    }

    #[test]
    fn pool_uniform_attention_averages_rows() {
        let config = small_config();
        let bundle = ModelBundle::init(&config, 23).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &bundle);
        let a = tape.constant(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let h = tape.constant(vec![2, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let m = bound.pool(&mut tape, a, h).unwrap();
        assert_eq!(tape.data(m), &[1.0, 1.0]);
    }

    #[test]
    fn pool_one_hot_attention_selects_row() {
        let config = small_config();
        let bundle = ModelBundle::init(&config, 24).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &bundle);
        let a = tape.constant(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let h = tape
            .constant(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let m = bound.pool(&mut tape, a, h).unwrap();
        assert_eq!(tape.data(m), &[3.0, 4.0]);
    }

    #[test]
    fn pool_matches_naive_triple_loop() {
        let config = small_config();
        let bundle = ModelBundle::init(&config, 25).unwrap();
        let mut rng = SeedRng::new(31);
        let (r, k, u) = (3usize, 5usize, 4usize);
        let a_data: Vec<f64> = (0..r * k).map(|_| rng.normal()).collect();
        let h_data: Vec<f64> = (0..k * u).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &bundle);
        let a = tape.constant(vec![r, k], a_data.clone()).unwrap();
        let h = tape.constant(vec![k, u], h_data.clone()).unwrap();
        let m = bound.pool(&mut tape, a, h).unwrap();
        for i in 0..r {
            for j in 0..u {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a_data[i * k + l] * h_data[l * u + j];
                }
                assert!((tape.data(m)[i * u + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classify_outputs_probabilities() {
        let config = small_config();
        let bundle = ModelBundle::init(&config, 29).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &bundle);
        let m = tape.constant(vec![1, 8], vec![0.4; 8]).unwrap();
        let probs = bound.classify(&mut tape, m).unwrap();
        let p = tape.data(probs);
        assert_eq!(p.len(), 4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zeroed_classifier_is_uniform() {
        let config = small_config();
        let mut bundle = ModelBundle::init(&config, 31).unwrap();
        for name in [
            "classifier.fc1.weight",
            "classifier.fc1.bias",
            "classifier.fc2.weight",
            "classifier.fc2.bias",
        ] {
            bundle
                .param_mut(name)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &bundle);
        let m = tape.constant(vec![1, 8], vec![0.7; 8]).unwrap();
        let probs = bound.classify(&mut tape, m).unwrap();
        for v in tape.data(probs) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn bag_forward_is_permutation_invariant() {
        let config = small_config();
        let bundle = ModelBundle::init(&config, 37).unwrap();
        let mut rng = SeedRng::new(41);
        let k = 5usize;
        let slices: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..256).map(|_| rng.uniform()).collect())
            .collect();

        let forward = |order: &[usize]| {
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &bundle);
            let mut data = Vec::new();
            for &i in order {
                data.extend_from_slice(&slices[i]);
            }
            let x = tape.constant(vec![k, 1, 16, 16], data).unwrap();
            let (probs, _) = bound.bag_forward(&mut tape, x).unwrap();
            tape.data(probs).to_vec()
        };

        let base = forward(&[0, 1, 2, 3, 4]);
        let mut order: Vec<usize> = (0..k).collect();
        let mut prng = SeedRng::new(43);
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        for _ in 0..6 {
            prng.shuffle(&mut order);
            let permuted = forward(&order);
            for (a, b) in base.iter().zip(&permuted) {
                assert!((a - b).abs() < 1e-12, "{order:?}: {a} vs {b}");
            }
            assert_eq!(argmax(&base), argmax(&permuted));
        }
    }

    #[test]
    fn duplicating_instances_halves_weights_and_keeps_pool() {
        let config = small_config();
        let bundle = ModelBundle::init(&config, 47).unwrap();
        let mut rng = SeedRng::new(49);
        let k = 3usize;
        let u = config.encoder.feature_dim;
        let h_data: Vec<f64> = (0..k * u).map(|_| rng.normal()).collect();

        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &bundle);
        let h = tape.constant(vec![k, u], h_data.clone()).unwrap();
        let a = bound.attention(&mut tape, h).unwrap();
        let m = bound.pool(&mut tape, a, h).unwrap();

        let mut doubled = h_data.clone();
        doubled.extend_from_slice(&h_data);
        let h2 = tape.constant(vec![2 * k, u], doubled).unwrap();
        let a2 = bound.attention(&mut tape, h2).unwrap();
        let m2 = bound.pool(&mut tape, a2, h2).unwrap();

        let w1 = tape.data(a).to_vec();
        let w2 = tape.data(a2).to_vec();
        for (i, w) in w1.iter().enumerate() {
            assert!((w / 2.0 - w2[i]).abs() < 1e-12);
            assert!((w / 2.0 - w2[k + i]).abs() < 1e-12);
        }
        let m1 = tape.data(m).to_vec();
        for (v, v2) in m1.iter().zip(tape.data(m2)) {
            assert!((v - v2).abs() < 1e-12);
        }
    }

    #[test]
    fn correct_one_hot_prediction_has_near_zero_loss() {
        let mut tape = Tape::new();
        let probs = tape
            .constant(vec![1, 4], vec![1.0 - 3e-12, 1e-12, 1e-12, 1e-12])
            .unwrap();
        let loss = bag_loss(&mut tape, probs, 0).unwrap();
        assert!(tape.scalar_value(loss).unwrap() < 1e-9);
    }

    #[test]
    fn empty_bag_is_rejected() {
        let mut tape = Tape::new();
        assert!(slices_to_input(&mut tape, &[]).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fzkm");
        let config = small_config();
        let bundle = ModelBundle::init(&config, 53).unwrap();
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::load(&path, &config).unwrap();
        for name in bundle.names() {
            let a = bundle.param(name).unwrap();
            let b = loaded.param(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        // Saving the loaded bundle again must reproduce the byte stream.
        let path2 = dir.path().join("model2.fzkm");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupted_magic_is_rejected_distinctly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fzkm");
        let config = small_config();
        ModelBundle::init(&config, 59).unwrap().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ModelBundle::load(&path, &config),
            Err(Error::BadMagic)
        ));
    }

    #[test]
    fn wrong_version_is_rejected_distinctly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fzkm");
        let config = small_config();
        ModelBundle::init(&config, 61).unwrap().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ModelBundle::load(&path, &config),
            Err(Error::BadVersion(9))
        ));
    }

    #[test]
    fn pretrained_bundle_loads_with_identical_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fzkm");
        let config = small_config();
        let pretrained = ModelBundle::init(&config, 67).unwrap();
        pretrained.save(&path).unwrap();

        let mut fresh = ModelBundle::init(&config, 68).unwrap();
        let loaded = ModelBundle::load(&path, &config).unwrap();
        let names_a: Vec<&str> = fresh.names().collect();
        let names_b: Vec<&str> = loaded.names().collect();
        assert_eq!(names_a, names_b);
        for name in &names_a {
            assert_eq!(
                fresh.param(name).unwrap().shape(),
                loaded.param(name).unwrap().shape()
            );
        }
        fresh.load_values_from(&loaded).unwrap();
        assert_eq!(
            fresh.param("encoder.conv0.weight").unwrap().data(),
            pretrained.param("encoder.conv0.weight").unwrap().data()
        );
    }

    #[test]
    fn param_groups_partition_sensibly() {
        let config = small_config();
        let mut bundle = ModelBundle::init(&config, 71).unwrap();
        let recon: Vec<String> = bundle
            .iter_group_mut(ParamGroup::Reconstruction)
            .map(|(n, _)| n.to_string())
            .collect();
        assert!(recon.iter().all(|n| n.starts_with("encoder.") || n.starts_with("decoder.")));
        let cls: Vec<String> = bundle
            .iter_group_mut(ParamGroup::Classification)
            .map(|(n, _)| n.to_string())
            .collect();
        assert!(cls.iter().any(|n| n.starts_with("encoder.")));
        assert!(cls.iter().all(|n| !n.starts_with("decoder.")));
    }
}
