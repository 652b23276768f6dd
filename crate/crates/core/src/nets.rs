//! The three sub-networks: a convolutional feature extractor, a class
//! predictor, and a bias predictor, all expressed over the tape.
//!
//! The feature extractor is three stacks of 2x2 convolution / relu /
//! 2x2 max-pooling followed by global average pooling, so a WxH input
//! must be divisible by 8. Both heads are one hidden tanh layer followed
//! by a linear output; the classifier emits raw logits (softmax lives in
//! the loss for numerical stability) and the bias predictor emits
//! unbounded linear outputs.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytes::ByteReader;
use crate::error::{contract, Error, Result};
use crate::kernels::{self, Activation};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Static description of the model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels of the three conv stacks; the last equals the
    /// feature dimension.
    pub conv_channels: [usize; 3],
    pub classifier_hidden: usize,
    pub bias_hidden: usize,
    /// Number of classes M.
    pub num_classes: usize,
    /// Number of protected variables k.
    pub num_protected: usize,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec {
            input_h: 32,
            input_w: 32,
            conv_channels: [8, 16, 32],
            classifier_hidden: 16,
            bias_hidden: 16,
            num_classes: 2,
            num_protected: 1,
        }
    }
}

impl ArchitectureSpec {
    pub fn feature_dim(&self) -> usize {
        self.conv_channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(contract(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.num_protected < 1 {
            return Err(contract(format!(
                "num_protected must be >= 1, got {}",
                self.num_protected
            )));
        }
        if self.input_h % 8 != 0 || self.input_w % 8 != 0 || self.input_h == 0 || self.input_w == 0 {
            return Err(contract(format!(
                "input resolution {}x{} must be a positive multiple of 8 (three 2x2 poolings)",
                self.input_h, self.input_w
            )));
        }
        if self.conv_channels.iter().any(|&c| c == 0)
            || self.classifier_hidden == 0
            || self.bias_hidden == 0
        {
            return Err(contract("layer widths must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor, // [C_out, C_in, 2, 2]
    pub bias: Tensor,   // [C_out]
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor, // [hidden, in]
    pub b1: Tensor, // [hidden]
    pub w2: Tensor, // [out, hidden]
    pub b2: Tensor, // [out]
}

/// All trainable parameters, grouped by the update phase that owns them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub conv: [ConvParams; 3],
    pub classifier: MlpParams,
    pub bias_pred: MlpParams,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

fn init_mlp(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> MlpParams {
    MlpParams {
        w1: glorot(rng, &[hidden, input], input, hidden),
        b1: Tensor::zeros(&[hidden]),
        w2: glorot(rng, &[output, hidden], hidden, output),
        b2: Tensor::zeros(&[output]),
    }
}

/// Glorot-uniform weights and zero biases, reproducible from the seed.
/// All three parameter sets are always initialized in a fixed order so
/// that variants sharing a seed start from identical extractor weights.
pub fn init_params(spec: &ArchitectureSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chans = spec.conv_channels;
    let mut conv = Vec::with_capacity(3);
    let mut cin = 1usize;
    for &cout in &chans {
        // conv fan counts include the 2x2 receptive field
        let weight = glorot(&mut rng, &[cout, cin, 2, 2], cin * 4, cout * 4);
        conv.push(ConvParams {
            weight,
            bias: Tensor::zeros(&[cout]),
        });
        cin = cout;
    }
    let feat = spec.feature_dim();
    let classifier = init_mlp(&mut rng, feat, spec.classifier_hidden, spec.num_classes);
    let bias_pred = init_mlp(&mut rng, feat, spec.bias_hidden, spec.num_protected);
    let conv: [ConvParams; 3] = conv.try_into().expect("exactly three stacks");
    Ok(ModelParams {
        conv,
        classifier,
        bias_pred,
    })
}

/// Tape slots of the feature-extractor parameters.
pub struct RlVars {
    pub conv: [(VarId, VarId); 3],
}

/// Tape slots of one predictor head.
pub struct MlpVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

fn reg(tape: &mut Tape, t: &Tensor, trainable: bool) -> VarId {
    if trainable {
        tape.variable(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

impl ModelParams {
    pub fn register_rl(&self, tape: &mut Tape, trainable: bool) -> RlVars {
        RlVars {
            conv: [
                (reg(tape, &self.conv[0].weight, trainable), reg(tape, &self.conv[0].bias, trainable)),
                (reg(tape, &self.conv[1].weight, trainable), reg(tape, &self.conv[1].bias, trainable)),
                (reg(tape, &self.conv[2].weight, trainable), reg(tape, &self.conv[2].bias, trainable)),
            ],
        }
    }

    pub fn register_classifier(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        MlpVars {
            w1: reg(tape, &self.classifier.w1, trainable),
            b1: reg(tape, &self.classifier.b1, trainable),
            w2: reg(tape, &self.classifier.w2, trainable),
            b2: reg(tape, &self.classifier.b2, trainable),
        }
    }

    pub fn register_bias_pred(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        MlpVars {
            w1: reg(tape, &self.bias_pred.w1, trainable),
            b1: reg(tape, &self.bias_pred.b1, trainable),
            w2: reg(tape, &self.bias_pred.w2, trainable),
            b2: reg(tape, &self.bias_pred.b2, trainable),
        }
    }

    /// Feature-extractor tensors in serialization/update order.
    pub fn rl_tensors(&self) -> Vec<&Tensor> {
        self.conv
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect()
    }

    pub fn rl_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.conv
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn classifier_tensors(&self) -> Vec<&Tensor> {
        let m = &self.classifier;
        vec![&m.w1, &m.b1, &m.w2, &m.b2]
    }

    pub fn classifier_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let m = &mut self.classifier;
        vec![&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2]
    }

    pub fn bias_pred_tensors(&self) -> Vec<&Tensor> {
        let m = &self.bias_pred;
        vec![&m.w1, &m.b1, &m.w2, &m.b2]
    }

    pub fn bias_pred_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let m = &mut self.bias_pred;
        vec![&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2]
    }

    fn all_tensors(&self) -> Vec<&Tensor> {
        let mut v = self.rl_tensors();
        v.extend(self.classifier_tensors());
        v.extend(self.bias_pred_tensors());
        v
    }

    fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let [c0, c1, c2] = &mut self.conv;
        let mut v: Vec<&mut Tensor> = vec![
            &mut c0.weight,
            &mut c0.bias,
            &mut c1.weight,
            &mut c1.bias,
            &mut c2.weight,
            &mut c2.bias,
        ];
        let cl = &mut self.classifier;
        v.extend([&mut cl.w1, &mut cl.b1, &mut cl.w2, &mut cl.b2]);
        let bp = &mut self.bias_pred;
        v.extend([&mut bp.w1, &mut bp.b1, &mut bp.w2, &mut bp.b2]);
        v
    }
}

/// RlVars slot ids in the same order as `rl_tensors`.
impl RlVars {
    pub fn ids(&self) -> Vec<VarId> {
        self.conv.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl MlpVars {
    pub fn ids(&self) -> Vec<VarId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Feature extractor on the tape: images [B,1,H,W] -> features [B, feature_dim].
pub fn rl_forward(tape: &mut Tape, images: VarId, vars: &RlVars, spec: &ArchitectureSpec) -> Result<VarId> {
    let (_, c, h, w) = tape.value(images).dims4()?;
    if c != 1 || h != spec.input_h || w != spec.input_w {
        return Err(contract(format!(
            "image batch shape {:?} does not match expected [B,1,{},{}]",
            tape.value(images).shape(),
            spec.input_h,
            spec.input_w
        )));
    }
    let mut x = images;
    for (wvar, bvar) in vars.conv {
        x = tape.conv2x2(x, wvar, bvar)?;
        x = tape.activate(x, Activation::Relu);
        x = tape.maxpool2x2(x)?;
    }
    tape.global_avg_pool(x)
}

/// Shared head shape: hidden tanh layer, then linear output.
fn head_forward(tape: &mut Tape, input: VarId, vars: &MlpVars) -> Result<VarId> {
    let h = tape.dense(input, vars.w1, vars.b1)?;
    let h = tape.activate(h, Activation::Tanh);
    tape.dense(h, vars.w2, vars.b2)
}

/// Classifier on the tape: features [B,F] -> logits [B,M].
pub fn c_forward(tape: &mut Tape, features: VarId, vars: &MlpVars) -> Result<VarId> {
    head_forward(tape, features, vars)
}

/// Bias predictor on the tape: features [B,F] -> predictions [B,k].
pub fn bp_forward(tape: &mut Tape, features: VarId, vars: &MlpVars) -> Result<VarId> {
    head_forward(tape, features, vars)
}

/// Tape-free forward pass of the feature extractor.
pub fn rl_infer(params: &ModelParams, spec: &ArchitectureSpec, images: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = images.dims4()?;
    if c != 1 || h != spec.input_h || w != spec.input_w {
        return Err(contract(format!(
            "image batch shape {:?} does not match expected [B,1,{},{}]",
            images.shape(),
            spec.input_h,
            spec.input_w
        )));
    }
    let mut x = images.clone();
    for conv in &params.conv {
        x = kernels::conv2x2_forward(&x, &conv.weight, &conv.bias)?;
        x = kernels::activation_forward(&x, Activation::Relu);
        x = kernels::maxpool2x2_forward(&x)?.0;
    }
    kernels::global_avg_pool_forward(&x)
}

/// Tape-free forward pass of one predictor head.
pub fn mlp_infer(m: &MlpParams, input: &Tensor) -> Result<Tensor> {
    let h = kernels::dense_forward(input, &m.w1, &m.b1)?;
    let h = kernels::activation_forward(&h, Activation::Tanh);
    kernels::dense_forward(&h, &m.w2, &m.b2)
}

pub fn c_infer(params: &ModelParams, features: &Tensor) -> Result<Tensor> {
    mlp_infer(&params.classifier, features)
}

pub fn bp_infer(params: &ModelParams, features: &Tensor) -> Result<Tensor> {
    mlp_infer(&params.bias_pred, features)
}

/// A freshly initialized bias-predictor head, independent of any model.
/// Used to probe frozen features for recoverable protected information.
pub fn init_bias_head(spec: &ArchitectureSpec, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_mlp(&mut rng, spec.feature_dim(), spec.bias_hidden, spec.num_protected)
}

/// Register a standalone head on a tape (used by the probe trainer).
pub fn register_mlp(tape: &mut Tape, m: &MlpParams, trainable: bool) -> MlpVars {
    MlpVars {
        w1: reg(tape, &m.w1, trainable),
        b1: reg(tape, &m.b1, trainable),
        w2: reg(tape, &m.w2, trainable),
        b2: reg(tape, &m.b2, trainable),
    }
}

impl MlpParams {
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

// ── Model serialization ─────────────────────────────────────────────

const MODEL_MAGIC: &[u8; 4] = b"BRNT";
const MODEL_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, length-prefixed JSON spec, then each
/// parameter tensor as (rank u32, extents u32..., little-endian f64 data).
/// Round-trips are bit-exact.
pub fn save_model(path: &Path, spec: &ArchitectureSpec, params: &ModelParams) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let json = serde_json::to_string(spec).map_err(|e| contract(format!("spec to JSON: {e}")))?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    for t in params.all_tensors() {
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ArchitectureSpec, ModelParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MODEL_MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported model version {version}"),
        });
    }
    let json_len = r.u32("spec length")? as usize;
    let json_off = r.pos as u64;
    let json = r.take(json_len, "spec JSON")?;
    let spec: ArchitectureSpec = serde_json::from_slice(json).map_err(|e| Error::Format {
        offset: json_off,
        msg: format!("spec JSON: {e}"),
    })?;
    spec.validate()?;

    let mut params = init_params(&spec, 0)?;
    for t in params.all_tensors_mut() {
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor extent")? as usize);
        }
        if shape != t.shape() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("tensor shape {:?} does not match architecture ({:?})", shape, t.shape()),
            });
        }
        let data = r.f64s(t.numel(), "tensor data")?;
        t.data_mut().copy_from_slice(&data);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_reproducible() {
        let spec = ArchitectureSpec::default();
        let a = init_params(&spec, 7).unwrap();
        let b = init_params(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn glorot_limits_respected() {
        let spec = ArchitectureSpec::default();
        let p = init_params(&spec, 3).unwrap();
        let checks: Vec<(&Tensor, usize, usize)> = vec![
            (&p.conv[0].weight, 1 * 4, 8 * 4),
            (&p.conv[1].weight, 8 * 4, 16 * 4),
            (&p.conv[2].weight, 16 * 4, 32 * 4),
            (&p.classifier.w1, 32, 16),
            (&p.classifier.w2, 16, 2),
            (&p.bias_pred.w1, 32, 16),
            (&p.bias_pred.w2, 16, 1),
        ];
        for (t, fi, fo) in checks {
            let limit = (6.0 / (fi + fo) as f64).sqrt();
            for &v in t.data() {
                assert!(v.abs() <= limit, "weight {v} exceeds glorot limit {limit}");
            }
        }
        for c in &p.conv {
            assert!(c.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = ArchitectureSpec::default();
        spec.num_classes = 1;
        assert!(spec.validate().is_err());
        let mut spec = ArchitectureSpec::default();
        spec.input_h = 30;
        assert!(spec.validate().is_err());
    }
}
