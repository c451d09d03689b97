//! Small convolutional demosaicer with hand-derived reverse-mode gradients.
//!
//! The network maps the four packed CFA phases at half resolution through a
//! stem, a stack of inverted linear bottlenecks (1x1 expand, 3x3 depthwise,
//! 1x1 linear project, residual add), and a linear head whose 12 channels are
//! sub-pixel-rearranged into the full-resolution RGB output. Outputs are not
//! clamped inside the graph.

mod ops;
mod tensor;

pub use tensor::{Tensor, TensorMeta};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BayerMosaic, Patch, RgbImage};
use crate::util::{rng_from_seed, sample_standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub blocks: usize,
    pub width: usize,
    pub expansion: usize,
    pub kernel: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(blocks: usize, width: usize, expansion: usize, seed: u64) -> Result<Self> {
        let spec = Self { blocks, width, expansion, kernel: 3, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 || self.width < 4 || self.expansion < 1 {
            return Err(Error::InvalidConfig(format!(
                "model spec out of range: blocks {} width {} expansion {}",
                self.blocks, self.width, self.expansion
            )));
        }
        if self.kernel != 3 {
            return Err(Error::InvalidConfig("only 3x3 spatial kernels supported".into()));
        }
        Ok(())
    }

    /// Named size presets; parameter counts land near 9.5K/16K/84K/176K.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let (blocks, width, expansion) = match name {
            "9k" => (3, 15, 4),
            "16k" => (3, 24, 3),
            "84k" => (3, 48, 5),
            "176k" => (3, 60, 7),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown model preset '{other}' (9k, 16k, 84k, 176k)"
                )))
            }
        };
        Self::new(blocks, width, expansion, seed)
    }

    /// Tensor manifest in parameter order: stem, blocks, head.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.width;
        let e = self.width * self.expansion;
        let mut layout = vec![
            ("stem.weight".to_string(), vec![w, 4, 3, 3]),
            ("stem.bias".to_string(), vec![w]),
        ];
        for b in 0..self.blocks {
            layout.push((format!("block{b}.expand.weight"), vec![e, w, 1, 1]));
            layout.push((format!("block{b}.expand.bias"), vec![e]));
            layout.push((format!("block{b}.depth.weight"), vec![e, 3, 3]));
            layout.push((format!("block{b}.depth.bias"), vec![e]));
            layout.push((format!("block{b}.project.weight"), vec![w, e, 1, 1]));
            layout.push((format!("block{b}.project.bias"), vec![w]));
        }
        layout.push(("head.weight".to_string(), vec![12, w, 3, 3]));
        layout.push(("head.bias".to_string(), vec![12]));
        layout
    }

    pub fn param_count(&self) -> usize {
        self.tensor_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Ordered parameter tensors matching [`ModelSpec::tensor_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
}

/// Same shape manifest as [`ModelParams`].
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zeros_like(spec: &ModelSpec) -> Self {
        let tensors = spec.tensor_layout().iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Self { tensors }
    }

    pub fn from_tensors(spec: &ModelSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = spec.tensor_layout();
        if tensors.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name}: expected {:?}, got {:?}",
                    shape,
                    t.shape()
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Flat view in manifest order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }
}

/// He-scaled seeded initialization; biases start at zero.
pub fn init(spec: &ModelSpec) -> ModelParams {
    let mut rng = rng_from_seed(spec.seed);
    let mut tensors = Vec::new();
    for (name, shape) in spec.tensor_layout() {
        if name.ends_with(".bias") {
            tensors.push(Tensor::zeros(&shape));
            continue;
        }
        // Depthwise weights are [c,3,3]: fan-in is the spatial footprint.
        let fan_in: usize = if shape.len() == 3 { 9 } else { shape[1..].iter().product() };
        let scale = (2.0 / fan_in as f64).sqrt();
        let data =
            (0..shape.iter().product()).map(|_| sample_standard_normal(&mut rng) * scale).collect();
        tensors.push(Tensor::from_vec(&shape, data).expect("shape consistent"));
    }
    ModelParams { tensors }
}

/// Splits the mosaic into its four CFA phases at half resolution.
/// Channel order follows the 2x2 tile positions (0,0), (0,1), (1,0), (1,1).
pub fn pack_bayer(mosaic: &BayerMosaic) -> Tensor {
    let (h2, w2) = (mosaic.height() / 2, mosaic.width() / 2);
    let mut data = vec![0.0; 4 * h2 * w2];
    for t in 0..4 {
        let (ty, tx) = (t / 2, t % 2);
        for y in 0..h2 {
            for x in 0..w2 {
                data[t * h2 * w2 + y * w2 + x] = mosaic.get(2 * y + ty, 2 * x + tx);
            }
        }
    }
    Tensor::from_vec(&[4, h2, w2], data).expect("sized above")
}

/// Inverse of [`pack_bayer`]; used to check the packing is a bijection.
pub fn unpack_bayer(packed: &Tensor, pattern: crate::imaging::CfaPattern) -> Result<BayerMosaic> {
    let shape = packed.shape();
    if shape.len() != 3 || shape[0] != 4 {
        return Err(Error::ShapeMismatch(format!("expected [4,h,w], got {shape:?}")));
    }
    let (h2, w2) = (shape[1], shape[2]);
    let mut data = vec![0.0; 4 * h2 * w2];
    for t in 0..4 {
        let (ty, tx) = (t / 2, t % 2);
        for y in 0..h2 {
            for x in 0..w2 {
                data[(2 * y + ty) * (2 * w2) + 2 * x + tx] =
                    packed.data()[t * h2 * w2 + y * w2 + x];
            }
        }
    }
    BayerMosaic::new(2 * h2, 2 * w2, data, pattern)
}

/// Activations cached during the forward pass, consumed by the adjoint.
struct ForwardTrace {
    h2: usize,
    w2: usize,
    stem_pre: Vec<f64>,
    stem_act: Vec<f64>,
    // Per block: (input, expand_pre, expand_act, depth_pre, depth_act)
    blocks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
    trunk_out: Vec<f64>,
}

fn forward_trace(params: &ModelParams, spec: &ModelSpec, packed: &Tensor) -> Result<ForwardTrace> {
    let shape = packed.shape();
    if shape.len() != 3 || shape[0] != 4 {
        return Err(Error::ShapeMismatch(format!("expected packed [4,h,w], got {shape:?}")));
    }
    let (h2, w2) = (shape[1], shape[2]);
    let plane = h2 * w2;
    let w = spec.width;
    let e = w * spec.expansion;
    let t = params.tensors();

    let stem_pre = ops::conv3x3_forward(packed.data(), 4, h2, w2, t[0].data(), t[1].data(), w);
    let mut stem_act = stem_pre.clone();
    ops::relu_forward(&mut stem_act);

    let mut cur = stem_act.clone();
    let mut blocks = Vec::with_capacity(spec.blocks);
    for b in 0..spec.blocks {
        let base = 2 + b * 6;
        let expand_pre =
            ops::conv1x1_forward(&cur, w, plane, t[base].data(), t[base + 1].data(), e);
        let mut expand_act = expand_pre.clone();
        ops::relu_forward(&mut expand_act);
        let depth_pre = ops::depthwise3x3_forward(
            &expand_act,
            e,
            h2,
            w2,
            t[base + 2].data(),
            t[base + 3].data(),
        );
        let mut depth_act = depth_pre.clone();
        ops::relu_forward(&mut depth_act);
        let project =
            ops::conv1x1_forward(&depth_act, e, plane, t[base + 4].data(), t[base + 5].data(), w);
        let mut next = cur.clone();
        for (n, p) in next.iter_mut().zip(&project) {
            *n += p;
        }
        blocks.push((cur, expand_pre, expand_act, depth_pre, depth_act));
        cur = next;
    }

    Ok(ForwardTrace { h2, w2, stem_pre, stem_act, blocks, trunk_out: cur })
}

fn head_output(params: &ModelParams, spec: &ModelSpec, trace: &ForwardTrace) -> Vec<f64> {
    let t = params.tensors();
    let n = t.len();
    let head = ops::conv3x3_forward(
        &trace.trunk_out,
        spec.width,
        trace.h2,
        trace.w2,
        t[n - 2].data(),
        t[n - 1].data(),
        12,
    );
    ops::pixel_shuffle2(&head, 3, trace.h2, trace.w2)
}

fn chw_to_patch(chw: &[f64], h: usize, w: usize) -> Patch {
    let mut data = vec![0.0; h * w * 3];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data[(y * w + x) * 3 + c] = chw[c * h * w + y * w + x];
            }
        }
    }
    RgbImage::from_raw(h, w, data).expect("finite network output")
}

fn patch_to_chw(p: &Patch) -> Vec<f64> {
    let (h, w) = (p.height(), p.width());
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[c * h * w + y * w + x] = p.get(y, x, c);
            }
        }
    }
    out
}

/// Full-resolution RGB prediction for a packed mosaic. Unclamped.
pub fn forward(params: &ModelParams, spec: &ModelSpec, packed: &Tensor) -> Result<Patch> {
    let trace = forward_trace(params, spec, packed)?;
    let out = head_output(params, spec, &trace);
    Ok(chw_to_patch(&out, 2 * trace.h2, 2 * trace.w2))
}

/// Exact parameter gradients of `<forward(params, x), upstream>`.
pub fn backward(
    params: &ModelParams,
    spec: &ModelSpec,
    packed: &Tensor,
    upstream: &Patch,
) -> Result<Gradients> {
    let trace = forward_trace(params, spec, packed)?;
    if upstream.height() != 2 * trace.h2 || upstream.width() != 2 * trace.w2 {
        return Err(Error::ShapeMismatch(format!(
            "upstream {}x{} vs output {}x{}",
            upstream.height(),
            upstream.width(),
            2 * trace.h2,
            2 * trace.w2
        )));
    }
    let dy = patch_to_chw(upstream);
    Ok(backward_core(params, spec, packed, &trace, &dy))
}

/// Mean-L1 training loss and its parameter gradients in one pass: the
/// forward trace is shared between the prediction and the adjoint.
pub fn loss_and_gradients(
    params: &ModelParams,
    spec: &ModelSpec,
    packed: &Tensor,
    gt: &Patch,
) -> Result<(f64, Gradients)> {
    let trace = forward_trace(params, spec, packed)?;
    if gt.height() != 2 * trace.h2 || gt.width() != 2 * trace.w2 {
        return Err(Error::ShapeMismatch(format!(
            "gt {}x{} vs output {}x{}",
            gt.height(),
            gt.width(),
            2 * trace.h2,
            2 * trace.w2
        )));
    }
    let out = head_output(params, spec, &trace);
    let gt_chw = patch_to_chw(gt);
    let n = out.len() as f64;
    let mut loss = 0.0;
    let mut dy = vec![0.0; out.len()];
    for (i, (p, g)) in out.iter().zip(&gt_chw).enumerate() {
        let d = p - g;
        loss += d.abs();
        dy[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((loss / n, backward_core(params, spec, packed, &trace, &dy)))
}

fn backward_core(
    params: &ModelParams,
    spec: &ModelSpec,
    packed: &Tensor,
    trace: &ForwardTrace,
    dy: &[f64],
) -> Gradients {
    let (h2, w2) = (trace.h2, trace.w2);
    let plane = h2 * w2;
    let w = spec.width;
    let e = w * spec.expansion;
    let t = params.tensors();
    let n = t.len();
    let mut grads = ModelParams::zeros_like(spec);

    // Head.
    let dhead = ops::pixel_unshuffle2(dy, 3, h2, w2);
    let (dw, db) = ops::conv3x3_backward_params(&dhead, 12, &trace.trunk_out, w, h2, w2);
    grads.tensors_mut()[n - 2].data_mut().copy_from_slice(&dw);
    grads.tensors_mut()[n - 1].data_mut().copy_from_slice(&db);
    let mut dcur = ops::conv3x3_backward_input(&dhead, 12, h2, w2, t[n - 2].data(), w);

    // Blocks in reverse.
    for b in (0..spec.blocks).rev() {
        let base = 2 + b * 6;
        let (block_in, expand_pre, expand_act, depth_pre, depth_act) = &trace.blocks[b];

        // Residual: gradient flows unchanged to the block input and through
        // the projection path.
        let dproject = dcur.clone();
        let (dw, db) = ops::conv1x1_backward_params(&dproject, w, depth_act, e, plane);
        grads.tensors_mut()[base + 4].data_mut().copy_from_slice(&dw);
        grads.tensors_mut()[base + 5].data_mut().copy_from_slice(&db);
        let mut ddepth = ops::conv1x1_backward_input(&dproject, w, plane, t[base + 4].data(), e);
        ops::relu_backward(&mut ddepth, depth_pre);

        let (dw, db) = ops::depthwise3x3_backward_params(&ddepth, expand_act, e, h2, w2);
        grads.tensors_mut()[base + 2].data_mut().copy_from_slice(&dw);
        grads.tensors_mut()[base + 3].data_mut().copy_from_slice(&db);
        let mut dexpand = ops::depthwise3x3_backward_input(&ddepth, e, h2, w2, t[base + 2].data());
        ops::relu_backward(&mut dexpand, expand_pre);

        let (dw, db) = ops::conv1x1_backward_params(&dexpand, e, block_in, w, plane);
        grads.tensors_mut()[base].data_mut().copy_from_slice(&dw);
        grads.tensors_mut()[base + 1].data_mut().copy_from_slice(&db);
        let dblock_in = ops::conv1x1_backward_input(&dexpand, e, plane, t[base].data(), w);
        for (d, add) in dcur.iter_mut().zip(&dblock_in) {
            *d += add;
        }
    }

    // Stem.
    ops::relu_backward(&mut dcur, &trace.stem_pre);
    let (dw, db) = ops::conv3x3_backward_params(&dcur, w, packed.data(), 4, h2, w2);
    grads.tensors_mut()[0].data_mut().copy_from_slice(&dw);
    grads.tensors_mut()[1].data_mut().copy_from_slice(&db);
    let _ = &trace.stem_act;

    grads
}

/// Mean absolute error and its gradient; `sign(0) = 0`.
pub fn l1_loss_and_grad(pred: &Patch, gt: &Patch) -> Result<(f64, Patch)> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{} vs gt {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let n = pred.data().len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.data().len()];
    for (i, (p, g)) in pred.data().iter().zip(gt.data()).enumerate() {
        let d = p - g;
        loss += d.abs();
        grad[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((loss / n, RgbImage::from_raw(pred.height(), pred.width(), grad)?))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(spec: &ModelSpec) -> Self {
        let zeros: Vec<Tensor> =
            spec.tensor_layout().iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update. Pure: inputs are left untouched.
pub fn adam_step(
    params: &ModelParams,
    grads: &Gradients,
    state: &AdamState,
    lr: f64,
) -> Result<(ModelParams, AdamState)> {
    if !(lr >= 0.0) {
        return Err(Error::Optimizer(format!("learning rate must be >= 0, got {lr}")));
    }
    if !grads.all_finite() {
        return Err(Error::Optimizer("non-finite gradient".into()));
    }
    if params.tensors().len() != grads.tensors().len() {
        return Err(Error::ShapeMismatch("params/grads tensor count".into()));
    }
    let mut new_params = params.clone();
    let mut new_state = state.clone();
    new_state.t = state.t + 1;
    let t = new_state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.tensors().len() {
        let g = grads.tensors()[i].data();
        if g.len() != params.tensors()[i].len() {
            return Err(Error::ShapeMismatch(format!("grad tensor {i} shape")));
        }
        let m = new_state.m[i].data_mut();
        let v = new_state.v[i].data_mut();
        let p = new_params.tensors_mut()[i].data_mut();
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok((new_params, new_state))
}

/// Training provenance carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub phase: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn fresh(spec: ModelSpec) -> Self {
        Self { spec, params: init(&spec), adam: AdamState::new(&spec), meta: CheckpointMeta::default() }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    spec: ModelSpec,
    meta: CheckpointMeta,
    dtype: String,
    blob: String,
    adam_t: u64,
    tensors: Vec<TensorMeta>,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `<path>` (JSON manifest) and the adjacent `.bin` blob of
/// little-endian f64 values: parameters, then Adam m, then Adam v.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let layout = ckpt.spec.tensor_layout();
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, t: &Tensor, blob: &mut Vec<u8>, offset: &mut usize| {
        tensors.push(TensorMeta {
            name,
            shape: t.shape().to_vec(),
            offset: *offset,
            len: t.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        *offset += t.len();
    };
    for ((name, _), t) in layout.iter().zip(ckpt.params.tensors()) {
        push(name.clone(), t, &mut blob, &mut offset);
    }
    for ((name, _), t) in layout.iter().zip(&ckpt.adam.m) {
        push(format!("adam.m.{name}"), t, &mut blob, &mut offset);
    }
    for ((name, _), t) in layout.iter().zip(&ckpt.adam.v) {
        push(format!("adam.v.{name}"), t, &mut blob, &mut offset);
    }
    let blob_file = blob_path(path);
    let manifest = CheckpointManifest {
        spec: ckpt.spec,
        meta: ckpt.meta.clone(),
        dtype: "f64-le".to_string(),
        blob: blob_file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        adam_t: ckpt.adam.t,
        tensors,
    };
    crate::util::write_atomic(&blob_file, &blob)?;
    crate::util::write_json(path, &manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = crate::util::read_json(path)?;
    if manifest.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    let blob_file = blob_path(path);
    let blob = std::fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;

    let layout = manifest.spec.tensor_layout();
    let expected: usize = 3 * layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>();
    if manifest.tensors.len() != 3 * layout.len() || blob.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "manifest mismatch: {} tensors, blob {} bytes, expected {} tensors / {} bytes",
            manifest.tensors.len(),
            blob.len(),
            3 * layout.len(),
            expected * 8
        )));
    }

    let read_tensor = |meta: &TensorMeta, want_shape: &[usize]| -> Result<Tensor> {
        if meta.shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "tensor {}: shape {:?} does not match spec {:?}",
                meta.name, meta.shape, want_shape
            )));
        }
        let start = meta.offset * 8;
        let end = start + meta.len * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {} overruns blob", meta.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::from_vec(want_shape, data)
    };

    let n = layout.len();
    let mut params = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, (_, shape)) in layout.iter().enumerate() {
        params.push(read_tensor(&manifest.tensors[i], shape)?);
        m.push(read_tensor(&manifest.tensors[n + i], shape)?);
        v.push(read_tensor(&manifest.tensors[2 * n + i], shape)?);
    }
    Ok(Checkpoint {
        spec: manifest.spec,
        params: ModelParams::from_tensors(&manifest.spec, params)?,
        adam: AdamState {
            m,
            v,
            t: manifest.adam_t,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        },
        meta: manifest.meta,
    })
}

#[cfg(test)]
mod tests;
