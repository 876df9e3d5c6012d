//! Full localization model: modal-gate encoder, anomaly enhancement and the
//! (dynamic-weight or plain) decoder, with training/inference forwards and a
//! versioned binary checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ae::{AeCache, AnomalyEnhancer, DetectionLosses};
use crate::decoder::{DwdCache, DwdDecoder, PlainCache, PlainDecoder};
use crate::encoder::{
    gate_teacher_label, EncoderCache, GateDecision, MgEncoder, Route, STAGE_WIDTHS,
};
use crate::error::{ImlError, Result};
use crate::nn::loss::{bce_with_logit, softmax_ce_map, softmax_map};
use crate::nn::{GradStore, Params, Scalar, TensorGrid};
use crate::types::{binarize, BinaryMask, Image, Sample};

/// Architecture + routing switches. Stored inside checkpoints, so a saved
/// model always reloads with the same structure.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Gate-selected routing; when false, `force_modality` applies.
    pub use_modal_gate: bool,
    /// Static routing for gate-less models (defaults to Fused when absent).
    pub force_modality: Option<Route>,
    /// Dynamic Weight Decoder; when false, a plain FPN + 1x1 head decodes.
    pub use_dwd: bool,
    /// Per-sample filter mixing; when false attention is frozen at 0.5.
    pub use_dynamic_weights: bool,
    /// Anomaly-enhancement branch (attention, detection losses, fusion).
    pub use_ae: bool,
    /// Parameter-initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            use_modal_gate: true,
            force_modality: None,
            use_dwd: true,
            use_dynamic_weights: true,
            use_ae: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Whether the frequency branch participates at all.
    pub fn needs_freq(&self) -> bool {
        self.use_modal_gate || self.force_modality.unwrap_or(Route::Fused) == Route::Fused
    }

    /// Static route used when the gate is disabled.
    pub fn forced_route(&self) -> Route {
        self.force_modality.unwrap_or(Route::Fused)
    }
}

#[derive(Debug, Clone)]
pub enum DecoderKind<F: Scalar> {
    Dwd(DwdDecoder<F>),
    Plain(PlainDecoder<F>),
}

pub enum DecoderCache<F: Scalar> {
    Dwd(DwdCache<F>),
    Plain(PlainCache<F>),
}

/// The complete trainable model.
#[derive(Debug, Clone)]
pub struct IMLModel<F: Scalar> {
    pub cfg: ModelConfig,
    pub encoder: MgEncoder<F>,
    pub ae: AnomalyEnhancer<F>,
    pub decoder: DecoderKind<F>,
}

/// Per-sample training forward output plus everything backward needs.
pub struct TrainForward<F: Scalar> {
    pub logits: Array3<F>,
    pub p_rgb: Array3<F>,
    pub p_fused: Option<Array3<F>>,
    pub gate_logit: Option<F>,
    pub gate: GateDecision,
    pub teacher: Option<u8>,
    pub det_losses: Option<DetectionLosses>,
    enc_cache: EncoderCache<F>,
    ae_cache: Option<AeCache<F>>,
    dec_cache: DecoderCache<F>,
}

/// Inference result.
pub struct Prediction {
    pub prob: Array2<f32>,
    pub mask: BinaryMask,
    pub gate: GateDecision,
}

impl<F: Scalar> IMLModel<F> {
    pub fn new(cfg: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = MgEncoder::new(&mut rng);
        let ae = AnomalyEnhancer::new(&mut rng, STAGE_WIDTHS[1], STAGE_WIDTHS[2]);
        let decoder = if cfg.use_dwd {
            DecoderKind::Dwd(DwdDecoder::new(&mut rng, &STAGE_WIDTHS))
        } else {
            DecoderKind::Plain(PlainDecoder::new(&mut rng, &STAGE_WIDTHS))
        };
        Self { cfg, encoder, ae, decoder }
    }

    fn check_input(image: &Image) -> Result<()> {
        if image.height() % 32 != 0 || image.width() % 32 != 0 {
            return Err(ImlError::InvalidInput(format!(
                "model input dims must be multiples of 32, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Training forward with teacher-forced routing.
    ///
    /// `det_rng` drives RPN anchor sampling; it must be derived
    /// deterministically from (seed, step, sample index) by the caller.
    pub fn forward_train(
        &self,
        sample: &Sample,
        det_rng: &mut ChaCha8Rng,
    ) -> Result<TrainForward<F>> {
        Self::check_input(&sample.image)?;
        let cfg = &self.cfg;
        let needs_freq = cfg.needs_freq();

        // encoder without routing first: we need the coarse maps to build the
        // teacher label, which then decides the backbone input
        let gt4 = sample.mask.max_pool(4);
        let (enc_out, enc_cache) = if cfg.use_modal_gate {
            // probe pass on the heads only is avoided by running the encoder
            // with an explicit override computed from a cheap pre-pass of the
            // two coarse heads; the encoder recomputes nothing extra because
            // the teacher label only needs p_rgb/p_fused, which it produces
            // before routing. We therefore run it once with the override
            // closure pattern: first compute heads, then route.
            self.encoder.forward_with_teacher(
                &sample.image,
                |p_rgb, p_fused| gate_teacher_label(p_rgb, p_fused, &gt4),
            )?
        } else {
            self.encoder.forward(&sample.image, Some(cfg.forced_route()), needs_freq)?
        };

        let teacher = if cfg.use_modal_gate {
            Some(match enc_cache.route {
                Route::Fused => 1u8,
                Route::VisionOnly => 0u8,
            })
        } else {
            None
        };

        // anomaly enhancement (training: detection losses + fusion)
        let mut features = enc_out.features;
        let (ae_cache, det_losses) = if cfg.use_ae {
            let (f2p, f3p, losses, cache) = self.ae.forward_train(
                &features[1],
                &features[2],
                &sample.boxes,
                (sample.image.height(), sample.image.width()),
                det_rng,
            );
            features[1] = f2p;
            features[2] = f3p;
            (Some(cache), Some(losses))
        } else {
            (None, None)
        };

        let (logits, dec_cache) = match &self.decoder {
            DecoderKind::Dwd(d) => {
                let (l, c) = d.forward(&features, cfg.use_dynamic_weights)?;
                (l, DecoderCache::Dwd(c))
            }
            DecoderKind::Plain(d) => {
                let (l, c) = d.forward(&features);
                (l, DecoderCache::Plain(c))
            }
        };

        let gate_logit = MgEncoder::gate_logit(&enc_cache);
        Ok(TrainForward {
            logits,
            p_rgb: enc_out.p_rgb,
            p_fused: enc_out.p_fused,
            gate_logit: if cfg.use_modal_gate { gate_logit } else { None },
            gate: enc_out.gate,
            teacher,
            det_losses,
            enc_cache,
            ae_cache,
            dec_cache,
        })
    }

    /// Backward for one sample. The `g_*` inputs are the already-weighted
    /// loss gradients; `det_scale` seeds the detection losses.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        fwd: &TrainForward<F>,
        g_logits: &Array3<F>,
        g_p_rgb: Option<&Array3<F>>,
        g_p_fused: Option<&Array3<F>>,
        g_gate_logit: Option<F>,
        det_scale: F,
        gs: &mut GradStore<F>,
    ) {
        let mut g_features = match &self.decoder {
            DecoderKind::Dwd(d) => match &fwd.dec_cache {
                DecoderCache::Dwd(c) => d.backward(c, g_logits, "dec", gs),
                _ => unreachable!("decoder cache kind"),
            },
            DecoderKind::Plain(d) => match &fwd.dec_cache {
                DecoderCache::Plain(c) => d.backward(c, g_logits, "dec", gs),
                _ => unreachable!("decoder cache kind"),
            },
        };

        if let Some(ae_cache) = fwd.ae_cache.as_ref() {
            let (g_f2, g_f3) =
                self.ae.backward(ae_cache, &g_features[1], &g_features[2], det_scale, "ae", gs);
            g_features[1] = g_f2;
            g_features[2] = g_f3;
        }

        self.encoder.backward(
            &fwd.enc_cache,
            &g_features,
            g_p_rgb,
            g_p_fused,
            g_gate_logit,
            "enc",
            gs,
        );
    }

    /// Inference: route by gate (or forced modality), skip the detection
    /// branch, binarize at the given threshold.
    pub fn predict(&self, image: &Image, threshold: f32) -> Result<Prediction> {
        Self::check_input(image)?;
        let cfg = &self.cfg;
        let routing = if cfg.use_modal_gate { None } else { Some(cfg.forced_route()) };
        let (enc_out, _) = self.encoder.forward(image, routing, cfg.needs_freq())?;
        let mut features = enc_out.features;
        if cfg.use_ae {
            let (f2p, f3p) = self.ae.forward_infer(&features[1], &features[2]);
            features[1] = f2p;
            features[2] = f3p;
        }
        let logits = match &self.decoder {
            DecoderKind::Dwd(d) => d.forward(&features, cfg.use_dynamic_weights)?.0,
            DecoderKind::Plain(d) => d.forward(&features).0,
        };
        let probs = softmax_map(&logits);
        let (_, h, w) = probs.dim();
        let mut prob = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                prob[[y, x]] = probs[[1, y, x]].into_f64() as f32;
            }
        }
        let mask = binarize(&prob, threshold)?;
        Ok(Prediction { prob, mask, gate: enc_out.gate })
    }
}

impl<F: Scalar> Params<F> for IMLModel<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        let join = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        self.encoder.visit(&join("enc"), f);
        self.ae.visit(&join("ae"), f);
        match &self.decoder {
            DecoderKind::Dwd(d) => d.visit(&join("dec"), f),
            DecoderKind::Plain(d) => d.visit(&join("dec"), f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        let join = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        self.encoder.visit_mut(&join("enc"), f);
        self.ae.visit_mut(&join("ae"), f);
        match &mut self.decoder {
            DecoderKind::Dwd(d) => d.visit_mut(&join("dec"), f),
            DecoderKind::Plain(d) => d.visit_mut(&join("dec"), f),
        }
    }
}

/// Per-sample loss terms plus the lambda-weighted total.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub mask_ce: f64,
    pub aux_rgb_ce: f64,
    pub aux_fused_ce: f64,
    pub gate_bce: f64,
    pub det_total: f64,
    pub total: f64,
}

/// Loss weights (lambdas).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub mask: f64,
    pub aux: f64,
    pub gate: f64,
    pub det: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mask: 1.0, aux: 0.4, gate: 0.5, det: 1.0 }
    }
}

/// Runs the weighted losses for one sample: forward, loss evaluation and
/// backward into `gs` (scaled by `inv_batch`).
pub fn sample_losses<F: Scalar>(
    model: &IMLModel<F>,
    sample: &Sample,
    weights: &LossWeights,
    det_rng: &mut ChaCha8Rng,
    inv_batch: f64,
    gs: &mut GradStore<F>,
) -> Result<LossReport> {
    let fwd = model.forward_train(sample, det_rng)?;
    let target: Array2<u8> = sample.mask.bits().clone();
    let gt4 = sample.mask.max_pool(4);
    let t4: Array2<u8> = gt4.bits().clone();

    let (mask_ce, mut g_logits) = softmax_ce_map(&fwd.logits, &target);
    let scale = F::from_f64(weights.mask * inv_batch);
    g_logits.mapv_inplace(|v| v * scale);

    let (aux_rgb_ce, mut g_p_rgb) = softmax_ce_map(&fwd.p_rgb, &t4);
    let aux_scale = F::from_f64(weights.aux * inv_batch);
    g_p_rgb.mapv_inplace(|v| v * aux_scale);

    let (aux_fused_ce, g_p_fused) = match fwd.p_fused.as_ref() {
        Some(pf) => {
            let (ce, mut g) = softmax_ce_map(pf, &t4);
            g.mapv_inplace(|v| v * aux_scale);
            (ce, Some(g))
        }
        None => (F::zero(), None),
    };

    let (gate_bce, g_gate) = match (fwd.gate_logit, fwd.teacher) {
        (Some(logit), Some(label)) => {
            let (l, g) = bce_with_logit(logit, F::from_f64(label as f64));
            (l, Some(g * F::from_f64(weights.gate * inv_batch)))
        }
        _ => (F::zero(), None),
    };

    let det_total = fwd.det_losses.map(|d| d.total()).unwrap_or(0.0);

    model.backward(
        &fwd,
        &g_logits,
        Some(&g_p_rgb),
        g_p_fused.as_ref(),
        g_gate,
        F::from_f64(weights.det * inv_batch),
        gs,
    );

    let mask_ce = mask_ce.into_f64();
    let aux_rgb_ce = aux_rgb_ce.into_f64();
    let aux_fused_ce = aux_fused_ce.into_f64();
    let gate_bce = gate_bce.into_f64();
    let total = weights.mask * mask_ce
        + weights.aux * (aux_rgb_ce + aux_fused_ce)
        + weights.gate * gate_bce
        + weights.det * det_total;
    Ok(LossReport { mask_ce, aux_rgb_ce, aux_fused_ce, gate_bce, det_total, total })
}

// --- checkpoint format -----------------------------------------------------
//
// Layout (little-endian):
//   magic   8 bytes  b"IMLCKPT\x01"
//   u32     config JSON length, then that many bytes of ModelConfig JSON
//   u32     parameter count
//   per parameter:
//     u16   name length + name bytes (UTF-8 dotted path)
//     u8    ndim, then ndim x u32 dims
//     f32[] row-major data (product of dims entries)

const CKPT_MAGIC: &[u8; 8] = b"IMLCKPT\x01";

pub fn save_checkpoint<F: Scalar>(model: &IMLModel<F>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CKPT_MAGIC)?;
    let cfg_json = serde_json::to_vec(&model.cfg)?;
    out.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    out.write_all(&cfg_json)?;
    let params = crate::nn::export_params(model);
    let mut names: Vec<&String> = params.keys().collect();
    names.sort();
    out.write_all(&(names.len() as u32).to_le_bytes())?;
    for name in names {
        let arr = &params[name];
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[arr.ndim() as u8])?;
        for &d in arr.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in arr.iter() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<IMLModel<f32>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(ImlError::Checkpoint("bad magic (not an imlkit checkpoint)".into()));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let cfg_len = u32::from_le_bytes(u32buf) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    file.read_exact(&mut cfg_bytes)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_bytes)?;

    file.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut params: HashMap<String, ArrayD<f64>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        file.read_exact(&mut u16buf)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        file.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| ImlError::Checkpoint(format!("bad parameter name: {e}")))?;
        let mut ndim = [0u8; 1];
        file.read_exact(&mut ndim)?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            file.read_exact(&mut u32buf)?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = vec![0f64; len];
        let mut f32buf = [0u8; 4];
        for slot in data.iter_mut() {
            file.read_exact(&mut f32buf)?;
            *slot = f32::from_le_bytes(f32buf) as f64;
        }
        params.insert(
            name,
            ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
                .map_err(|e| ImlError::Checkpoint(format!("bad parameter shape: {e}")))?,
        );
    }
    let mut model = IMLModel::<f32>::new(cfg);
    crate::nn::import_params(&mut model, &params)?;
    Ok(model)
}
