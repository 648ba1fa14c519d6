//! End-to-end dense inference: preprocessing, the stage-toggled calibrated
//! forward pass over one window, and sliding-window tiling into a
//! full-resolution segmentation map.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjust::{aggregate_features, enhanced_attention, AdjustConfig};
use crate::anomaly::{detect_and_resolve, AnomalySet, LofConfig};
use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::fusion::{fuse, multilevel_sum, FusionConfig, FusionStrategy};
use crate::numerics::{cosine_similarity_map, l2_norm, resize_bilinear, SimilarityMap, Tensor2D};
use crate::vit::{
    encode_all_layers, modified_last_layer, residual_last_layer, AttentionKind, AttentionMode,
    EncoderWeights, ImageTensor, LayerStack, TokenGrid,
};

/// Per-channel normalization constants of the reference CLIP release.
pub const CLIP_MEAN: [f32; 3] = [0.48145466, 0.4578275, 0.40821073];
pub const CLIP_STD: [f32; 3] = [0.26862954, 0.26130258, 0.27577711];

/// Unit-norm text embeddings, one row per category.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    pub category_names: Vec<String>,
    pub embeddings: Tensor2D,
    /// When set, predicted labels are shifted by one and label 0 means background.
    pub has_background: bool,
}

impl TextBank {
    pub fn new(category_names: Vec<String>, embeddings: Tensor2D, has_background: bool) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(Error::Data("text bank has no categories".into()));
        }
        if category_names.len() != embeddings.rows() {
            return Err(Error::Shape(format!(
                "{} category names for {} embeddings",
                category_names.len(),
                embeddings.rows()
            )));
        }
        for (name, row) in category_names.iter().zip(embeddings.row_iter()) {
            let norm = l2_norm(row);
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::Data(format!(
                    "embedding for `{name}` has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self {
            category_names,
            embeddings,
            has_background,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.embeddings.rows()
    }

    /// Number of distinct predicted labels, background included.
    pub fn num_labels(&self) -> usize {
        self.num_categories() + usize::from(self.has_background)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let embeddings = c.any_matrix("text.embeddings")?;
        let names = c.strings("text.categories")?;
        let has_background = c.contains("text.has_background") && c.scalar("text.has_background")? != 0.0;
        Self::new(names, embeddings, has_background)
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.insert_matrix("text.embeddings", &self.embeddings)?;
        c.insert_strings("text.categories", &self.category_names)?;
        c.insert_scalar("text.has_background", if self.has_background { 1.0 } else { 0.0 })?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&TensorContainer::read(path)?)
    }

    /// Seeded random unit vectors, for toy models.
    pub fn random(names: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor2D::from_fn(names.len(), dim, |_, _| StandardNormal.sample(&mut rng));
        Self::new(names, raw.l2_normalize_rows(), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub anomaly_resolution: bool,
    pub attention_enhancement: bool,
    pub pre_aggregation: bool,
    pub post_aggregation: bool,
    pub fusion: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl StageToggles {
    pub fn all() -> Self {
        Self {
            anomaly_resolution: true,
            attention_enhancement: true,
            pre_aggregation: true,
            post_aggregation: true,
            fusion: true,
        }
    }

    pub fn none() -> Self {
        Self {
            anomaly_resolution: false,
            attention_enhancement: false,
            pre_aggregation: false,
            post_aggregation: false,
            fusion: false,
        }
    }

    pub fn any(&self) -> bool {
        self.anomaly_resolution
            || self.attention_enhancement
            || self.pre_aggregation
            || self.post_aggregation
            || self.fusion
    }
}

/// Resizing and tiling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideConfig {
    /// Resize so the shorter image side has this length; `None` keeps the input size.
    pub short_side: Option<usize>,
    /// Window edge; `None` means the encoder's native resolution.
    pub window: Option<usize>,
    /// Window stride; `None` means half the window.
    pub stride: Option<usize>,
}

impl Default for SlideConfig {
    fn default() -> Self {
        Self {
            short_side: Some(336),
            window: None,
            stride: None,
        }
    }
}

impl SlideConfig {
    pub fn window_for(&self, weights: &EncoderWeights) -> usize {
        self.window.unwrap_or(weights.config.image_size)
    }

    pub fn stride_for(&self, weights: &EncoderWeights) -> usize {
        self.stride.unwrap_or(self.window_for(weights) / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stages: StageToggles,
    pub lof: LofConfig,
    pub adjust: AdjustConfig,
    pub fusion: FusionConfig,
    pub attention: AttentionMode,
    /// Keep the residual and FFN branches of the last layer.
    pub keep_residual_ffn: bool,
    /// Pixels whose top class probability falls below this are labelled background.
    pub background_threshold: Option<f32>,
    /// Multiplier applied to cosine logits before the background softmax.
    pub logit_scale: f32,
    pub slide: SlideConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: StageToggles::all(),
            lof: LofConfig::default(),
            adjust: AdjustConfig::default(),
            fusion: FusionConfig::default(),
            attention: AttentionMode::default(),
            keep_residual_ffn: false,
            background_threshold: None,
            logit_scale: 100.0,
            slide: SlideConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// The unmodified encoder: standard last layer, no calibration stages.
    pub fn vanilla() -> Self {
        Self {
            stages: StageToggles::none(),
            attention: AttentionMode::new(AttentionKind::QkBaseline),
            keep_residual_ffn: true,
            ..Self::default()
        }
    }

    /// `QQᵀ + KKᵀ` attention with residual and FFN removed, no calibration stages.
    pub fn baseline() -> Self {
        Self {
            stages: StageToggles::none(),
            attention: AttentionMode::new(AttentionKind::QqPlusKk),
            keep_residual_ffn: false,
            ..Self::default()
        }
    }

    pub fn is_vanilla(&self) -> bool {
        !self.stages.any() && self.keep_residual_ffn && self.attention.kind == AttentionKind::QkBaseline
    }

    /// The attention mode actually used: enabling attention enhancement adds
    /// the similarity term to a mode that lacks it.
    pub fn effective_attention(&self) -> AttentionMode {
        let mut mode = self.attention;
        if self.stages.attention_enhancement && !mode.kind.uses_similarity() {
            mode.kind = AttentionKind::KkPlusSimi;
        }
        mode
    }

    fn needs_pre_similarity(&self) -> bool {
        self.stages.pre_aggregation || self.effective_attention().kind.uses_similarity()
    }

    /// Checks that every referenced layer exists in a `depth`-layer encoder.
    pub fn validate(&self, depth: usize) -> Result<()> {
        if depth < 2 {
            return Err(Error::Config(format!("depth {depth} has no penultimate layer")));
        }
        let mut adjust_layers = Vec::new();
        if self.needs_pre_similarity() {
            adjust_layers.push(("adjust.pre_source_layer", self.adjust.pre_source_layer));
        }
        if self.stages.post_aggregation {
            adjust_layers.push(("adjust.post_source_layer", self.adjust.post_source_layer));
        }
        for (name, l) in adjust_layers {
            if l == 0 || l >= depth {
                return Err(Error::Config(format!(
                    "{name} = {l} is not a captured mid layer (1..={})",
                    depth - 1
                )));
            }
        }
        if !(self.adjust.norm_temperature > 0.0) || !(self.adjust.simi_scale > 0.0) {
            return Err(Error::Config("adjust temperature and scale must be positive".into()));
        }
        if !(self.attention.simi_temperature > 0.0) {
            return Err(Error::Config("attention.simi_temperature must be positive".into()));
        }
        if self.stages.fusion {
            self.fusion.validate(depth)?;
        }
        if let Some(t) = self.background_threshold {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Config(format!("background_threshold {t} outside [0, 1)")));
            }
        }
        if self.slide.stride == Some(0) {
            return Err(Error::Config("slide.stride must be positive".into()));
        }
        Ok(())
    }
}

/// Wall-clock seconds spent in each stage of a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings(pub Vec<(String, f64)>);

impl StageTimings {
    fn record(&mut self, stage: &str, start: Instant) {
        self.0.push((stage.to_owned(), start.elapsed().as_secs_f64()));
    }

    pub fn merge(&mut self, other: &StageTimings) {
        for (stage, secs) in &other.0 {
            match self.0.iter_mut().find(|(s, _)| s == stage) {
                Some((_, total)) => *total += secs,
                None => self.0.push((stage.clone(), *secs)),
            }
        }
    }
}

/// Everything one calibrated window pass produces.
#[derive(Debug, Clone)]
pub struct WindowOutput {
    /// Final projected patch features, before L2 normalization.
    pub features: TokenGrid,
    /// `N × C` cosine logits against the text bank.
    pub logits: Tensor2D,
    pub anomalies: Option<AnomalySet>,
    /// The penultimate grid after anomaly resolution.
    pub resolved_penultimate: Option<TokenGrid>,
    /// Anomalies that had no usable neighbour and were left as-is.
    pub unresolved: Vec<(usize, usize)>,
    pub timings: StageTimings,
}

/// Encodes one native-resolution window and runs the calibrated last stage.
pub fn forward_window(
    window: &ImageTensor,
    weights: &EncoderWeights,
    text: &TextBank,
    cfg: &PipelineConfig,
) -> Result<WindowOutput> {
    let native = weights.config.image_size;
    if window.height != native || window.width != native {
        return Err(Error::Shape(format!(
            "window is {}x{}, encoder expects {native}x{native}",
            window.height, window.width
        )));
    }
    cfg.validate(weights.config.depth)?;
    let start = Instant::now();
    let stack = encode_all_layers(window, weights)?;
    let mut out = calibrate_stack(&stack, weights, text, cfg)?;
    out.timings.0.insert(0, ("encode".into(), start.elapsed().as_secs_f64()));
    Ok(out)
}

/// Runs the calibration stages on already captured layer features.
pub fn calibrate_stack(
    stack: &LayerStack,
    weights: &EncoderWeights,
    text: &TextBank,
    cfg: &PipelineConfig,
) -> Result<WindowOutput> {
    cfg.validate(stack.depth())?;
    if text.embeddings.cols() != weights.config.output_dim {
        return Err(Error::Shape(format!(
            "text embeddings are {}-wide, encoder projects to {}",
            text.embeddings.cols(),
            weights.config.output_dim
        )));
    }
    let mut timings = StageTimings::default();
    let mut anomalies = None;
    let mut resolved_penultimate = None;
    let mut unresolved = Vec::new();

    let features = if cfg.is_vanilla() {
        let t = Instant::now();
        let f = weights.output_head(stack.last())?;
        timings.record("last_layer", t);
        f
    } else {
        let mut x = stack.penultimate().clone();
        if cfg.stages.anomaly_resolution {
            let t = Instant::now();
            let (set, resolution) = detect_and_resolve(&x, &cfg.lof)?;
            x = resolution.grid;
            unresolved = resolution.unresolved;
            anomalies = Some(set);
            resolved_penultimate = Some(x.clone());
            timings.record("anomaly_resolution", t);
        }

        let simi_pre: Option<SimilarityMap> = if cfg.needs_pre_similarity() {
            let l = cfg.adjust.pre_source_layer;
            Some(cosine_similarity_map(&stack.layer(l)?.tokens))
        } else {
            None
        };
        if cfg.stages.pre_aggregation {
            let t = Instant::now();
            let simi = simi_pre.as_ref().expect("computed when pre_aggregation is on");
            x = aggregate_features(&x, simi, &cfg.adjust)?;
            timings.record("pre_aggregation", t);
        }

        let t = Instant::now();
        let mode = cfg.effective_attention();
        let proj = weights.head_projections(weights.last_layer(), &x.tokens)?;
        let attn = enhanced_attention(&proj.q, &proj.k, simi_pre.as_ref(), &mode)?;
        timings.record("attention", t);

        let last = |g: &TokenGrid| -> Result<TokenGrid> {
            if cfg.keep_residual_ffn {
                residual_last_layer(g, weights, &attn)
            } else {
                modified_last_layer(g, weights, &attn)
            }
        };
        let t = Instant::now();
        let strategy = if cfg.stages.fusion {
            cfg.fusion.strategy
        } else {
            FusionStrategy::None
        };
        let mut out = if strategy == FusionStrategy::None {
            last(&x)?
        } else {
            let mut ml = multilevel_sum(stack, &cfg.fusion)?;
            if strategy == FusionStrategy::DirectSum {
                ml = weights.output_head(&ml)?;
            }
            fuse(&x, &ml, &last, strategy)?
        };
        timings.record("last_layer", t);

        if cfg.stages.post_aggregation {
            let t = Instant::now();
            let simi = cosine_similarity_map(&stack.layer(cfg.adjust.post_source_layer)?.tokens);
            out = aggregate_features(&out, &simi, &cfg.adjust)?;
            timings.record("post_aggregation", t);
        }
        out
    };

    let t = Instant::now();
    let logits = features.tokens.l2_normalize_rows().matmul_t(&text.embeddings)?;
    timings.record("alignment", t);
    Ok(WindowOutput {
        features,
        logits,
        anomalies,
        resolved_penultimate,
        unresolved,
        timings,
    })
}

/// Converts an 8-bit RGB image into a normalized float tensor whose shorter
/// side is `short_side` (aspect ratio preserved, bilinear resampling).
pub fn preprocess(image: &image::RgbImage, short_side: Option<usize>) -> Result<ImageTensor> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Data(format!("degenerate {w}x{h} image")));
    }
    let (out_h, out_w) = match short_side {
        None => (h, w),
        Some(0) => return Err(Error::Parameter("short side must be positive".into())),
        Some(s) => resized_dims(h, w, s),
    };
    let mut planes = vec![0f32; 3 * h * w];
    for (x, y, px) in image.enumerate_pixels() {
        for c in 0..3 {
            planes[(c * h + y as usize) * w + x as usize] = f32::from(px.0[c]);
        }
    }
    let mut data = resize_bilinear(&planes, 3, h, w, out_h, out_w);
    for (c, plane) in data.chunks_exact_mut(out_h * out_w).enumerate() {
        for v in plane {
            *v = (*v / 255.0 - CLIP_MEAN[c]) / CLIP_STD[c];
        }
    }
    ImageTensor::new(out_h, out_w, data)
}

/// `(h, w)` scaled so that `min(h, w) == short_side`.
pub fn resized_dims(h: usize, w: usize, short_side: usize) -> (usize, usize) {
    let short = h.min(w);
    if short == short_side {
        return (h, w);
    }
    let scale = short_side as f64 / short as f64;
    let scaled = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    if h <= w {
        (short_side, scaled(w))
    } else {
        (scaled(h), short_side)
    }
}

/// Window origins along one axis: multiples of `stride`, with the last
/// window pulled back to end at the image edge.
pub fn window_origins(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::Parameter("stride must be positive".into()));
    }
    if window == 0 {
        return Err(Error::Parameter("window must be positive".into()));
    }
    if len <= window {
        return Ok(vec![0]);
    }
    let count = (len - window).div_ceil(stride) + 1;
    let mut origins: Vec<usize> = (0..count).map(|i| (i * stride).min(len - window)).collect();
    origins.dedup();
    Ok(origins)
}

/// The set of windows covering an image and how often each pixel is visited.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidePlan {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub tops: Vec<usize>,
    pub lefts: Vec<usize>,
}

impl SlidePlan {
    pub fn new(height: usize, width: usize, window: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            height,
            width,
            window,
            tops: window_origins(height, window, stride)?,
            lefts: window_origins(width, window, stride)?,
        })
    }

    /// Window origins in canonical (row-major) order.
    pub fn windows(&self) -> Vec<(usize, usize)> {
        self.tops
            .iter()
            .flat_map(|&t| self.lefts.iter().map(move |&l| (t, l)))
            .collect()
    }

    pub fn hit_counts(&self) -> Vec<u32> {
        let mut hits = vec![0u32; self.height * self.width];
        for (top, left) in self.windows() {
            for y in top..(top + self.window).min(self.height) {
                for x in left..(left + self.window).min(self.width) {
                    hits[y * self.width + x] += 1;
                }
            }
        }
        hits
    }
}

/// A channel-major `C × H × W` logit image.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCanvas {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl LogitCanvas {
    pub fn resized(&self, height: usize, width: usize) -> LogitCanvas {
        LogitCanvas {
            channels: self.channels,
            height,
            width,
            data: resize_bilinear(&self.data, self.channels, self.height, self.width, height, width),
        }
    }

    pub fn scale(&mut self, alpha: f32) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Upsamples `N × C` patch logits on a `gh × gw` grid to `size × size` pixels.
pub fn upsample_patch_logits(logits: &Tensor2D, gh: usize, gw: usize, size: usize) -> LogitCanvas {
    let c = logits.cols();
    let mut planes = vec![0f32; c * gh * gw];
    for (i, row) in logits.row_iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            planes[k * gh * gw + i] = v;
        }
    }
    LogitCanvas {
        channels: c,
        height: size,
        width: size,
        data: resize_bilinear(&planes, c, gh, gw, size, size),
    }
}

/// Averaged per-pixel logits from overlapping windows.
///
/// Windows are evaluated in parallel on the current rayon pool but
/// accumulated in canonical order, so the result does not depend on the
/// thread count.
pub fn slide_logits(
    image: &ImageTensor,
    weights: &EncoderWeights,
    text: &TextBank,
    cfg: &PipelineConfig,
) -> Result<(LogitCanvas, StageTimings)> {
    let window = cfg.slide.window_for(weights);
    if window != weights.config.image_size {
        return Err(Error::Config(format!(
            "slide window {window} differs from the encoder's native {}",
            weights.config.image_size
        )));
    }
    let stride = cfg.slide.stride_for(weights);
    let plan = SlidePlan::new(image.height, image.width, window, stride)?;
    let windows = plan.windows();
    let outputs = windows
        .par_iter()
        .map(|&(top, left)| forward_window(&image.crop(top, left, window, window), weights, text, cfg))
        .collect::<Result<Vec<_>>>()?;

    let c = text.num_categories();
    let (h, w) = (image.height, image.width);
    let mut canvas = vec![0f32; c * h * w];
    let mut timings = StageTimings::default();
    let grid = window / weights.config.patch_size;
    for (&(top, left), out) in windows.iter().zip(&outputs) {
        timings.merge(&out.timings);
        let up = upsample_patch_logits(&out.logits, grid, grid, window);
        for k in 0..c {
            for y in 0..window.min(h - top) {
                let dst = (k * h + top + y) * w + left;
                let src = (k * window + y) * window;
                let span = window.min(w - left);
                for x in 0..span {
                    canvas[dst + x] += up.data[src + x];
                }
            }
        }
    }
    let hits = plan.hit_counts();
    for plane in canvas.chunks_exact_mut(h * w) {
        for (v, &n) in plane.iter_mut().zip(&hits) {
            *v /= n as f32;
        }
    }
    Ok((
        LogitCanvas {
            channels: c,
            height: h,
            width: w,
            data: canvas,
        },
        timings,
    ))
}

/// Per-pixel labels, optionally with the logits they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub num_labels: usize,
    pub logits: Option<LogitCanvas>,
}

/// Argmax over categories (lowest index wins ties), with the background
/// shift and threshold applied when the text bank has a background class.
pub fn labels_from_logits(
    canvas: &LogitCanvas,
    text: &TextBank,
    cfg: &PipelineConfig,
    keep_logits: bool,
) -> SegmentationMap {
    let (h, w, c) = (canvas.height, canvas.width, canvas.channels);
    let shift = u32::from(text.has_background);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = canvas.at(0, y, x);
            for k in 1..c {
                let v = canvas.at(k, y, x);
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            let mut label = best as u32 + shift;
            if let (true, Some(threshold)) = (text.has_background, cfg.background_threshold) {
                let s = f64::from(cfg.logit_scale);
                let z: f64 = (0..c)
                    .map(|k| (s * f64::from(canvas.at(k, y, x) - best_v)).exp())
                    .sum();
                if 1.0 / z < f64::from(threshold) {
                    label = 0;
                }
            }
            labels.push(label);
        }
    }
    SegmentationMap {
        height: h,
        width: w,
        labels,
        num_labels: text.num_labels(),
        logits: keep_logits.then(|| canvas.clone()),
    }
}

/// Sliding-window segmentation of a preprocessed image.
pub fn slide_inference(
    image: &ImageTensor,
    weights: &EncoderWeights,
    text: &TextBank,
    cfg: &PipelineConfig,
    keep_logits: bool,
) -> Result<SegmentationMap> {
    let (canvas, _) = slide_logits(image, weights, text, cfg)?;
    Ok(labels_from_logits(&canvas, text, cfg, keep_logits))
}

/// Segmentation of one native-size window without tiling.
pub fn direct_inference(
    window: &ImageTensor,
    weights: &EncoderWeights,
    text: &TextBank,
    cfg: &PipelineConfig,
    keep_logits: bool,
) -> Result<SegmentationMap> {
    let out = forward_window(window, weights, text, cfg)?;
    let grid = weights.config.grid_side();
    let canvas = upsample_patch_logits(&out.logits, grid, grid, weights.config.image_size);
    Ok(labels_from_logits(&canvas, text, cfg, keep_logits))
}

/// Full image path: resize, tile, then map logits back to the original resolution.
pub fn segment_image(
    image: &image::RgbImage,
    weights: &EncoderWeights,
    text: &TextBank,
    cfg: &PipelineConfig,
    keep_logits: bool,
) -> Result<(SegmentationMap, StageTimings)> {
    let input = preprocess(image, cfg.slide.short_side)?;
    let (canvas, timings) = slide_logits(&input, weights, text, cfg)?;
    let canvas = canvas.resized(image.height() as usize, image.width() as usize);
    Ok((labels_from_logits(&canvas, text, cfg, keep_logits), timings))
}
