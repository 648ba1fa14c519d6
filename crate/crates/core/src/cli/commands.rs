use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::adjust::aggregate_features;
use crate::anomaly::{detect_and_resolve, lof_scores};
use crate::cli::config::{expand_ladder, RunConfig};
use crate::container::{write_atomic, TensorContainer};
use crate::error::{Error, Result};
use crate::eval::{coherence_pairs, patch_majority_labels, CoherenceSample, ConfusionAccumulator, MiouReport};
use crate::io::{load_labels, load_rgb, save_labels, save_rgb};
use crate::numerics::{cosine_similarity_map, l2_norm, pca, resize_bilinear};
use crate::pipeline::{preprocess, segment_image, PipelineConfig, StageTimings, TextBank};
use crate::vit::{encode_all_layers, EncoderConfig, EncoderWeights, ImageTensor};

/// An input image and, when available, its label file.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: PathBuf,
    pub labels: Option<PathBuf>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

/// Lists the configured inputs in file-name order.
pub fn collect_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    if let Some(p) = &cfg.input {
        return Ok(vec![Sample {
            name: stem(p),
            image: p.clone(),
            labels: None,
        }]);
    }
    let ds = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no input image or dataset configured".into()))?;
    let entries = std::fs::read_dir(&ds.images).map_err(|e| Error::io(&ds.images, e))?;
    let mut images = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&ds.images, e))?.path();
        if path.is_file() && is_image(&path) {
            images.push(path);
        }
    }
    images.sort();
    if images.is_empty() {
        return Err(Error::Data(format!("{} contains no PNG/PPM images", ds.images.display())));
    }
    Ok(images
        .into_iter()
        .map(|image| {
            let name = stem(&image);
            let labels = ds.labels.as_ref().map(|dir| dir.join(format!("{name}.png")));
            Sample { name, image, labels }
        })
        .collect())
}

fn require_labels(samples: &[Sample]) -> Result<()> {
    for s in samples {
        match &s.labels {
            None => return Err(Error::Config("this command needs dataset.labels".into())),
            Some(p) if !p.exists() => {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "label map missing"),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Files written by a command, relative to the output directory.
#[derive(Debug, Default)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    volatile: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            volatile: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_owned());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        write_atomic(&self.path(name), text.as_bytes())
    }

    /// Like [`Outputs::json`] for content that differs between runs; the
    /// manifest lists it without a size.
    fn volatile_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.volatile.push(name.to_owned());
        self.json(name, value)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        write_atomic(&self.path(name), text.as_bytes())
    }

    /// Writes `manifest.json` listing every output with its size.
    fn finish(mut self, command: &str) -> Result<Vec<PathBuf>> {
        self.files.sort();
        let mut files = Vec::new();
        for name in &self.files {
            if self.volatile.contains(name) {
                files.push(json!({ "path": name, "volatile": true }));
                continue;
            }
            let p = self.dir.join(name);
            let bytes = std::fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
            files.push(json!({ "path": name, "bytes": bytes }));
        }
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "files": files,
        });
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.dir.join("manifest.json");
        write_atomic(&path, text.as_bytes())?;
        let mut all: Vec<PathBuf> = self.files.iter().map(|f| self.dir.join(f)).collect();
        all.push(path);
        Ok(all)
    }
}

struct Model {
    weights: EncoderWeights,
    text: TextBank,
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    cfg.check_inputs()?;
    let weights = EncoderWeights::load(&cfg.weights)?;
    let text = TextBank::load(&cfg.text_bank)?;
    Ok(Model { weights, text })
}

fn timing_json(t: &StageTimings) -> Value {
    Value::Object(t.0.iter().map(|(k, v)| (k.clone(), json!(v))).collect())
}

fn stage_names(pipeline: &PipelineConfig) -> Vec<&'static str> {
    if pipeline.is_vanilla() {
        return vec!["encode", "last_layer", "alignment"];
    }
    let s = &pipeline.stages;
    let mut names = vec!["encode"];
    if s.anomaly_resolution {
        names.push("anomaly_resolution");
    }
    if s.pre_aggregation {
        names.push("pre_aggregation");
    }
    names.push("attention");
    names.push("last_layer");
    if s.post_aggregation {
        names.push("post_aggregation");
    }
    names.push("alignment");
    names
}

/// Segments every input and writes one label PNG per image.
pub fn segment(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg)?;
    cfg.pipeline.validate(model.weights.config.depth)?;
    let samples = collect_samples(cfg)?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    let results = samples
        .par_iter()
        .map(|s| {
            let rgb = load_rgb(&s.image)?;
            segment_image(&rgb, &model.weights, &model.text, &cfg.pipeline, cfg.save_logits)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut images = Vec::new();
    let mut timings = serde_json::Map::new();
    for (s, (map, t)) in samples.iter().zip(&results) {
        let file = format!("{}.png", s.name);
        save_labels(out.path(&file), map.height, map.width, &map.labels)?;
        if let Some(canvas) = &map.logits {
            let mut c = TensorContainer::new();
            c.insert_f32(
                "logits",
                &[canvas.channels, canvas.height, canvas.width],
                canvas.data.clone(),
            )?;
            c.write(out.path(&format!("{}.logits.sct", s.name)))?;
        }
        let mut histogram = vec![0u64; map.num_labels];
        for &l in &map.labels {
            histogram[l as usize] += 1;
        }
        images.push(json!({
            "name": s.name,
            "labels": file,
            "height": map.height,
            "width": map.width,
            "label_histogram": histogram,
        }));
        timings.insert(s.name.clone(), timing_json(t));
    }
    let summary = json!({
        "command": "segment",
        "vanilla": cfg.pipeline.is_vanilla(),
        "seed": cfg.seed,
        "stages": stage_names(&cfg.pipeline),
        "categories": model.text.category_names,
        "has_background": model.text.has_background,
        "images": images,
        "pipeline": cfg.pipeline,
    });
    out.json("summary.json", &summary)?;
    out.volatile_json("timings.json", &Value::Object(timings))?;
    out.finish("segment")
}

fn evaluate_pipeline(
    model: &Model,
    samples: &[Sample],
    pipeline: &PipelineConfig,
    ignore_index: u32,
) -> Result<MiouReport> {
    let accs = samples
        .par_iter()
        .map(|s| {
            let rgb = load_rgb(&s.image)?;
            let gt_path = s.labels.as_ref().expect("labels checked");
            let gt = load_labels(gt_path)?;
            if (gt.height, gt.width) != (rgb.height() as usize, rgb.width() as usize) {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, its image is {}x{}",
                    gt_path.display(),
                    gt.height,
                    gt.width,
                    rgb.height(),
                    rgb.width()
                )));
            }
            let (map, _) = segment_image(&rgb, &model.weights, &model.text, pipeline, false)?;
            let mut acc = ConfusionAccumulator::new(model.text.num_labels(), ignore_index);
            acc.accumulate(&map.labels, &gt.labels).map_err(|e| match e {
                Error::Data(m) => Error::Data(format!("{}: {m}", gt_path.display())),
                other => other,
            })?;
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfusionAccumulator::new(model.text.num_labels(), ignore_index);
    for acc in &accs {
        total.merge(acc)?;
    }
    Ok(total.report(&label_names(&model.text)))
}

fn label_names(text: &TextBank) -> Vec<String> {
    let mut names = Vec::new();
    if text.has_background {
        names.push("background".to_string());
    }
    names.extend(text.category_names.iter().cloned());
    names
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "nan".into())
}

fn per_class_csv(report: &MiouReport) -> String {
    let mut s = String::from("index,name,iou\n");
    for c in &report.per_class {
        let _ = writeln!(s, "{},{},{}", c.index, c.name, fmt_opt(c.iou));
    }
    s
}

fn dataset_ignore(cfg: &RunConfig) -> u32 {
    cfg.dataset.as_ref().map(|d| d.ignore_index).unwrap_or(crate::eval::DEFAULT_IGNORE_INDEX)
}

/// mIoU of the configured pipeline over the labelled dataset.
pub fn evaluate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg)?;
    cfg.pipeline.validate(model.weights.config.depth)?;
    let samples = collect_samples(cfg)?;
    require_labels(&samples)?;
    let report = evaluate_pipeline(&model, &samples, &cfg.pipeline, dataset_ignore(cfg))?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    out.json(
        "metrics.json",
        &json!({
            "command": "evaluate",
            "vanilla": cfg.pipeline.is_vanilla(),
            "images": samples.len(),
            "miou": report.miou,
            "pixel_accuracy": report.pixel_accuracy,
            "per_class": report.per_class,
        }),
    )?;
    if cfg.emit_csv {
        out.text("per_class.csv", &per_class_csv(&report))?;
    }
    out.finish("evaluate")
}

/// Evaluates each rung of the cumulative stage ladder.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let rungs = expand_ladder(&cfg.ladder)?;
    let model = load_model(cfg)?;
    let samples = collect_samples(cfg)?;
    require_labels(&samples)?;
    let mut records = Vec::new();
    let mut csv = String::from("rung,name,miou,pixel_accuracy\n");
    for (i, rung) in rungs.iter().enumerate() {
        let pipeline = PipelineConfig {
            stages: rung.stages,
            ..cfg.pipeline.clone()
        };
        pipeline.validate(model.weights.config.depth)?;
        let report = evaluate_pipeline(&model, &samples, &pipeline, dataset_ignore(cfg))?;
        let _ = writeln!(
            csv,
            "{i},{},{},{}",
            rung.name,
            fmt_opt(report.miou),
            fmt_opt(report.pixel_accuracy)
        );
        records.push(json!({
            "rung": i,
            "name": rung.name,
            "stages": rung.stages,
            "vanilla": pipeline.is_vanilla(),
            "miou": report.miou,
            "pixel_accuracy": report.pixel_accuracy,
            "per_class": report.per_class,
        }));
    }
    let mut out = Outputs::new(&cfg.output_dir)?;
    out.json(
        "ablation.json",
        &json!({ "command": "ablate", "images": samples.len(), "rungs": records }),
    )?;
    if cfg.emit_csv {
        out.text("ablation.csv", &csv)?;
    }
    out.finish("ablate")
}

/// Loads an image at the encoder's native square resolution.
fn native_window(path: &Path, config: &EncoderConfig) -> Result<(image::RgbImage, ImageTensor)> {
    let rgb = load_rgb(path)?;
    let t = preprocess(&rgb, None)?;
    let s = config.image_size;
    let data = resize_bilinear(&t.data, 3, t.height, t.width, s, s);
    Ok((rgb, ImageTensor::new(s, s, data)?))
}

#[derive(Debug, Clone, Serialize)]
struct LayerAuc {
    layer: String,
    auc: Option<f64>,
    pairs: usize,
    positives: usize,
}

fn layer_auc(layer: String, sample: &CoherenceSample) -> LayerAuc {
    LayerAuc {
        layer,
        auc: sample.auc(),
        pairs: sample.scores.len(),
        positives: sample.same_category.iter().filter(|&&s| s).count(),
    }
}

/// Semantic-coherence AUC of each requested layer's similarity map, plus
/// the last layer after feature aggregation.
pub fn coherence(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let layers = &cfg.coherence.layers;
    if layers.is_empty() {
        return Err(Error::Config("coherence.layers is empty".into()));
    }
    let model = load_model(cfg)?;
    let depth = model.weights.config.depth;
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > depth) {
        return Err(Error::Config(format!("coherence layer {bad} outside 1..={depth}")));
    }
    let post_source = cfg.pipeline.adjust.post_source_layer;
    if post_source == 0 || post_source >= depth {
        return Err(Error::Config(format!(
            "adjust.post_source_layer = {post_source} outside 1..={}",
            depth - 1
        )));
    }
    let samples = collect_samples(cfg)?;
    require_labels(&samples)?;
    let ignore = dataset_ignore(cfg);
    let grid = model.weights.config.grid_side();

    let per_image = samples
        .par_iter()
        .enumerate()
        .map(|(idx, s)| {
            let (_, window) = native_window(&s.image, &model.weights.config)?;
            let gt = load_labels(s.labels.as_ref().expect("labels checked"))?;
            let labels = patch_majority_labels(&gt, (grid, grid), ignore);
            let stack = encode_all_layers(&window, &model.weights)?;
            let mut sampling = cfg.coherence.sampling;
            sampling.seed = cfg.seed.wrapping_add(sampling.seed).wrapping_add(idx as u64);
            let mut results = Vec::with_capacity(layers.len() + 1);
            for &l in layers {
                let simi = cosine_similarity_map(&stack.layer(l)?.tokens);
                results.push(coherence_pairs(&simi, &labels, &sampling)?);
            }
            let mid = cosine_similarity_map(&stack.layer(post_source)?.tokens);
            let aggregated = aggregate_features(stack.last(), &mid, &cfg.pipeline.adjust)?;
            let simi = cosine_similarity_map(&aggregated.tokens);
            results.push(coherence_pairs(&simi, &labels, &sampling)?);
            Ok(results)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut merged = vec![CoherenceSample::default(); layers.len() + 1];
    for image in &per_image {
        for (m, s) in merged.iter_mut().zip(image) {
            m.extend(s);
        }
    }
    let mut rows: Vec<LayerAuc> = layers
        .iter()
        .zip(&merged)
        .map(|(l, s)| layer_auc(l.to_string(), s))
        .collect();
    rows.push(layer_auc("post_aggregation".into(), merged.last().expect("nonempty")));

    let mut out = Outputs::new(&cfg.output_dir)?;
    out.json(
        "coherence.json",
        &json!({
            "command": "coherence",
            "images": samples.len(),
            "post_aggregation_source": post_source,
            "layers": rows,
        }),
    )?;
    if cfg.emit_csv {
        let mut csv = String::from("layer,auc,pairs,positives\n");
        for r in &rows {
            let _ = writeln!(csv, "{},{},{},{}", r.layer, fmt_opt(r.auc), r.pairs, r.positives);
        }
        out.text("coherence.csv", &csv)?;
    }
    out.finish("coherence")
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Anomaly detection on the penultimate layer of each input, with PCA views
/// of the tokens before and after resolution.
pub fn inspect_anomalies(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg)?;
    let samples = collect_samples(cfg)?;
    let records = samples
        .par_iter()
        .map(|s| {
            let (_, window) = native_window(&s.image, &model.weights.config)?;
            let stack = encode_all_layers(&window, &model.weights)?;
            let before = stack.penultimate();
            let scores = lof_scores(&before.tokens, &cfg.pipeline.lof)?;
            let (set, resolution) = detect_and_resolve(before, &cfg.pipeline.lof)?;
            let after = &resolution.grid;
            let anomalies: Vec<Value> = set
                .coords
                .iter()
                .zip(&set.scores)
                .map(|(&(r, c), &score)| {
                    json!({
                        "row": r,
                        "col": c,
                        "lof": score,
                        "norm_before": l2_norm(before.token(r, c)),
                        "norm_after": l2_norm(after.token(r, c)),
                    })
                })
                .collect();
            let k = 3.min(before.n()).min(before.dim());
            let view = |tokens: &crate::numerics::Tensor2D| -> Result<Value> {
                let p = pca(tokens, k)?;
                let rows: Vec<Vec<f64>> = p
                    .projection
                    .row_iter()
                    .map(|r| r.iter().map(|&v| round6(f64::from(v))).collect())
                    .collect();
                Ok(json!({
                    "explained_variance": p.explained_variance,
                    "total_variance": p.total_variance,
                    "projection": rows,
                }))
            };
            Ok(json!({
                "name": s.name,
                "grid": [before.h, before.w],
                "anomalies": anomalies,
                "unresolved": resolution.unresolved,
                "lof_scores": scores,
                "pca_before": view(&before.tokens)?,
                "pca_after": view(&after.tokens)?,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    out.json(
        "anomalies.json",
        &json!({
            "command": "inspect-anomalies",
            "layer": model.weights.config.depth - 1,
            "lof": cfg.pipeline.lof,
            "images": records,
        }),
    )?;
    out.finish("inspect-anomalies")
}

/// Text embeddings for the toy model: each category's row is the mean
/// projected feature of a flat image in that category's colour.
fn colour_prototypes(weights: &EncoderWeights, names: &[String], palette: &[[u8; 3]]) -> Result<TextBank> {
    let s = weights.config.image_size as u32;
    let mut rows = Vec::with_capacity(palette.len());
    for &colour in palette {
        let img = image::RgbImage::from_pixel(s, s, image::Rgb(colour));
        let stack = encode_all_layers(&preprocess(&img, None)?, weights)?;
        let feats = weights.output_head(stack.last())?;
        let mut mean = vec![0f32; feats.dim()];
        for row in feats.tokens.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / feats.n() as f32;
            }
        }
        rows.push(mean);
    }
    let m = crate::numerics::Tensor2D::from_rows(&rows)?.l2_normalize_rows();
    TextBank::new(names.to_vec(), m, false)
}

/// Parameters of the synthetic toy setup.
#[derive(Debug, Clone)]
pub struct ToySpec {
    pub depth: usize,
    pub categories: Vec<String>,
    pub images: usize,
    pub seed: u64,
}

/// Writes seeded toy weights, a text bank, a small labelled dataset of
/// block-coloured images, and a config pointing at them.
pub fn make_toy(dir: &Path, spec: &ToySpec) -> Result<Vec<PathBuf>> {
    if spec.categories.is_empty() {
        return Err(Error::Parameter("toy setup needs at least one category".into()));
    }
    if spec.depth < 3 {
        return Err(Error::Parameter(format!("toy depth {} leaves no fusion levels", spec.depth)));
    }
    let config = EncoderConfig::toy(spec.depth);
    config.validate()?;
    let mut out = Outputs::new(dir)?;
    let weights = EncoderWeights::random(config.clone(), spec.seed)?;
    weights.to_container()?.write(out.path("weights.sct"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let palette: Vec<[u8; 3]> = (0..spec.categories.len())
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let text = colour_prototypes(&weights, &spec.categories, &palette)?;
    text.to_container()?.write(out.path("text_bank.sct"))?;

    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let side = config.image_size as u32 * 3 / 2;
    let block = config.patch_size as u32 * 2;
    for i in 0..spec.images {
        let cells = side.div_ceil(block) as usize;
        let cell_labels: Vec<u8> = (0..cells * cells)
            .map(|_| rng.random_range(0..spec.categories.len()) as u8)
            .collect();
        let label_at = |x: u32, y: u32| cell_labels[(y / block) as usize * cells + (x / block) as usize];
        let img = image::RgbImage::from_fn(side, side, |x, y| image::Rgb(palette[label_at(x, y) as usize]));
        let labels: Vec<u32> = (0..side)
            .flat_map(|y| (0..side).map(move |x| (y, x)))
            .map(|(y, x)| u32::from(label_at(x, y)))
            .collect();
        let name = format!("toy_{i:03}");
        save_rgb(out.path(&format!("images/{name}.png")), &img)?;
        save_labels(out.path(&format!("labels/{name}.png")), side as usize, side as usize, &labels)?;
    }

    let mut pipeline = PipelineConfig::default();
    pipeline.slide.short_side = Some(config.image_size);
    if spec.depth < 12 {
        pipeline.adjust.pre_source_layer = (spec.depth - 1) / 2 + 1;
        pipeline.adjust.post_source_layer = (spec.depth - 1) / 2;
        pipeline.fusion.level_set = (1..spec.depth - 1).collect();
        pipeline.lof.anomaly_count = 3;
    }
    let abs = |name: &str| std::path::absolute(dir.join(name)).unwrap_or_else(|_| dir.join(name));
    let run = RunConfig {
        weights: abs("weights.sct"),
        text_bank: abs("text_bank.sct"),
        input: None,
        dataset: Some(crate::cli::config::DatasetConfig {
            images: abs("images"),
            labels: Some(abs("labels")),
            ignore_index: crate::eval::DEFAULT_IGNORE_INDEX,
        }),
        output_dir: abs("out"),
        seed: spec.seed,
        pipeline,
        ladder: crate::cli::config::default_ladder(),
        coherence: crate::cli::config::CoherenceConfig {
            layers: (1..=spec.depth).collect(),
            ..Default::default()
        },
        emit_csv: false,
        save_logits: false,
    };
    out.text("config.json", &(run.to_json() + "\n"))?;
    out.finish("make-toy")
}
