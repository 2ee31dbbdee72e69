//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dff_core::align::{align_features, FaceBox, LandmarkState};
use dff_core::artifacts::{
    cascade_from_container, cascade_to_container, model_from_container, model_to_container, push_points,
    push_shape_camera, sample_from_container, sample_to_container, segmentations_from_container,
    segmentations_to_container, weights_from_container, weights_to_container,
};
use dff_core::container::TensorContainer;
use dff_core::descent::{learn_cascade, CascadeSample, RegressionConfig};
use dff_core::eval::{evaluate, EvalSample, NmeMode};
use dff_core::face_model::{generate_synthetic_model, MorphableModel};
use dff_core::matching::{correspondence_image, dense_match, sparse_match, MatchSet};
use dff_core::net::{extract_features, train, Example, FeatureMap, NetInput, NetWeights};
use dff_core::render::{generate_dataset, project_patch_labels, RenderedSample};
use dff_core::segmentation::generate_segmentation_bank;
use image::{Rgb, RgbImage};
use nalgebra::Vector2;

use crate::config::{comment_block, provenance, RunConfig};
use crate::{Cli, Command, MatchArgs, MatchMode, Normalization, UsageError};

const MANIFEST: &str = "manifest.txt";

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(|e| UsageError(format!("{e:#}")))?;
    for kv in &cli.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(UsageError(format!("--set expects KEY=VALUE, got `{kv}`")).into());
        };
        cfg.set(k.trim(), v.trim()).map_err(|e| UsageError(format!("{e:#}")))?;
    }
    cfg.validate().map_err(|e| UsageError(format!("{e:#}")))?;

    match cli.command {
        Command::GenModel { seed, out } => gen_model(&cfg, seed, &out),
        Command::GenData { model, count, seed, out } => gen_data(&cfg, &model, count, seed, &out),
        Command::Segment { model, seed, out } => segment(&cfg, &model, seed, &out),
        Command::TrainDff { model, data, bank, seed, out, log } => {
            train_dff(&cfg, &model, &data, &bank, seed, &out, log.as_deref())
        }
        Command::Extract { weights, image, out } => extract(&cfg, &weights, &image, &out),
        Command::Match(args) => match_cmd(&cfg, &args),
        Command::LearnCascade { model, seed, weights, data, out } => learn(&cfg, &model, seed, &weights, &data, &out),
        Command::Align { model, weights, cascade, image, face_box, out } => {
            let out = out.unwrap_or_else(|| image.with_extension("aligned"));
            align_cmd(&cfg, &model, &weights, &cascade, &image, face_box, &out)
        }
        Command::Eval { model, weights, cascade, data, norm, out } => {
            eval_cmd(&cfg, &model, &weights, &cascade, &data, norm, out.as_deref())
        }
        Command::Selftest => crate::selftest::run(),
    }
}

fn write_container(mut c: TensorContainer, prov: &str, path: &Path) -> Result<()> {
    c.push_text("provenance", prov)?;
    c.write(path).with_context(|| format!("writing {}", path.display()))
}

fn read_container(path: &Path) -> Result<TensorContainer> {
    TensorContainer::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Saves a PNG and a `<name>.provenance.txt` sidecar next to it.
fn write_png(img: &RgbImage, prov: &str, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    let mut side = path.as_os_str().to_owned();
    side.push(".provenance.txt");
    write_text(Path::new(&side), prov)
}

fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).with_context(|| format!("reading image {}", path.display()))?.to_rgb8())
}

fn load_model(path: &Path) -> Result<MorphableModel> {
    Ok(model_from_container(&read_container(path)?)?)
}

fn load_weights(path: &Path) -> Result<NetWeights> {
    Ok(weights_from_container(&read_container(path)?)?.0)
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn gen_model(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let (n, m1, m2) = cfg.model_sizes()?;
    let model = generate_synthetic_model(seed, n, m1, m2)?;
    write_container(model_to_container(&model)?, &provenance("gen-model", Some(seed), &[], cfg), out)?;
    println!("model: {} vertices, {} triangles", model.num_vertices(), model.triangles.len());
    Ok(())
}

fn gen_data(cfg: &RunConfig, model_path: &Path, count: usize, seed: u64, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let samples = generate_dataset(&model, count, seed, &cfg.dataset()?)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let prov = provenance("gen-data", Some(seed), &[model_path], cfg);
    let mut manifest = comment_block(&prov);
    for (i, s) in samples.iter().enumerate() {
        let img = format!("{i:06}.png");
        let rec = format!("{i:06}.dfft");
        s.image.save(out.join(&img)).with_context(|| format!("writing {img}"))?;
        write_container(sample_to_container(s)?, &prov, &out.join(&rec))?;
        writeln!(manifest, "{img} {rec}")?;
    }
    write_text(&out.join(MANIFEST), &manifest)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

/// Reads `manifest.txt` and every image/record pair it lists.
fn load_dataset(dir: &Path) -> Result<Vec<RenderedSample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut parts = line.split_whitespace();
        let (Some(img), Some(rec), None) = (parts.next(), parts.next(), parts.next()) else {
            bail!("{}: malformed line `{line}`", path.display());
        };
        let image = load_image(&dir.join(img))?;
        out.push(sample_from_container(&read_container(&dir.join(rec))?, image)?);
    }
    ensure!(!out.is_empty(), "{} lists no samples", path.display());
    Ok(out)
}

fn segment(cfg: &RunConfig, model_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let (count, k) = cfg.bank()?;
    let bank = generate_segmentation_bank(&model.mean_mesh(), count, k, seed)?;
    write_container(segmentations_to_container(&bank)?, &provenance("segment", Some(seed), &[model_path], cfg), out)?;
    println!("wrote {count} segmentations with {k} patches");
    Ok(())
}

fn train_dff(
    cfg: &RunConfig,
    model_path: &Path,
    data: &Path,
    bank_path: &Path,
    seed: u64,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<()> {
    let model = load_model(model_path)?;
    let samples = load_dataset(data)?;
    let bank = segmentations_from_container(&read_container(bank_path)?)?;
    ensure!(!bank.is_empty(), "segmentation bank is empty");
    let mut net = cfg.net()?;
    net.seed = seed;
    let examples = samples
        .iter()
        .map(|s| {
            ensure!(
                s.image.width() as usize == net.width && s.image.height() as usize == net.height,
                "image is {}x{} but the network expects {}x{}",
                s.image.width(),
                s.image.height(),
                net.width,
                net.height
            );
            let labels = bank
                .iter()
                .map(|seg| project_patch_labels(&model, &s.shape, &s.camera, seg, net.width, net.height))
                .collect::<dff_core::Result<Vec<_>>>()?;
            Ok(Example { input: NetInput::from_image(&s.image), labels })
        })
        .collect::<Result<Vec<_>>>()?;
    let classes: Vec<usize> = bank.iter().map(|s| s.k).collect();
    let (weights, layers, log) = train(&net, &examples, &classes, &cfg.optim(seed)?)?;
    let prov = provenance("train-dff", Some(seed), &[model_path, data, bank_path], cfg);
    let mut c = weights_to_container(&weights, &layers)?;
    c.push_text("training_log", &log.to_text())?;
    write_container(c, &prov, out)?;
    if let Some(p) = log_path {
        write_text(p, &(comment_block(&prov) + &log.to_text()))?;
    }
    println!(
        "final loss {:.6} accuracy {:.4}",
        log.final_eval.mean_loss, log.final_eval.accuracy
    );
    Ok(())
}

fn extract(cfg: &RunConfig, weights_path: &Path, image_path: &Path, out: &Path) -> Result<()> {
    let weights = load_weights(weights_path)?;
    let fmap = extract_features(&weights, &load_image(image_path)?)?;
    let mut c = TensorContainer::new();
    c.push_f64("features", &[fmap.height, fmap.width, fmap.dim], &fmap.data)?;
    write_container(c, &provenance("extract", None, &[weights_path, image_path], cfg), out)?;
    Ok(())
}

/// Non-black pixels; the renderer leaves the background at zero.
fn face_mask(img: &RgbImage) -> Vec<bool> {
    img.pixels().map(|p| p.0 != [0, 0, 0]).collect()
}

fn read_pixel_list(path: &Path, width: usize, height: usize) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pts = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let v: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse().with_context(|| format!("bad pixel coordinate `{t}`")))
            .collect::<Result<_>>()?;
        ensure!(v.len() == 2, "expected `x y`, got `{line}`");
        ensure!(v[0] < width && v[1] < height, "pixel ({}, {}) outside the image", v[0], v[1]);
        pts.push((v[0], v[1]));
    }
    Ok(pts)
}

fn match_cmd(cfg: &RunConfig, a: &MatchArgs) -> Result<()> {
    let weights = load_weights(&a.weights)?;
    let (src_img, tgt_img) = (load_image(&a.source)?, load_image(&a.target)?);
    let (src, tgt) = (extract_features(&weights, &src_img)?, extract_features(&weights, &tgt_img)?);
    let (src_mask, tgt_mask) = (face_mask(&src_img), face_mask(&tgt_img));
    let (sparse_t, dense_t) = cfg.thresholds()?;
    let prov = provenance("match", None, &[&a.weights, &a.source, &a.target], cfg);
    match a.mode {
        MatchMode::Sparse => {
            let points = match &a.points {
                Some(p) => read_pixel_list(p, src.width, src.height)?,
                None => grid_points(&src, &src_mask, 4),
            };
            let set = sparse_match(&src, &points, &tgt, &tgt_mask, a.threshold.unwrap_or(sparse_t))?;
            write_text(&a.out, &(comment_block(&prov) + &set.to_text()))?;
            if let Some(v) = &a.vis {
                write_png(&side_by_side(&src_img, &tgt_img, &set), &prov, v)?;
            }
            println!("{} of {} points matched", set.pairs.len(), points.len());
        }
        MatchMode::Dense => {
            let dense = dense_match(&src, &src_mask, &tgt, &tgt_mask, a.threshold.unwrap_or(dense_t))?;
            write_text(&a.out, &(comment_block(&prov) + &dense.matches.to_text()))?;
            if let Some(v) = &a.vis {
                write_png(&correspondence_image(&dense, tgt.width, tgt.height), &prov, v)?;
            }
            println!("{} pixels matched", dense.matches.pairs.len());
        }
    }
    Ok(())
}

fn grid_points(fmap: &FeatureMap, mask: &[bool], stride: usize) -> Vec<(usize, usize)> {
    let mut pts = Vec::new();
    for y in (stride / 2..fmap.height).step_by(stride) {
        for x in (stride / 2..fmap.width).step_by(stride) {
            if mask[y * fmap.width + x] {
                pts.push((x, y));
            }
        }
    }
    pts
}

/// Source and target next to each other with every match drawn as a line.
fn side_by_side(src: &RgbImage, tgt: &RgbImage, set: &MatchSet) -> RgbImage {
    let w = src.width() + tgt.width();
    let h = src.height().max(tgt.height());
    let mut img = RgbImage::new(w, h);
    image::imageops::replace(&mut img, src, 0, 0);
    image::imageops::replace(&mut img, tgt, src.width() as i64, 0);
    for p in &set.pairs {
        let a = Vector2::new(p.source.0 as f64, p.source.1 as f64);
        let b = Vector2::new((p.target.0 + src.width() as usize) as f64, p.target.1 as f64);
        draw_line(&mut img, a, b, Rgb([255, 255, 0]));
    }
    img
}

fn draw_line(img: &mut RgbImage, a: Vector2<f64>, b: Vector2<f64>, color: Rgb<u8>) {
    let steps = ((b - a).abs().max().ceil() as usize).max(1);
    for i in 0..=steps {
        let q = a + (b - a) * (i as f64 / steps as f64);
        put(img, q.x.round(), q.y.round(), color);
    }
}

fn put(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn learn(cfg: &RunConfig, model_path: &Path, seed: u64, weights_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let weights = load_weights(weights_path)?;
    let samples = load_dataset(data)?;
    let fmaps = samples
        .iter()
        .map(|s| extract_features(&weights, &s.image))
        .collect::<dff_core::Result<Vec<_>>>()?;
    let cascade: Vec<CascadeSample> = samples
        .iter()
        .zip(&fmaps)
        .map(|(s, f)| CascadeSample { features: f, truth_landmarks: &s.landmarks68, truth_camera: s.camera })
        .collect();
    let rcfg = RegressionConfig { seed, ..cfg.regression()? };
    let (stages, log) = learn_cascade(&model, &cascade, &cfg.align()?, &rcfg)?;
    let prov = provenance("learn-cascade", Some(seed), &[model_path, weights_path, data], cfg);
    let mut c = cascade_to_container(&stages, weights.config.feature_dim)?;
    c.push_f64("train_nme", &[log.train_nme.len()], &log.train_nme)?;
    write_container(c, &prov, out)?;
    let trace: Vec<String> = log.train_nme.iter().map(|v| format!("{v:.6}")).collect();
    println!("training NME per stage: {}", trace.join(" "));
    Ok(())
}

fn load_cascade(path: &Path, weights: &NetWeights) -> Result<Vec<dff_core::align::DescentStage>> {
    let (stages, d) = cascade_from_container(&read_container(path)?)?;
    ensure!(
        d == weights.config.feature_dim,
        "cascade expects {d}-dimensional descriptors, network produces {}",
        weights.config.feature_dim
    );
    Ok(stages)
}

fn align_cmd(
    cfg: &RunConfig,
    model_path: &Path,
    weights_path: &Path,
    cascade_path: &Path,
    image_path: &Path,
    b: [f64; 4],
    out: &Path,
) -> Result<()> {
    let model = load_model(model_path)?;
    let weights = load_weights(weights_path)?;
    let stages = load_cascade(cascade_path, &weights)?;
    let image = load_image(image_path)?;
    let fmap = extract_features(&weights, &image)?;
    let face_box = FaceBox { x: b[0], y: b[1], width: b[2], height: b[3] };
    let (state, _) = align_features(&model, &fmap, &face_box, &stages, &cfg.align()?)?;
    let prov = provenance("align", None, &[model_path, weights_path, cascade_path, image_path], cfg);

    let visible68 = landmark_visibility(&model, &state);
    let mut text = comment_block(&prov) + "# x y visible\n";
    for (q, v) in state.x.iter().zip(&visible68) {
        writeln!(text, "{:.6} {:.6} {}", q.x, q.y, *v as u8)?;
    }
    write_text(&with_suffix(out, ".txt"), &text)?;
    let mut c = TensorContainer::new();
    push_shape_camera(&mut c, &state.p, &state.w)?;
    push_points(&mut c, "landmarks68", &state.x)?;
    write_container(c, &prov, &with_suffix(out, ".dfft"))?;
    write_png(&overlay(&image, &state.x, &visible68), &prov, &with_suffix(out, ".png"))?;
    println!("wrote {}.{{txt,dfft,png}}", out.display());
    Ok(())
}

/// Visibility of the 68 landmarks, read off the dense set they belong to.
fn landmark_visibility(model: &MorphableModel, state: &LandmarkState) -> Vec<bool> {
    model
        .landmarks68
        .iter()
        .map(|v| {
            model
                .landmarks160
                .iter()
                .position(|d| d == v)
                .map_or(true, |i| state.visible[i])
        })
        .collect()
}

/// Green crosses for visible landmarks, red for hidden ones.
fn overlay(image: &RgbImage, pts: &[Vector2<f64>], visible: &[bool]) -> RgbImage {
    let mut img = image.clone();
    for (q, &v) in pts.iter().zip(visible) {
        let color = if v { Rgb([0, 255, 0]) } else { Rgb([255, 0, 0]) };
        let (x, y) = (q.x.round(), q.y.round());
        for d in -1..=1 {
            put(&mut img, x + d as f64, y, color);
            put(&mut img, x, y + d as f64, color);
        }
    }
    img
}

fn eval_cmd(
    cfg: &RunConfig,
    model_path: &Path,
    weights_path: &Path,
    cascade_path: &Path,
    data: &Path,
    norm: Normalization,
    out: Option<&Path>,
) -> Result<()> {
    let model = load_model(model_path)?;
    let weights = load_weights(weights_path)?;
    let stages = load_cascade(cascade_path, &weights)?;
    let acfg = cfg.align()?;
    let margin = cfg.regression()?.box_margin;
    let samples = load_dataset(data)?;
    let mut evals = Vec::with_capacity(samples.len());
    for s in &samples {
        let fmap = extract_features(&weights, &s.image)?;
        let face_box = FaceBox::around(&s.landmarks68, margin)?;
        let (state, _) = align_features(&model, &fmap, &face_box, &stages, &acfg)?;
        evals.push(EvalSample {
            predicted: state.x,
            truth: s.landmarks68.clone(),
            visible: None,
            yaw_deg: s.camera.beta.to_degrees(),
        });
    }
    let mode = match norm {
        Normalization::Bbox => NmeMode::BoundingBox,
        Normalization::Interpupil => NmeMode::InterPupil,
    };
    let report = evaluate(&evals, mode)?;
    print!("{}", report.to_table());
    if let Some(p) = out {
        let prov = provenance("eval", None, &[model_path, weights_path, cascade_path, data], cfg);
        write_text(p, &(comment_block(&prov) + &report.to_key_values()))?;
    }
    Ok(())
}
