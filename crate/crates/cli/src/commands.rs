use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use efrlfn::bench::{measure_fps, BenchOptions, BenchResult, Report};
use efrlfn::dataset::{self, synth::procedural_image, Bicubic, LrSource, Pair, Split, Verdict};
use efrlfn::io::{self, Archive};
use efrlfn::losses::{loss_ablation_suite, ConvStack, FeatureExtractor, LossVariant};
use efrlfn::metrics::{psnr, ssim, SsimParams, Summary};
use efrlfn::model::ModelConfig;
use efrlfn::train::{self, default_extractor, evaluate, Checkpoint, TrainConfig, Trainer};
use efrlfn::{ranking, Model32, Shape, Tensor32, Upscaler};

use crate::{
    AblateArgs, BenchArgs, CategorizeArgs, Command, DatasetCommand, DegradeArgs, DumpArgs, FilterArgs, Grid,
    InferArgs, MetricsArgs, ModelArgs, RankArgs, SplitArgs, TrainArgs,
};

pub fn run(command: Command, seed: u64) -> Result<()> {
    match command {
        Command::Train(a) => train_cmd(a, seed),
        Command::Infer(a) => infer(a),
        Command::Bench(a) => bench(a, seed),
        Command::Metrics(a) => metrics(a),
        Command::Rank(a) => rank(a, seed),
        Command::Dataset(DatasetCommand::Filter(a)) => filter(a),
        Command::Dataset(DatasetCommand::Categorize(a)) => categorize(a, seed),
        Command::Dataset(DatasetCommand::Split(a)) => split(a),
        Command::Dataset(DatasetCommand::Degrade(a)) => degrade(a),
        Command::DumpFeatures(a) => dump_features(a),
        Command::Ablate(a) => ablate(a, seed),
    }
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm" | "pnm"))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Image files in `dir`, sorted by name.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))? {
        let p = entry?.path();
        if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    ensure!(!out.is_empty(), "no .ppm images in {}", dir.display());
    Ok(out)
}

fn read_dir_images(dir: &Path) -> Result<Vec<(String, Tensor32)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| Ok((stem(&p), io::read_image(&p)?)))
        .collect()
}

fn load_model(path: &Path) -> Result<Model32> {
    let file = if path.is_dir() { path.join("weights.efrw") } else { path.to_path_buf() };
    io::load_weights(&file).with_context(|| format!("loading weights {}", file.display()))
}

fn model_config(m: &ModelArgs, scale: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        channels: m.channels,
        blocks: m.blocks,
        scale,
        activation: m.activation,
        attention: m.attention,
        in_channels: 3,
        seed,
    }
}

fn procedural_set(count: usize, size: usize, seed: u64) -> Vec<(String, Tensor32)> {
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            (format!("synthetic-{i:03}"), procedural_image(s, size, size))
        })
        .collect()
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: u64) -> Result<()> {
    let hr = match &a.data {
        Some(dir) => read_dir_images(dir)?,
        None => {
            ensure!(a.synthetic > 0, "--synthetic must be at least 1 without --data");
            procedural_set(a.synthetic, a.size, seed)
        }
    };
    let source = match &a.lr_dir {
        Some(dir) => LrSource::Real(read_dir_images(dir)?),
        None => LrSource::Synthetic,
    };
    let pairs = dataset::make_pairs(hr, a.scale, source)?;
    let config = TrainConfig {
        scale: a.scale,
        patch_size: a.patch,
        batch_size: a.batch,
        steps: a.steps,
        learning_rate: a.lr,
        seed,
        objective: loss_ablation_suite(&a.loss)?,
        checkpoint_every: a.checkpoint_every,
        log_every: a.log_every,
        eval_every: a.eval_every,
        cosine_decay: a.cosine_decay,
        ..TrainConfig::default()
    };
    let extractor: Box<dyn FeatureExtractor<f32>> = match &a.vgg_weights {
        Some(p) => {
            let archive = Archive::<f32>::load(p).with_context(|| format!("loading {}", p.display()))?;
            Box::new(ConvStack::vgg19(|name| archive.get(name).cloned())?)
        }
        None => Box::new(default_extractor(seed)),
    };
    let mut trainer = match &a.resume {
        Some(dir) => {
            let ckpt = Checkpoint::<f32>::load(dir).with_context(|| format!("resuming from {}", dir.display()))?;
            Trainer::resume(ckpt, config, extractor)?
        }
        None => Trainer::new(Model32::build(model_config(&a.model, a.scale, seed))?, config, extractor)?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    trainer.log_to(a.out.join("train.jsonl"))?;
    trainer.checkpoint_to(&a.out);
    trainer.run(&pairs)?;
    trainer.checkpoint().save(a.out.join("final"))?;

    let model_eval = evaluate(trainer.model(), &pairs)?;
    let bicubic_eval = evaluate(&Bicubic { scale: a.scale }, &pairs)?;
    println!(
        "trained {} steps on {} pairs: train PSNR {:.3} dB (bicubic {:.3} dB), SSIM {:.4}",
        trainer.step(),
        pairs.len(),
        model_eval.psnr.mean,
        bicubic_eval.psnr.mean,
        model_eval.ssim.mean
    );
    println!("checkpoint: {}", a.out.join("final").display());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.weights)?;
    if let Some(r) = a.scale {
        ensure!(
            r == model.config().scale,
            "weights upscale by {} but --scale {r} was requested",
            model.config().scale
        );
    }
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        list_images(&a.input)?
            .into_iter()
            .map(|p| {
                let out = a.out.join(p.file_name().expect("listed file"));
                (p, out)
            })
            .collect()
    } else {
        ensure!(a.input.is_file(), "input {} does not exist", a.input.display());
        create_parent(&a.out)?;
        vec![(a.input.clone(), a.out.clone())]
    };
    for (src, dst) in jobs {
        let lr: Tensor32 = io::read_image(&src)?;
        let sr = model.upscale(&lr).with_context(|| format!("upscaling {}", src.display()))?;
        io::write_image(&sr, &dst)?;
        log::info!("{} -> {} ({} -> {})", src.display(), dst.display(), lr.shape(), sr.shape());
    }
    Ok(())
}

fn bench(a: BenchArgs, seed: u64) -> Result<()> {
    let (model, id) = match &a.weights {
        Some(p) => (load_model(p)?, a.model_id.clone().unwrap_or_else(|| stem(p))),
        None => {
            let cfg = model_config(&a.model, a.scale, seed);
            let id = a.model_id.clone().unwrap_or_else(|| {
                format!("efrlfn-c{}-b{}-{}-{}", cfg.channels, cfg.blocks, cfg.activation.name(), cfg.attention.name())
            });
            (Model32::build(cfg)?, id)
        }
    };
    let opts = BenchOptions {
        frames: a.frames,
        runs: a.runs,
        warmup: a.warmup,
        seed,
        input: Shape::new(1, 3, a.height, a.width),
        scale: model.config().scale,
    };
    let mut results: Vec<BenchResult> = Vec::new();
    results.push(measure_fps(&id, |x| model.upscale(x).map(drop), &opts)?);
    if a.bicubic {
        let b = Bicubic { scale: opts.scale };
        results.push(measure_fps(&format!("bicubic-x{}", opts.scale), |x: &Tensor32| b.upscale(x).map(drop), &opts)?);
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report = Report::build(&results, &[])?;
    fs::write(a.out.join("bench.csv"), report.to_csv()?)?;
    fs::write(a.out.join("bench.json"), serde_json::to_string_pretty(&results)?)?;
    for r in &results {
        println!("{}: {:.2} ± {:.2} FPS ({} frames x {} runs)", r.model_id, r.fps_mean, r.fps_std, r.frames, r.runs);
    }
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let params = SsimParams::default();
    let mut rows = Vec::new();
    for hr_path in list_images(&a.hr)? {
        let name = hr_path.file_name().expect("listed file");
        let sr_path = a.sr.join(name);
        ensure!(sr_path.is_file(), "no SR image for {} in {}", stem(&hr_path), a.sr.display());
        let hr: Tensor32 = io::read_image(&hr_path)?;
        let sr: Tensor32 = io::read_image(&sr_path)?;
        let p = psnr(&sr, &hr, 1.0).with_context(|| format!("PSNR of {}", stem(&hr_path)))?;
        let s = ssim(&sr, &hr, &params).with_context(|| format!("SSIM of {}", stem(&hr_path)))?;
        rows.push((stem(&hr_path), p, s));
    }
    let ps = Summary::of(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let ss = Summary::of(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
    let mut text = String::from("id,psnr,ssim\n");
    for (id, p, s) in &rows {
        text.push_str(&format!("{id},{p},{s}\n"));
    }
    text.push_str(&format!("mean,{},{}\n", ps.mean, ss.mean));
    text.push_str(&format!("ci95,{},{}\n", ps.ci95, ss.ci95));
    match &a.out {
        Some(p) => {
            create_parent(p)?;
            fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
        }
        None => print!("{text}"),
    }
    println!(
        "{} images: PSNR {:.3} ± {:.3} dB, SSIM {:.4} ± {:.4}",
        rows.len(),
        ps.mean,
        ps.ci95,
        ss.mean,
        ss.ci95
    );
    Ok(())
}

fn rank(a: RankArgs, seed: u64) -> Result<()> {
    let responses = ranking::read_responses(&a.responses)?;
    let study = ranking::filter_responses(&responses);
    ensure!(study.len() >= 2, "need at least two items after filtering, found {}", study.len());
    let result = ranking::rank(&study, a.bootstrap, seed)?;
    if let Some(p) = &a.out {
        create_parent(p)?;
        ranking::write_results(p, &result)?;
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "item,score,ci_low,ci_high")?;
    for r in &result.items {
        writeln!(out, "{},{},{},{}", r.item, r.score, r.ci_low, r.ci_high)?;
    }
    writeln!(out, "# comparisons: {}", result.n_effective)?;
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let f1: Tensor32 = io::read_image(&a.first)?;
    let f100: Tensor32 = io::read_image(&a.f100)?;
    let f150: Tensor32 = io::read_image(&a.f150)?;
    let verdict = dataset::scene_static_filter(&f1, &f100, &f150, a.tau)?;
    println!(
        "{}",
        match verdict {
            Verdict::Keep => "keep",
            Verdict::Discard => "discard",
        }
    );
    Ok(())
}

fn categorize(a: CategorizeArgs, seed: u64) -> Result<()> {
    let records = dataset::read_feature_records(&a.features)?;
    let split = dataset::categorize(&records, a.clusters, seed)?;
    create_parent(&a.out)?;
    dataset::write_split(&a.out, &split)?;
    let count = |s: Split| split.values().filter(|&&v| v == s).count();
    println!(
        "{} records: {} test, {} train, {} val",
        split.len(),
        count(Split::Test),
        count(Split::Train),
        count(Split::Val)
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let mut rdr = csv::Reader::from_path(&a.split).with_context(|| format!("reading {}", a.split.display()))?;
    let mut copied = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        ensure!(rec.len() == 2, "{} line {line}: expected id,split", a.split.display());
        let label: Split = rec[1].parse().with_context(|| format!("{} line {line}", a.split.display()))?;
        let src = a.src.join(format!("{}.ppm", &rec[0]));
        ensure!(src.is_file(), "{} line {line}: {} not found", a.split.display(), src.display());
        let dir = a.out.join(label.name());
        fs::create_dir_all(&dir)?;
        fs::copy(&src, dir.join(format!("{}.ppm", &rec[0])))?;
        copied += 1;
    }
    println!("copied {copied} images into {}", a.out.display());
    Ok(())
}

fn degrade(a: DegradeArgs) -> Result<()> {
    let hr = read_dir_images(&a.input)?;
    let pairs = dataset::make_pairs(hr, a.scale, LrSource::Synthetic)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for p in &pairs {
        io::write_image(&p.lr, a.out.join(format!("{}.ppm", p.id)))?;
    }
    println!("wrote {} LR images at 1/{}", pairs.len(), a.scale);
    Ok(())
}

fn dump_features(a: DumpArgs) -> Result<()> {
    let model = load_model(&a.weights)?;
    let lr: Tensor32 = io::read_image(&a.input)?;
    let indices: BTreeSet<usize> = if a.blocks.is_empty() {
        (1..=model.config().blocks).collect()
    } else {
        a.blocks.iter().copied().collect()
    };
    let maps = model.dump_features(&lr, &indices)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, t) in &maps {
        let s = t.shape();
        let plane: Vec<f32> = (0..s.h * s.w)
            .map(|k| (0..s.c).map(|c| t.plane(0, c)[k]).sum::<f32>() / s.c as f32)
            .collect();
        let path = a.out.join(format!("block-{i}.pgm"));
        io::write_gray_normalized(&plane, s.h, s.w, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

struct AblationRow {
    name: String,
    activation: String,
    attention: String,
    loss: String,
    params: usize,
    final_loss: f64,
    psnr: f64,
    ssim: f64,
    fps: Option<f64>,
}

fn ablate(a: AblateArgs, seed: u64) -> Result<()> {
    ensure!(a.images > 0, "--images must be at least 1");
    let pairs: Vec<Pair<f32>> = dataset::make_pairs(procedural_set(a.images, a.size, seed), a.scale, LrSource::Synthetic)?;
    let base = ModelConfig {
        channels: a.channels,
        blocks: a.blocks,
        scale: a.scale,
        seed,
        ..ModelConfig::default()
    };
    let runs: Vec<(ModelConfig, LossVariant)> = match a.grid {
        Grid::AttentionActivation => base.ablation_grid().into_iter().map(|c| (c, LossVariant::Full)).collect(),
        Grid::Loss => LossVariant::ALL.iter().map(|&v| (base.clone(), v)).collect(),
    };
    let mut rows = Vec::new();
    for (cfg, variant) in runs {
        let name = match a.grid {
            Grid::AttentionActivation => format!("{}+{}", cfg.activation.name(), cfg.attention.name()),
            Grid::Loss => variant.name().to_string(),
        };
        let config = TrainConfig {
            scale: a.scale,
            patch_size: a.patch,
            batch_size: a.batch,
            steps: a.steps,
            learning_rate: a.lr,
            seed,
            objective: loss_ablation_suite(variant.name())?,
            log_every: a.steps.max(1),
            ..TrainConfig::default()
        };
        let model = Model32::build(cfg.clone())?;
        let (model, log) = train::train(&pairs, model, &config).with_context(|| format!("training `{name}`"))?;
        let eval = evaluate(&model, &pairs)?;
        let fps = if a.fps {
            let opts = BenchOptions {
                frames: a.frames,
                runs: a.runs,
                warmup: 1,
                seed,
                input: pairs[0].lr.shape(),
                scale: a.scale,
            };
            Some(measure_fps(&name, |x| model.upscale(x).map(drop), &opts)?.fps_mean)
        } else {
            None
        };
        log::info!("{name}: PSNR {:.3}", eval.psnr.mean);
        rows.push(AblationRow {
            name,
            activation: cfg.activation.name().into(),
            attention: cfg.attention.name().into(),
            loss: variant.name().into(),
            params: model.param_count(),
            final_loss: log.last().map_or(f64::NAN, |e| e.loss),
            psnr: eval.psnr.mean,
            ssim: eval.ssim.mean,
            fps,
        });
    }
    let mut text = String::from("config,activation,attention,loss,params,final_loss,psnr,ssim");
    if a.fps {
        text.push_str(",fps");
    }
    text.push('\n');
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            r.name, r.activation, r.attention, r.loss, r.params, r.final_loss, r.psnr, r.ssim
        ));
        if let Some(f) = r.fps {
            text.push_str(&format!(",{f}"));
        }
        text.push('\n');
    }
    if let Some(p) = &a.out {
        create_parent(p)?;
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{text}");
    Ok(())
}
