use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dualcassi::eval::{
    curve_correlation, mrae, psnr_capped, rmse, run_benchmark, spectral_curve, spectral_curve_csv, ssim, MaskType,
    Method, Region, Suite, SuiteEntry,
};
use dualcassi::io;
use dualcassi::masks::{dynamic_mask, normal_mask, random_mask, template_mask};
use dualcassi::nn::{dmdc_forward, train_dmdc, MaskPolicy, ModelParams, NetConfig, TrainConfig, TrainData};
use dualcassi::optics::{derive_seed, dual_measure, rgb_project};
use dualcassi::recon::{reconstruct_classical, ReconConfig};
use dualcassi::spectral::{default_spectral_response, synth_scene};
use dualcassi::{Dispersion, DynamicMaskParams, Execution, HyperspectralCube, NoiseSpec, SceneSpec};

use crate::args::*;
use crate::config::FileConfig;
use crate::error::{CliError, WithPath};

/// Settings shared by every subcommand.
pub struct Ctx {
    pub file: FileConfig,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub exec: Execution,
}

impl Ctx {
    fn seed(&self, default: u64) -> u64 {
        self.seed.unwrap_or(default)
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }

    fn out_file(&self, default: &str) -> Result<PathBuf, CliError> {
        let path = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(path)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    io::write_atomic(path, text.as_bytes()).at(path)
}

fn scene_spec(c: &Ctx, a: &SceneArgs) -> Result<SceneSpec, CliError> {
    let base = SceneSpec::default();
    let dims = c.file.or(
        "dims",
        a.dims,
        Dims {
            nx: base.nx,
            ny: base.ny,
            bands: base.bands,
        },
    )?;
    Ok(SceneSpec {
        nx: dims.nx,
        ny: dims.ny,
        bands: dims.bands,
        blob_count: c.file.or("blobs", a.blobs, base.blob_count)?,
        spectral_smoothness: c.file.or("smoothness", a.smoothness, base.spectral_smoothness)?,
        seed: 0,
    })
}

fn seeds(c: &Ctx, a: &SceneArgs, default: SeedList) -> Result<Vec<u64>, CliError> {
    Ok(c.file.or("seeds", a.seeds.clone(), default)?.0)
}

/// A single HSC1 file, or every `*.hsc` in a directory in name order.
fn scene_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "hsc"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::io(path, "no .hsc files"));
        }
        Ok(files)
    } else if path.exists() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(CliError::io(path, "no such file or directory"))
    }
}

fn optics(c: &Ctx, a: &OpticsArgs) -> Result<(Dispersion, f64), CliError> {
    let d = c.file.or("d", a.d, 1usize)?;
    let sigma = c.file.or("sigma", a.sigma, 0.0f64)?;
    Ok((Dispersion::Linear(d), sigma))
}

fn mask_type(s: &str) -> Result<MaskType, CliError> {
    Ok(s.parse::<MaskType>()?)
}

/// Reads a mask-net checkpoint; the width comes from the input layer.
fn load_mask_net(path: &Path, threshold: f64) -> Result<DynamicMaskParams, CliError> {
    let weights = io::load_params(path).at(path)?;
    let channels = weights.get("mask.in.w").map(|t| t.shape[0]).ok_or_else(|| {
        CliError::from(dualcassi::Error::UnknownName(format!(
            "{}: no mask.in.w entry",
            path.display()
        )))
    })?;
    let p = DynamicMaskParams {
        channels,
        threshold,
        weights,
    };
    p.validate()?;
    Ok(p)
}

/// Architecture settings recoverable from a checkpoint's entry names.
fn net_from_weights(c: &Ctx, a: &NetArgs, params: &ModelParams, stages: Option<usize>) -> Result<NetConfig, CliError> {
    let base = NetConfig::default();
    let embed_dim = params.get("das.embed_c.w").map(|t| t.shape[1]).ok_or_else(|| {
        CliError::from(dualcassi::Error::UnknownName(
            "checkpoint has no das.embed_c.w entry".into(),
        ))
    })?;
    let has = |n: &str| params.contains(n);
    let cfg = NetConfig {
        embed_dim,
        heads: c.file.or("heads", a.heads, base.heads)?,
        window: c.file.or("window", a.window, base.window)?,
        stages: stages.unwrap_or(if has("sas.out.w") { 2 } else { 1 }),
        with_rgb: c.file.or("use-rgb", a.use_rgb, has("rgb.up.w"))?,
        with_noise_estimator: c.file.or("use-ne", a.use_ne, has("ne.tau"))?,
        with_cross_attention: c.file.or("use-cross", a.use_cross, has("das.cross_c.q.w"))?,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn recon_config(
    c: &Ctx,
    a: &ClassicalArgs,
    stages: usize,
    use_rgb: bool,
    use_ne: bool,
) -> Result<ReconConfig, CliError> {
    let base = ReconConfig::default();
    let cfg = ReconConfig {
        stages,
        tv_weight: c.file.or("tv-weight", a.tv_weight, base.tv_weight)?,
        tv_iters: c.file.or("tv-iters", a.tv_iters, base.tv_iters)?,
        step_size: c.file.pick("step-size", a.step_size)?,
        rgb_weight: c.file.or("rgb-weight", a.rgb_weight, base.rgb_weight)?,
        use_rgb,
        use_noise_estimate: use_ne,
        exec: c.exec,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(c: &Ctx, a: &SynthArgs) -> Result<(), CliError> {
    let spec = scene_spec(c, &a.scene)?;
    let seeds = seeds(c, &a.scene, SeedList(vec![1]))?;
    let dir = c.out_dir()?;
    for s in seeds {
        let cube = synth_scene(&SceneSpec {
            seed: s,
            ..spec.clone()
        })?;
        let path = dir.join(format!("scene_{s}.hsc"));
        io::save_cube(&cube, &path).at(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn simulate(c: &Ctx, a: &SimulateArgs) -> Result<(), CliError> {
    let scenes: PathBuf = c.file.require("scenes", a.scenes.clone())?;
    let kind = mask_type(&c.file.or("mask", a.mask.mask.clone(), "manual".to_string())?)?;
    let mask_seed = c.file.or("mask-seed", a.mask.mask_seed, 0u64)?;
    let open_ratio = c.file.or("open-ratio", a.mask.open_ratio, 0.5)?;
    let threshold = c.file.or("threshold", a.mask.threshold, 0.5)?;
    let weights: Option<PathBuf> = c.file.pick("weights", a.mask.weights.clone())?;
    let (dispersion, sigma) = optics(c, &a.optics)?;
    let mask_net = match (kind, weights) {
        (MaskType::Dynamic, None) => {
            return Err(CliError::from(dualcassi::Error::Parameter(
                "dynamic mask requires --weights".into(),
            )))
        }
        (MaskType::Dynamic, Some(w)) => Some(load_mask_net(&w, threshold)?),
        _ => None,
    };
    let files = scene_files(&scenes)?;
    let dir = c.out_dir()?;
    let base_seed = c.seed(0);
    for (i, path) in files.iter().enumerate() {
        let cube = io::load_cube(path).at(path)?;
        let response = default_spectral_response(cube.bands)?;
        let noise = NoiseSpec::new(sigma, derive_seed(base_seed, i as u64))?;
        let template = template_mask(cube.nx, cube.ny, open_ratio, mask_seed)?;
        let mask = match kind {
            MaskType::Manual => template,
            MaskType::Random => random_mask(cube.nx, cube.ny, derive_seed(mask_seed, i as u64)),
            MaskType::Normal => normal_mask(cube.nx, cube.ny, derive_seed(mask_seed, i as u64)),
            MaskType::Dynamic => {
                // the RGB frame drives the mask, so measure it first
                let rgb = rgb_project(&cube, &response, &noise.derive(1))?;
                dynamic_mask(&rgb, &template, mask_net.as_ref().expect("checked above"))?
            }
        };
        let (rgb, meas) = dual_measure(&cube, &mask, &response, &dispersion, &noise)?;
        let stem = path
            .file_stem()
            .map_or_else(|| format!("scene_{i}"), |s| s.to_string_lossy().into_owned());
        let (pr, pm, pk) = (
            dir.join(format!("{stem}.hsr")),
            dir.join(format!("{stem}.hsm")),
            dir.join(format!("{stem}.hsk")),
        );
        io::save_rgb(&rgb, &pr).at(&pr)?;
        io::save_measurement(&meas, &pm).at(&pm)?;
        io::save_mask(&mask, &pk).at(&pk)?;
        println!("{} {} {}", pr.display(), pm.display(), pk.display());
    }
    Ok(())
}

fn score(out: &HyperspectralCube, truth: &HyperspectralCube) -> Result<String, CliError> {
    if !out.same_dims(truth) {
        return Err(CliError::from(dualcassi::Error::Dimension {
            op: "metrics",
            detail: format!("{:?} vs {:?}", out.dims(), truth.dims()),
        }));
    }
    let s = if out.nx >= 11 && out.ny >= 11 {
        ssim(out, truth)?
    } else {
        f64::NAN
    };
    Ok(format!(
        "psnr_db,ssim,mrae,rmse\n{:.6},{:.6},{:.6},{:.6}\n",
        psnr_capped(out, truth)?,
        s,
        mrae(out, truth)?,
        rmse(out, truth)?
    ))
}

pub fn reconstruct(c: &Ctx, a: &ReconstructArgs) -> Result<(), CliError> {
    let pm: PathBuf = c.file.require("meas", a.meas.clone())?;
    let pr: PathBuf = c.file.require("rgb", a.rgb.clone())?;
    let pk: PathBuf = c.file.require("mask", a.mask.clone())?;
    let truth_path: Option<PathBuf> = c.file.pick("truth", a.truth.clone())?;
    let method: Method = c
        .file
        .or("method", a.method.clone(), "classical".to_string())?
        .parse()?;
    let stages: Option<usize> = c.file.pick("stages", a.stages)?;
    let meas = io::load_measurement(&pm).at(&pm)?;
    let rgb = io::load_rgb(&pr).at(&pr)?;
    let mask = io::load_mask(&pk).at(&pk)?;
    let truth = truth_path.as_ref().map(|p| io::load_cube(p).at(p)).transpose()?;
    let response = default_spectral_response(meas.bands)?;
    let out = match method {
        Method::Classical => {
            let use_rgb = c.file.or("use-rgb", a.net.use_rgb, true)?;
            let use_ne = c.file.or("use-ne", a.net.use_ne, false)?;
            let cfg = recon_config(c, &a.classical, stages.unwrap_or(30), use_rgb, use_ne)?;
            reconstruct_classical(&meas, &rgb, &mask, &response, &cfg)?
        }
        Method::Dmdc => {
            let w: PathBuf = c
                .file
                .pick("weights", a.weights.clone())?
                .ok_or_else(|| CliError::usage("the dmdc method requires --weights"))?;
            let params = io::load_params(&w).at(&w)?;
            let cfg = net_from_weights(c, &a.net, &params, stages)?;
            dmdc_forward(&meas, &rgb, &mask, &response, &params, &cfg)?
        }
    };
    let path = c.out_file("recon.hsc")?;
    io::save_cube(&out, &path).at(&path)?;
    println!("{}", path.display());
    if let Some(t) = truth {
        let report = score(&out, &t)?;
        let mpath = path.with_extension("metrics.csv");
        write_text(&mpath, &report)?;
        print!("{report}");
    }
    Ok(())
}

fn load_scenes(c: &Ctx, scenes: Option<PathBuf>, a: &SceneArgs) -> Result<Vec<HyperspectralCube>, CliError> {
    match c.file.pick("scenes", scenes)? {
        Some(p) => scene_files(&p)?.iter().map(|f| io::load_cube(f).at(f)).collect(),
        None => {
            let spec = scene_spec(c, a)?;
            seeds(c, a, SeedList((100..=115).collect()))?
                .into_iter()
                .map(|s| {
                    synth_scene(&SceneSpec {
                        seed: s,
                        ..spec.clone()
                    })
                    .map_err(CliError::from)
                })
                .collect()
        }
    }
}

pub fn train(c: &Ctx, a: &TrainArgs) -> Result<(), CliError> {
    let scenes = load_scenes(c, a.scenes.clone(), &a.scene)?;
    let first = scenes.first().ok_or_else(|| CliError::usage("no training scenes"))?;
    let (nx, ny, bands) = first.dims();
    let response = default_spectral_response(bands)?;
    let (dispersion, sigma) = optics(c, &a.optics)?;
    let base = NetConfig::default();
    let net = NetConfig {
        embed_dim: c.file.or("embed-dim", a.embed_dim, base.embed_dim)?,
        heads: c.file.or("heads", a.net.heads, base.heads)?,
        window: c.file.or("window", a.net.window, base.window)?,
        stages: c.file.or("stages", a.stages, 1)?,
        xi: c.file.or("xi", a.xi, base.xi)?,
        with_rgb: c.file.or("use-rgb", a.net.use_rgb, base.with_rgb)?,
        with_noise_estimator: c.file.or("use-ne", a.net.use_ne, base.with_noise_estimator)?,
        with_cross_attention: c.file.or("use-cross", a.net.use_cross, base.with_cross_attention)?,
    };
    let tb = TrainConfig::default();
    let seed = c.seed(0);
    let tc = TrainConfig {
        lr: c.file.or("lr", a.lr, tb.lr)?,
        epochs: c.file.or("epochs", a.epochs, tb.epochs)?,
        halve_every: c.file.or("halve-every", a.halve_every, tb.halve_every)?,
        batch: c.file.or("batch", a.batch, tb.batch)?,
        rate_weight: c.file.or("rate-weight", a.rate_weight, tb.rate_weight)?,
        mask_lr_scale: c.file.or("mask-lr-scale", a.mask_lr_scale, tb.mask_lr_scale)?,
        seed,
        exec: c.exec,
        ..tb
    };
    let kind = mask_type(&c.file.or("mask", a.mask.mask.clone(), "manual".to_string())?)?;
    let mask_seed = c.file.or("mask-seed", a.mask.mask_seed, 0u64)?;
    let open_ratio = c.file.or("open-ratio", a.mask.open_ratio, 0.5)?;
    let threshold = c.file.or("threshold", a.mask.threshold, 0.5)?;
    let template = template_mask(nx, ny, open_ratio, mask_seed)?;
    let policy = match kind {
        MaskType::Manual => MaskPolicy::Fixed(template),
        MaskType::Random => MaskPolicy::Random { seed: mask_seed },
        MaskType::Normal => MaskPolicy::Normal { seed: mask_seed },
        MaskType::Dynamic => {
            let params = match c.file.pick::<PathBuf>("weights", a.mask.weights.clone())? {
                Some(w) => load_mask_net(&w, threshold)?,
                None => {
                    DynamicMaskParams::init(c.file.or("channels", a.channels, 8)?, threshold, derive_seed(seed, 1))?
                }
            };
            MaskPolicy::Dynamic { template, params }
        }
    };
    let data = TrainData {
        scenes: &scenes,
        response: &response,
        dispersion,
        sigma,
    };
    let outcome = train_dmdc(&data, &policy, &net, &tc)?;
    let dir = c.out_dir()?;
    let model = dir.join("model.hsp");
    io::save_params(&outcome.params, &model).at(&model)?;
    let trace: Vec<(f64, f64)> = outcome.trace.iter().map(|r| (r.loss, r.lr)).collect();
    let loss = dir.join("loss.csv");
    write_text(&loss, &io::loss_csv(&trace))?;
    println!("{}", model.display());
    println!("{}", loss.display());
    if let Some(m) = &outcome.mask {
        let p = dir.join("mask.hsp");
        io::save_params(&m.weights, &p).at(&p)?;
        println!("{}", p.display());
    }
    Ok(())
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    s.split(',').map(|t| f(t.trim())).collect()
}

pub fn bench(c: &Ctx, a: &BenchArgs) -> Result<(), CliError> {
    let mut scene = scene_spec(c, &a.scene)?;
    scene.seed = 0;
    let seeds = seeds(c, &a.scene, SeedList((1..=10).collect()))?;
    let (dispersion, sigma) = optics(c, &a.optics)?;
    let masks = parse_list(
        &c.file
            .or("masks", a.masks.clone(), "manual,rand,normal,dynamic".to_string())?,
        mask_type,
    )?;
    let methods = parse_list(
        &c.file.or("methods", a.methods.clone(), "classical".to_string())?,
        |s| Ok(s.parse::<Method>()?),
    )?;
    let threshold = c.file.or("threshold", a.threshold, 0.5)?;
    let mask_net = match c.file.pick::<PathBuf>("mask-weights", a.mask_weights.clone())? {
        Some(p) => Some(load_mask_net(&p, threshold)?),
        None if masks.contains(&MaskType::Dynamic) => {
            return Err(CliError::from(dualcassi::Error::Parameter(
                "dynamic mask requires --mask-weights".into(),
            )))
        }
        None => None,
    };
    let mut models = BTreeMap::new();
    if let Some(spec) = c.file.pick::<String>("weights", a.weights.clone())? {
        if spec.contains('=') {
            for pair in spec.split(',') {
                let (k, v) = pair
                    .split_once('=')
                    .ok_or_else(|| CliError::usage(format!("bad weights entry {pair:?}")))?;
                let p = PathBuf::from(v.trim());
                models.insert(mask_type(k.trim())?, io::load_params(&p).at(&p)?);
            }
        } else {
            let p = PathBuf::from(spec);
            let params = io::load_params(&p).at(&p)?;
            for m in &masks {
                models.insert(*m, params.clone());
            }
        }
    }
    let use_rgb = c.file.or("use-rgb", a.net.use_rgb, true)?;
    let use_ne = c.file.or("use-ne", a.net.use_ne, false)?;
    let stages = c.file.or("stages", a.stages, 30usize)?;
    let dmdc_stages = c.file.pick("dmdc-stages", a.dmdc_stages)?;
    let mut net = NetConfig::default();
    if let Some(params) = models.values().next() {
        net = net_from_weights(c, &a.net, params, dmdc_stages)?;
    }
    let mut entries = Vec::new();
    for &method in &methods {
        for &mask in &masks {
            let (st, cross, ne) = match method {
                Method::Classical => (stages, c.file.or("use-cross", a.net.use_cross, true)?, use_ne),
                Method::Dmdc => (net.stages, net.with_cross_attention, net.with_noise_estimator),
            };
            entries.push(SuiteEntry {
                mask,
                method,
                stages: st,
                use_rgb: if method == Method::Dmdc { net.with_rgb } else { use_rgb },
                use_ne: ne,
                use_cross: cross,
            });
        }
    }
    let suite = Suite {
        scene_seeds: seeds,
        response: default_spectral_response(scene.bands)?,
        scene,
        dispersion,
        sigma,
        mask_seed: c.file.or("mask-seed", a.mask_seed, 0u64)?,
        entries,
        recon: recon_config(c, &a.classical, stages, use_rgb, use_ne)?,
        net,
        models,
        mask_net,
        exec: c.exec,
    };
    let report = run_benchmark(&suite)?;
    let path = c.out_file("bench.csv")?;
    write_text(&path, &report.to_csv())?;
    println!("{}", path.display());
    for r in &report.aggregates {
        println!(
            "{} {} stages={} psnr_db={:.3} ssim={:.4}",
            r.entry.method, r.entry.mask, r.entry.stages, r.psnr_db, r.ssim
        );
    }
    Ok(())
}

pub fn metrics(c: &Ctx, a: &MetricsArgs) -> Result<(), CliError> {
    let pp: PathBuf = c.file.require("pred", a.pred.clone())?;
    let pt: PathBuf = c.file.require("truth", a.truth.clone())?;
    let pred = io::load_cube(&pp).at(&pp)?;
    let truth = io::load_cube(&pt).at(&pt)?;
    print!("{}", score(&pred, &truth)?);
    if let Some(RegionArg([x0, y0, x1, y1])) = c.file.pick("region", a.region)? {
        let region = Region { x0, y0, x1, y1 };
        let cp = spectral_curve(&pred, region)?;
        let ct = spectral_curve(&truth, region)?;
        println!("curve_correlation,{:.6}", curve_correlation(&cp, &ct));
        if c.out.is_some() {
            let path = c.out_file("curve.csv")?;
            write_text(&path, &spectral_curve_csv(&cp))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
