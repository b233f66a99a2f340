use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use embedheight::autodiff::gradcheck;
use embedheight::grid::{read_internal, write_internal, EGRID_MAGIC};
use embedheight::ingest::{self, FetchManifest, FetchOptions, HttpSource};
use embedheight::metrics::{self, svg, Evaluation, MetricsReport};
use embedheight::nets::{load_checkpoint, CHECKPOINT_MAGIC};
use embedheight::patchset;
use embedheight::preprocess::{self, GEO_TOLERANCE};
use embedheight::ridge::{self, RidgeModel, Subsample};
use embedheight::synth::{self, Mapping, Shift, SynthSpec};
use embedheight::trainer::{logs_from_csv, RunOutput, Trainer};
use embedheight::{DType, Error, Grid};

use crate::config::{InputDigest, ModelKind, RunConfig, RunManifest, Versions, MANIFEST_FILE, MANIFEST_VERSION};
use crate::{
    ConvertArgs, EvaluateArgs, FetchArgs, GradcheckArgs, InferArgs, Overrides, PreprocessArgs, ReportArgs, SynthArgs,
    TrainArgs,
};

/// A bad flag, config or input path (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

macro_rules! invalid {
    ($($t:tt)*) => { anyhow::Error::new(Invalid(format!($($t)*))) };
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<Error>() {
            return match core {
                Error::InvalidArgument(_) | Error::Parse(_) | Error::Manifest { .. } => 1,
                Error::IoPath { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
                _ => 2,
            };
        }
    }
    2
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(invalid!("{what} {} does not exist", path.display()));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// EGRID or GeoTIFF, told apart by magic bytes.
pub fn load_grid(path: &Path) -> Result<Grid> {
    require_file(path, "grid")?;
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        f.read_exact(&mut magic)
            .map_err(|_| invalid!("{} is too short to be a grid", path.display()))?;
    }
    let grid = if magic == EGRID_MAGIC {
        read_internal(path)?
    } else if &magic[..2] == b"II" || &magic[..2] == b"MM" {
        ingest::read_geotiff(path)?
    } else {
        return Err(invalid!("{} is neither EGRID nor TIFF", path.display()));
    };
    Ok(grid)
}

fn save_grid(grid: &Grid, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_internal(grid, path)?;
    Ok(())
}

/// Int8 embeddings go through remap and normalize; float grids are taken as already normalized.
fn model_inputs(embeddings: Grid) -> Result<Grid> {
    if embeddings.dtype() != DType::Int8 {
        return Ok(embeddings);
    }
    let (remapped, report) = preprocess::remap_nodata(&embeddings)?;
    log::info!("{} of {} pixels carried the nodata sentinel", report.invalid, report.total);
    Ok(preprocess::normalize(&remapped)?)
}

/// Nearest-neighbour resample of the DSM onto the embedding pixel grid, unless already aligned.
fn align_to(dsm: Grid, embeddings: &Grid) -> Result<Grid> {
    let same = dsm.width() == embeddings.width()
        && dsm.height() == embeddings.height()
        && dsm.geo().approx_eq(embeddings.geo(), GEO_TOLERANCE);
    if same {
        return Ok(dsm);
    }
    log::info!("resampling DSM onto the {}x{} embedding grid", embeddings.width(), embeddings.height());
    Ok(preprocess::resample_nearest(
        &dsm,
        embeddings.geo(),
        embeddings.crs(),
        embeddings.width(),
        embeddings.height(),
    )?)
}

pub fn fetch(a: FetchArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    if a.workers == 0 {
        return Err(invalid!("--workers must be >= 1"));
    }
    let cache = ingest::resolve_cache_dir(a.cache_dir.as_deref());
    let manifest = FetchManifest::load(&a.manifest, cache)?;
    let opts = FetchOptions {
        workers: a.workers,
        retries: a.retries,
        backoff: Duration::from_millis(a.backoff_ms),
    };
    for path in ingest::fetch_with(&manifest, &opts)? {
        println!("{}", path.display());
    }
    Ok(())
}

pub fn convert(a: ConvertArgs) -> Result<()> {
    let grid = if a.input.starts_with("http://") || a.input.starts_with("https://") {
        ingest::decode_source(&HttpSource::new(a.input.clone()))?
    } else {
        let path = Path::new(&a.input);
        require_file(path, "input")?;
        ingest::read_geotiff(path)?
    };
    save_grid(&grid, &a.out)?;
    println!(
        "{}x{}x{} {:?} EPSG:{} -> {}",
        grid.width(),
        grid.height(),
        grid.bands(),
        grid.dtype(),
        grid.crs(),
        a.out.display()
    );
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let d = SynthSpec::default();
    let mapping = match a.mapping.as_deref() {
        Some(m) => m.parse::<Mapping>().map_err(|e| invalid!("{e}"))?,
        None => d.mapping,
    };
    let shift = match (a.shift_column, a.shift_offset) {
        (Some(column), Some(offset)) => Some(Shift { column, offset }),
        _ => None,
    };
    let spec = SynthSpec {
        width: a.width.unwrap_or(d.width),
        height: a.height.unwrap_or(d.height),
        seed: a.seed.unwrap_or(d.seed),
        radius: a.radius.unwrap_or(d.radius),
        mapping,
        noise_sd: a.noise_sd.unwrap_or(d.noise_sd),
        height_offset: a.height_offset.unwrap_or(d.height_offset),
        height_scale: a.height_scale.unwrap_or(d.height_scale),
        nonlinear_scale: a.nonlinear_scale.unwrap_or(d.nonlinear_scale),
        latent_rank: a.latent_rank.unwrap_or(d.latent_rank),
        unique_sd: a.unique_sd.unwrap_or(d.unique_sd),
        shift,
        ..d
    };
    spec.validate()?;
    let scene = synth::generate(&spec)?;
    let embeddings = if a.nodata_fraction > 0.0 {
        synth::inject_nodata(&scene.embeddings, a.nodata_fraction, spec.seed)?
    } else {
        scene.embeddings
    };
    create_dir(&a.out_dir)?;
    save_grid(&embeddings, &a.out_dir.join("embeddings.egrid"))?;
    save_grid(&scene.heights, &a.out_dir.join("dsm.egrid"))?;
    fs::write(a.out_dir.join("descriptor.txt"), scene.descriptor.to_text())?;
    println!("wrote {}x{} scene to {}", spec.width, spec.height, a.out_dir.display());
    Ok(())
}

pub fn preprocess(a: PreprocessArgs) -> Result<()> {
    let raw = load_grid(&a.embeddings)?;
    if raw.dtype() != DType::Int8 {
        return Err(invalid!("{} must hold int8 embeddings", a.embeddings.display()));
    }
    let dsm = load_grid(&a.dsm)?;
    let (remapped, report) = preprocess::remap_nodata(&raw)?;
    let inputs = preprocess::normalize(&remapped)?;
    let target = align_to(dsm, &inputs)?;
    let pair = preprocess::stack_pairs(&inputs, &target)?;
    create_dir(&a.out_dir)?;
    save_grid(pair.inputs(), &a.out_dir.join("inputs.egrid"))?;
    save_grid(pair.target(), &a.out_dir.join("target.egrid"))?;
    let text = format!(
        "{report}valid_target_pixels={}\nwidth={}\nheight={}\n",
        pair.valid_count(),
        pair.width(),
        pair.height()
    );
    fs::write(a.out_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn resolve_config(o: &Overrides) -> Result<RunConfig> {
    let mut c = match &o.config {
        Some(path) => {
            require_file(path, "config")?;
            RunConfig::load(path).map_err(|e| invalid!("{e:#}"))?
        }
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = o.$flag.clone() { c.$($field).+ = v; })*
        };
    }
    set!(
        variant => model.variant,
        depth => model.depth,
        base_channels => model.base_channels,
        seed => model.seed,
        lr => train.lr,
        weight_decay => train.weight_decay,
        batch_size => train.batch_size,
        patch_size => train.patch_size,
        max_epochs => train.max_epochs,
        plateau_factor => train.plateau_factor,
        plateau_patience => train.plateau_patience,
        stop_patience => train.stop_patience,
        split_seed => train.split_seed,
        shuffle_seed => train.shuffle_seed,
        ridge_lambda => ridge.lambda,
        ridge_subsample => ridge.subsample,
        ridge_subsample_seed => ridge.subsample_seed,
        margin => infer.margin,
        infer_batch_size => infer.batch_size,
    );
    if o.embeddings.is_some() {
        c.data.embeddings = o.embeddings.clone();
    }
    if o.dsm.is_some() {
        c.data.dsm = o.dsm.clone();
    }
    if o.output_dir.is_some() {
        c.data.output_dir = o.output_dir.clone();
    }
    if o.boundary_column.is_some() {
        c.split.boundary_column = o.boundary_column;
    }
    if o.infer_patch_size.is_some() {
        c.infer.patch_size = o.infer_patch_size;
    }
    c.validate().map_err(|e| invalid!("{e:#}"))?;
    Ok(c)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn write_manifest(path: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<()> {
    let mut config = cfg.clone();
    for p in [&mut config.data.embeddings, &mut config.data.dsm, &mut config.data.output_dir]
        .into_iter()
        .flatten()
    {
        *p = absolute(p);
    }
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: absolute(p),
                sha256: ingest::sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = RunManifest {
        manifest_version: MANIFEST_VERSION,
        command: command.to_string(),
        config_hash: config.hash(),
        seeds: config.seeds(),
        versions: Versions::current(),
        inputs,
        config,
    };
    fs::write(path, toml::to_string(&m)?).with_context(|| format!("writing {}", path.display()))
}

fn required<'a>(v: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| invalid!("{name} is required (flag or config)"))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let emb_path = required(&cfg.data.embeddings, "--embeddings")?;
    let dsm_path = required(&cfg.data.dsm, "--dsm")?;
    let out = required(&cfg.data.output_dir, "--output-dir")?;
    require_file(emb_path, "embeddings")?;
    require_file(dsm_path, "dsm")?;
    if a.resume && cfg.model.variant == ModelKind::Ridge {
        return Err(invalid!("--resume applies to network training only"));
    }

    let inputs = model_inputs(load_grid(emb_path)?)?;
    let dsm = align_to(load_grid(dsm_path)?, &inputs)?;
    let pair = preprocess::stack_pairs(&inputs, &dsm)?;
    let boundary = cfg
        .split
        .boundary_column
        .unwrap_or_else(|| preprocess::default_boundary(pair.width()));
    let (west, _) = preprocess::split_aoi(&pair, boundary)?;
    create_dir(out)?;

    match cfg.network_spec() {
        None => {
            let sub = Subsample {
                max_pixels: cfg.ridge.subsample,
                seed: cfg.ridge.subsample_seed,
            };
            let model = ridge::fit(&west, cfg.ridge.lambda, Some(sub))?;
            let path = out.join("ridge.txt");
            model.save(&path)?;
            println!("ridge fitted on {} pixels -> {}", west.valid_count(), path.display());
        }
        Some(spec) => {
            let tc = cfg.train_config();
            let p = tc.patch_size;
            let patches = patchset::tile(&west, p, p, true)?;
            let plan = patchset::split(patches.len(), tc.split_seed)?;
            log::info!(
                "{} patches of {p}x{p}: {} train, {} validation",
                patches.len(),
                plan.train.len(),
                plan.val.len()
            );
            let trainer = if a.resume {
                let last = RunOutput::last_path(out);
                require_file(&last, "checkpoint")?;
                let best = RunOutput::best_path(out);
                let log = RunOutput::log_path(out);
                let logs = logs_from_csv(&fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?)?;
                Trainer::<f32>::resume(tc, load_checkpoint(&last)?, load_checkpoint(&best)?, logs, &patches, &plan)?
            } else {
                Trainer::<f32>::new(tc, &spec, &patches, &plan)?
            };
            let outcome = trainer.run(a.epochs, &RunOutput { dir: Some(out.clone()) })?;
            let p = outcome.best.progress;
            println!(
                "{:?} after {} epochs; best epoch {} val_loss {:.6}",
                outcome.stop,
                outcome.logs.len(),
                p.best_epoch,
                p.best_val_loss
            );
        }
    }
    write_manifest(&out.join(MANIFEST_FILE), "train", &cfg, &[emb_path, dsm_path])
}

enum Model {
    Network(Box<embedheight::nets::Network<f32>>),
    Ridge(RidgeModel),
}

fn load_model(path: &Path) -> Result<Model> {
    require_file(path, "model")?;
    let bytes = fs::read(path)?;
    if bytes.starts_with(&CHECKPOINT_MAGIC) {
        Ok(Model::Network(Box::new(load_checkpoint::<f32>(path)?.network)))
    } else if bytes.starts_with(b"ridge 1") {
        Ok(Model::Ridge(RidgeModel::load(path)?))
    } else {
        Err(invalid!("{} is neither a checkpoint nor a Ridge model", path.display()))
    }
}

pub fn infer(a: InferArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let emb_path = required(&cfg.data.embeddings, "--embeddings")?;
    let model = load_model(&a.model)?;
    let inputs = model_inputs(load_grid(emb_path)?)?;
    let pred = match &model {
        Model::Network(net) => {
            let m = net.spec().size_multiple();
            let fallback = cfg.train.patch_size.max(4 * cfg.infer.margin).div_ceil(m) * m;
            let patch = cfg.infer.patch_size.unwrap_or(fallback);
            embedheight::trainer::infer_scene(net, &inputs, patch, cfg.infer.margin, cfg.infer.batch_size)?
        }
        Model::Ridge(r) => r.predict(&inputs)?,
    };
    save_grid(&pred, &a.out)?;
    let manifest = a.out.with_extension("manifest.toml");
    write_manifest(&manifest, "infer", &cfg, &[emb_path, &a.model])?;
    println!("{}x{} prediction -> {}", pred.width(), pred.height(), a.out.display());
    Ok(())
}

fn parse_pred(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| spec.to_string());
            (label, path)
        }
    }
}

fn column(label: String, pred: &Grid, reference: &Grid) -> Result<Evaluation> {
    let (p, r) = metrics::paired_values(pred, reference, None)?;
    if p.is_empty() {
        return Err(invalid!("{label}: no valid pixel pairs"));
    }
    Ok(Evaluation::compute(&label, &p, &r)?)
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let reference = load_grid(&a.reference)?;
    let mut report = MetricsReport::default();
    for spec in &a.preds {
        let (label, path) = parse_pred(spec);
        let pred = load_grid(&path)?;
        match a.boundary_column {
            Some(b) => {
                let (w, h) = (reference.width(), reference.height());
                if b == 0 || b >= w {
                    return Err(invalid!("--boundary-column {b} must lie in 1..{w}"));
                }
                if pred.width() != w || pred.height() != h {
                    return Err(invalid!("{label}: prediction is {}x{}, reference {w}x{h}", pred.width(), pred.height()));
                }
                report.columns.push(column(format!("{label}_train"), &pred.window(0, 0, b, h)?, &reference.window(0, 0, b, h)?)?);
                report.columns.push(column(
                    format!("{label}_test"),
                    &pred.window(b, 0, w - b, h)?,
                    &reference.window(b, 0, w - b, h)?,
                )?);
            }
            None => report.columns.push(column(label, &pred, &reference)?),
        }
    }
    let csv = report.to_csv();
    match &a.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    if a.pred.is_none() && a.log.is_none() {
        return Err(invalid!("nothing to report: pass --pred/--reference and/or --log"));
    }
    if !(a.bin_width > 0.0 && a.bin_width.is_finite()) {
        return Err(invalid!("--bin-width must be > 0"));
    }
    create_dir(&a.out_dir)?;
    let mut written = Vec::new();
    if let (Some(pred_path), Some(ref_path)) = (&a.pred, &a.reference) {
        let pred = load_grid(pred_path)?;
        let reference = load_grid(ref_path)?;
        let (p, r) = metrics::paired_values(&pred, &reference, None)?;
        if p.is_empty() {
            return Err(invalid!("no valid pixel pairs"));
        }
        let eval = Evaluation::compute(&a.label, &p, &r)?;
        let fit = Some((eval.corr.slope, eval.corr.intercept));
        let scatter = svg::scatter(&format!("{} vs reference", a.label), &r, &p, fit);
        let hist = metrics::histogram(&[&r, &p], a.bin_width)?;
        let names = ["reference", a.label.as_str()];
        for (name, body) in [
            ("scatter.svg", scatter),
            ("histogram.svg", svg::histogram("Height distribution", &hist, &names)),
            ("histogram.csv", hist.to_csv(&names)),
        ] {
            fs::write(a.out_dir.join(name), body)?;
            written.push(name);
        }
    }
    if let Some(log_path) = &a.log {
        require_file(log_path, "log")?;
        let logs = logs_from_csv(&fs::read_to_string(log_path)?)?;
        if logs.is_empty() {
            return Err(invalid!("{} has no epochs", log_path.display()));
        }
        let train = logs.iter().map(|l| (l.epoch as f64, l.train_loss)).collect();
        let val = logs.iter().map(|l| (l.epoch as f64, l.val_loss)).collect();
        let best = logs
            .iter()
            .filter(|l| l.is_best)
            .last()
            .map(|l| (l.epoch as f64, l.val_loss));
        let body = svg::loss_curves("Loss", &[("train", train), ("validation", val)], best);
        fs::write(a.out_dir.join("loss.svg"), body)?;
        written.push("loss.svg");
    }
    for name in written {
        println!("{}", a.out_dir.join(name).display());
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = gradcheck::run_suite(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let ok = r.passed(gradcheck::TOLERANCE);
        failed += usize::from(!ok);
        println!(
            "{} {:<18} {:<28} checked={} skipped={} max_rel_error={:.3e}",
            if ok { "PASS" } else { "FAIL" },
            r.op,
            r.shape,
            r.checked,
            r.skipped,
            r.max_rel_error
        );
    }
    println!("{} checks, {failed} failed, tolerance {:e}", results.len(), gradcheck::TOLERANCE);
    if failed > 0 {
        anyhow::bail!("{failed} gradient checks exceeded the tolerance");
    }
    Ok(())
}
