//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig};
use crate::config::RunConfig;
use crate::datamodel::{AttributeVector, Dataset, DatasetManifest, PhotoSample, SketchSample};
use crate::error::{Error, Result};
use crate::eval::{
    build_gallery, identify, run_protocol, write_cmc_csv, GalleryIndex, ProtocolData, ProtocolName, ProtocolReport,
    ProtocolSetup,
};
use crate::network::{load_checkpoint_expecting, ModelConfig, ModelParams};
use crate::seed::derive_seed;
use crate::sketch::{sketchify_dataset, to_grayscale};
use crate::synth::synth_dataset;
use crate::tensor::Tensor;
use crate::trainer::{train, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "sketchmatch", version, about = "Attribute-assisted sketch-to-photo identification")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; overrides the config file. 1 gives the reproducible single-threaded mode.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic photo/sketch dataset.
    Synth {
        #[arg(long)]
        identities: usize,
        #[arg(long)]
        out: PathBuf,
        /// Render side length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Validate a manifest and its image files.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write xDoG sketches for every photo of a manifest.
    Sketchify {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write augmented copies of the first manifest pairs.
    AugmentPreview {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Train both branches; writes checkpoint.bin and metrics.csv.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from these weights, e.g. a pretrained checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Continue from OUT/checkpoint.bin.
        #[arg(long)]
        resume: bool,
    },
    /// Embed every photo of a manifest into a gallery file.
    BuildGallery {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank gallery identities for one sketch.
    Identify {
        /// Sketch image (PNG).
        #[arg(long)]
        probe: PathBuf,
        /// Witness attribute bits as a 0/1 string in vocabulary order.
        #[arg(long)]
        attributes: String,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of ranked lines to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Run a cross-validation protocol and write report.json and cmc.csv.
    Evaluate {
        #[arg(long, value_enum)]
        protocol: Option<ProtocolName>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// S3 test pairs.
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        /// S2/S3 distractor photos.
        #[arg(long)]
        distractors: Option<PathBuf>,
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the mean CMC curve of a report as CSV.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Gallery file contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GalleryFile {
    pub config_hash: String,
    pub gallery: GalleryIndex,
}

struct Context {
    config: RunConfig,
    hash: String,
    /// True when a config file was given explicitly.
    explicit: bool,
}

impl Context {
    fn model(&self) -> Result<ModelConfig> {
        self.config.model.build(crate::datamodel::AttributeVocabulary::default().len())
    }
}

fn load_context(global: &GlobalArgs) -> Result<Context> {
    let mut config = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = global.seed {
        config.seed = s;
    }
    if let Some(t) = global.threads {
        config.threads = t;
    }
    let hash = config.hash();
    Ok(Context {
        config,
        hash,
        explicit: global.config.is_some(),
    })
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("--{name} is required (or set paths.{} in the config)", name.replace('-', "_"))))
}

fn load_dataset(path: &Path, model: &ModelConfig) -> Result<Dataset> {
    let manifest = DatasetManifest::load(path)?;
    Dataset::load(&manifest, Some((model.input_height, model.input_width)))
}

fn load_params(path: &Path, model: &ModelConfig) -> Result<ModelParams> {
    Ok(load_checkpoint_expecting(path, model)?.params)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn execute(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let ctx = load_context(&cli.global)?;
    if ctx.config.threads > 0 {
        // Fails only if a pool already exists in this process, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(ctx.config.threads)
            .build_global();
    }
    let cfg = &ctx.config;
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match cli.command {
        Command::Synth { identities, out: dir, size } => {
            let m = synth_dataset(identities, cfg.seed, &dir, (size, size), &cfg.xdog)?;
            writeln!(out, "wrote {} pairs to {}", m.entries.len(), dir.join("manifest.csv").display()).map_err(io)?;
        }
        Command::Ingest { manifest } => {
            let m = DatasetManifest::load(&manifest)?;
            writeln!(
                out,
                "ok: {} entries, {} identities, {} attributes",
                m.entries.len(),
                m.identities().len(),
                m.vocabulary.len()
            )
            .map_err(io)?;
        }
        Command::Sketchify { manifest, out: dir } => {
            let m = DatasetManifest::load(&manifest)?;
            let s = sketchify_dataset(&m, &cfg.xdog, &dir)?;
            writeln!(out, "wrote {} sketches to {}", s.entries.len(), dir.display()).map_err(io)?;
        }
        Command::AugmentPreview { manifest, out: dir, count } => {
            let model = ctx.model()?;
            let m = DatasetManifest::load(&manifest)?;
            let ds = Dataset::load(&m, Some((model.input_height, model.input_width)))?;
            let aug = AugmentConfig {
                crop_height: model.input_height,
                crop_width: model.input_width,
                ..cfg.augment
            };
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, s) in ds.samples.iter().take(count).enumerate() {
                let (p, k) = augment_pair(&s.photo, &s.sketch, &aug, derive_seed(cfg.seed, i as u64))?;
                p.image.save_png(&dir.join(format!("{i:03}_photo.png")))?;
                k.image.save_png(&dir.join(format!("{i:03}_sketch.png")))?;
            }
            writeln!(out, "wrote {} augmented pairs to {}", count.min(ds.len()), dir.display()).map_err(io)?;
        }
        Command::Train {
            manifest,
            out: dir,
            init_from,
            resume,
        } => {
            let model = ctx.model()?;
            let manifest = required(manifest, &cfg.paths.manifest, "manifest")?;
            let ds = load_dataset(&manifest, &model)?;
            let options = TrainOptions {
                init_from: init_from.or_else(|| cfg.paths.init_from.clone()),
                resume,
                config_hash: ctx.hash.clone(),
            };
            let art = train(&ds, &model, &cfg.train_config_for(&model), &dir, &options)?;
            writeln!(out, "checkpoint {}\nmetrics {}", art.checkpoint.display(), art.metrics.display()).map_err(io)?;
        }
        Command::BuildGallery {
            manifest,
            checkpoint,
            out: path,
        } => {
            let model = ctx.model()?;
            let manifest = required(manifest, &cfg.paths.manifest, "manifest")?;
            let params = load_params(&checkpoint, &model)?;
            let ds = load_dataset(&manifest, &model)?;
            let photos: Vec<PhotoSample> = ds.samples.into_iter().map(|s| s.photo).collect();
            let gallery = build_gallery(&photos, &params)?;
            let file = GalleryFile {
                config_hash: ctx.hash.clone(),
                gallery,
            };
            write_text(&path, &(serde_json::to_string_pretty(&file)? + "\n"))?;
            writeln!(out, "gallery of {} entries written to {}", file.gallery.len(), path.display()).map_err(io)?;
        }
        Command::Identify {
            probe,
            attributes,
            gallery,
            checkpoint,
            top,
        } => {
            let model = ctx.model()?;
            let params = load_params(&checkpoint, &model)?;
            let text = std::fs::read_to_string(&gallery).map_err(|e| Error::io(&gallery, e))?;
            let file: GalleryFile = serde_json::from_str(&text)?;
            let witness = AttributeVector::parse(&attributes)
                .filter(|a| a.len() == model.attribute_count())
                .ok_or_else(|| {
                    Error::Domain(format!(
                        "--attributes must be {} characters of 0/1, got {attributes:?}",
                        model.attribute_count()
                    ))
                })?;
            let image = to_grayscale(&Tensor::load_png(&probe)?)?.resize(model.input_height, model.input_width);
            let sketch = SketchSample {
                image,
                identity: 0,
                attributes: witness.clone(),
                witness_attributes: witness,
            };
            let mut result = identify(0, &sketch, &file.gallery, &params)?;
            result.true_identity = None;
            writeln!(out, "rank\tidentity\tdistance").map_err(io)?;
            for (r, m) in result.ranked.iter().take(top).enumerate() {
                writeln!(out, "{}\t{}\t{:.6}", r + 1, m.identity, m.distance).map_err(io)?;
            }
        }
        Command::Evaluate {
            protocol,
            folds,
            manifest,
            test_manifest,
            distractors,
            init_from,
            out: dir,
        } => {
            let model = ctx.model()?;
            let mut pcfg = cfg.protocol.clone();
            if let Some(p) = protocol {
                pcfg.name = p;
            }
            if let Some(f) = folds {
                pcfg.folds = f;
            }
            pcfg.validate()?;
            let manifest = required(manifest, &cfg.paths.manifest, "manifest")?;
            let test = test_manifest.or_else(|| cfg.paths.test_manifest.clone());
            let distractors = distractors.or_else(|| cfg.paths.distractors.clone());
            let data = ProtocolData {
                primary: load_dataset(&manifest, &model)?,
                test: test.map(|p| load_dataset(&p, &model)).transpose()?,
                distractors: distractors.map(|p| load_dataset(&p, &model)).transpose()?,
            };
            let init = init_from
                .or_else(|| cfg.paths.init_from.clone())
                .map(|p| load_params(&p, &model))
                .transpose()?;
            // The report records the hash of the effective configuration.
            let mut effective = cfg.clone();
            effective.protocol = pcfg.clone();
            let hash = effective.hash();
            let train_cfg = cfg.train_config_for(&model);
            let setup = ProtocolSetup {
                protocol: &pcfg,
                model: &model,
                train: &train_cfg,
                init: init.as_ref(),
                seed: cfg.seed,
                config_hash: &hash,
            };
            let report = run_protocol(&setup, &data)?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_text(&dir.join("report.json"), &report.to_json()?)?;
            write_cmc_csv(&report.mean_curve(), &dir.join("cmc.csv"))?;
            for s in &report.summary {
                writeln!(out, "rank-{}\t{}", s.rank, s.formatted).map_err(io)?;
            }
        }
        Command::Report { report, out: path } => {
            let text = std::fs::read_to_string(&report).map_err(|e| Error::io(&report, e))?;
            let r = ProtocolReport::from_json(&text)?;
            if ctx.explicit {
                let mut expected = cfg.clone();
                expected.protocol.name = r.protocol;
                expected.protocol.folds = r.folds.len();
                if expected.hash() != r.config_hash {
                    return Err(Error::Fingerprint(format!(
                        "report was produced by config {}, --config hashes to {}",
                        r.config_hash,
                        expected.hash()
                    )));
                }
            }
            write_cmc_csv(&r.mean_curve(), &path)?;
            writeln!(out, "wrote {} CMC rows to {}", r.mean_cmc.len(), path.display()).map_err(io)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code. Errors
/// are reported as one line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("usage error");
                    eprintln!("{first}");
                    1
                }
            };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            e.exit_code()
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}
