use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use machsim_core::backbone::{open_backbone, Backbone, BackboneError, FeatureCache};
use machsim_core::consistency::toy::VoterPoolConfig;
use machsim_core::dataset::{build_dataset, load_labeled_pairs, DatasetManifest, DatasetStats, DirStore};
use machsim_core::distortion::{default_library, Library};
use machsim_core::eval::{bd_rate, evaluate, LearnedMetric, MetricUnderTest, MsSsimMetric, PsnrMetric, RateTaskCurve};
use machsim_core::metric::{self, Ablation, Checkpoint};
use machsim_core::synthetic::reference_set;
use machsim_core::trainer::{holdout, train};
use machsim_core::Image;
use serde_json::json;

use crate::config::ProjectConfig;
use crate::stamp::{digest_bytes, sidecar, Stamp};
use crate::{
    BackboneArgs, BdRateArgs, BuildDatasetArgs, Cli, Command, EvalMetricArgs, Failure, GenRefsArgs, ScoreArgs,
    StatsArgs, TrainMetricArgs, CACHE_DIR_ENV,
};

type Result<T> = std::result::Result<T, Failure>;

pub(crate) fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => {
            need(p, "config file")?;
            ProjectConfig::load(p)?
        }
        None => ProjectConfig::default(),
    };
    let ctx = Ctx { cli, cfg };
    match &cli.command {
        Command::BuildDataset(a) => ctx.build_dataset(a, out),
        Command::TrainMetric(a) => ctx.train_metric(a, out),
        Command::EvalMetric(a) => ctx.eval_metric(a, out),
        Command::Score(a) => ctx.score(a, out),
        Command::BdRate(a) => ctx.bd_rate(a, out),
        Command::Stats(a) => ctx.stats(a, out),
        Command::GenRefs(a) => ctx.gen_refs(a, out),
    }
}

fn need(p: &Path, what: &str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::MissingInput(format!("{what} {}", p.display())))
    }
}

fn bad_config(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn backbone_failure(e: BackboneError) -> Failure {
    match e {
        BackboneError::UnknownBackbone(_) => bad_config(e),
        BackboneError::BackendUnavailable(_) => Failure::MissingInput(e.to_string()),
        other => Failure::Run(other.into()),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => {
            std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
            Ok(())
        }
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_ablation(name: &str) -> Result<Ablation> {
    Ablation::ALL
        .into_iter()
        .find(|a| a.as_str() == name)
        .ok_or_else(|| bad_config(format!("unknown ablation `{name}`")))
}

/// PNG files directly under `dir`, sorted by name, keyed by file stem.
fn load_refs(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::MissingInput(format!("no PNG files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let img = Image::load_png(p).with_context(|| format!("reading {}", p.display()))?;
            Ok((id, img))
        })
        .collect()
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: ProjectConfig,
}

impl Ctx<'_> {
    /// Stamp location for a run whose main output is `output`.
    fn stamp_beside(&self, output: &Path) -> PathBuf {
        self.cli.stamp.clone().unwrap_or_else(|| sidecar(output, "stamp.json"))
    }

    /// Stamp location for a run without an output file.
    fn stamp_default(&self, command: &str) -> PathBuf {
        let name = format!("{command}.stamp.json");
        match (&self.cli.stamp, &self.cfg.paths.output_dir) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => d.join(name),
            (None, None) => PathBuf::from(format!("machsim-{name}")),
        }
    }

    fn write_stamp(&self, stamp: &Stamp, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        stamp.write(path)?;
        Ok(())
    }

    fn output(&self, flag: &Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| self.cfg.paths.output_dir.as_ref().map(|d| d.join(default_name)))
            .ok_or_else(|| bad_config("no output path: pass --out or set paths.output_dir"))
    }

    fn cache(&self, a: &BackboneArgs) -> Option<FeatureCache> {
        a.cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
            .or_else(|| self.cfg.paths.cache_dir.clone())
            .map(FeatureCache::new)
    }

    fn weights<'a>(&'a self, flag: &'a Option<PathBuf>) -> Option<&'a Path> {
        flag.as_deref().or(self.cfg.backbone.weights.as_deref())
    }

    fn open(&self, id: &str, weights: Option<&Path>) -> Result<Arc<dyn Backbone>> {
        if let Some(w) = weights {
            need(w, "weights directory")?;
        }
        open_backbone(id, weights).map_err(backbone_failure)
    }

    fn build_dataset(&self, a: &BuildDatasetArgs, out: &mut dyn Write) -> Result<()> {
        let refs_dir = a
            .refs
            .clone()
            .or_else(|| self.cfg.paths.refs_dir.clone())
            .ok_or_else(|| bad_config("no reference directory: pass --refs or set paths.refs_dir"))?;
        need(&refs_dir, "reference directory")?;
        let library_path = a.library.as_ref().or(self.cfg.library.as_ref());
        let library = match library_path {
            Some(p) => {
                need(p, "library config")?;
                Library::load(p).map_err(bad_config)?
            }
            None => default_library(),
        };
        let voters_path = a.voters.as_ref().or(self.cfg.voters.as_ref());
        let voters = match voters_path {
            Some(p) => {
                need(p, "voter config")?;
                VoterPoolConfig::load(p).map_err(bad_config)?
            }
            None => VoterPoolConfig::desk(),
        };
        let mut sampler = self.cfg.sampler.clone();
        if let Some(d) = a.delta {
            sampler.delta_db = d;
        }
        if let Some(s) = a.seed {
            sampler.rng_seed = s;
        }
        if a.max_pairs.is_some() {
            sampler.max_pairs_per_reference = a.max_pairs;
        }
        sampler.validate().map_err(bad_config)?;
        let manifest_path = self.output(&a.out, "manifest.jsonl")?;
        ensure_parent(&manifest_path)?;

        let refs = load_refs(&refs_dir)?;
        let root = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let store = DirStore::new(root);
        let manifest = build_dataset(&refs, &library, &voters.build(), &sampler, &store).context("building dataset")?;
        manifest.save(&manifest_path).context("writing manifest")?;
        let stats = DatasetStats::from_manifest(&manifest);
        write_text(&sidecar(&manifest_path, "stats.json"), &stats.to_json())?;

        let library_toml = library.to_toml();
        let voters_toml = toml::to_string(&voters).context("serializing voter pool")?;
        let stamp = Stamp::new(
            "build-dataset",
            json!({
                "refs": refs_dir,
                "library": library_path.map_or_else(|| "bundled".to_owned(), |p| p.display().to_string()),
                "voters": voters_path.map_or_else(|| "desk".to_owned(), |p| p.display().to_string()),
                "sampler": sampler,
                "out": manifest_path,
            }),
        )
        .seed("sampler", sampler.rng_seed)
        .input("refs", &refs_dir)?
        .input_digest("library", digest_bytes(library_toml.as_bytes()))
        .input_digest("voters", digest_bytes(voters_toml.as_bytes()));
        self.write_stamp(&stamp, &self.stamp_beside(&manifest_path))?;

        writeln!(
            out,
            "{} pairs ({} ties) from {} references -> {}",
            stats.pairs,
            stats.ties,
            stats.references,
            manifest_path.display()
        )
        .context("writing output")?;
        Ok(())
    }

    fn train_metric(&self, a: &TrainMetricArgs, out: &mut dyn Write) -> Result<()> {
        need(&a.manifest, "manifest")?;
        let ablation = parse_ablation(&a.ablation)?;
        let mut tc = self.cfg.train.clone();
        if let Some(v) = a.lr {
            tc.learning_rate = v;
        }
        if let Some(v) = a.batch {
            tc.batch_size = v;
        }
        if let Some(v) = a.epochs {
            tc.epochs = v;
        }
        if let Some(v) = a.split.seed {
            tc.rng_seed = v;
        }
        if let Some(v) = a.split.test_fraction {
            tc.test_fraction = v;
        }
        tc.hard_labels |= a.hard_labels || ablation.hard_labels();
        if a.keep_ties {
            tc.drop_ties = false;
        }
        tc.validate().map_err(bad_config)?;
        let ckpt_path = self.output(&a.out, "checkpoint.json")?;

        let (pairs, base) = load_labeled_pairs(&a.manifest).context("reading manifest")?;
        let id = a.backbone.backbone.as_deref().unwrap_or(&self.cfg.backbone.id);
        let weights = self.weights(&a.backbone.weights);
        let backbone = self.open(id, weights)?;
        let layers = backbone.num_layers().map_err(backbone_failure)?;
        let init = ablation.params(layers);
        let (rest, test) = holdout(&pairs, tc.test_fraction, tc.rng_seed);
        let cache = self.cache(&a.backbone);
        let report = train(&rest, &DirStore::new(base), backbone.as_ref(), cache.as_ref(), &init, &tc)
            .context("training")?;

        ensure_parent(&ckpt_path)?;
        Checkpoint::new(backbone.id(), &report.final_params)
            .save(&ckpt_path)
            .context("writing checkpoint")?;
        write_text(&sidecar(&ckpt_path, "report.json"), &report.to_json())?;
        let stamp = Stamp::new(
            "train-metric",
            json!({
                "manifest": a.manifest,
                "backbone": backbone.id(),
                "weights": weights,
                "ablation": ablation.as_str(),
                "train": tc,
                "test_pairs_held_out": test.len(),
                "out": ckpt_path,
            }),
        )
        .seed("split", tc.rng_seed)
        .input("manifest", &a.manifest)?
        .input_digest("backbone", report.backbone_checksum.clone());
        self.write_stamp(&stamp, &self.stamp_beside(&ckpt_path))?;

        for e in &report.epochs {
            writeln!(
                out,
                "epoch {}: train loss {:.6}, val loss {:.6}, val accuracy {:.4}",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy
            )
            .context("writing output")?;
        }
        writeln!(out, "checkpoint -> {}", ckpt_path.display()).context("writing output")?;
        Ok(())
    }

    fn eval_metric(&self, a: &EvalMetricArgs, out: &mut dyn Write) -> Result<()> {
        need(&a.manifest, "manifest")?;
        let (pairs, base) = load_labeled_pairs(&a.manifest).context("reading manifest")?;
        let seed = a.holdout.seed.unwrap_or(self.cfg.train.rng_seed);
        let fraction = a.holdout.test_fraction.unwrap_or(self.cfg.train.test_fraction);
        if !(0.0..1.0).contains(&fraction) {
            return Err(bad_config(format!("test fraction must be in [0, 1), got {fraction}")));
        }
        let subset = match a.split.as_str() {
            "all" => pairs,
            "test" => holdout(&pairs, fraction, seed).1,
            "train" => holdout(&pairs, fraction, seed).0,
            other => return Err(bad_config(format!("unknown split `{other}`"))),
        };

        let weights = self.weights(&a.backbone.weights);
        let learned = |m: LearnedMetric| -> Box<dyn MetricUnderTest> {
            match self.cache(&a.backbone) {
                Some(c) => Box::new(m.with_cache(c)),
                None => Box::new(m),
            }
        };
        let mut ckpt_digest = None;
        let metric: Box<dyn MetricUnderTest> = match a.metric.as_str() {
            "psnr" => Box::new(PsnrMetric),
            "ms_ssim" => Box::new(MsSsimMetric),
            "clipscore" => {
                let id = a.backbone.backbone.as_deref().unwrap_or(&self.cfg.backbone.id);
                learned(LearnedMetric::global_cosine(self.open(id, weights)?))
            }
            path => {
                let path = Path::new(path);
                need(path, "checkpoint (or unknown metric id)")?;
                let ckpt = Checkpoint::load(path).context("reading checkpoint")?;
                ckpt_digest = Some(digest_bytes(ckpt.to_json().as_bytes()));
                let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                learned(LearnedMetric::new(name, self.open(&ckpt.backbone, weights)?, ckpt.params()))
            }
        };
        let report = evaluate(metric.as_ref(), &subset, &DirStore::new(base)).context("evaluating")?;
        let mut text = serde_json::to_string_pretty(&report).context("serializing report")?;
        text.push('\n');

        let mut stamp = Stamp::new(
            "eval-metric",
            json!({
                "manifest": a.manifest,
                "metric": a.metric,
                "split": a.split,
                "test_fraction": fraction,
                "out": a.out,
            }),
        )
        .seed("split", seed)
        .input("manifest", &a.manifest)?;
        if let Some(d) = ckpt_digest {
            stamp = stamp.input_digest("checkpoint", d);
        }
        let stamp_path = match &a.out {
            Some(p) => {
                write_text(p, &text)?;
                self.stamp_beside(p)
            }
            None => self.stamp_default("eval-metric"),
        };
        self.write_stamp(&stamp, &stamp_path)?;
        write!(out, "{text}").context("writing output")?;
        Ok(())
    }

    fn score(&self, a: &ScoreArgs, out: &mut dyn Write) -> Result<()> {
        need(&a.reference, "reference image")?;
        need(&a.dist, "distorted image")?;
        need(&a.ckpt, "checkpoint")?;
        let ckpt = Checkpoint::load(&a.ckpt).context("reading checkpoint")?;
        let backbone = self.open(&ckpt.backbone, self.weights(&a.weights))?;
        let load = |p: &Path| Image::load_png(p).with_context(|| format!("reading {}", p.display()));
        let (r, d) = (load(&a.reference)?, load(&a.dist)?);
        let features = |img: &Image| backbone.extract_features(img).map_err(backbone_failure);
        let b = metric::score(&features(&r)?, &features(&d)?, &ckpt.params()).context("scoring")?;

        let stamp = Stamp::new(
            "score",
            json!({ "ref": a.reference, "dist": a.dist, "ckpt": a.ckpt, "backbone": ckpt.backbone }),
        )
        .input("ref", &a.reference)?
        .input("dist", &a.dist)?
        .input("ckpt", &a.ckpt)?
        .input_digest("backbone", backbone.param_checksum());
        self.write_stamp(&stamp, &self.stamp_default("score"))?;
        writeln!(out, "S = {:.6}", b.s).context("writing output")?;
        writeln!(out, "S_token = {:.6}, S_global = {:.6}, eta = {:.6}", b.s_token, b.s_global, b.eta)
            .context("writing output")?;
        Ok(())
    }

    fn bd_rate(&self, a: &BdRateArgs, out: &mut dyn Write) -> Result<()> {
        let curve = |p: &Path, what: &str| -> Result<RateTaskCurve> {
            need(p, what)?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RateTaskCurve::parse_csv(&text).map_err(|e| bad_config(format!("{}: {e}", p.display())))
        };
        let anchor = curve(&a.anchor, "anchor curve")?;
        let test = curve(&a.test, "test curve")?;
        let pct = bd_rate(&anchor, &test).context("computing BD-rate")?;
        let stamp = Stamp::new("bd-rate", json!({ "anchor": a.anchor, "test": a.test }))
            .input("anchor", &a.anchor)?
            .input("test", &a.test)?;
        self.write_stamp(&stamp, &self.stamp_default("bd-rate"))?;
        writeln!(out, "BD-rate = {pct:.4}%").context("writing output")?;
        Ok(())
    }

    fn stats(&self, a: &StatsArgs, out: &mut dyn Write) -> Result<()> {
        need(&a.manifest, "manifest")?;
        let manifest = DatasetManifest::load(&a.manifest).context("reading manifest")?;
        let text = DatasetStats::from_manifest(&manifest).to_json();
        let path = a.out.clone().unwrap_or_else(|| sidecar(&a.manifest, "stats.json"));
        write_text(&path, &text)?;
        let stamp = Stamp::new("stats", json!({ "manifest": a.manifest, "out": path })).input("manifest", &a.manifest)?;
        self.write_stamp(&stamp, &self.stamp_beside(&path))?;
        write!(out, "{text}").context("writing output")?;
        Ok(())
    }

    fn gen_refs(&self, a: &GenRefsArgs, out: &mut dyn Write) -> Result<()> {
        std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        let set = reference_set(a.count, a.size, a.size, a.seed);
        for (id, img) in &set {
            let p = a.out.join(format!("{id}.png"));
            img.save_png(&p).with_context(|| format!("writing {}", p.display()))?;
        }
        let stamp = Stamp::new("gen-refs", json!({ "out": a.out, "count": a.count, "size": a.size })).seed("scenes", a.seed);
        self.write_stamp(&stamp, &self.stamp_beside(&a.out))?;
        writeln!(out, "{} references -> {}", set.len(), a.out.display()).context("writing output")?;
        Ok(())
    }
}
