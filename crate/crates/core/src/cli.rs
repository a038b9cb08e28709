//! `vatlab` subcommands: synth, train, eval and perturb.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::config::Config;
use crate::data::{self, gen_blob_images, gen_moons, read_points, write_points, Dataset, SyntheticKind};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelSpec, ParameterSet};
use crate::rng::Rng;
use crate::tensor::{Tensor, MIN_DIRECTION_NORM};
use crate::train::{evaluate, format_metrics, format_summary, run_protocol, ProtocolSummary};
use crate::vat::{estimate_r_adv, lds_value};

pub const CONFIG_ECHO: &str = "config.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const EVAL_FILE: &str = "eval.txt";
pub const PERTURB_FILE: &str = "perturb.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const POINTS_FILE: &str = "points.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Eval,
    Perturb,
}

impl std::str::FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(Command::Synth),
            "train" => Ok(Command::Train),
            "eval" => Ok(Command::Eval),
            "perturb" => Ok(Command::Perturb),
            other => Err(Error::Config(format!(
                "unknown command `{other}` (expected synth, train, eval or perturb)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub command: Command,
    pub config: Config,
    pub out: PathBuf,
    pub force: bool,
}

pub fn usage() -> String {
    format!(
        "usage: vatlab <synth|train|eval|perturb> --out <dir> [--config <path>] [--force] [--key value]...\n\nkeys:\n{}",
        Config::describe()
    )
}

/// Parses everything after the program name.
pub fn parse_args(args: &[String]) -> Result<Invocation> {
    let mut it = args.iter();
    let command: Command = it
        .next()
        .ok_or_else(|| Error::Config("missing command".into()))?
        .parse()?;
    let mut config_path = None;
    let mut out = None;
    let mut force = false;
    let mut overrides = Vec::new();
    while let Some(arg) = it.next() {
        let Some(name) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument `{arg}`")));
        };
        if name == "force" {
            force = true;
            continue;
        }
        let value = it
            .next()
            .ok_or_else(|| Error::Config(format!("flag `--{name}` needs a value")))?;
        match name {
            "config" => config_path = Some(PathBuf::from(value)),
            "out" => out = Some(PathBuf::from(value)),
            key if Config::is_known(key) => overrides.push((key.to_string(), value.clone())),
            key => return Err(Error::Config(format!("unknown flag `--{key}`"))),
        }
    }
    let out = out.ok_or_else(|| Error::Config("missing `--out <dir>`".into()))?;
    let config = Config::resolve(config_path.as_deref(), &overrides)?;
    Ok(Invocation {
        command,
        config,
        out,
        force,
    })
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    if args.is_empty() || matches!(args[0].as_str(), "help" | "--help" | "-h") {
        print!("{}", usage());
        return if args.is_empty() { 2 } else { 0 };
    }
    match parse_args(args).and_then(|inv| execute(&inv)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(inv: &Invocation) -> Result<()> {
    prepare_out_dir(&inv.out, inv.force)?;
    write_file(&inv.out.join(CONFIG_ECHO), inv.config.echo().as_bytes())?;
    match inv.command {
        Command::Synth => cmd_synth(&inv.config, &inv.out),
        Command::Train => {
            let summary = cmd_train(&inv.config, &inv.out)?;
            print!("{}", format_summary(&summary));
            Ok(())
        }
        Command::Eval => {
            let acc = cmd_eval(&inv.config, &inv.out)?;
            println!("accuracy={acc:.4}");
            Ok(())
        }
        Command::Perturb => {
            let report = cmd_perturb(&inv.config, &inv.out)?;
            print!("{}", report.render());
            Ok(())
        }
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(cfg: &Config, out: &Path) -> Result<()> {
    let spec = cfg.synth_spec()?;
    match spec.kind {
        SyntheticKind::Moons => {
            let data = gen_moons(&spec)?;
            write_points(out.join(POINTS_FILE), &data)?;
            log::info!("wrote {} points to {}", data.len(), out.join(POINTS_FILE).display());
        }
        SyntheticKind::BlobImages => {
            let data = gen_blob_images(&spec)?;
            let mut manifest = data::Manifest::default();
            for (i, &label) in data.labels.iter().enumerate() {
                let name = PathBuf::from(format!("img_{i:05}.pgm"));
                let image = Tensor::new(&[1, spec.side, spec.side], data.samples.item(i).to_vec())?;
                data::write_pgm(&image, out.join(&name))?;
                manifest.records.push(data::ManifestRecord { path: name, label });
            }
            data::write_manifest(out.join(MANIFEST_FILE), &manifest)?;
            log::info!("wrote {} images to {}", data.len(), out.display());
        }
    }
    Ok(())
}

/// Loads the point table if `data.points` is set, else the image manifest.
pub fn load_dataset(cfg: &Config) -> Result<Dataset> {
    let data = if let Some(points) = cfg.text("data.points") {
        read_points(points)?
    } else if let Some(manifest) = cfg.text("data.manifest") {
        data::load_image_dataset(manifest)?
    } else {
        return Err(Error::Config("set data.manifest or data.points".into()));
    };
    if data.is_empty() {
        return Err(Error::Data("no samples in dataset".into()));
    }
    Ok(data)
}

pub fn metrics_file(repeat: usize) -> String {
    format!("metrics_{repeat}.csv")
}

pub fn checkpoint_file(repeat: usize) -> String {
    format!("model_{repeat}.vatm")
}

pub fn cmd_train(cfg: &Config, out: &Path) -> Result<ProtocolSummary> {
    let train = cfg.train_config()?;
    let data = load_dataset(cfg)?;
    let summary = run_protocol(&train, &data)?;
    for (i, run) in summary.runs.iter().enumerate() {
        write_file(&out.join(metrics_file(i + 1)), format_metrics(&run.metrics).as_bytes())?;
        save_checkpoint(out.join(checkpoint_file(i + 1)), &run.model.params)?;
    }
    write_file(&out.join(SUMMARY_FILE), format_summary(&summary).as_bytes())?;
    Ok(summary)
}

fn load_model(cfg: &Config, checkpoint: &str, spec: ModelSpec) -> Result<Model> {
    let named = load_checkpoint(checkpoint)?;
    let params = ParameterSet::from_named(&spec, named)
        .map_err(|e| Error::Checkpoint(format!("{checkpoint} does not fit model.kind {}: {e}", cfg.model_kind())))?;
    Ok(Model { spec, params })
}

pub fn cmd_eval(cfg: &Config, out: &Path) -> Result<f64> {
    let checkpoint = cfg
        .text("eval.checkpoint")
        .ok_or_else(|| Error::Config("eval needs eval.checkpoint".into()))?;
    let data = load_dataset(cfg)?;
    let spec = cfg.train_config()?.model_spec(&data)?;
    let model = load_model(cfg, checkpoint, spec)?;
    let acc = evaluate(&model, &data.samples, &data.labels)?;
    write_file(&out.join(EVAL_FILE), format!("accuracy={acc:.4}\n").as_bytes())?;
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbReport {
    pub lds: f64,
    /// Largest absolute entry of the unit direction; 0 when degenerate.
    pub noise_max: f64,
    pub epsilon: f64,
    pub degenerate: bool,
}

impl PerturbReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lds={:e}", self.lds);
        let _ = writeln!(s, "noise_max={:e}", self.noise_max);
        let _ = writeln!(s, "epsilon={}", self.epsilon);
        let _ = writeln!(s, "degenerate={}", self.degenerate);
        s
    }
}

/// Maps a direction to `[0, 1]` symmetric about 0.5 using `m = max |v|`.
pub fn encode_noise(direction: &Tensor, m: f64) -> Tensor {
    if m <= MIN_DIRECTION_NORM {
        return Tensor::full(direction.dims(), 0.5);
    }
    direction.map(|v| ((v + m) / (2.0 * m)).clamp(0.0, 1.0))
}

pub fn cmd_perturb(cfg: &Config, out: &Path) -> Result<PerturbReport> {
    let kind = cfg.model_kind();
    if !kind.is_cnn() {
        return Err(Error::Config(format!("perturb needs a CNN model.kind, got {kind}")));
    }
    let checkpoint = cfg
        .text("perturb.checkpoint")
        .ok_or_else(|| Error::Config("perturb needs perturb.checkpoint".into()))?;
    let image_path = cfg
        .text("perturb.image")
        .ok_or_else(|| Error::Config("perturb needs perturb.image".into()))?;
    let vat = cfg.vat_config()?;
    let image = data::read_pgm(image_path)?;
    let &[_, h, w] = image.dims() else {
        unreachable!("read_pgm returns (1, H, W)")
    };
    let x = image.reshape(&[1, 1, h, w])?;
    let mut spec = ModelSpec::new(kind, 1, 2);
    spec.leaky_slope = cfg.real("model.leaky_slope");
    spec.check_input(x.dims())?;
    let model = load_model(cfg, checkpoint, spec)?;

    let mut rng = Rng::new(cfg.seed("train.seed"));
    let found = estimate_r_adv(&model, &x, &vat, &mut rng)?;
    let mut m = found.direction.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let degenerate = found.degenerate[0] || m <= MIN_DIRECTION_NORM;
    let direction = if degenerate {
        log::warn!("adversarial direction is degenerate; writing a flat noise image");
        m = 0.0;
        Tensor::zeros(x.dims())
    } else {
        found.direction
    };

    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let lds = lds_value(&mut g, &model, &bound, &x, &direction, &vat)?;
    let lds = g.value(lds).data()[0];

    let perturbed = x.add_scaled(&direction, vat.epsilon)?.map(|v| v.clamp(0.0, 1.0));
    let image_dims = [1, h, w];
    data::write_pgm(&image, out.join("original.pgm"))?;
    data::write_pgm(&encode_noise(&direction, m).reshape(&image_dims)?, out.join("noise.pgm"))?;
    data::write_pgm(&perturbed.reshape(&image_dims)?, out.join("perturbed.pgm"))?;
    let report = PerturbReport {
        lds,
        noise_max: m,
        epsilon: vat.epsilon,
        degenerate,
    };
    write_file(&out.join(PERTURB_FILE), report.render().as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn parses_flags_and_overrides() {
        let inv = parse_args(&args("train --out runs/a --vat.alpha 0.5 --force")).unwrap();
        assert_eq!(inv.command, Command::Train);
        assert_eq!(inv.out, PathBuf::from("runs/a"));
        assert!(inv.force);
        assert_eq!(inv.config.real("vat.alpha"), 0.5);
    }

    #[test]
    fn rejects_bad_arguments() {
        for bad in [
            "",
            "fit --out x",
            "train",
            "train --out",
            "train --out x --foo.bar 1",
            "train --out x stray",
            "train --out x --train.lr abc",
        ] {
            assert!(parse_args(&args(bad)).is_err(), "{bad}");
        }
        let msg = parse_args(&args("train --out x --foo.bar 1")).unwrap_err().to_string();
        assert!(msg.contains("foo.bar"));
    }

    #[test]
    fn noise_encoding_is_symmetric() {
        let d = Tensor::new(&[1, 4], vec![-0.5, 0.0, 0.25, 0.5]).unwrap();
        let enc = encode_noise(&d, 0.5);
        assert_eq!(enc.data(), &[0.0, 0.5, 0.75, 1.0]);
        assert!(encode_noise(&d, 0.0).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn refuses_non_empty_out_dir() {
        let dir = tempfile::tempdir().unwrap();
        prepare_out_dir(dir.path(), false).unwrap();
        std::fs::write(dir.path().join("x"), "1").unwrap();
        assert!(prepare_out_dir(dir.path(), false).is_err());
        prepare_out_dir(dir.path(), true).unwrap();
    }
}
