//! Subcommand implementations.

use crate::config::{MergerChoice, PipelineConfig};
use crate::io::{self, SampleFiles};
use crate::selftest::{self, Check};
use crate::{CliError, Command, CommonArgs};
use log::{debug, info, warn};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use vsr_core::autodiff::gradcheck::gradient_suite;
use vsr_core::cmm::{merge_training_pairs, train_merger, Merger, MergerModel};
use vsr_core::germ::{train_germ, GermModel};
use vsr_core::metrics::{evaluate, MetricReport};
use vsr_core::pipeline::{labeled_graphs, rehabilitate, Judge};
use vsr_core::raster::{BinaryMask, GrayImage};
use vsr_core::synth::generate_sample_retrying;

/// Defaults, then the `--config` file, then flags.
pub fn resolve_config(command: &str, args: &CommonArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &args.config {
        let text = String::from_utf8(io::read(path)?).map_err(|_| CliError::Input {
            path: path.clone(),
            message: "config is not UTF-8".into(),
        })?;
        cfg.apply_text(&text)?;
    }
    let stage = match command {
        "train-germ" => Some("germ"),
        "train-cmm" => Some("cmm"),
        _ => None,
    };
    let mut pairs: Vec<(&str, String)> = Vec::new();
    let plain = [
        ("seed", &args.seed),
        ("threads", &args.threads),
        ("merger", &args.merger),
        ("k", &args.k),
        ("tau", &args.tau),
        ("gcn_layers", &args.gcn_layers),
        ("heads", &args.heads),
        ("samples", &args.samples),
    ];
    for (key, v) in plain {
        if let Some(v) = v {
            pairs.push((key, v.clone()));
        }
    }
    let staged = [("epochs", &args.epochs), ("lr", &args.lr), ("batch", &args.batch)];
    for (flag, v) in staged {
        let Some(v) = v else { continue };
        let Some(stage) = stage else {
            return Err(CliError::Config {
                key: flag.into(),
                message: "only train-germ and train-cmm take training flags".into(),
            });
        };
        let key = match (stage, flag) {
            ("germ", "epochs") => "germ_epochs",
            ("germ", "lr") => "germ_lr",
            ("germ", _) => "germ_batch",
            (_, "epochs") => "cmm_epochs",
            (_, "lr") => "cmm_lr",
            _ => "cmm_batch",
        };
        pairs.push((key, v.clone()));
    }
    cfg.apply_pairs(&pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &'static str) -> Result<&'a Path, CliError> {
    v.as_deref().ok_or(CliError::MissingFlag(flag))
}

fn header(command: &str, cfg: &PipelineConfig) -> String {
    format!("vsr {command} seed={}", cfg.seed)
}

pub fn dispatch(command: &Command) -> Result<(), CliError> {
    let (name, args) = match command {
        Command::Synth(a) => ("synth", a),
        Command::TrainGerm(a) => ("train-germ", a),
        Command::TrainCmm(a) => ("train-cmm", a),
        Command::Rehab(a) => ("rehab", a),
        Command::Eval(a) => ("eval", a),
        Command::Selftest(a) => ("selftest", a),
    };
    let cfg = resolve_config(name, args)?;
    debug!("{name}: {cfg:?}");
    match command {
        Command::Synth(_) => synth(args, &cfg),
        Command::TrainGerm(_) => train_germ_cmd(args, &cfg),
        Command::TrainCmm(_) => train_cmm_cmd(args, &cfg),
        Command::Rehab(_) => rehab(args, &cfg),
        Command::Eval(_) => eval(args, &cfg),
        Command::Selftest(_) => run_selftest(&cfg),
    }
}

fn pgm_with_comment(img: &GrayImage, comment: &str) -> Vec<u8> {
    let body = img.encode_pgm();
    let mut out = b"P5\n".to_vec();
    out.extend(format!("# {comment}\n").bytes());
    out.extend(&body[3..]);
    out
}

fn synth(args: &CommonArgs, cfg: &PipelineConfig) -> Result<(), CliError> {
    let out = required(&args.out, "out")?;
    let synth = cfg.synth();
    let mut manifest = format!("# {}\nsample\tbranchings\tgaps\n", header("synth", cfg));
    for i in 0..cfg.samples {
        let (sample, image) = generate_sample_retrying(&synth, i as u64).map_err(CliError::runtime)?;
        let key = io::sample_key(i);
        let head = format!("{} index={i}", header("synth", cfg));
        io::write_mask(&out.join(format!("{key}{}", io::CLEAN_SUFFIX)), &sample.clean, &head)?;
        io::write_mask(
            &out.join(format!("{key}{}", io::RUPTURED_SUFFIX)),
            &sample.ruptured,
            &head,
        )?;
        io::write(
            &out.join(format!("{key}{}", io::IMAGE_SUFFIX)),
            &pgm_with_comment(&image, &head),
        )?;
        writeln!(manifest, "{key}\t{}\t{}", sample.branchings, sample.gaps.len()).expect("string write");
    }
    io::write(&out.join("manifest.tsv"), manifest.as_bytes())?;
    info!("wrote {} samples to {}", cfg.samples, out.display());
    Ok(())
}

fn load_pair(s: &SampleFiles) -> Result<(BinaryMask, BinaryMask, Option<GrayImage>), CliError> {
    let image = s.image.as_deref().map(io::read_image).transpose()?;
    Ok((io::read_mask(&s.ruptured)?, io::read_mask(&s.clean)?, image))
}

fn loss_trace(command: &str, cfg: &PipelineConfig, losses: &[f64]) -> String {
    let mut out = format!("# {}\nepoch\tloss\n", header(command, cfg));
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{}\t{l:.9}", i + 1).expect("string write");
    }
    out
}

fn trace_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".loss.tsv");
    PathBuf::from(name)
}

fn train_germ_cmd(args: &CommonArgs, cfg: &PipelineConfig) -> Result<(), CliError> {
    let input = required(&args.input, "in")?;
    let out = required(&args.out, "out")?;
    let mut graphs = Vec::new();
    for s in io::list_samples(input)? {
        let (ruptured, clean, _) = load_pair(&s)?;
        graphs.extend(labeled_graphs(&ruptured, &clean, &cfg.ccm()).map_err(CliError::runtime)?);
        if cfg.max_graphs > 0 && graphs.len() >= cfg.max_graphs {
            graphs.truncate(cfg.max_graphs);
            break;
        }
    }
    info!("training edge classifier on {} graphs", graphs.len());
    let (model, report) = train_germ(&graphs, cfg.germ(), &cfg.germ_train()).map_err(CliError::runtime)?;
    io::write(out, &model.to_bytes())?;
    io::write(
        &trace_path(out),
        loss_trace("train-germ", cfg, &report.losses).as_bytes(),
    )
}

fn train_cmm_cmd(args: &CommonArgs, cfg: &PipelineConfig) -> Result<(), CliError> {
    let input = required(&args.input, "in")?;
    let out = required(&args.out, "out")?;
    let mut pairs = Vec::new();
    for s in io::list_samples(input)? {
        let (ruptured, clean, image) = load_pair(&s)?;
        pairs.extend(merge_training_pairs(&ruptured, &clean, image.as_ref(), &cfg.ccm()).map_err(CliError::runtime)?);
    }
    info!("training merger on {} cluster crops", pairs.len());
    let (model, report) = train_merger(&pairs, cfg.merger(), &cfg.merger_train()).map_err(CliError::runtime)?;
    io::write(out, &model.to_bytes())?;
    io::write(
        &trace_path(out),
        loss_trace("train-cmm", cfg, &report.losses).as_bytes(),
    )
}

struct Models {
    germ: Option<GermModel>,
    merger: Option<MergerModel>,
}

impl Models {
    fn load(args: &CommonArgs, cfg: &PipelineConfig) -> Result<Self, CliError> {
        let germ = match &args.germ {
            Some(p) => Some(GermModel::from_bytes(&io::read(p)?).map_err(|e| CliError::Input {
                path: p.clone(),
                message: e.to_string(),
            })?),
            None => {
                warn!("no --germ checkpoint; every candidate edge is kept");
                None
            }
        };
        let merger = match cfg.merger {
            MergerChoice::Geometric => None,
            MergerChoice::Learned => {
                let p = required(&args.cmm, "cmm")?;
                Some(MergerModel::from_bytes(&io::read(p)?).map_err(|e| CliError::Input {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?)
            }
        };
        Ok(Self { germ, merger })
    }

    fn judge(&self, cfg: &PipelineConfig) -> Judge<'_> {
        match &self.germ {
            Some(model) => Judge::Model {
                model,
                threshold: cfg.threshold,
            },
            None => Judge::KeepAll,
        }
    }

    fn merger(&self) -> Merger<'_> {
        match &self.merger {
            Some(m) => Merger::Learned(m),
            None => Merger::Geometric,
        }
    }
}

fn rehab_one(
    mask_path: &Path,
    image_path: Option<&Path>,
    out: &Path,
    probs_out: &Path,
    models: &Models,
    cfg: &PipelineConfig,
) -> Result<(), CliError> {
    let mask = io::read_mask(mask_path)?;
    let image = image_path.map(io::read_image).transpose()?;
    let r = rehabilitate(
        &mask,
        image.as_ref(),
        models.judge(cfg),
        models.merger(),
        &cfg.ccm(),
        cfg.threads,
    )
    .map_err(CliError::runtime)?;
    io::write_mask(out, &r.mask, &header("rehab", cfg))?;
    io::write(probs_out, &io::encode_probabilities(mask.dims(), &r.probabilities))
}

fn rehab(args: &CommonArgs, cfg: &PipelineConfig) -> Result<(), CliError> {
    let input = required(&args.input, "in")?;
    let out = required(&args.out, "out")?;
    let models = Models::load(args, cfg)?;
    if input.is_dir() {
        let samples = io::list_samples(input)?;
        for s in &samples {
            rehab_one(
                &s.ruptured,
                s.image.as_deref(),
                &out.join(format!("{}{}", s.key, io::REHAB_SUFFIX)),
                &out.join(format!("{}{}", s.key, io::PROB_SUFFIX)),
                &models,
                cfg,
            )?;
        }
        info!("rehabilitated {} samples into {}", samples.len(), out.display());
        return Ok(());
    }
    rehab_one(
        input,
        args.image.as_deref(),
        out,
        &out.with_extension("prob"),
        &models,
        cfg,
    )
}

fn load_probs(path: &Path, mask: &BinaryMask) -> Result<Vec<f64>, CliError> {
    let (dims, values) = io::decode_probabilities(path)?;
    if dims != mask.dims() {
        return Err(CliError::Input {
            path: path.to_path_buf(),
            message: format!("dims {dims:?} do not match the prediction {:?}", mask.dims()),
        });
    }
    Ok(values)
}

fn eval_one(pred: &Path, gt: &Path, probs: Option<&Path>) -> Result<MetricReport, CliError> {
    let p = io::read_mask(pred)?;
    let g = io::read_mask(gt)?;
    let probs = probs.map(|path| load_probs(path, &p)).transpose()?;
    evaluate(&p, &g, probs.as_deref()).map_err(|e| CliError::Input {
        path: pred.to_path_buf(),
        message: e.to_string(),
    })
}

/// TSV with one row per sample and a trailing mean row.
pub fn report_table(command_header: &str, rows: &[(String, MetricReport)]) -> String {
    let mut out = format!("# {command_header}\nsample");
    for c in MetricReport::COLUMNS {
        write!(out, "\t{c}").expect("string write");
    }
    out.push('\n');
    let mut line = |name: &str, r: &MetricReport| {
        out.push_str(name);
        for v in r.values() {
            write!(out, "\t{v:.6}").expect("string write");
        }
        out.push('\n');
    };
    for (name, r) in rows {
        line(name, r);
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(mean) = MetricReport::mean(&reports) {
        line("mean", &mean);
    }
    out
}

fn eval(args: &CommonArgs, cfg: &PipelineConfig) -> Result<(), CliError> {
    let pred = required(&args.pred, "pred")?;
    let gt = required(&args.gt, "gt")?;
    let mut rows = Vec::new();
    if gt.is_dir() {
        for s in io::list_samples(gt)? {
            let rehab = pred.join(format!("{}{}", s.key, io::REHAB_SUFFIX));
            let (p, probs) = if rehab.is_file() {
                let probs = pred.join(format!("{}{}", s.key, io::PROB_SUFFIX));
                (rehab, probs.is_file().then_some(probs))
            } else {
                (pred.join(format!("{}{}", s.key, io::RUPTURED_SUFFIX)), None)
            };
            rows.push((s.key.clone(), eval_one(&p, &s.clean, probs.as_deref())?));
        }
    } else {
        let name = pred
            .file_name()
            .map_or("pred".into(), |n| n.to_string_lossy().into_owned());
        rows.push((name, eval_one(pred, gt, args.probs.as_deref())?));
    }
    let table = report_table(&header("eval", cfg), &rows);
    match &args.out {
        Some(out) => io::write(out, table.as_bytes()),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn run_selftest(cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut checks = selftest::run_all(cfg.seed);
    match gradient_suite(20, cfg.seed) {
        Ok(reports) => {
            for r in reports {
                checks.push(Check {
                    name: format!("gradient_{}", r.op),
                    passed: r.max_error <= 1e-3,
                    detail: format!("{} cases, max relative error {:.3e}", r.cases, r.max_error),
                });
            }
        }
        Err(e) => checks.push(Check {
            name: "gradient_suite".into(),
            passed: false,
            detail: e.to_string(),
        }),
    }
    for c in &checks {
        println!("{c}");
    }
    match checks.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        n => Err(CliError::SelfTest(n)),
    }
}
