use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde_json::json;

use polarfuse::checkpoint::Archive;
use polarfuse::data::{
    generate_synthetic_dataset, generate_synthetic_raw, load_samples, make_split, preprocess_dataset, sample_path,
    scan_dataset, training_pairs, LoadedSample, PreprocessConfig, Protocol, ProtocolSplit, RawSyntheticConfig,
    SampleRecord, SyntheticConfig,
};
use polarfuse::embeddings::IdentityExtractor;
use polarfuse::evaluation::{
    evaluate_pairs, render_roc_png, write_metrics_json, write_roc_csv, write_scores_csv, EvalImage, MetricsSummary,
};
use polarfuse::experiment::{
    format_table, run_ablation, standard_variants, synthesize_samples, write_table_csv, Variant,
};
use polarfuse::generator::{FusionMode, Generator};
use polarfuse::nn::Precision;
use polarfuse::polarimetry::{read_png16, write_png16};
use polarfuse::training::{self, TrainConfig};

use crate::config::layered;
use crate::manifest::Run;
use crate::{
    AblateArgs, EvaluateArgs, FusionArg, GenSyntheticArgs, InputError, PrecisionArg, Preset, PreprocessArgs,
    ProbeKind, ProtocolArg, Side, SplitArgs, SynthesizeArgs, TrainArgs, TrainFlags,
};

const SYNTH_CHUNK: usize = 32;

fn input_err(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn resolve_train_config(flags: &TrainFlags) -> anyhow::Result<TrainConfig> {
    let preset = match flags.preset.unwrap_or(Preset::Default) {
        Preset::Default => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
        Preset::Toy => TrainConfig::toy(),
    };
    let mut c = layered(preset, flags.config.as_deref())?;
    macro_rules! set {
        ($flag:ident => $($field:ident).+) => {
            if let Some(v) = flags.$flag {
                c.$($field).+ = v;
            }
        };
    }
    set!(iterations => iterations);
    set!(batch_size => batch_size);
    set!(learning_rate => learning_rate);
    set!(seed => seed);
    set!(resolution => resolution);
    set!(lambda_a => weights.lambda_a);
    set!(lambda_p => weights.lambda_p);
    set!(lambda_i => weights.lambda_i);
    set!(checkpoint_interval => checkpoint_interval);
    if let Some(g) = flags.grad_clip {
        c.grad_clip = Some(g);
    }
    if let Some(p) = flags.precision {
        c.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    let overrides = Variant {
        name: "flags".into(),
        fusion_mode: flags.fusion_mode.map(|f| match f {
            FusionArg::Input => FusionMode::Input,
            FusionArg::Feature => FusionMode::Feature,
            FusionArg::Output => FusionMode::Output,
        }),
        stokes_channels: flags.stokes_channels.clone(),
        loss_subset: flags.loss_subset,
    };
    let c = overrides.apply(&c).map_err(|e| input_err(e.to_string()))?;
    Ok(c)
}

fn scan(root: &Path) -> anyhow::Result<Vec<SampleRecord>> {
    if !root.is_dir() {
        return Err(input_err(format!("dataset directory {} does not exist", root.display())));
    }
    let report = scan_dataset(root)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if !report.errors.is_empty() {
        return Err(input_err(format!(
            "{} unreadable entries in {}, first: {}",
            report.errors.len(),
            root.display(),
            report.errors[0]
        )));
    }
    if report.records.is_empty() {
        return Err(input_err(format!("no complete samples under {}", root.display())));
    }
    Ok(report.records)
}

fn resolve_split(
    records: &[SampleRecord],
    args: &SplitArgs,
    default: Option<ProtocolArg>,
) -> anyhow::Result<Option<ProtocolSplit>> {
    if let Some(path) = &args.split {
        return Ok(Some(ProtocolSplit::load(path).with_context(|| format!("reading split {}", path.display()))?));
    }
    let Some(protocol) = args.protocol.or(default) else { return Ok(None) };
    let protocol = match protocol {
        ProtocolArg::Protocol1 => Protocol::Protocol1,
        ProtocolArg::Protocol2 => Protocol::Protocol2,
        ProtocolArg::Custom => Protocol::Custom { train_fraction: args.train_fraction },
    };
    Ok(Some(make_split(records, protocol, args.split_seed)?))
}

fn check_resolution(samples: &[LoadedSample], resolution: usize) -> anyhow::Result<()> {
    if let Some(s) = samples.iter().find(|s| s.stokes.dim().1 != resolution || s.stokes.dim().2 != resolution) {
        let (_, h, w) = s.stokes.dim();
        return Err(input_err(format!(
            "{} is {h}x{w} but the configuration expects {resolution}x{resolution}",
            s.record.id()
        )));
    }
    Ok(())
}

pub fn preprocess(a: PreprocessArgs) -> anyhow::Result<()> {
    let config = PreprocessConfig { crop_height: a.crop_height, crop_width: a.crop_width, stokes_scale: a.stokes_scale };
    if !a.raw.is_dir() {
        return Err(input_err(format!("raw directory {} does not exist", a.raw.display())));
    }
    let mut run = Run::start("preprocess", &a.out, serde_json::to_value(&config)?, None)?;
    let result = (|| -> anyhow::Result<()> {
        run.input("raw", &a.raw);
        run.input("annotations", &a.annotations);
        let report = preprocess_dataset(&a.raw, &a.annotations, &a.out, &config)?;
        let path = a.out.join("preprocess_report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        run.output("dataset", &a.out);
        run.output("report", &path);
        log::info!(
            "{} processed, {} skipped, {} failed, {} clamped pixels",
            report.processed.len(),
            report.skipped.len(),
            report.failed.len(),
            report.clamped_pixels
        );
        if !report.failed.is_empty() {
            return Err(input_err(format!("{} captures failed, first: {}", report.failed.len(), report.failed[0])));
        }
        if report.processed.is_empty() {
            return Err(input_err(format!("no captures processed from {}", a.raw.display())));
        }
        Ok(())
    })();
    run.finish(result)
}

pub fn gen_synthetic(a: GenSyntheticArgs) -> anyhow::Result<()> {
    if a.raw {
        let annotations = a.annotations.as_deref().expect("clap requires annotations with raw");
        let config = RawSyntheticConfig {
            num_subjects: a.subjects,
            samples_per_subject: a.samples,
            frame_size: a.frame_size.unwrap_or(a.resolution * 5 / 4),
            bad_pixel_fraction: a.bad_pixel_fraction,
            seed: a.seed,
        };
        let mut run = Run::start("gen-synthetic", &a.out, serde_json::to_value(config)?, Some(a.seed))?;
        let result = (|| -> anyhow::Result<()> {
            let n = generate_synthetic_raw(&a.out, annotations, &config)?;
            run.output("raw", &a.out);
            run.output("annotations", annotations);
            log::info!("wrote {n} raw captures");
            Ok(())
        })();
        return run.finish(result);
    }
    let config =
        SyntheticConfig { num_subjects: a.subjects, samples_per_subject: a.samples, resolution: a.resolution, seed: a.seed };
    let mut run = Run::start("gen-synthetic", &a.out, serde_json::to_value(config)?, Some(a.seed))?;
    let result = (|| -> anyhow::Result<()> {
        let records = generate_synthetic_dataset(&a.out, &config)?;
        run.output("dataset", &a.out);
        log::info!("wrote {} samples", records.len());
        Ok(())
    })();
    run.finish(result)
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let config = resolve_train_config(&a.flags)?;
    let mut run = Run::start("train", &a.out, serde_json::to_value(&config)?, Some(config.seed))?;
    let result = (|| -> anyhow::Result<()> {
        run.input("data", &a.data);
        let mut records = scan(&a.data)?;
        if let Some(split) = resolve_split(&records, &a.split, None)? {
            let path = a.out.join("split.json");
            split.save(&path)?;
            run.output("split", &path);
            records = split.select(&records).0;
        }
        let samples = load_samples(&records)?;
        check_resolution(&samples, config.resolution)?;
        let pairs = training_pairs(&samples, config.dtype())?;
        drop(samples);
        let outcome = training::train(&config, &pairs, &a.out, a.resume)?;
        run.output("checkpoint", &outcome.checkpoint);
        run.output("log", &outcome.log);
        if let Some(f) = &outcome.finetune {
            log::info!(
                "identity fine-tune accuracy {:.3} -> {:.3} over {} classes",
                f.accuracy_before,
                f.accuracy_after,
                f.classes.len()
            );
        }
        Ok(())
    })();
    run.finish(result)
}

/// Stokes channels a checkpoint's generator was trained on.
fn checkpoint_channels(archive: &Archive, generator: &Generator, flag: Option<&[usize]>) -> anyhow::Result<Vec<usize>> {
    if let Some(c) = flag {
        return Ok(c.to_vec());
    }
    if archive.kind() == Some(training::ARCHIVE_KIND) {
        let config: TrainConfig = archive.get_json("train_config")?;
        return Ok(config.stokes_channels);
    }
    if generator.config().total_input_channels() == 3 {
        return Ok(vec![0, 1, 2]);
    }
    Err(input_err("generator archive does not record its Stokes channels; pass --stokes-channels"))
}

pub fn synthesize(a: SynthesizeArgs) -> anyhow::Result<()> {
    let archive = Archive::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let generator = Generator::read_from(&archive, "generator")?;
    let channels = checkpoint_channels(&archive, &generator, a.stokes_channels.as_deref())?;
    let config = json!({ "stokes_channels": channels, "side": format!("{:?}", a.side).to_lowercase() });
    let mut run = Run::start("synthesize", &a.out, config, None)?;
    let result = (|| -> anyhow::Result<()> {
        run.input("checkpoint", &a.checkpoint);
        run.input("data", &a.input);
        let mut records = scan(&a.input)?;
        if let Some(path) = &a.split {
            run.input("split", path);
            let split = ProtocolSplit::load(path)?;
            let (train, test) = split.select(&records);
            records = match a.side {
                Side::Train => train,
                Side::Test => test,
                Side::All => [train, test].concat(),
            };
        }
        let (mut written, mut clamped) = (0, 0);
        for chunk in records.chunks(SYNTH_CHUNK) {
            let samples = load_samples(chunk)?;
            for (s, img) in samples.iter().zip(synthesize_samples(&generator, &channels, &samples)?) {
                let path = sample_path(&a.out, &s.record.subject_id, s.record.sample_index, "syn");
                clamped += write_png16(&img.image, &path)?.clamped;
                written += 1;
            }
        }
        run.output("images", &a.out);
        log::info!("wrote {written} images ({clamped} clamped values)");
        Ok(())
    })();
    run.finish(result)
}

fn write_per_image(path: &Path, rows: &[(String, polarfuse::evaluation::MetricReport)]) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "id,psnr_db,ssim")?;
    for (id, m) in rows {
        writeln!(f, "{id},{},{}", m.psnr_db, m.ssim)?;
    }
    f.flush()?;
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let kind = match a.probe_kind {
        ProbeKind::Syn => "syn",
        ProbeKind::Vis => "vis",
        ProbeKind::S0 => "s0",
    };
    let config = json!({ "probe_kind": kind, "pairing": a.pairing, "roc_size": a.roc_size });
    let mut run = Run::start("evaluate", &a.out, config, None)?;
    let result = (|| -> anyhow::Result<()> {
        run.input("synth", &a.synth);
        run.input("target", &a.target);
        run.input("extractor", &a.extractor);
        let identity = IdentityExtractor::load(&a.extractor)
            .with_context(|| format!("loading extractor {}", a.extractor.display()))?;
        let records = scan(&a.target)?;
        let (mut probes, mut targets) = (Vec::new(), Vec::new());
        for r in &records {
            let path = sample_path(&a.synth, &r.subject_id, r.sample_index, kind);
            if !path.exists() {
                continue;
            }
            probes.push(EvalImage { id: r.id(), subject: r.subject_id.clone(), image: read_png16(&path)? });
            targets.push(EvalImage { id: r.id(), subject: r.subject_id.clone(), image: read_png16(&r.visible)? });
        }
        if probes.is_empty() {
            return Err(input_err(format!("no `{kind}` probes in {} match targets", a.synth.display())));
        }
        if probes.len() < records.len() {
            log::warn!("{} of {} targets have no probe", records.len() - probes.len(), records.len());
        }
        let report = evaluate_pairs(&probes, &targets, &identity, a.pairing)?;
        let outputs = [
            ("metrics", "metrics.json"),
            ("per_image", "per_image.csv"),
            ("scores", "scores.csv"),
            ("roc", "roc.csv"),
            ("roc_plot", "roc.png"),
        ];
        let path = |file: &str| a.out.join(file);
        write_metrics_json(&MetricsSummary::from(&report), &path("metrics.json"))?;
        write_per_image(&path("per_image.csv"), &report.per_image)?;
        write_scores_csv(&report.scores, &path("scores.csv"))?;
        write_roc_csv(&report.roc, &path("roc.csv"))?;
        render_roc_png(&report.roc, a.roc_size, &path("roc.png"))?;
        for (key, file) in outputs {
            run.output(key, &path(file));
        }
        log::info!(
            "psnr {:.2} dB, ssim {:.4}, eer {:.4}, auc {:.4} over {} probes",
            report.mean.psnr_db,
            report.mean.ssim,
            report.roc.eer,
            report.roc.auc,
            probes.len()
        );
        Ok(())
    })();
    run.finish(result)
}

fn select_variants(a: &AblateArgs) -> anyhow::Result<Vec<Variant>> {
    if let Some(path) = &a.variants {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return serde_json::from_str(&text).map_err(|e| input_err(format!("variants {}: {e}", path.display())));
    }
    let standard = standard_variants();
    if a.variant.is_empty() {
        return Ok(standard);
    }
    a.variant
        .iter()
        .map(|name| {
            standard.iter().find(|v| &v.name == name).cloned().ok_or_else(|| {
                let names: Vec<_> = standard.iter().map(|v| v.name.as_str()).collect();
                input_err(format!("unknown variant `{name}`; standard variants: {}", names.join(", ")))
            })
        })
        .collect()
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let base = resolve_train_config(&a.flags)?;
    let variants = select_variants(&a)?;
    if variants.is_empty() {
        return Err(input_err("no variants to run"));
    }
    for v in &variants {
        v.apply(&base).map_err(|e| input_err(e.to_string()))?;
    }
    let config = json!({ "base": base, "variants": variants, "pairing": a.pairing });
    let mut run = Run::start("ablate", &a.out, config, Some(base.seed))?;
    let result = (|| -> anyhow::Result<()> {
        run.input("data", &a.data);
        let records = scan(&a.data)?;
        let split = resolve_split(&records, &a.split, Some(ProtocolArg::Custom))?.expect("default protocol");
        let split_path = a.out.join("split.json");
        split.save(&split_path)?;
        run.output("split", &split_path);
        let (train, test) = split.select(&records);
        let (train, test) = (load_samples(&train)?, load_samples(&test)?);
        check_resolution(&train, base.resolution)?;
        check_resolution(&test, base.resolution)?;
        let rows = run_ablation(&base, &variants, &train, &test, a.pairing, &a.out)?;
        let csv = a.out.join("table.csv");
        write_table_csv(&rows, &csv)?;
        let md = a.out.join("table.md");
        let table = format_table(&rows);
        std::fs::write(&md, &table).with_context(|| format!("writing {}", md.display()))?;
        run.output("table_csv", &csv);
        run.output("table_md", &md);
        print!("{table}");
        Ok(())
    })();
    run.finish(result)
}
