use candle_core::Device;
use serde_json::json;

use semalign::ablation::{variants, Grid};
use semalign::checkpoint::load_model;
use semalign::config::TrainConfig;
use semalign::data::{self, generate_synthetic_glands, make_ssl_split, Split, SyntheticSpec};
use semalign::eval::{predict, MetricReport};
use semalign::overlay::overlay as render_overlay;
use semalign::{Error, Result};

use crate::log::Logger;
use crate::run::{self, EvalRequest, TrainRequest};
use crate::{AblateArgs, ConfigArgs, EvalArgs, OverlayArgs, SplitArgs, SynthArgs, TrainArgs};

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    TrainConfig::load_layered(&args.configs, &args.overrides)
}

pub fn split(args: &SplitArgs) -> Result<()> {
    let samples = data::load_images(&args.root, Split::Train)?;
    let ids: Vec<String> = samples.into_iter().map(|s| s.id).collect();
    let manifest = make_ssl_split(&ids, args.ratio, args.seed)?;
    manifest.save(&args.out)?;
    Logger::stderr_only().record(
        "split",
        json!({
            "labeled": manifest.labeled_ids.len(),
            "unlabeled": manifest.unlabeled_ids.len(),
            "out": args.out.display().to_string(),
        }),
    );
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    for (split, n, seed) in [
        (Split::Train, args.n_train, args.seed),
        (Split::Test, args.n_test, args.seed.wrapping_add(1)),
    ] {
        if n == 0 {
            continue;
        }
        let samples = generate_synthetic_glands(&SyntheticSpec {
            n_images: n,
            size: args.size,
            seed,
            ..SyntheticSpec::default()
        })?;
        data::write_dataset(&args.out, split, &samples)?;
    }
    Logger::stderr_only().record(
        "synth",
        json!({ "train": args.n_train, "test": args.n_test, "out": args.out.display().to_string() }),
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    run::create_dir(&args.out)?;
    let mut log = Logger::with_file(&args.out.join("log.jsonl"))?;
    run::train_run(
        TrainRequest {
            cfg,
            data: &args.data,
            split: args.split.as_deref(),
            out: &args.out,
            resume: args.resume,
            eval_every: args.eval_every,
            max_steps: args.max_steps,
        },
        &mut log,
    )?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let report = run::eval_run(
        EvalRequest {
            checkpoint: &args.checkpoint,
            data: &args.data,
            split: run::parse_split(&args.split)?,
            mode: args.mode.as_deref().map(run::parse_mode).transpose()?,
            oracle: args.oracle,
            ratio: &args.ratio,
            method: &args.method,
            out: &args.out,
        },
        &mut Logger::stderr_only(),
    )?;
    println!("{}", report.summary());
    Ok(())
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let grid: Grid = args.grid.parse()?;
    let base = load_config(&args.config)?;
    let mode = args.mode.as_deref().map(run::parse_mode).transpose()?;
    run::create_dir(&args.out)?;
    let mut log = Logger::with_file(&args.out.join("log.jsonl"))?;
    let mut rows = vec![MetricReport::csv_header(base.data.num_classes)];
    for v in variants(grid) {
        let cfg = base.with_overrides(&v.overrides)?;
        let run_dir = args.out.join(&v.name);
        log.record("variant", json!({ "name": v.name, "overrides": v.overrides }));
        run::train_run(
            TrainRequest {
                cfg,
                data: &args.data,
                split: args.split.as_deref(),
                out: &run_dir,
                resume: false,
                eval_every: None,
                max_steps: None,
            },
            &mut log,
        )?;
        let report = run::eval_run(
            EvalRequest {
                checkpoint: &run::checkpoint_dir(&run_dir),
                data: &args.data,
                split: Split::Test,
                mode,
                oracle: false,
                ratio: &args.ratio,
                method: &v.name,
                out: &run_dir.join("eval"),
            },
            &mut log,
        )?;
        rows.push(report.csv_row(&args.ratio, &v.name));
    }
    let table = rows.join("\n") + "\n";
    run::write_atomic(&args.out.join(format!("ablation-{grid}.csv")), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn overlay(args: &OverlayArgs) -> Result<()> {
    let (model, cfg) = load_model(&args.checkpoint, &Device::Cpu)?;
    let split = run::parse_split(&args.split)?;
    let samples = data::load_dataset(&args.images, split, cfg.data.num_classes)?;
    run::create_dir(&args.out)?;
    let mut log = Logger::stderr_only();
    for s in &samples {
        let gt = s.mask.as_ref().expect("load_dataset attaches masks");
        let pred = if args.oracle {
            gt.clone()
        } else {
            predict(&model, &s.image, &cfg)?
        };
        let (rgb, counts) = render_overlay(&s.image, &pred, gt)?;
        let path = args.out.join(format!("{}.png", s.id));
        rgb.save(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        log.record(
            "overlay",
            json!({
                "id": s.id,
                "true_positive": counts.true_positive,
                "false_positive": counts.false_positive,
                "false_negative": counts.false_negative,
            }),
        );
    }
    Ok(())
}
