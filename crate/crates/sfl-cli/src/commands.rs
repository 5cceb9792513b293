//! Subcommand implementations.

use crate::util::{build_config, env_seed, opt_cell, parse_list, set_if, CsvWriter};
use crate::{
    CheckArgs, CompareArgs, FilterResponseArgs, GenDataArgs, SweepKArgs, TrainArgs,
};
use anyhow::{bail, Context, Result};
use sfl_core::basis::{eval_scalar, BasisSpec};
use sfl_core::data::{
    edge_homophily, generate_sbm, load_dataset, make_folds, planetoid_masks, save_dataset,
    SbmConfig, Splits,
};
use sfl_core::model::ModelKind;
use sfl_core::train::{
    run_kfold, run_pool, sweep_k as run_sweep, train_one, write_result_json, ExperimentResult,
    TrainConfig,
};
use std::path::{Path, PathBuf};
use std::str::FromStr;

fn dataset_tag(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let base = SbmConfig {
        n: 400,
        classes: 5,
        avg_degree: 6.0,
        homophily: 0.5,
        feature_dim: 16,
        class_separation: 1.0,
        seed: 0,
    };
    let mut cfg: SbmConfig = build_config(
        args.config.as_deref(),
        base,
        |v| {
            set_if(v, "n", &args.n);
            set_if(v, "classes", &args.classes);
            set_if(v, "homophily", &args.homophily);
            set_if(v, "avg_degree", &args.avg_degree);
            set_if(v, "feature_dim", &args.feature_dim);
            set_if(v, "class_separation", &args.class_sep);
            set_if(v, "seed", &args.seed);
            Ok(())
        },
        &args.set,
    )?;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }

    let mut dataset = generate_sbm(&cfg)?;
    if args.folds.is_some() && args.train_per_class.is_some() {
        bail!("--folds and --train-per-class are mutually exclusive");
    }
    if let Some(folds) = args.folds {
        let assignment = make_folds(&dataset, folds, cfg.seed)?;
        dataset.splits = Splits::Folds {
            assignment,
            count: folds,
        };
    }
    if let Some(per_class) = args.train_per_class {
        let val = args.val_count.unwrap_or(200);
        dataset.splits = planetoid_masks(&dataset, per_class, val, cfg.seed)?;
    }
    save_dataset(&dataset, &args.out)?;
    let measured = edge_homophily(&dataset)?;
    println!(
        "wrote {} ({} nodes, {} edges, {} classes) measured edge homophily {:.4}",
        args.out.display(),
        dataset.n,
        dataset.edges.len(),
        dataset.classes,
        measured
    );
    Ok(())
}

fn train_config_from(
    model: Option<&str>,
    data: &Path,
    config: Option<&Path>,
    sets: &[String],
    flag_overrides: impl FnOnce(&mut serde_json::Value) -> Result<()>,
) -> Result<TrainConfig> {
    if model.is_none() && config.is_none() {
        bail!("--model is required unless --config provides one");
    }
    let kind = match model {
        Some(name) => ModelKind::from_str(name)?,
        None => ModelKind::Chebynet, // placeholder; the file overrides it
    };
    let base = TrainConfig::new(kind, data.display().to_string());
    let mut cfg: TrainConfig = build_config(
        config,
        base,
        |v| {
            flag_overrides(v)?;
            // The dataset always comes from --data.
            v["dataset"] = serde_json::Value::String(data.display().to_string());
            if let Some(name) = model {
                v["model"] = serde_json::Value::String(name.to_ascii_lowercase());
            }
            Ok(())
        },
        sets,
    )?;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = train_config_from(
        args.model.as_deref(),
        &args.data,
        args.config.as_deref(),
        &args.set,
        |v| {
            set_if(v, "k", &args.k);
            set_if(v, "hidden", &args.hidden);
            set_if(v, "lr", &args.lr);
            set_if(v, "shape_lr", &args.shape_lr);
            set_if(v, "weight_decay", &args.weight_decay);
            set_if(v, "dropout", &args.dropout);
            set_if(v, "max_epochs", &args.max_epochs);
            set_if(v, "patience", &args.patience);
            set_if(v, "seed", &args.seed);
            set_if(v, "norm_placement", &args.norm_placement);
            set_if(v, "krawtchouk_n", &args.krawtchouk_n);
            if args.no_telemetry {
                v["record_telemetry"] = serde_json::Value::Bool(false);
            }
            Ok(())
        },
    )?;
    let dataset = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)?;

    match &dataset.splits {
        Splits::Masks { .. } => {
            let result = train_one(&cfg, &dataset)?;
            let stem = format!("run_{}_k{}_seed{}", cfg.model, cfg.k, cfg.seed);
            let path = args.out.join(format!("{stem}.json"));
            write_result_json(&result, &path)?;
            if args.save_checkpoint {
                std::fs::write(args.out.join(format!("{stem}.ckpt")), &result.best_checkpoint)?;
            }
            print_run_line(&result);
        }
        Splits::Folds { count, .. } => {
            let agg = run_kfold(&cfg, &dataset)?;
            for (fold, result) in agg.per_fold.iter().enumerate() {
                let path = args
                    .out
                    .join(format!("run_{}_k{}_fold{}.json", cfg.model, cfg.k, fold));
                write_result_json(result, &path)?;
            }
            #[derive(serde::Serialize)]
            struct KfoldSummary {
                model: ModelKind,
                k: usize,
                folds: usize,
                mean_test_acc: f64,
                std_test_acc: f64,
                n_collapsed: usize,
            }
            let summary = KfoldSummary {
                model: cfg.model,
                k: cfg.k,
                folds: *count,
                mean_test_acc: agg.mean_test_acc,
                std_test_acc: agg.std_test_acc,
                n_collapsed: agg.n_collapsed,
            };
            std::fs::write(
                args.out
                    .join(format!("kfold_{}_k{}.json", cfg.model, cfg.k)),
                serde_json::to_string_pretty(&summary)? + "\n",
            )?;
            println!(
                "{} k={} {}-fold mean test acc {:.4} (std {:.4}, {} collapsed)",
                cfg.model, cfg.k, count, agg.mean_test_acc, agg.std_test_acc, agg.n_collapsed
            );
        }
    }
    Ok(())
}

fn print_run_line(result: &ExperimentResult) {
    let shape = if result.learned_shape.is_empty() {
        String::new()
    } else {
        let pairs: Vec<String> = result
            .shape_names
            .iter()
            .zip(&result.learned_shape)
            .map(|(n, v)| format!("{n}={v:.4}"))
            .collect();
        format!(" [{}]", pairs.join(", "))
    };
    println!(
        "{} k={} seed={} test acc {:.4}{}{}",
        result.config.model,
        result.config.k,
        result.config.seed,
        result.test_acc,
        if result.collapsed { " COLLAPSED" } else { "" },
        shape
    );
}

pub fn sweep_k(args: SweepKArgs) -> Result<()> {
    let models = parse_list(&args.models, "model", |s| Ok(ModelKind::from_str(s)?))?;
    let k_list = parse_list(&args.k, "K", |s| {
        s.parse::<usize>().with_context(|| format!("bad K '{s}'"))
    })?;
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let base_seed = env_seed()?.unwrap_or(args.seed);
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| base_seed + i).collect();

    let base = train_config_from(
        Some("chebynet"),
        &args.data,
        args.config.as_deref(),
        &args.set,
        |_| Ok(()),
    )?;
    let dataset = load_dataset(&args.data)?;
    std::fs::create_dir_all(args.out.join("runs"))?;

    let rows = run_sweep(&base, &models, &k_list, &seeds, &dataset, args.jobs)?;

    let mut csv = CsvWriter::new(&[
        "dataset",
        "model",
        "k",
        "seed",
        "test_acc",
        "collapsed",
        "max_activation",
        "alpha",
        "beta",
    ]);
    let tag = dataset_tag(&args.data);
    for (row, result) in &rows {
        csv.row(&[
            tag.clone(),
            row.model.to_string(),
            row.k.to_string(),
            row.seed.to_string(),
            row.test_acc.to_string(),
            row.collapsed.to_string(),
            row.max_activation.to_string(),
            opt_cell(&row.learned_shape, 0),
            opt_cell(&row.learned_shape, 1),
        ]);
        let path = args.out.join("runs").join(format!(
            "run_{}_k{}_seed{}.json",
            row.model, row.k, row.seed
        ));
        write_result_json(result, &path)?;
    }
    let csv_path = args.out.join("sweep.csv");
    csv.write(&csv_path)?;
    println!(
        "wrote {} ({} cells over {} models x {} orders x {} seeds)",
        csv_path.display(),
        rows.len(),
        models.len(),
        k_list.len(),
        seeds.len()
    );
    Ok(())
}

pub fn compare(args: CompareArgs) -> Result<()> {
    let models = parse_list(&args.models, "model", |s| Ok(ModelKind::from_str(s)?))?;
    let data_dirs = parse_list(&args.data, "dataset", |s| Ok(PathBuf::from(s)))?;
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let base_seed = env_seed()?.unwrap_or(args.seed);
    std::fs::create_dir_all(args.out.join("runs"))?;

    let mut runs_csv = CsvWriter::new(&[
        "dataset",
        "model",
        "k",
        "seed_or_fold",
        "test_acc",
        "collapsed",
        "alpha",
        "beta",
    ]);
    let mut summary_csv = CsvWriter::new(&[
        "dataset",
        "model",
        "k",
        "protocol",
        "n_runs",
        "mean_test_acc",
        "std_test_acc",
        "n_collapsed",
    ]);

    for dir in &data_dirs {
        let dataset = load_dataset(dir)?;
        let tag = dataset_tag(dir);
        let base = train_config_from(
            Some(models[0].name()),
            dir,
            args.config.as_deref(),
            &args.set,
            |v| {
                v["k"] = serde_json::json!(args.k);
                Ok(())
            },
        )?;

        match &dataset.splits {
            Splits::Masks { .. } => {
                // Paired seeds: every model sees the same seed list.
                let mut cells = Vec::new();
                for &model in &models {
                    for s in 0..args.seeds as u64 {
                        let mut cfg = base.clone();
                        cfg.model = model;
                        cfg.seed = base_seed + s;
                        cells.push(cfg);
                    }
                }
                let results = run_pool(args.jobs, &cells, |cfg| train_one(cfg, &dataset))?;
                for (cfg, result) in cells.iter().zip(&results) {
                    runs_csv.row(&[
                        tag.clone(),
                        cfg.model.to_string(),
                        cfg.k.to_string(),
                        cfg.seed.to_string(),
                        result.test_acc.to_string(),
                        result.collapsed.to_string(),
                        opt_cell(&result.learned_shape, 0),
                        opt_cell(&result.learned_shape, 1),
                    ]);
                    write_result_json(
                        result,
                        &args.out.join("runs").join(format!(
                            "run_{tag}_{}_k{}_seed{}.json",
                            cfg.model, cfg.k, cfg.seed
                        )),
                    )?;
                }
                for (m, chunk) in models.iter().zip(results.chunks(args.seeds)) {
                    summarize(&mut summary_csv, &tag, *m, args.k, "fixed-split", chunk);
                }
            }
            Splits::Folds { count, .. } => {
                let aggs = run_pool(args.jobs, &models, |&model| {
                    let mut cfg = base.clone();
                    cfg.model = model;
                    cfg.seed = base_seed;
                    run_kfold(&cfg, &dataset)
                })?;
                for (model, agg) in models.iter().zip(&aggs) {
                    for (fold, result) in agg.per_fold.iter().enumerate() {
                        runs_csv.row(&[
                            tag.clone(),
                            model.to_string(),
                            args.k.to_string(),
                            format!("fold{fold}"),
                            result.test_acc.to_string(),
                            result.collapsed.to_string(),
                            opt_cell(&result.learned_shape, 0),
                            opt_cell(&result.learned_shape, 1),
                        ]);
                        write_result_json(
                            result,
                            &args.out.join("runs").join(format!(
                                "run_{tag}_{}_k{}_fold{fold}.json",
                                model, args.k
                            )),
                        )?;
                    }
                    summarize(
                        &mut summary_csv,
                        &tag,
                        *model,
                        args.k,
                        &format!("{count}-fold"),
                        &agg.per_fold,
                    );
                }
            }
        }
    }

    let runs_path = args.out.join("compare_runs.csv");
    std::fs::write(&runs_path, runs_csv.finish())?;
    let summary_path = args.out.join("compare_summary.csv");
    std::fs::write(&summary_path, summary_csv.finish())?;
    println!(
        "wrote {} and {}",
        runs_path.display(),
        summary_path.display()
    );
    Ok(())
}

fn summarize(
    csv: &mut CsvWriter,
    dataset: &str,
    model: ModelKind,
    k: usize,
    protocol: &str,
    results: &[ExperimentResult],
) {
    let accs: Vec<f64> = results.iter().map(|r| r.test_acc).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
    let n_collapsed = results.iter().filter(|r| r.collapsed).count();
    csv.row(&[
        dataset.to_string(),
        model.to_string(),
        k.to_string(),
        protocol.to_string(),
        results.len().to_string(),
        mean.to_string(),
        var.sqrt().to_string(),
        n_collapsed.to_string(),
    ]);
    println!(
        "{dataset} {model} k={k} {protocol}: mean test acc {mean:.4} (std {:.4}, {n_collapsed} collapsed)",
        var.sqrt()
    );
}

pub fn filter_response(args: FilterResponseArgs) -> Result<()> {
    let spec = match args.family.to_ascii_lowercase().as_str() {
        "chebyshev" => BasisSpec::chebyshev(),
        "jacobi" => BasisSpec::jacobi(
            args.alpha.unwrap_or(-0.5),
            args.beta.unwrap_or(-0.5),
            false,
        ),
        "laguerre" => BasisSpec::laguerre(args.alpha.unwrap_or(0.0), false),
        "meixner" => BasisSpec::meixner(args.beta.unwrap_or(1.0), args.c.unwrap_or(0.5), false),
        "krawtchouk" => BasisSpec::krawtchouk(
            args.p.unwrap_or(0.5),
            args.big_n.unwrap_or(args.k.max(1) as u32),
            false,
        ),
        other => bail!("unknown family '{other}'; valid: chebyshev, jacobi, laguerre, meixner, krawtchouk"),
    };
    spec.validate()?;

    let parts: Vec<&str> = args.grid.split(':').collect();
    if parts.len() != 3 {
        bail!("--grid expects MIN:MAX:COUNT, got '{}'", args.grid);
    }
    let min: f64 = parts[0].parse().context("grid MIN must be a number")?;
    let max: f64 = parts[1].parse().context("grid MAX must be a number")?;
    let count: usize = parts[2].parse().context("grid COUNT must be an integer")?;
    if count == 0 {
        bail!("grid COUNT must be at least 1");
    }

    std::fs::create_dir_all(&args.out)?;
    let mut csv = CsvWriter::new(&["x", "k", "value"]);
    let mut overflowed = 0usize;
    for i in 0..count {
        let x = if count == 1 {
            min
        } else {
            min + (max - min) * i as f64 / (count - 1) as f64
        };
        let eval = eval_scalar(&spec, args.k, x)?;
        if eval.overflow_at.is_some() {
            overflowed += 1;
        }
        for (k, v) in eval.values.iter().enumerate() {
            csv.row(&[x.to_string(), k.to_string(), v.to_string()]);
        }
    }
    let path = args.out.join("response.csv");
    csv.write(&path)?;
    println!("wrote {}", path.display());
    if overflowed > 0 {
        eprintln!("sfl: note: {overflowed} grid points overflowed; rows truncated at the last finite degree");
    }
    Ok(())
}

pub fn check(args: CheckArgs) -> Result<()> {
    let reports = sfl_core::check::run_all();
    let mut failed = 0usize;
    let mut matched = 0usize;
    for report in &reports {
        if let Some(only) = &args.only {
            if report.name != only {
                continue;
            }
        }
        matched += 1;
        if report.passed {
            println!("check {}: ok — {}", report.name, report.detail);
        } else {
            failed += 1;
            println!("check {}: FAILED — {}", report.name, report.detail);
        }
    }
    if matched == 0 {
        let names: Vec<&str> = reports.iter().map(|r| r.name).collect();
        bail!(
            "no suite named '{}'; valid: {}",
            args.only.as_deref().unwrap_or(""),
            names.join(", ")
        );
    }
    if failed > 0 {
        bail!("{failed} check suite(s) failed");
    }
    Ok(())
}
