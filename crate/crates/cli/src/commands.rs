//! Subcommand implementations.

use std::path::{Path, PathBuf};

use glori_core::data::store::{read_store, write_store};
use glori_core::data::synth::{gen_synthetic, SyntheticSpec};
use glori_core::data::tables::{
    read_label_table, read_labels, read_survival, write_labels, write_survival,
};
use glori_core::data::{Dataset, EmbeddingRecord};
use glori_core::head::checkpoint::{read_checkpoint, write_checkpoint, TrainProvenance};
use glori_core::head::{Branch, GLoRIConfig, HeadParams};
use glori_core::stats::report::{evaluate, ReportConfig};
use glori_core::stats::survival::{kaplan_meier, log_rank, risk_groups, KmCurve};
use glori_core::train::{
    lr_grid_search, retrain_on_train_plus_val, score_dataset, train as train_head, HeadSpec,
    SelectionMetric, TrainConfig,
};
use glori_core::{Error, Result, Tensor};

use crate::manifest::{digests, Manifest};
use crate::{AttnArgs, BranchArg, EvalArgs, GenSynthArgs, HeadKind, KmArgs, SelMetric, TrainArgs};

fn load_dataset(dir: &Path, split: &str, expected: Option<&[String]>) -> Result<Dataset> {
    let store_path = dir.join(format!("{split}.glre"));
    let labels_path = dir.join(format!("{split}_labels.csv"));
    let records = read_store(&store_path)?;
    let table = match expected {
        Some(names) => read_labels(&labels_path, names)?,
        None => read_label_table(&labels_path)?,
    };
    let ids: Vec<u64> = records.iter().map(|r| r.image_id).collect();
    let labels = table.align_to(&ids)?;
    Dataset::new(records, labels, table.finding_names)
}

pub fn gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad spec JSON: {e}")))?
        }
        None => SyntheticSpec::default_benchmark(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let data = gen_synthetic(&spec)?;
    std::fs::create_dir_all(&args.out)?;

    let names = spec.finding_names();
    let mut outputs: Vec<PathBuf> = Vec::new();
    for (split, ds) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let store = args.out.join(format!("{split}.glre"));
        write_store(&store, &ds.records)?;
        outputs.push(store);
        let labels = args.out.join(format!("{split}_labels.csv"));
        write_labels(&labels, &ds.image_ids(), &names, &ds.labels)?;
        outputs.push(labels);
    }
    if let Some(rows) = &data.survival {
        let surv = args.out.join("survival.csv");
        write_survival(&surv, rows)?;
        outputs.push(surv);
    }

    let mut manifest = Manifest::new(
        "gen-synth",
        spec.seed,
        serde_json::json!({ "spec": spec, "truth": data.truth }),
    );
    if let Some(path) = &args.spec {
        manifest.input_digests = digests(&[path])?;
    }
    let out_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let mut output_digests = digests(&out_refs)?;
    manifest.outputs = output_digests.iter().map(|d| d.path.clone()).collect();
    manifest.input_digests.append(&mut output_digests);
    manifest.write(&args.out.join("manifest.json"))?;
    println!("wrote {} files to {}", outputs.len(), args.out.display());
    Ok(())
}

fn sel_metric(m: SelMetric) -> SelectionMetric {
    match m {
        SelMetric::MacroAuroc => SelectionMetric::MacroAuroc,
        SelMetric::MacroAuprc => SelectionMetric::MacroAuprc,
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let train_set = load_dataset(&args.data, "train", None)?;
    let val_set = load_dataset(&args.data, "val", Some(&train_set.finding_names))?;

    let spec = match args.head {
        HeadKind::Linear => HeadSpec::Linear,
        HeadKind::Glori => {
            let mut cfg = GLoRIConfig::new(train_set.n_findings(), 0);
            cfg.d_glori = args.d_glori;
            cfg.heads = args.heads;
            cfg.temp_hidden = args.temp_hidden;
            cfg.use_global = !args.no_global;
            cfg.use_adaptive_temp = !args.no_adaptive_temp;
            cfg.use_pyramid = !args.no_pyramid;
            HeadSpec::Glori(cfg)
        }
    };
    let mut cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        weight_decay: args.weight_decay,
        selection_metric: sel_metric(args.selection_metric),
        ..Default::default()
    };

    let mut log = String::new();
    let (head, lr_used) = if args.lr_search {
        let search = lr_grid_search(&spec, &train_set, &val_set, &cfg)?;
        for (lr, metric) in &search.results {
            log.push_str(&format!("grid lr {lr:e} val_metric {metric}\n"));
        }
        log.push_str(&format!("selected lr {:e}\n", search.best_lr));
        let run = retrain_on_train_plus_val(&spec, &train_set, &val_set, search.best_lr, &cfg)?;
        for e in &run.history {
            log.push_str(&format!("epoch {} train_loss {} val_metric -\n", e.epoch, e.train_loss));
        }
        (run.head, search.best_lr)
    } else {
        let lr = args.lr.ok_or_else(|| {
            Error::Config("either --lr or --lr-search must be given".to_string())
        })?;
        cfg.lr = lr;
        let run = train_head(&spec, &train_set, &val_set, &cfg)?;
        for e in &run.history {
            log.push_str(&format!(
                "epoch {} train_loss {} val_metric {}\n",
                e.epoch,
                e.train_loss,
                e.val_metric.map_or("-".to_string(), |v| v.to_string())
            ));
        }
        (run.head, lr)
    };

    let provenance = TrainProvenance {
        lr: lr_used,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs as u32,
        batch_size: cfg.batch_size as u32,
        train_seed: cfg.seed,
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_checkpoint(&args.out, &head, &provenance)?;
    std::fs::write(args.out.with_extension("log"), &log)?;

    let mut manifest = Manifest::new(
        "train",
        args.seed,
        serde_json::json!({
            "head": head.kind_name(),
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "lr": lr_used,
            "lr_search": args.lr_search,
            "weight_decay": cfg.weight_decay,
            "selection_metric": cfg.selection_metric,
        }),
    );
    manifest.input_digests = digests(&[
        &args.data.join("train.glre"),
        &args.data.join("train_labels.csv"),
        &args.data.join("val.glre"),
        &args.data.join("val_labels.csv"),
    ])?;
    manifest.outputs = vec![args.out.display().to_string()];
    manifest.write(&args.out.with_extension("manifest.json"))?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn check_compat(head: &HeadParams, data: &Dataset) -> Result<()> {
    if head.n_findings() != data.n_findings() {
        return Err(Error::Data(format!(
            "checkpoint expects {} findings, data has {}",
            head.n_findings(),
            data.n_findings()
        )));
    }
    if !data.records.is_empty() && head.d_model() != data.records[0].d_model() {
        return Err(Error::Data(format!(
            "checkpoint expects d_model {}, store provides {}",
            head.d_model(),
            data.records[0].d_model()
        )));
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.ckpt)?;
    let test = load_dataset(&args.data, "test", None)?;
    check_compat(&ckpt.head, &test)?;
    let matrix = score_dataset(&ckpt.head, &test)?;

    let compare_matrix = match &args.compare_ckpt {
        Some(path) => {
            let other = read_checkpoint(path)?;
            check_compat(&other.head, &test)?;
            Some(score_dataset(&other.head, &test)?)
        }
        None => None,
    };

    let cfg = ReportConfig {
        bootstrap_samples: args.bootstrap,
        permutations: args.permutations,
        seed: args.seed,
        ..Default::default()
    };
    let report = evaluate(&matrix, &test.finding_names, compare_matrix.as_ref(), &cfg)?;

    std::fs::create_dir_all(&args.out)?;
    let json_path = args.out.join("report.json");
    let csv_path = args.out.join("report.csv");
    std::fs::write(&json_path, report.to_json())?;
    std::fs::write(&csv_path, report.to_csv())?;

    let mut manifest = Manifest::new(
        "eval",
        args.seed,
        serde_json::json!({
            "bootstrap": args.bootstrap,
            "permutations": args.permutations,
            "compared": compare_matrix.is_some(),
        }),
    );
    let test_store = args.data.join("test.glre");
    let test_labels = args.data.join("test_labels.csv");
    let mut inputs: Vec<&Path> = vec![&args.ckpt, &test_store, &test_labels];
    if let Some(p) = &args.compare_ckpt {
        inputs.push(p);
    }
    manifest.input_digests = digests(&inputs)?;
    manifest.outputs = vec![json_path.display().to_string(), csv_path.display().to_string()];
    manifest.write(&args.out.join("manifest.json"))?;

    let macro_auroc = report.macro_metrics.auroc.map(|c| c.mean);
    println!(
        "macro AUROC {} macro AUPRC {}",
        macro_auroc.map_or("-".into(), |v| format!("{v:.4}")),
        report.macro_metrics.auprc.map(|c| c.mean).map_or("-".into(), |v| format!("{v:.4}")),
    );
    Ok(())
}

fn find_record(data_dir: &Path, image_id: u64) -> Result<EmbeddingRecord> {
    for split in ["test", "val", "train"] {
        let path = data_dir.join(format!("{split}.glre"));
        if !path.exists() {
            continue;
        }
        if let Some(rec) = read_store(&path)?.into_iter().find(|r| r.image_id == image_id) {
            return Ok(rec);
        }
    }
    Err(Error::Data(format!("image id {image_id} not found in any store")))
}

fn finding_index(data_dir: &Path, name: &str) -> Result<(usize, Vec<String>)> {
    for split in ["test", "val", "train"] {
        let path = data_dir.join(format!("{split}_labels.csv"));
        if !path.exists() {
            continue;
        }
        let table = read_label_table(&path)?;
        return match table.finding_names.iter().position(|n| n == name) {
            Some(idx) => Ok((idx, table.finding_names)),
            None => Err(Error::Data(format!(
                "finding {name:?} not in label columns {:?}",
                table.finding_names
            ))),
        };
    }
    Err(Error::Data("no label table found in the data directory".to_string()))
}

/// Min-max normalized 8-bit ASCII PGM.
fn to_pgm(map: &Tensor) -> String {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mn = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if mx > mn { mx - mn } else { 1.0 };
    let mut out = format!("P2\n{w} {h}\n255\n");
    for r in 0..h {
        let row: Vec<String> = (0..w)
            .map(|c| {
                let v = ((map.at(&[r, c]) - mn) / span * 255.0).round() as u8;
                v.to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn map_csv(map: &Tensor) -> String {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = String::new();
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| format!("{}", map.at(&[r, c]))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn attn_maps(args: AttnArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.ckpt)?;
    let HeadParams::Glori(params) = &ckpt.head else {
        return Err(Error::Config(
            "attention maps require a glori checkpoint; the linear probe has none".to_string(),
        ));
    };
    let (finding_idx, _) = finding_index(&args.data, &args.finding)?;
    let rec = find_record(&args.data, args.image_id)?;
    let branch = match args.branch {
        BranchArg::Fine => Branch::Fine,
        BranchArg::Coarse => Branch::Coarse,
    };
    let map = params.attention_map(&rec, finding_idx, branch)?;

    std::fs::create_dir_all(&args.out)?;
    let stem = format!(
        "attn_{}_{}_{}",
        args.image_id,
        args.finding,
        match args.branch {
            BranchArg::Fine => "fine",
            BranchArg::Coarse => "coarse",
        }
    );
    let pgm_path = args.out.join(format!("{stem}.pgm"));
    let csv_path = args.out.join(format!("{stem}.csv"));
    std::fs::write(&pgm_path, to_pgm(&map))?;
    std::fs::write(&csv_path, map_csv(&map))?;

    let mut manifest = Manifest::new(
        "attn-maps",
        0,
        serde_json::json!({
            "image_id": args.image_id,
            "finding": args.finding,
            "branch": match args.branch { BranchArg::Fine => "fine", BranchArg::Coarse => "coarse" },
        }),
    );
    manifest.input_digests = digests(&[&args.ckpt])?;
    manifest.outputs = vec![pgm_path.display().to_string(), csv_path.display().to_string()];
    manifest.write(&args.out.join(format!("{stem}.manifest.json")))?;
    println!("attention map written to {}", pgm_path.display());
    Ok(())
}

fn km_csv(low: &KmCurve, high: &KmCurve) -> String {
    let mut times: Vec<f64> = low.times.iter().chain(high.times.iter()).cloned().collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    let mut out = String::from("time,s_low,s_high\n");
    out.push_str("0,1,1\n");
    for t in times {
        out.push_str(&format!("{t},{},{}\n", low.survival_at(t), high.survival_at(t)));
    }
    out
}

pub fn km(args: KmArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.ckpt)?;
    let records = read_store(&args.data.join("test.glre"))?;
    let rows = read_survival(&args.survival)?;

    let finding_idx = match &args.finding {
        Some(name) => Some(finding_index(&args.data, name)?.0),
        None => None,
    };
    if let Some(idx) = finding_idx {
        if idx >= ckpt.head.n_findings() {
            return Err(Error::Data(format!("finding index {idx} out of range")));
        }
    }

    let by_id: std::collections::HashMap<u64, &EmbeddingRecord> =
        records.iter().map(|r| (r.image_id, r)).collect();
    let mut subjects = Vec::with_capacity(rows.len());
    for row in &rows {
        let rec = by_id.get(&row.image_id).ok_or_else(|| {
            Error::Data(format!("survival subject {} not in the test store", row.image_id))
        })?;
        let logits = ckpt.head.logits(rec)?;
        let probs: Vec<f64> = logits.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let score = match finding_idx {
            Some(j) => probs[j],
            None => probs.iter().sum::<f64>() / probs.len() as f64,
        };
        subjects.push(row.with_score(score));
    }

    let (low, high) = risk_groups(&subjects, args.quantile)?;
    if low.is_empty() || high.is_empty() {
        return Err(Error::Numeric(format!(
            "risk split produced an empty group ({} low / {} high)",
            low.len(),
            high.len()
        )));
    }
    let km_low = kaplan_meier(&low)?;
    let km_high = kaplan_meier(&high)?;

    std::fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("km.csv");
    std::fs::write(&csv_path, km_csv(&km_low, &km_high))?;

    let logrank = log_rank(&low, &high);
    let json_path = args.out.join("logrank.json");
    let payload = match &logrank {
        Ok(r) => serde_json::json!({
            "chi_square": r.chi_square,
            "p_value": r.p_value,
            "n_low": low.len(),
            "n_high": high.len(),
            "events_low": km_low.n_events,
            "events_high": km_high.n_events,
            "quantile": args.quantile,
        }),
        Err(e) => serde_json::json!({
            "error": e.to_string(),
            "n_low": low.len(),
            "n_high": high.len(),
            "quantile": args.quantile,
        }),
    };
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&payload)
            .map_err(|e| Error::Data(format!("logrank serialization: {e}")))?
            + "\n",
    )?;

    let mut manifest = Manifest::new(
        "km",
        0,
        serde_json::json!({ "quantile": args.quantile, "finding": args.finding }),
    );
    manifest.input_digests = digests(&[&args.ckpt, &args.survival])?;
    manifest.outputs = vec![csv_path.display().to_string(), json_path.display().to_string()];
    manifest.write(&args.out.join("manifest.json"))?;

    match logrank {
        Ok(r) => {
            println!("log-rank chi2 {:.4} p {:.6}", r.chi_square, r.p_value);
            Ok(())
        }
        Err(e) => Err(e),
    }
}
