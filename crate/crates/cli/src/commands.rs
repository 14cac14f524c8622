use std::fs;
use std::path::Path;
use std::time::Instant;

use fbnet_core::checkpoint::load_checkpoint;
use fbnet_core::data::{
    class_histogram, generate_synthetic, load_dataset, save_dataset, split_train_val, Sample, SyntheticSpec,
    IGNORE_INDEX,
};
use fbnet_core::export::{attention_maps, write_attention};
use fbnet_core::model::Model;
use fbnet_core::tensor::{read_tensor, Tensor};
use fbnet_core::train::{
    ablation_csv, ablation_run, evaluate, train_loop, MetricsRecord, TrainOutcome, METRICS_HEADER,
};
use fbnet_core::{Error, Result};
use serde_json::{json, Map, Value};

use crate::config::{read_text, DataSource, RunConfig};

/// Evaluation extent used when a checkpoint does not record one.
const DEFAULT_EVAL_BASE: usize = 72;

pub fn gen_data(spec_path: &Path, out: &Path, n: usize, seed: Option<u64>) -> Result<()> {
    let mut spec = SyntheticSpec::parse(&read_text(spec_path)?)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let samples = generate_synthetic(&spec, n)?;
    save_dataset(out, &samples)?;
    let hist = class_histogram(&samples, spec.num_classes);
    println!("samples {n}");
    for (c, count) in hist[..spec.num_classes].iter().enumerate() {
        println!("class {c} {count}");
    }
    println!("ignore {}", hist[spec.num_classes]);
    println!("total {}", hist.iter().sum::<u64>());
    Ok(())
}

fn load_run(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn load_samples(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let samples = match &cfg.data {
        DataSource::Synthetic { spec, count } => generate_synthetic(spec, *count)?,
        DataSource::Directory(dir) => load_dataset(dir)?,
    };
    let total = samples.len();
    let (train, val) = split_train_val(samples, cfg.train_fraction);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Ingestion(format!(
            "{total} samples cannot be split into non-empty training and validation sets"
        )));
    }
    Ok((train, val))
}

fn decisions(cfg: &RunConfig) -> Value {
    json!({
        "ignore_index": IGNORE_INDEX,
        "crop_padding": "image 0, label ignore",
        "aux_loss_active": cfg.model.aux_active(),
        "aux_loss_rule": "auxiliary head only on top of spatial attention",
        "aux_weight": cfg.train.optim.aux_weight,
        "ff_fourth_branch": "two conv-bn-relu layers at c_sam width",
        "head": "3x3 conv to C/4, batch norm, relu, dropout, 1x1 conv",
        "loss_resolution": "labels nearest-downsampled to 1/4 (main) and 1/8 (aux)",
        "evaluation": "smaller side resized to eval.base_size, padded to a multiple of 8, logits bilinearly upsampled",
        "epochs_to_convergence": "first epoch reaching the best validation class-mean mIoU",
        "gradient_clipping": false,
    })
}

fn config_json(cfg: &RunConfig) -> Value {
    let map: Map<String, Value> = cfg.to_kv().iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    Value::Object(map)
}

fn record_json(r: &MetricsRecord) -> Value {
    json!({
        "epoch": r.epoch,
        "main_loss": r.main_loss,
        "aux_loss": r.aux_loss,
        "lr": r.lr,
        "miou_class": r.miou_class,
        "miou_sample": r.miou_sample,
        "pixel_accuracy": r.pixel_accuracy,
        "seconds": r.seconds,
    })
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes the resolved configuration next to the run outputs.
fn prepare_output(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join("config.txt"), cfg.to_kv().to_text())?;
    Ok(())
}

fn outcome_json(outcome: &TrainOutcome) -> Value {
    json!({
        "best_epoch": outcome.best_epoch,
        "best": record_json(outcome.best()),
        "last": record_json(outcome.last()),
        "final_step_loss": outcome.step_losses.last(),
    })
}

pub fn train(path: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_run(path, seed)?;
    let (train, val) = load_samples(&cfg)?;
    prepare_output(&cfg)?;
    save_dataset(cfg.output.join("val"), &val)?;
    let mut model = Model::<f32>::new(&cfg.model, cfg.train.seed)?;
    let params = model.parameter_count().total;
    println!("train {} val {} params {params}", train.len(), val.len());
    println!("{METRICS_HEADER}");
    let started = Instant::now();
    let result = train_loop(&mut model, &train, &val, &cfg.train, Some(&cfg.output), |r| {
        println!("{}", r.csv_row())
    });
    let mut run = json!({
        "command": "train",
        "config": config_json(&cfg),
        "decisions": decisions(&cfg),
        "params": params,
        "train_samples": train.len(),
        "val_samples": val.len(),
        "seconds": started.elapsed().as_secs_f64(),
    });
    match &result {
        Ok(outcome) => {
            run["status"] = json!("completed");
            run["result"] = outcome_json(outcome);
            println!(
                "best epoch {} miou {:.4} pix_acc {:.4}",
                outcome.best_epoch,
                outcome.best().miou_class,
                outcome.best().pixel_accuracy
            );
        }
        Err(e) => {
            run["status"] = json!("aborted");
            run["error"] = json!(e.to_string());
        }
    }
    write_json(&cfg.output.join("run.json"), &run)?;
    result.map(|_| ())
}

pub fn eval(checkpoint: &Path, data: &Path, base: Option<usize>) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(checkpoint)?;
    let samples = load_dataset(data)?;
    let base = match base {
        Some(b) => b,
        None => ckpt.meta.parse_opt("eval_base")?.unwrap_or(DEFAULT_EVAL_BASE),
    };
    let result = evaluate(&ckpt.model, &samples, base)?;
    println!("samples = {}", samples.len());
    println!("eval_base = {base}");
    println!("miou_class = {}", result.miou_class);
    println!("miou_sample = {}", result.miou_sample);
    println!("pixel_accuracy = {}", result.pixel_accuracy);
    Ok(())
}

pub fn ablate(path: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_run(path, seed)?;
    let (train, val) = load_samples(&cfg)?;
    prepare_output(&cfg)?;
    let started = Instant::now();
    let rows = ablation_run(&train, &val, &cfg.model, &cfg.train, Some(&cfg.output), |s, r| {
        println!("{} {}", s.key(), r.csv_row())
    })?;
    let table = ablation_csv(&rows);
    print!("{table}");
    let rows_json: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "strategy": r.strategy.label(),
                "key": r.strategy.key(),
                "miou": r.miou,
                "accuracy": r.accuracy,
                "epochs": r.epochs,
                "params": r.params,
            })
        })
        .collect();
    let run = json!({
        "command": "ablate",
        "status": "completed",
        "config": config_json(&cfg),
        "decisions": decisions(&cfg),
        "rows": rows_json,
        "seconds": started.elapsed().as_secs_f64(),
    });
    write_json(&cfg.output.join("run.json"), &run)
}

pub fn export_attn(checkpoint: &Path, sample: &Path, out: &Path, base: Option<usize>, channels: usize) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(checkpoint)?;
    let image = read_tensor::<f32>(sample)?;
    let &[3, h, w] = image.shape() else {
        return Err(Error::Ingestion(format!(
            "{}: expected a [3, H, W] image, found {:?}",
            sample.display(),
            image.shape()
        )));
    };
    let id = sample.file_name().map_or("sample".into(), |n| n.to_string_lossy().into_owned());
    let input = Sample::new(id, image, Tensor::full(vec![h, w], IGNORE_INDEX))?;
    let base = match base {
        Some(b) => b,
        None => ckpt.meta.parse_opt("eval_base")?.unwrap_or(DEFAULT_EVAL_BASE),
    };
    let export = attention_maps(&ckpt.model, &input, base, channels)?;
    for path in write_attention(out, &export)? {
        println!("{}", path.display());
    }
    Ok(())
}

pub fn params(path: &Path) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    println!("strategy {}", cfg.model.strategy.label());
    for (name, channels) in cfg.model.channel_ledger() {
        println!("channels {name}: {channels}");
    }
    let count = Model::<f32>::new(&cfg.model, 0)?.parameter_count();
    for (module, n) in &count.modules {
        println!("params {module}: {n}");
    }
    println!("params total: {}", count.total);
    Ok(())
}
