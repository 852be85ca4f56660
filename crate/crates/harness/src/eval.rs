//! Evaluation, benchmarking and diagnostics over a loaded checkpoint.

use std::path::{Path, PathBuf};
use std::time::Instant;

use tofe_core::flops::{baseline_block_flops, embed_head_flops};
use tofe_core::infer::{adaptive_forward, instance_adaptive_forward, reused_tokens, token_usage_map, InferenceMode, InstanceOutput};
use tofe_core::train::{cls_loss, AdamW, Sample};
use tofe_core::vit::{baseline_forward, hidden_states};
use tofe_core::{Graph, Rng, Tensor};

use crate::checkpoint::Checkpoint;
use crate::dataset::{encode_pgm, shuffled_batches, Dataset};
use crate::error::{HarnessError, Result};
use crate::fsutil::write_atomic;
use crate::report::{GflopsSummary, ReuseStats, RunReport};

const GIGA: f64 = 1e9;

fn argmax(row: &[f32]) -> usize {
    (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
}

pub fn mode_name(mode: InferenceMode) -> &'static str {
    match mode {
        InferenceMode::InstanceAdaptive => "instance",
        InferenceMode::BatchAdaptive => "batch",
    }
}

/// ToFe forwards over `samples`. Batch mode runs rectangular chunks of
/// `batch_size`; a chunk of one falls back to instance-adaptive inference.
pub fn run_tofe(
    ck: &Checkpoint,
    samples: &[Sample<f32>],
    mode: InferenceMode,
    batch_size: usize,
) -> Result<Vec<InstanceOutput<f32>>> {
    let (tofe, plan) = match (&ck.tofe, &ck.meta.plan) {
        (Some(t), Some(p)) => (t, p),
        _ => return Err(HarnessError::Config("checkpoint has no selectors; train-tofe first".into())),
    };
    let cfg = &ck.meta.model;
    match mode {
        InferenceMode::InstanceAdaptive => samples
            .iter()
            .map(|s| Ok(instance_adaptive_forward(&s.image, &ck.backbone, tofe, plan, cfg)?))
            .collect(),
        InferenceMode::BatchAdaptive => {
            let counts = ck.keep_counts().ok_or_else(|| {
                HarnessError::Config("batch mode needs keep counts recorded by train-tofe".into())
            })?;
            let mut out = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(batch_size.max(1)) {
                let imgs: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
                let (_, outs) = adaptive_forward(&imgs, &ck.backbone, tofe, plan, cfg, Some(&counts))?;
                out.extend(outs);
            }
            Ok(out)
        }
    }
}

/// Fills accuracy, keep ratios, FLOPs and reuse statistics from forwards.
pub fn summarize(ck: &Checkpoint, samples: &[Sample<f32>], outs: &[InstanceOutput<f32>], report: &mut RunReport) {
    let cfg = &ck.meta.model;
    let n = cfg.num_patches() as f64;
    let m = outs.len().max(1) as f64;
    let correct = outs.iter().zip(samples).filter(|(o, s)| o.predicted() == s.label).count();
    report.samples = outs.len();
    report.accuracy = Some(100.0 * correct as f64 / m);
    let stages = outs.first().map_or(0, |o| o.masks.len());
    report.keep_ratios = (0..stages)
        .map(|s| outs.iter().map(|o| o.masks[s].kept() as f64).sum::<f64>() / m / n)
        .collect();
    let blocks = outs.iter().map(|o| o.flops.block_total() as f64).sum::<f64>() / m / GIGA;
    let overhead = outs.iter().map(|o| o.flops.overhead as f64).sum::<f64>() / m / GIGA;
    report.gflops = Some(gflops_summary(ck, blocks, overhead));
    report.reused = (1..stages)
        .map(|s| {
            let reused: Vec<usize> = outs.iter().map(|o| reused_tokens(&o.masks)[s - 1]).collect();
            let remaining: usize = outs.iter().map(|o| o.masks[s].kept()).sum();
            let total: usize = reused.iter().sum();
            ReuseStats {
                stage: s + 1,
                mean_remaining: remaining as f64 / m,
                mean_reused: total as f64 / m,
                ratio: if remaining == 0 { 0.0 } else { total as f64 / remaining as f64 },
                instances_with_reuse: reused.iter().filter(|&&r| r > 0).count() as f64 / m,
            }
        })
        .collect();
}

fn gflops_summary(ck: &Checkpoint, blocks: f64, overhead: f64) -> GflopsSummary {
    let cfg = &ck.meta.model;
    let eh = embed_head_flops(cfg) as f64 / GIGA;
    let base = baseline_block_flops(cfg) as f64 / GIGA;
    GflopsSummary {
        mean_total: blocks + overhead + eh,
        blocks,
        overhead,
        embed_head: eh,
        baseline_blocks: base,
        baseline_total: base + eh,
        target: ck.meta.target_flops.map(|t| t / GIGA),
    }
}

pub fn baseline_predictions(ck: &Checkpoint, samples: &[Sample<f32>]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| Ok(argmax(baseline_forward(&s.image, &ck.backbone, &ck.meta.model)?.data())))
        .collect()
}

/// Accuracy and costs of a checkpoint. Backbone-only checkpoints run the
/// plain forward; ToFe checkpoints run the requested adaptive mode.
pub fn evaluate(ck: &Checkpoint, data: &Dataset, mode: InferenceMode, batch_size: usize) -> Result<RunReport> {
    data.check(&ck.meta.model)?;
    let start = Instant::now();
    let mut report = RunReport::new("eval", ck.meta.seed);
    if ck.is_tofe() {
        let outs = run_tofe(ck, &data.samples, mode, batch_size)?;
        summarize(ck, &data.samples, &outs, &mut report);
        report.mode = Some(mode_name(mode).into());
        report.details = serde_json::json!({ "batch_size": batch_size, "keep_counts": ck.keep_counts() });
    } else {
        let preds = baseline_predictions(ck, &data.samples)?;
        let correct = preds.iter().zip(&data.samples).filter(|(p, s)| **p == s.label).count();
        report.samples = data.len();
        report.accuracy = Some(100.0 * correct as f64 / data.len().max(1) as f64);
        report.mode = Some("baseline".into());
        let base = baseline_block_flops(&ck.meta.model) as f64 / GIGA;
        report.gflops = Some(gflops_summary(ck, base, 0.0));
    }
    let ms = start.elapsed().as_secs_f64() * 1e3;
    report.wall_clock.total_ms = ms;
    report.wall_clock.per_image_ms = Some(ms / data.len().max(1) as f64);
    report.wall_clock.note = "indicative only".into();
    Ok(report)
}

/// Itemized analytic cost plus a wall-clock mean over `forwards` runs after
/// a short warmup.
pub fn bench(ck: &Checkpoint, data: &Dataset, forwards: usize) -> Result<RunReport> {
    data.check(&ck.meta.model)?;
    if data.is_empty() {
        return Err(HarnessError::Data("bench needs at least one image".into()));
    }
    let forwards = forwards.max(100);
    let mut report = evaluate(ck, data, InferenceMode::InstanceAdaptive, 1)?;
    report.command = "bench".into();
    let once = |i: usize| -> Result<()> {
        let img = &data.samples[i % data.len()].image;
        match (&ck.tofe, &ck.meta.plan) {
            (Some(t), Some(p)) => {
                instance_adaptive_forward(img, &ck.backbone, t, p, &ck.meta.model)?;
            }
            _ => {
                baseline_forward(img, &ck.backbone, &ck.meta.model)?;
            }
        }
        Ok(())
    };
    for i in 0..10 {
        once(i)?;
    }
    let start = Instant::now();
    for i in 0..forwards {
        once(i)?;
    }
    let ms = start.elapsed().as_secs_f64() * 1e3;
    report.wall_clock.total_ms = ms;
    report.wall_clock.per_image_ms = Some(ms / forwards as f64);
    report.wall_clock.note = format!("indicative only: mean of {forwards} single-image forwards after 10 warmup runs");
    report.details = serde_json::json!({ "forwards": forwards });
    Ok(report)
}

/// Mean cosine similarity between block outputs, over tokens and samples.
pub fn similarity_matrix(ck: &Checkpoint, samples: &[Sample<f32>]) -> Result<Vec<Vec<f64>>> {
    let cfg = &ck.meta.model;
    let l = cfg.depth;
    let mut acc = vec![vec![0.0; l]; l];
    for s in samples {
        let hidden = hidden_states(&s.image, &ck.backbone, cfg)?;
        let h: Vec<Tensor<f64>> = hidden.iter().map(|t| t.cast()).collect();
        let rows = h[0].rows();
        for a in 0..l {
            for b in a + 1..l {
                let mut sum = 0.0;
                for i in 0..rows {
                    sum += cosine(h[a].row(i), h[b].row(i));
                }
                acc[a][b] += sum / rows as f64;
            }
        }
    }
    let k = samples.len().max(1) as f64;
    let mut m = vec![vec![1.0; l]; l];
    for a in 0..l {
        for b in a + 1..l {
            m[a][b] = acc[a][b] / k;
            m[b][a] = m[a][b];
        }
    }
    Ok(m)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean of entries with `|a - b| <= band` (off the diagonal) and of the rest.
pub fn band_means(m: &[Vec<f64>], band: usize) -> (f64, f64) {
    let (mut near, mut nn, mut far, mut nf) = (0.0, 0usize, 0.0, 0usize);
    for (a, row) in m.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            let d = a.abs_diff(b);
            if d == 0 {
                continue;
            }
            if d <= band {
                near += v;
                nn += 1;
            } else {
                far += v;
                nf += 1;
            }
        }
    }
    (near / nn.max(1) as f64, far / nf.max(1) as f64)
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    m.iter()
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

/// Writes `masks.csv` (one row per instance and stage, one column per
/// patch), `usage.csv` and `usage.pgm` (mean use frequency on the patch
/// grid, scaled so `S + 1` maps to 255).
pub fn export_masks(ck: &Checkpoint, samples: &[Sample<f32>], dir: &Path) -> Result<Vec<PathBuf>> {
    let outs = run_tofe(ck, samples, InferenceMode::InstanceAdaptive, 1)?;
    let cfg = &ck.meta.model;
    let (n, grid) = (cfg.num_patches(), cfg.grid());
    let mut csv = String::from("sample,stage,label,predicted");
    for i in 1..=n {
        csv.push_str(&format!(",t{i}"));
    }
    csv.push('\n');
    for (k, (o, s)) in outs.iter().zip(samples).enumerate() {
        for (st, m) in o.masks.iter().enumerate() {
            csv.push_str(&format!("{k},{},{},{}", st + 1, s.label, o.predicted()));
            for &b in &m.bits {
                csv.push_str(if b { ",1" } else { ",0" });
            }
            csv.push('\n');
        }
    }
    let usages: Vec<_> = outs.iter().map(|o| o.usage.clone()).collect();
    let map = token_usage_map(&usages, grid)?;
    let top = (ck.meta.plan.as_ref().map_or(0, |p| p.stages()) + 1) as f64;
    let rows: Vec<Vec<f64>> = (0..grid).map(|r| map.row(r).to_vec()).collect();
    let px: Vec<u8> = map.data().iter().map(|&f| (f / top * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let files = [
        (dir.join("masks.csv"), csv.into_bytes()),
        (dir.join("usage.csv"), matrix_csv(&rows).into_bytes()),
        (dir.join("usage.pgm"), encode_pgm(grid, grid, &px)),
    ];
    for (p, b) in &files {
        write_atomic(p, b)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Softmax regression on raw pixels; returns eval top-1 in percent.
pub fn linear_probe(train: &Dataset, eval: &Dataset, classes: usize, epochs: usize, seed: u64) -> Result<f64> {
    let d = train.channels * train.image_size * train.image_size;
    let flat = |s: &Sample<f32>| s.image.reshape(&[1, d]);
    let mut w = Tensor::<f32>::zeros(&[d, classes]);
    let mut b = Tensor::<f32>::zeros(&[1, classes]);
    let mut opt = AdamW::new(0.0);
    let mut rng = Rng::seed(seed);
    for _ in 0..epochs {
        for batch in shuffled_batches(train.len(), 64, rng.next_u64()) {
            let mut g = Graph::new();
            let wv = g.param(w.clone());
            let bv = g.param(b.clone());
            let rows: Vec<Tensor<f32>> = batch.iter().map(|&i| flat(&train.samples[i])).collect::<std::result::Result<_, _>>()?;
            let x = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?;
            let xv = g.constant(x);
            let z = g.matmul(xv, wv)?;
            let z = g.add_row_vector(z, bv)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.samples[i].label).collect();
            let loss = cls_loss(&mut g, &[z], &labels)?;
            g.backward(loss)?;
            let grads = vec![g.grad(wv).cloned(), g.grad(bv).cloned()];
            opt.step(vec![&mut w, &mut b], &grads, 1e-2);
        }
    }
    let mut correct = 0;
    for s in &eval.samples {
        let z = flat(s)?.matmul(&w)?.add(&b)?;
        if argmax(z.data()) == s.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / eval.len().max(1) as f64)
}
