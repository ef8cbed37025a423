//! Subcommand implementations. Every command resolves its configuration,
//! writes a `run_manifest.txt` into its output directory, then does its
//! work; outputs land only under the given output path.

use std::fs;
use std::path::{Path, PathBuf};

use rhythmlab_core::agcacl::{self, LossState};
use rhythmlab_core::autodiff::{gradcheck, GradCheckConfig, GradCheckReport, Mode};
use rhythmlab_core::dsp;
use rhythmlab_core::eval::{confusion, macro_metrics, similarity_series_rows};
use rhythmlab_core::ingest::{
    extract_labeled_segments, stratified_split, DatasetManifest, MajorClass, ManifestEntry, Split, WindowId,
};
use rhythmlab_core::model::{model_forward, BoundParams, ModelState};
use rhythmlab_core::rng;
use rhythmlab_core::synth;
use rhythmlab_core::train::{self, EpochLog, EpochObserver};
use rhythmlab_core::Tensor;

use crate::checkpoint::{load_checkpoint, parse_matrix, save_checkpoint, save_coefficients};
use crate::config::{write_manifest, Config};
use crate::container::{read_annotations, read_record, write_annotations, write_record};
use crate::dataset::{read_dataset, write_dataset, Dataset};
use crate::report;
use crate::{CliError, Result};

/// A parsed command, ready to run.
pub enum CommandSpec {
    Synth { out: PathBuf },
    Ingest { input: PathBuf, out: PathBuf },
    Split { manifest: PathBuf, out: PathBuf },
    Preprocess { input: PathBuf, windows: PathBuf, out: PathBuf },
    Augment { data: PathBuf, out: PathBuf },
    Train { train: PathBuf, val: Option<PathBuf>, out: PathBuf },
    Eval { data: PathBuf, model: PathBuf, out: PathBuf },
    Gradcheck { out: PathBuf },
    ExportCoeffs { run: PathBuf, out: PathBuf },
}

pub fn run_command(spec: &CommandSpec, config: &Config) -> Result<()> {
    match spec {
        CommandSpec::Synth { out } => cmd_synth(config, out),
        CommandSpec::Ingest { input, out } => cmd_ingest(config, input, out),
        CommandSpec::Split { manifest, out } => cmd_split(config, manifest, out),
        CommandSpec::Preprocess { input, windows, out } => cmd_preprocess(config, input, windows, out),
        CommandSpec::Augment { data, out } => cmd_augment(config, data, out),
        CommandSpec::Train { train, val, out } => cmd_train(config, train, val.as_deref(), out),
        CommandSpec::Eval { data, model, out } => cmd_eval(config, data, model, out),
        CommandSpec::Gradcheck { out } => cmd_gradcheck(config, out),
        CommandSpec::ExportCoeffs { run, out } => cmd_export_coeffs(config, run, out),
    }
}

// ---------------------------------------------------------------------------
// manifest and window-assignment text files
// ---------------------------------------------------------------------------

fn write_segments_file(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut out = String::from("# subject segment class_id aux_label window_count\n");
    for e in &manifest.entries {
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            e.subject,
            e.segment,
            e.class.id(),
            e.aux_label,
            e.window_count
        ));
    }
    fs::write(path, out).map_err(CliError::io(path))
}

fn read_segments_file(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let bad = |line: &str, detail: String| CliError::Format {
        what: "segments manifest",
        path: path.to_path_buf(),
        detail: format!("{detail} in {line:?}"),
    };
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 5 {
            return Err(bad(line, "expected 5 fields".into()));
        }
        let class_id: usize = parts[2].parse().map_err(|e| bad(line, format!("class: {e}")))?;
        if class_id == 0 {
            return Err(bad(line, "class ids are 1-based".into()));
        }
        entries.push(ManifestEntry {
            subject: parts[0].to_string(),
            segment: parts[1].parse().map_err(|e| bad(line, format!("segment: {e}")))?,
            class: MajorClass::from_index(class_id - 1)?,
            aux_label: parts[3].to_string(),
            window_count: parts[4].parse().map_err(|e| bad(line, format!("count: {e}")))?,
        });
    }
    Ok(DatasetManifest { entries })
}

/// One window per line: id, class id, aux label, split.
fn write_windows_file(path: &Path, rows: &[(WindowId, MajorClass, String, Split)]) -> Result<()> {
    let mut out = String::from("# id class_id aux_label split\n");
    for (id, class, aux, split) in rows {
        out.push_str(&format!("{id} {} {} {}\n", class.id(), aux, split.as_str()));
    }
    fs::write(path, out).map_err(CliError::io(path))
}

fn read_windows_file(path: &Path) -> Result<Vec<(WindowId, MajorClass, String, Split)>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let bad = |line: &str, detail: String| CliError::Format {
        what: "window assignment",
        path: path.to_path_buf(),
        detail: format!("{detail} in {line:?}"),
    };
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 4 {
            return Err(bad(line, "expected 4 fields".into()));
        }
        let id_parts: Vec<&str> = parts[0].split('/').collect();
        if id_parts.len() != 3 {
            return Err(bad(line, "id must be subject/segment/window".into()));
        }
        let id = WindowId {
            subject: id_parts[0].to_string(),
            segment: id_parts[1].parse().map_err(|e| bad(line, format!("segment: {e}")))?,
            window: id_parts[2].parse().map_err(|e| bad(line, format!("window: {e}")))?,
        };
        let class_id: usize = parts[1].parse().map_err(|e| bad(line, format!("class: {e}")))?;
        if class_id == 0 {
            return Err(bad(line, "class ids are 1-based".into()));
        }
        out.push((
            id,
            MajorClass::from_index(class_id - 1)?,
            parts[2].to_string(),
            Split::parse(parts[3])?,
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(config: &Config, out: &Path) -> Result<()> {
    write_manifest(out, "synth", config)?;
    let spec = config.synth_spec()?;
    let splits = synth::synth_records(&spec, config.seed)?;
    let mut entries = Vec::new();
    let mut windows = Vec::new();
    for split_records in &splits {
        for (record, annotations) in &split_records.records {
            let sig_path = out.join(format!("{}.sigc", record.subject));
            write_record(&sig_path, record)?;
            write_annotations(&out.join(format!("{}.ann", record.subject)), annotations)?;
            for (seg_idx, ann) in annotations.iter().enumerate() {
                let class = MajorClass::from_aux(&ann.aux_label)?;
                let count = (ann.end - ann.start) / (2 * record.fs as usize);
                entries.push(ManifestEntry {
                    subject: record.subject.clone(),
                    segment: seg_idx,
                    class,
                    aux_label: ann.aux_label.clone(),
                    window_count: count,
                });
                for w in 0..count {
                    windows.push((
                        WindowId { subject: record.subject.clone(), segment: seg_idx, window: w },
                        class,
                        ann.aux_label.clone(),
                        split_records.split,
                    ));
                }
            }
        }
    }
    write_segments_file(&out.join("segments.txt"), &DatasetManifest { entries })?;
    write_windows_file(&out.join("windows.txt"), &windows)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ingest / split / preprocess / augment
// ---------------------------------------------------------------------------

fn sigc_files(input: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(CliError::io(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "sigc").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no .sigc files under {}", input.display())));
    }
    Ok(files)
}

fn cmd_ingest(config: &Config, input: &Path, out: &Path) -> Result<()> {
    write_manifest(out, "ingest", config)?;
    let mut entries = Vec::new();
    for sig_path in sigc_files(input)? {
        let record = read_record(&sig_path)?;
        let ann_path = sig_path.with_extension("ann");
        let annotations = read_annotations(&ann_path)?;
        let window_len = 2 * record.fs as usize;
        for segment in extract_labeled_segments(&record, &annotations)? {
            entries.push(ManifestEntry {
                subject: segment.subject.clone(),
                segment: segment.index,
                class: segment.class,
                aux_label: segment.aux_label.clone(),
                window_count: segment.len() / window_len,
            });
        }
    }
    write_segments_file(&out.join("segments.txt"), &DatasetManifest { entries })?;
    Ok(())
}

fn cmd_split(config: &Config, manifest_path: &Path, out: &Path) -> Result<()> {
    write_manifest(out, "split", config)?;
    let manifest = read_segments_file(manifest_path)?;
    let assignment = stratified_split(&manifest, config.split_ratios(), config.seed)?;
    let mut rows = Vec::with_capacity(assignment.assignments.len());
    for (id, split) in &assignment.assignments {
        let entry = manifest
            .entries
            .iter()
            .find(|e| e.subject == id.subject && e.segment == id.segment)
            .ok_or_else(|| CliError::Usage(format!("window {id} has no manifest entry")))?;
        rows.push((id.clone(), entry.class, entry.aux_label.clone(), *split));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    write_windows_file(&out.join("windows.txt"), &rows)?;
    let (tr, va, te) = assignment.counts();
    let summary = format!("train {tr}\nval {va}\ntest {te}\n");
    let sum_path = out.join("split_summary.txt");
    fs::write(&sum_path, summary).map_err(CliError::io(&sum_path))?;
    Ok(())
}

fn cmd_preprocess(config: &Config, input: &Path, windows_path: &Path, out: &Path) -> Result<()> {
    write_manifest(out, "preprocess", config)?;
    let assignment = read_windows_file(windows_path)?;
    let fspec = config.filter_spec();
    let wspec = config.wavelet_spec();
    let mut buckets: [Vec<dsp::Sample>; 3] = Default::default();
    for sig_path in sigc_files(input)? {
        let record = read_record(&sig_path)?;
        let annotations = read_annotations(&sig_path.with_extension("ann"))?;
        for segment in extract_labeled_segments(&record, &annotations)? {
            for window in dsp::slice_windows(&segment, record.fs) {
                let Some((_, _, _, split)) = assignment.iter().find(|(id, ..)| *id == window.source) else {
                    continue; // window not selected by the assignment
                };
                let sample = dsp::preprocess_window(&dsp::downsample2(&window), &fspec, &wspec)?;
                buckets[*split as usize].push(sample);
            }
        }
    }
    for (split, bucket) in [Split::Train, Split::Val, Split::Test].into_iter().zip(buckets) {
        let ds = Dataset::new(bucket);
        write_dataset(&out.join(format!("{}.ds", split.as_str())), &ds)?;
    }
    Ok(())
}

fn cmd_augment(config: &Config, data: &Path, out: &Path) -> Result<()> {
    write_manifest(out, "augment", config)?;
    let ds = read_dataset(data)?;
    let balanced = dsp::balance_upsample(&ds.samples, config.target, &config.augmentation_spec(), config.seed)?;
    let result = Dataset { samples: balanced, raw_class_counts: ds.raw_class_counts };
    write_dataset(&out.join("train_balanced.ds"), &result)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct DiskObserver {
    out: PathBuf,
    log_lines: Vec<String>,
}

impl DiskObserver {
    fn epoch_dir(&self, epoch: usize) -> PathBuf {
        self.out.join(format!("epoch_{epoch:03}"))
    }

    fn flush_log(&self) -> Result<()> {
        let path = self.out.join("train_log.txt");
        fs::write(&path, self.log_lines.join("")).map_err(CliError::io(&path))
    }
}

impl EpochObserver for DiskObserver {
    fn on_coefficients(&mut self, epoch: usize, state: &LossState) -> rhythmlab_core::Result<()> {
        save_coefficients(&self.epoch_dir(epoch).join("coeffs"), state)
            .map_err(|e| rhythmlab_core::Error::Sink(format!("{e}")))
    }

    fn on_epoch(&mut self, log: &EpochLog, model: &ModelState) -> rhythmlab_core::Result<()> {
        save_checkpoint(&self.epoch_dir(log.epoch), model).map_err(|e| rhythmlab_core::Error::Sink(format!("{e}")))?;
        let val = match &log.val_metrics {
            Some(m) => format!(
                " val_top1={:.2} val_macro_f1={:.2}",
                rhythmlab_core::eval::round2(m.top1_acc),
                rhythmlab_core::eval::round2(m.macro_f1)
            ),
            None => String::new(),
        };
        self.log_lines.push(format!(
            "epoch={} focal={:.6} contrastive={:.6} skipped_anchors={}{val}\n",
            log.epoch, log.mean_focal, log.mean_contrastive, log.skipped_anchors
        ));
        self.flush_log().map_err(|e| rhythmlab_core::Error::Sink(format!("{e}")))
    }
}

fn cmd_train(config: &Config, train_path: &Path, val_path: Option<&Path>, out: &Path) -> Result<()> {
    write_manifest(out, "train", config)?;
    let tcfg = config.train_config();
    tcfg.validate()?;
    let train_ds = read_dataset(train_path)?;
    let val_ds = match val_path {
        Some(p) => read_dataset(p)?.samples,
        None => Vec::new(),
    };
    if train_ds.samples.is_empty() {
        return Err(CliError::Usage("training set is empty".into()));
    }
    let model_cfg = config.model_config()?;
    let sample_len = train_ds.samples[0].len();
    let model_cfg = rhythmlab_core::model::ModelConfig { input_len: sample_len, ..model_cfg };
    let mut model = ModelState::new(model_cfg, config.seed)?;

    let mut observer = DiskObserver { out: out.to_path_buf(), log_lines: Vec::new() };
    save_checkpoint(&observer.epoch_dir(0), &model)?;

    let raw_counts = train_ds.raw_class_counts.to_vec();
    let report = train::train(
        &mut model,
        &train_ds.samples,
        &val_ds,
        &raw_counts,
        &tcfg,
        &config.loss_config(),
        &config.focal_config(),
        &config.prior_spec()?,
        &mut observer,
    )?;
    if let Some(abort) = report.abort {
        return Err(CliError::NumericAbort { epoch: abort.epoch, step: abort.step, reason: abort.reason });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(config: &Config, data: &Path, model_path: &Path, out: &Path) -> Result<()> {
    write_manifest(out, "eval", config)?;
    let ckpt_path = if model_path.is_dir() { model_path.join("params.ckpt") } else { model_path.to_path_buf() };
    let mut model = load_checkpoint(&ckpt_path)?;
    let ds = read_dataset(data)?;
    if ds.samples.is_empty() {
        return Err(CliError::Usage("evaluation set is empty".into()));
    }
    let classes = model.cfg.classes;
    let (z, logits, labels) = train::eval_embeddings(&mut model, &ds.samples, 32)?;
    let preds: Vec<usize> = (0..logits.shape()[0])
        .map(|i| {
            let row = logits.row(i);
            (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0)
        })
        .collect();
    let cm = confusion(&preds, &labels, classes)?;
    let metrics = macro_metrics(&cm)?;
    let txt = out.join("metrics.txt");
    fs::write(&txt, report::metrics_text(&metrics, &cm)).map_err(CliError::io(&txt))?;
    let csv = out.join("metrics.csv");
    fs::write(&csv, report::metrics_csv(&metrics)).map_err(CliError::io(&csv))?;

    let stats = rhythmlab_core::eval::class_compactness(&z, &labels, classes)?;
    let comp = out.join("compactness.csv");
    fs::write(&comp, report::compactness_csv(&stats)).map_err(CliError::io(&comp))?;
    let summ = out.join("compactness_summary.csv");
    fs::write(&summ, report::compactness_summary_csv(&stats)).map_err(CliError::io(&summ))?;

    // inter-class similarity heatmap of this set's embeddings
    let (sim, _) = agcacl::similarity_matrix(&z, &labels, classes)?;
    let rows = similarity_series_rows(&[(0usize, sim)])?;
    let heat = out.join("similarity_heatmap.csv");
    fs::write(&heat, report::similarity_series_csv(&rows)).map_err(CliError::io(&heat))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::rng_from(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng::standard_normal(&mut r)).collect()).expect("shape/data agree")
}

/// The verification suite behind the `gradcheck` subcommand: every operator
/// family, the fusion block, the focal loss, the contrastive objective, and
/// the whole model graph.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let strict = GradCheckConfig::default();
    let mut results: Vec<(String, GradCheckReport)> = Vec::new();
    let named = |pairs: &[(&str, Tensor)]| -> Vec<(String, Tensor)> {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    };

    // elementwise, reductions, matmul, conv, pooling, normalization
    let a = rand_tensor(&[3, 4], seed ^ 1);
    let b = rand_tensor(&[3, 4], seed ^ 2);
    results.push((
        "elementwise".into(),
        gradcheck(
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let m = t.mul(s, v[0])?;
                let e = t.sigmoid(m);
                let g = t.gelu(e);
                let r = t.relu(g);
                Ok(t.sum_all(r))
            },
            &named(&[("a", a.clone()), ("b", b.clone())]),
            &strict,
        )?,
    ));
    let x3 = rand_tensor(&[2, 3, 9], seed ^ 3);
    let w3 = rand_tensor(&[4, 3, 3], seed ^ 4);
    results.push((
        "conv_pool".into(),
        gradcheck(
            |t, v| {
                let c = t.conv1d(v[0], v[1], 2, 1)?;
                let p = t.maxpool1d(c, 3, 2, 1)?;
                let q = t.adaptive_avgpool1(p)?;
                Ok(t.sum_all(q))
            },
            &named(&[("x", x3.clone()), ("w", w3)]),
            &strict,
        )?,
    ));
    let gamma = rand_tensor(&[3], seed ^ 5).map(|v| 1.0 + 0.1 * v);
    let beta = rand_tensor(&[3], seed ^ 6);
    results.push((
        "batchnorm".into(),
        gradcheck(
            |t, v| {
                let mut buf = rhythmlab_core::autodiff::BnBuffers::new(3);
                let y = t.batchnorm1d(v[0], v[1], v[2], &mut buf, Mode::Train, 0.1, 1e-5)?;
                let w = t.leaf(rand_tensor(&[2, 3, 9], 1234));
                let p = t.mul(y, w)?;
                Ok(t.sum_all(p))
            },
            &named(&[("x", x3.clone()), ("gamma", gamma.clone()), ("beta", beta.clone())]),
            &strict,
        )?,
    ));
    let x2 = rand_tensor(&[4, 6], seed ^ 7);
    let g6 = rand_tensor(&[6], seed ^ 8).map(|v| 1.0 + 0.1 * v);
    let b6 = rand_tensor(&[6], seed ^ 9);
    results.push((
        "layernorm_softmax".into(),
        gradcheck(
            |t, v| {
                let ln = t.layernorm(v[0], v[1], v[2], 1e-5)?;
                let sm = t.softmax(ln)?;
                let lg = t.log(sm);
                let w = t.leaf(rand_tensor(&[4, 6], 4321));
                let p = t.mul(lg, w)?;
                Ok(t.sum_all(p))
            },
            &named(&[("x", x2.clone()), ("gamma", g6), ("beta", b6)]),
            &strict,
        )?,
    ));
    let (q, k, v3) = (rand_tensor(&[2, 4, 3], seed ^ 10), rand_tensor(&[2, 4, 3], seed ^ 11), rand_tensor(&[2, 4, 3], seed ^ 12));
    results.push((
        "attention".into(),
        gradcheck(
            |t, v| {
                let o = t.scaled_dot_attention(v[0], v[1], v[2])?;
                let w = t.leaf(rand_tensor(&[2, 4, 3], 77));
                let p = t.mul(o, w)?;
                Ok(t.sum_all(p))
            },
            &named(&[("q", q), ("k", k), ("v", v3)]),
            &strict,
        )?,
    ));
    results.push((
        "similarity".into(),
        gradcheck(
            |t, v| {
                let n = t.l2norm_rows(v[0], 1e-6)?;
                let c = t.cosine_sim(n, v[1], 1e-6)?;
                Ok(t.sum_all(c))
            },
            &named(&[("a", x2.clone()), ("b", rand_tensor(&[4, 6], seed ^ 13))]),
            &strict,
        )?,
    ));

    // focal loss
    let logits = rand_tensor(&[5, 6], seed ^ 14);
    results.push((
        "focal_loss".into(),
        gradcheck(|t, v| t.focal_loss(v[0], &[0, 2, 5, 1, 3], 1.0), &named(&[("logits", logits)]), &strict)?,
    ));

    // contrastive objective through embeddings and prototypes
    let z = rand_tensor(&[8, 16], seed ^ 15);
    let protos = rand_tensor(&[3, 16], seed ^ 16);
    let lcfg = rhythmlab_core::agcacl::LossConfig::default();
    let mut sim = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        for j in 0..3 {
            sim.set2(i, j, if i == j { 0.9 } else { 0.4 });
        }
    }
    let align = agcacl::align_coeffs(&sim, lcfg.tau_align, lcfg.epsilon);
    let repel = agcacl::repel_coeffs(&sim, 0.1)?;
    let mut lstate = LossState::new(vec![0.2, 0.3, 0.5], 3);
    lstate.advance(sim, align, repel, lcfg.momentum);
    let labels = [0usize, 1, 2, 0, 1, 2, 0, 1];
    results.push((
        "contrastive_total".into(),
        gradcheck(
            move |t, v| {
                let (total, _) = agcacl::contrastive_total(t, v[0], v[1], &labels, &lstate, &lcfg)?;
                Ok(total)
            },
            &named(&[("z", z), ("prototypes", protos)]),
            &strict,
        )?,
    ));

    // fusion block
    let cfg = rhythmlab_core::model::ModelConfig::toy(8).map_err(CliError::Core)?;
    let state = ModelState::new(cfg.clone(), seed ^ 17)?;
    let ze = rand_tensor(&[2, cfg.embed_dim], seed ^ 18);
    let zm = rand_tensor(&[2, cfg.embed_dim], seed ^ 19);
    let fusion_params: Vec<(String, Tensor)> = state
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("fusion."))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let fusion_names: Vec<String> = fusion_params.iter().map(|(n, _)| n.clone()).collect();
    let state_for_fusion = state.clone();
    let fused_dim = cfg.fused_dim;
    results.push((
        "fusion_block".into(),
        gradcheck(
            move |t, vars| {
                let mut all = Vec::with_capacity(state_for_fusion.params.len());
                for i in 0..state_for_fusion.params.len() {
                    let name = state_for_fusion.params.name(i);
                    match fusion_names.iter().position(|n| n == name) {
                        Some(kk) => all.push(vars[kk]),
                        None => all.push(t.leaf(state_for_fusion.params.tensor(i).clone())),
                    }
                }
                let bound = BoundParams::from_slice(&all);
                let (ze_v, zm_v) = (t.leaf(ze.clone()), t.leaf(zm.clone()));
                let mut rr = rng::rng_from(0);
                let fused = rhythmlab_core::model::fuse(t, &state_for_fusion, &bound, ze_v, zm_v, Mode::Eval, &mut rr)?;
                let w = t.leaf(rand_tensor(&[2, fused_dim], 999));
                let p = t.mul(fused, w)?;
                Ok(t.sum_all(p))
            },
            &fusion_params,
            &GradCheckConfig { max_coords_per_tensor: Some(24), ..strict.clone() },
        )?,
    ));

    // whole model graph: absolute escape for near-zero-gradient coordinates
    // (see the gradcheck module docs)
    let mut deep_cfg = cfg;
    deep_cfg.input_len = 64;
    let mut deep_state = ModelState::new(deep_cfg.clone(), seed ^ 20)?;
    let xe = rand_tensor(&[2, deep_cfg.ecg_channels, 64], seed ^ 21);
    let xm = rand_tensor(&[2, deep_cfg.iegm_channels, 64], seed ^ 22);
    let deep_labels = [1usize, 4];
    let lcfg = rhythmlab_core::agcacl::LossConfig::default();
    let mut sim6 = Tensor::zeros(&[6, 6]);
    for i in 0..6 {
        for j in 0..6 {
            sim6.set2(i, j, if i == j { 1.0 } else { 0.35 });
        }
    }
    let align6 = agcacl::align_coeffs(&sim6, lcfg.tau_align, lcfg.epsilon);
    let repel6 = agcacl::repel_coeffs(&sim6, 0.1)?;
    let mut lstate6 = LossState::new(vec![1.0 / 6.0; 6], 6);
    lstate6.advance(sim6, align6, repel6, lcfg.momentum);
    let deep_params: Vec<(String, Tensor)> = deep_state.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let proto_idx = deep_state.prototypes_index();
    results.push((
        "full_model_graph".into(),
        gradcheck(
            move |t, vars| {
                let bound = BoundParams::from_slice(vars);
                let (xe_v, xm_v) = (t.leaf(xe.clone()), t.leaf(xm.clone()));
                let mut rr = rng::rng_from(0);
                let out = model_forward(t, &mut deep_state, &bound, xe_v, xm_v, Mode::Eval, &mut rr)?;
                let focal = t.focal_loss(out.logits, &deep_labels, 1.0)?;
                let (contrastive, _) =
                    agcacl::contrastive_total(t, out.fused, bound.var_at(proto_idx), &deep_labels, &lstate6, &lcfg)?;
                agcacl::combined_objective(t, focal, contrastive)
            },
            &deep_params,
            &GradCheckConfig { absolute_tolerance: 1e-8, max_coords_per_tensor: Some(3), seed: seed ^ 23, ..strict },
        )?,
    ));

    Ok(results)
}

fn cmd_gradcheck(config: &Config, out: &Path) -> Result<()> {
    write_manifest(out, "gradcheck", config)?;
    let results = gradcheck_suite(config.seed)?;
    let mut text = String::new();
    let mut all_pass = true;
    for (name, report) in &results {
        all_pass &= report.pass;
        text.push_str(&format!(
            "{} pass={} max_rel_err={:.3e} step={:.1e} tolerance={:.1e}\n",
            name,
            report.pass,
            report.max_rel_err(),
            report.step,
            report.tolerance
        ));
    }
    text.push_str(&format!("overall pass={all_pass}\n"));
    let path = out.join("gradcheck.txt");
    fs::write(&path, text).map_err(CliError::io(&path))?;
    if !all_pass {
        return Err(CliError::Usage("gradient check failed; see gradcheck.txt".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export-coeffs
// ---------------------------------------------------------------------------

fn cmd_export_coeffs(config: &Config, run: &Path, out: &Path) -> Result<()> {
    write_manifest(out, "export-coeffs", config)?;
    let mut epochs: Vec<(usize, PathBuf)> = fs::read_dir(run)
        .map_err(CliError::io(run))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?.to_string();
            let idx: usize = name.strip_prefix("epoch_")?.parse().ok()?;
            let s = p.join("coeffs").join("S.txt");
            s.exists().then_some((idx, s))
        })
        .collect();
    epochs.sort();
    if epochs.is_empty() {
        return Err(CliError::Usage(format!("no epoch_*/coeffs/S.txt under {}", run.display())));
    }
    let mut snapshots = Vec::with_capacity(epochs.len());
    for (epoch, path) in &epochs {
        snapshots.push((*epoch, parse_matrix(path)?));
    }
    let rows = similarity_series_rows(&snapshots)?;
    let series_path = out.join("similarity_series.csv");
    fs::write(&series_path, report::similarity_series_csv(&rows)).map_err(CliError::io(&series_path))?;
    // final-epoch matrix alone (heatmap data)
    let last_epoch = snapshots.last().expect("nonempty").0;
    let final_rows: Vec<_> = rows.iter().filter(|r| r.0 == last_epoch).cloned().collect();
    let final_path = out.join("similarity_final.csv");
    fs::write(&final_path, report::similarity_series_csv(&final_rows)).map_err(CliError::io(&final_path))?;
    Ok(())
}
