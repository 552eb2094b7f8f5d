//! One function per subcommand. Only [`validate`] opens share sidecars.

use std::fs;
use std::path::Path;

use log::info;
use maskscope::aes::hamming_weight;
use maskscope::dataset::{sidecar_path, LabeledDataset, LeakageModel, Side, Split};
use maskscope::interp::{
    self, agreement, high_low_score, logit_summary, patched_forward, pca_fit, probe16_explanation,
    probe_train, recover_masks_hw, recover_share_bits, rotation_sweep, validate_shares, PatchSpec,
    PcaBasis, Rotation,
};
use maskscope::metrics::{self, ClassPrior};
use maskscope::nn::{init_model, predict_chunked, train as fit, Batch, Checkpoint, MlpModel};
use maskscope::sim::{simulate as sim_run, GroundTruth, ShareRole};
use ndarray::{Array2, Axis};
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, SimPart};
use crate::error::{CliError, Result};
use crate::run::{opt, write_json, write_sidecar_manifest, CsvOut, Manifest, RunDir};

pub struct Ctx {
    pub cfg: RunConfig,
    pub run: RunDir,
}

impl Ctx {
    fn dataset(&self, path: &Path) -> Result<LabeledDataset> {
        self.run.require(path, "simulate")?;
        let ds = LabeledDataset::load(path)?;
        let width = self.cfg.mlp_spec().input_width;
        if ds.leakage_model != self.cfg.leakage_model() || ds.traces.trace_length() != width {
            return Err(CliError::Config(format!(
                "{} was simulated with another config ({:?}, {} samples); rerun `maskscope simulate`",
                path.display(),
                ds.leakage_model,
                ds.traces.trace_length()
            )));
        }
        Ok(ds)
    }

    fn attack(&self) -> Result<LabeledDataset> {
        self.dataset(&self.run.attack_traces())
    }

    fn epoch(&self) -> Result<usize> {
        let e = self.cfg.analysis_epoch();
        if !self.cfg.checkpoint_epochs().contains(&e) {
            return Err(CliError::Config(format!(
                "no checkpoint is kept for epoch {e}; kept epochs are {:?}",
                self.cfg.checkpoint_epochs()
            )));
        }
        Ok(e)
    }

    fn model(&self, epoch: usize) -> Result<MlpModel> {
        let path = self.run.checkpoint(epoch);
        self.run.require(&path, "train")?;
        let ck = Checkpoint::load(&path)?;
        if ck.model.spec != self.cfg.mlp_spec() {
            return Err(CliError::Config(format!(
                "{} holds a different architecture; rerun `maskscope train`",
                path.display()
            )));
        }
        Ok(ck.model)
    }

    fn basis(&self, epoch: usize, layer: usize) -> Result<PcaBasis> {
        let path = self.run.pca_basis(epoch, layer);
        self.run.require(&path, "pca")?;
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        let doc: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_value(doc["data"].clone())
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn manifest(&self, stage: &'static str) -> Manifest {
        Manifest::new(&self.cfg, stage)
    }
}

pub fn simulate(ctx: &Ctx) -> Result<()> {
    for (part, path, split) in [
        (SimPart::Profiling, ctx.run.profiling_traces(), Split::Profiling),
        (SimPart::Attack, ctx.run.attack_traces(), Split::Attack),
    ] {
        let sim = ctx.cfg.sim_config(part);
        info!("simulating {} traces into {}", sim.n_traces, path.display());
        let (traces, truth) = sim_run(&sim)?;
        let dir = path.parent().expect("data path has a parent");
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        LabeledDataset::new(traces, ctx.cfg.leakage_model(), split).save(&path)?;
        let shares = sidecar_path(&path);
        truth.save(&shares)?;
        write_sidecar_manifest(&path, &ctx.manifest("simulate"))?;
        write_sidecar_manifest(&shares, &ctx.manifest("simulate"))?;
    }
    Ok(())
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let prof_path = ctx.run.profiling_traces();
    let prof = ctx.dataset(&prof_path)?;
    let attack = ctx.attack()?;
    let spec = ctx.cfg.mlp_spec();
    let tc = ctx.cfg.train_config();
    let keep = ctx.cfg.checkpoint_epochs();
    let mut model = init_model(&spec, ctx.cfg.init_seed())?;
    model.fit_input_standardization(prof.traces.samples.view())?;
    let prior = ClassPrior::for_model(prof.leakage_model);
    info!("training {:?} for {} epochs", spec.layer_widths, tc.epochs);
    let manifest = ctx
        .manifest("train")
        .input(&ctx.run.root, &prof_path)?
        .input(&ctx.run.root, &ctx.run.attack_traces())?;
    let history = fit(
        &mut model,
        Batch::new(prof.traces.samples.view(), &prof.labels)?,
        Some(Batch::new(attack.traces.samples.view(), &attack.labels)?),
        &prior,
        &tc,
        |s, m, opt| {
            info!(
                "epoch {:>3}: loss {:.4}, train PI {:.4}, test PI {:.4}",
                s.epoch,
                s.train_loss,
                s.train_pi,
                s.test_pi.unwrap_or(f64::NAN)
            );
            if keep.contains(&s.epoch) {
                let path = ctx.run.checkpoint(s.epoch);
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir)?;
                }
                Checkpoint {
                    epoch: s.epoch as u64,
                    model: m.clone(),
                    optimizer: Some(opt.clone()),
                }
                .save(&path)?;
                write_sidecar_manifest(&path, &manifest.clone().at(s.epoch, None))
                    .map_err(|e| maskscope::Error::Io(std::io::Error::other(e.to_string())))?;
            }
            Ok(())
        },
    )?;
    let mut csv = CsvOut::new(
        &manifest,
        &[
            "epoch",
            "train_loss",
            "l1_penalty",
            "train_pi",
            "train_accuracy",
            "test_pi",
            "test_accuracy",
        ],
    );
    for s in &history.epochs {
        csv.row([
            s.epoch.to_string(),
            s.train_loss.to_string(),
            s.l1_penalty.to_string(),
            s.train_pi.to_string(),
            s.train_accuracy.to_string(),
            opt(s.test_pi),
            opt(s.test_accuracy),
        ]);
    }
    csv.write(&ctx.run.pi_curve())
}

pub fn metrics(ctx: &Ctx) -> Result<()> {
    let epoch = ctx.epoch()?;
    let model = ctx.model(epoch)?;
    let attack = ctx.attack()?;
    let m = ctx
        .manifest("metrics")
        .at(epoch, None)
        .input(&ctx.run.root, &ctx.run.checkpoint(epoch))?
        .input(&ctx.run.root, &ctx.run.attack_traces())?;
    let probs = predict_chunked(&model, attack.traces.samples.view())?;
    let prior = ClassPrior::for_model(attack.leakage_model);
    let pi = metrics::perceived_information(probs.view(), &attack.labels, &prior)?;
    let acc = metrics::accuracy(probs.view(), &attack.labels)?;
    let key = attack.traces.key[0];
    let fixed_key = attack.traces.key.iter().all(|&k| k == key);
    let mut rank_zero = None;
    let mut final_rank = None;
    if fixed_key {
        let curve = metrics::key_rank(probs.view(), &attack.traces.plaintext, key, attack.leakage_model)?;
        rank_zero = metrics::traces_to_rank_zero(&curve);
        final_rank = curve.last().copied();
        let mut csv = CsvOut::new(&m, &["traces", "rank"]);
        for (i, r) in curve.iter().enumerate() {
            csv.row([i + 1, *r]);
        }
        csv.write(&ctx.run.tagged("metrics", "key_rank", epoch, None, "csv"))?;
    }
    info!("epoch {epoch}: attack PI {pi:.4}, accuracy {acc:.4}, rank 0 after {rank_zero:?} traces");
    write_json(
        &ctx.run.tagged("metrics", "metrics", epoch, None, "json"),
        &m,
        &json!({
            "epoch": epoch,
            "attack_pi": pi,
            "attack_accuracy": acc,
            "fixed_key": fixed_key,
            "traces_to_rank_zero": rank_zero,
            "final_rank": final_rank,
        }),
    )
}

pub fn logits(ctx: &Ctx) -> Result<()> {
    let epoch = ctx.epoch()?;
    let model = ctx.model(epoch)?;
    let attack = ctx.attack()?;
    let m = ctx
        .manifest("logits")
        .at(epoch, None)
        .input(&ctx.run.root, &ctx.run.checkpoint(epoch))?
        .input(&ctx.run.root, &ctx.run.attack_traces())?;
    let s = logit_summary(&model, attack.traces.samples.view(), &attack.labels, ctx.cfg.analysis.logit_stat)?;
    let c = model.spec.n_classes;
    let mut header = vec!["class".to_string(), "count".to_string()];
    header.extend((0..c).map(|j| format!("logit_{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = CsvOut::new(&m, &header);
    for (class, row) in s.rows.iter().enumerate() {
        let mut cells = vec![class.to_string(), s.counts[class].to_string()];
        match row {
            Some(r) => cells.extend(r.iter().map(|v| v.to_string())),
            None => cells.extend(std::iter::repeat_n(String::new(), c)),
        }
        csv.row(cells);
    }
    csv.write(&ctx.run.tagged("logits", "summary", epoch, None, "csv"))
}

pub fn pca(ctx: &Ctx) -> Result<()> {
    let epoch = ctx.epoch()?;
    let layer = ctx.cfg.analysis_layer();
    let model = ctx.model(epoch)?;
    let attack = ctx.attack()?;
    let m = ctx
        .manifest("pca")
        .at(epoch, Some(layer))
        .input(&ctx.run.root, &ctx.run.checkpoint(epoch))?
        .input(&ctx.run.root, &ctx.run.attack_traces())?;
    let acts = model.hidden_activations(attack.traces.samples.view(), layer)?;
    let basis = pca_fit(acts.view(), ctx.cfg.analysis.k, layer)?;
    info!(
        "layer {layer}: explained variance ratios {:?}",
        basis.explained_ratio().to_vec()
    );
    write_json(&ctx.run.pca_basis(epoch, layer), &m, &basis)?;
    let coords = basis.project(acts.view())?;
    let mut header = vec!["trace".to_string(), "label".to_string()];
    header.extend((0..basis.k()).map(|j| format!("pc{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = CsvOut::new(&m, &header);
    for (i, row) in coords.rows().into_iter().enumerate() {
        let mut cells = vec![i.to_string(), attack.labels[i].to_string()];
        cells.extend(row.iter().map(|v| v.to_string()));
        csv.row(cells);
    }
    csv.write(&ctx.run.tagged("pca", "coords", epoch, Some(layer), "csv"))
}

pub fn probe(ctx: &Ctx) -> Result<()> {
    let epoch = ctx.epoch()?;
    let layer = ctx.cfg.analysis_layer();
    let model = ctx.model(epoch)?;
    let basis = ctx.basis(epoch, layer)?;
    let attack = ctx.attack()?;
    let m = ctx
        .manifest("probe")
        .at(epoch, Some(layer))
        .input(&ctx.run.root, &ctx.run.checkpoint(epoch))?
        .input(&ctx.run.root, &ctx.run.attack_traces())?
        .input(&ctx.run.root, &ctx.run.pca_basis(epoch, layer))?;
    let pcfg = ctx.cfg.probe_config();
    let acts = model.hidden_activations(attack.traces.samples.view(), layer)?;
    let pc01 = basis.project(acts.view())?.select(Axis(1), &[0, 1]);
    let mut csv = CsvOut::new(
        &m,
        &["target", "bit", "features", "n_classes", "train_accuracy", "holdout_accuracy"],
    );
    let n_classes = attack.n_classes();
    for (features, x) in [("activations", acts.view()), ("pc01", pc01.view())] {
        let p = probe_train(x, &attack.labels, n_classes, &pcfg)?;
        csv.row([
            "label".to_string(),
            String::new(),
            features.to_string(),
            n_classes.to_string(),
            p.train_accuracy.to_string(),
            p.holdout_accuracy.to_string(),
        ]);
    }
    if attack.leakage_model == LeakageModel::Id {
        for (side, name) in [(Side::SboxInput, "sbox_input"), (Side::SboxOutput, "sbox_output")] {
            for bit in 0..8u8 {
                let p = probe_train(acts.view(), &attack.bit_labels(side, bit)?, 2, &pcfg)?;
                info!("{name} bit {bit}: probe accuracy {:.3}", p.holdout_accuracy);
                csv.row([
                    name.to_string(),
                    bit.to_string(),
                    "activations".to_string(),
                    "2".to_string(),
                    p.train_accuracy.to_string(),
                    p.holdout_accuracy.to_string(),
                ]);
            }
        }
        let e = probe16_explanation(&model, attack.traces.samples.view(), &attack.labels, layer, &pcfg)?;
        write_json(
            &ctx.run.tagged("probe", "probe16", epoch, Some(layer), "json"),
            &m,
            &json!({
                "probe_accuracy": e.probe_accuracy,
                "transformed_pi": e.transformed_pi,
                "model_pi": e.model_pi,
                "cross_entropy_bits": e.cross_entropy_bits,
                "kl_bits": e.kl_bits,
                "rows": e.rows,
            }),
        )?;
    }
    csv.write(&ctx.run.tagged("probe", "probes", epoch, Some(layer), "csv"))
}

fn describe_fixed(p: &PatchSpec) -> String {
    p.fixed_coords
        .iter()
        .map(|(pc, v)| format!("{pc}:{v}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn describe_rotation(r: Option<Rotation>) -> String {
    r.map(|r| format!("{}:{}:{}", r.pc_i, r.pc_j, r.angle)).unwrap_or_default()
}

pub fn patch(ctx: &Ctx) -> Result<()> {
    let epoch = ctx.epoch()?;
    let layer = ctx.cfg.analysis_layer();
    let model = ctx.model(epoch)?;
    let basis = ctx.basis(epoch, layer)?;
    let attack = ctx.attack()?;
    let x = attack.traces.samples.view();
    let m = ctx
        .manifest("patch")
        .at(epoch, Some(layer))
        .input(&ctx.run.root, &ctx.run.checkpoint(epoch))?
        .input(&ctx.run.root, &ctx.run.attack_traces())?
        .input(&ctx.run.root, &ctx.run.pca_basis(epoch, layer))?;
    let corner = ctx.cfg.analysis.recovery.corner_scale;
    let mut patches = vec![PatchSpec::identity(layer)];
    for pc in 0..2.min(basis.k()) {
        let v = corner * basis.explained_variance[pc].sqrt();
        for value in [-v, v] {
            patches.push(PatchSpec {
                layer_index: layer,
                fixed_coords: vec![(pc, value)],
                rotation: None,
            });
        }
    }
    for p in &ctx.cfg.analysis.patches {
        if p.layer_index != layer {
            return Err(CliError::Config(format!(
                "analysis.patches targets layer {} but the analyzed layer is {layer}",
                p.layer_index
            )));
        }
        patches.push(p.clone());
    }
    let plain = model.logits(x)?;
    let plain_pred: Vec<usize> = plain.rows().into_iter().map(|r| metrics::argmax(r.iter().copied())).collect();
    let hw = model.spec.n_classes == 9;
    let mut csv = CsvOut::new(
        &m,
        &[
            "patch",
            "fixed_coords",
            "rotation",
            "mean_high_low",
            "mean_abs_logit_change",
            "changed_predictions",
        ],
    );
    for (i, p) in patches.iter().enumerate() {
        let logits = patched_forward(&model, x, &basis, p)?;
        let n = logits.nrows() as f64;
        let change = (&logits - &plain).mapv(f64::abs).mean().unwrap_or(0.0);
        let changed = logits
            .rows()
            .into_iter()
            .zip(&plain_pred)
            .filter(|(r, &p0)| metrics::argmax(r.iter().copied()) != p0)
            .count() as f64
            / n;
        let high_low = if hw {
            Some(metrics::pairwise_sum(&high_low_score(logits.view())?) / n)
        } else {
            None
        };
        csv.row([
            i.to_string(),
            describe_fixed(p),
            describe_rotation(p.rotation),
            opt(high_low),
            change.to_string(),
            changed.to_string(),
        ]);
    }
    csv.write(&ctx.run.tagged("patch", "patches", epoch, Some(layer), "csv"))?;
    if hw {
        let sweep = rotation_sweep(&model, x, &basis, &ctx.cfg.analysis.recovery)?;
        let mut csv = CsvOut::new(&m, &["angle", "summed_snr_peak"]);
        for (a, s) in sweep {
            csv.row([a, s]);
        }
        csv.write(&ctx.run.tagged("patch", "rotation_sweep", epoch, Some(layer), "csv"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ShareSummary {
    role: &'static str,
    free_axis: usize,
    flipped: bool,
    snr_argmax: usize,
    snr_peak: f64,
    histogram: Vec<usize>,
    patch: PatchSpec,
}

pub fn recover_masks(ctx: &Ctx) -> Result<()> {
    let epoch = ctx.epoch()?;
    let layer = ctx.cfg.analysis_layer();
    let model = ctx.model(epoch)?;
    let basis = ctx.basis(epoch, layer)?;
    let attack = ctx.attack()?;
    let x = attack.traces.samples.view();
    let m = ctx
        .manifest("recover-masks")
        .at(epoch, Some(layer))
        .input(&ctx.run.root, &ctx.run.checkpoint(epoch))?
        .input(&ctx.run.root, &ctx.run.attack_traces())?
        .input(&ctx.run.root, &ctx.run.pca_basis(epoch, layer))?;
    match model.spec.n_classes {
        9 => {
            let rec = recover_masks_hw(&model, x, &basis, &ctx.cfg.analysis.recovery)?;
            let (mask, masked) = (rec.mask_share(), rec.masked_share());
            info!(
                "angle {:.3}: mask SNR peak at sample {}, masked share at sample {}",
                rec.angle, mask.validation.argmax, masked.validation.argmax
            );
            let mut csv = CsvOut::new(&m, &["trace", "mask_hw", "masked_hw", "mask_score", "masked_score"]);
            for i in 0..mask.estimate.len() {
                csv.row([
                    i.to_string(),
                    mask.estimate.values[i].to_string(),
                    masked.estimate.values[i].to_string(),
                    mask.estimate.scores[i].to_string(),
                    masked.estimate.scores[i].to_string(),
                ]);
            }
            csv.write(&ctx.run.recovered_shares())?;
            let mut snr = CsvOut::new(&m, &["sample", "snr_mask", "snr_masked"]);
            for (j, (a, b)) in mask.validation.snr.iter().zip(masked.validation.snr.iter()).enumerate() {
                snr.row([j.to_string(), a.to_string(), b.to_string()]);
            }
            snr.write(&ctx.run.snr_mask())?;
            let summary = |role, s: &interp::RecoveredShare| ShareSummary {
                role,
                free_axis: s.free_axis,
                flipped: s.flipped,
                snr_argmax: s.validation.argmax,
                snr_peak: s.validation.peak,
                histogram: s.estimate.histogram(),
                patch: s.estimate.source.clone(),
            };
            write_json(
                &ctx.run.recovery_summary(),
                &m,
                &json!({
                    "kind": "hw",
                    "angle": rec.angle,
                    "sweep": rec.sweep,
                    "shares": [summary("mask", mask), summary("masked", masked)],
                }),
            )
        }
        _ => {
            let b = &ctx.cfg.analysis.bits;
            let seed = maskscope::rng::derive_seed(ctx.cfg.seed, "kmeans");
            let rec = recover_share_bits(&model, x, &basis, &b.input_coords, b.output_coords, seed)?;
            let v = validate_shares(&rec.estimate.values, x)?;
            info!("{} clusters; SNR peak {:.3} at sample {}", rec.estimate.histogram().iter().filter(|&&c| c > 0).count(), v.peak, v.argmax);
            let mut csv = CsvOut::new(&m, &["trace", "cluster", "distance"]);
            for (i, (c, d)) in rec.estimate.values.iter().zip(&rec.estimate.scores).enumerate() {
                csv.row([i.to_string(), c.to_string(), d.to_string()]);
            }
            csv.write(&ctx.run.recovered_shares())?;
            let mut snr = CsvOut::new(&m, &["sample", "snr_cluster"]);
            for (j, a) in v.snr.iter().enumerate() {
                snr.row([j.to_string(), a.to_string()]);
            }
            snr.write(&ctx.run.snr_mask())?;
            write_json(
                &ctx.run.recovery_summary(),
                &m,
                &json!({
                    "kind": "bits2",
                    "silhouettes": rec.silhouettes,
                    "histogram": rec.estimate.histogram(),
                    "snr_argmax": v.argmax,
                    "snr_peak": v.peak,
                    "patch": rec.estimate.source,
                }),
            )
        }
    }
}

/// Columns of a CSV written by this tool, skipping the manifest line.
fn read_csv_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let bad = |what: String| CliError::Core(maskscope::Error::Shape(format!("{}: {what}", path.display())));
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').collect();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| header.iter().position(|h| h == n).ok_or_else(|| bad(format!("no column {n}"))))
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        for (c, &i) in idx.iter().enumerate() {
            let v = cells
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("bad row `{line}`")))?;
            cols[c].push(v);
        }
    }
    Ok(cols)
}

pub fn validate(ctx: &Ctx) -> Result<()> {
    let epoch = ctx.epoch()?;
    let layer = ctx.cfg.analysis_layer();
    let recovered = ctx.run.recovered_shares();
    ctx.run.require(&recovered, "recover-masks")?;
    let attack = ctx.attack()?;
    let shares_path = sidecar_path(&ctx.run.attack_traces());
    ctx.run.require(&shares_path, "simulate")?;
    let truth = GroundTruth::load(&shares_path)?;
    if truth.shares.nrows() != attack.n_traces() {
        return Err(CliError::Core(maskscope::Error::Shape(format!(
            "sidecar has {} rows for {} traces",
            truth.shares.nrows(),
            attack.n_traces()
        ))));
    }
    let m = ctx
        .manifest("validate")
        .at(epoch, Some(layer))
        .input(&ctx.run.root, &recovered)?
        .input(&ctx.run.root, &ctx.run.attack_traces())?
        .input(&ctx.run.root, &shares_path)?;
    let x = attack.traces.samples.view();
    let sim = ctx.cfg.sim_config(SimPart::Attack);
    let mask_poi = sim.points_of(ShareRole::MaskR).first().copied();
    let masked_poi = sim.points_of(ShareRole::MaskedSboxOut).first().copied();
    let hw_of = |v: Vec<u8>| -> Vec<u8> { v.into_iter().map(hamming_weight).collect() };
    let true_mask = hw_of(truth.mask());
    let true_masked = hw_of(truth.masked_output());
    let snr_mask = validate_shares(&true_mask, x)?;
    let snr_masked = validate_shares(&true_masked, x)?;
    let mut csv = CsvOut::new(&m, &["sample", "snr_true_mask_hw", "snr_true_masked_hw"]);
    for (j, (a, b)) in snr_mask.snr.iter().zip(snr_masked.snr.iter()).enumerate() {
        csv.row([j.to_string(), a.to_string(), b.to_string()]);
    }
    csv.write(&ctx.run.root.join("snr_truth.csv"))?;

    let report = if ctx.cfg.leakage_model() == LeakageModel::Hw {
        let cols = read_csv_columns(&recovered, &["mask_hw", "masked_hw"])?;
        let est: Vec<Vec<u8>> = cols.iter().map(|c| c.iter().map(|&v| v as u8).collect()).collect();
        if est[0].len() != attack.n_traces() {
            return Err(CliError::Core(maskscope::Error::Shape(format!(
                "{} has {} rows for {} traces; rerun `maskscope recover-masks`",
                recovered.display(),
                est[0].len(),
                attack.n_traces()
            ))));
        }
        let est_mask = validate_shares(&est[0], x)?;
        let est_masked = validate_shares(&est[1], x)?;
        let model = ctx.model(epoch)?;
        let basis = ctx.basis(epoch, layer)?;
        let acts = model.hidden_activations(x, layer)?;
        let pc01 = basis.project(acts.view())?.select(Axis(1), &[0, 1]);
        let as_labels = |v: &[u8]| -> Vec<usize> { v.iter().map(|&h| h as usize).collect() };
        let pcfg = ctx.cfg.probe_config();
        let probe_mask = probe_train(pc01.view(), &as_labels(&true_mask), 9, &pcfg)?.holdout_accuracy;
        let probe_masked = probe_train(pc01.view(), &as_labels(&true_masked), 9, &pcfg)?.holdout_accuracy;
        let agree_mask = agreement(&est[0], &true_mask)?;
        info!(
            "mask HW agreement {agree_mask:.3}; estimated mask SNR peak at {} (mask PoI {mask_poi:?})",
            est_mask.argmax
        );
        json!({
            "kind": "hw",
            "mask_poi": mask_poi,
            "masked_poi": masked_poi,
            "mask_agreement": agree_mask,
            "masked_agreement": agreement(&est[1], &true_masked)?,
            "swapped_agreement": [agreement(&est[0], &true_masked)?, agreement(&est[1], &true_mask)?],
            "majority_baseline": 70.0 / 256.0,
            "estimated_mask_snr_argmax": est_mask.argmax,
            "estimated_masked_snr_argmax": est_masked.argmax,
            "mask_argmax_at_poi": Some(est_mask.argmax) == mask_poi,
            "true_mask_snr_argmax": snr_mask.argmax,
            "true_masked_snr_argmax": snr_masked.argmax,
            "pc01_probe_accuracy_mask_hw": probe_mask,
            "pc01_probe_accuracy_masked_hw": probe_masked,
        })
    } else {
        let cols = read_csv_columns(&recovered, &["cluster"])?;
        let clusters: Vec<usize> = cols[0].iter().map(|&v| v as usize).collect();
        let table = |share: &[u8]| -> Array2<usize> {
            let mut t = Array2::zeros((4, 4));
            for (&c, &s) in clusters.iter().zip(share) {
                t[[c.min(3), (s & 3) as usize]] += 1;
            }
            t
        };
        let contingency = |t: Array2<usize>| -> Vec<Vec<usize>> { t.rows().into_iter().map(|r| r.to_vec()).collect() };
        json!({
            "kind": "bits2",
            "mask_poi": mask_poi,
            "contingency_mask_lsb2": contingency(table(&truth.mask())),
            "contingency_masked_output_lsb2": contingency(table(&truth.masked_output())),
            "contingency_masked_input_lsb2": contingency(table(&truth.masked_input)),
        })
    };
    write_json(&ctx.run.root.join("validation.json"), &m, &report)
}

pub fn pipeline(ctx: &Ctx) -> Result<()> {
    type Stage = fn(&Ctx) -> Result<()>;
    let stages: [(&str, Stage); 9] = [
        ("simulate", simulate),
        ("train", train),
        ("metrics", metrics),
        ("logits", logits),
        ("pca", pca),
        ("probe", probe),
        ("patch", patch),
        ("recover-masks", recover_masks),
        ("validate", validate),
    ];
    for (name, f) in stages {
        info!("stage {name}");
        f(ctx)?;
    }
    Ok(())
}
