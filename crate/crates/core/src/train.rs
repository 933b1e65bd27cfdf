//! Two-phase training driver.
//!
//! The initial phase trains on the ground-truth labeled subset. The anchor
//! phase then trains on the labeled subset merged with anchors: the first
//! `α` epochs reuse the anchors picked from the initial model, and every
//! later epoch re-selects them from the current model before its first
//! step. Methods without anchors run the same two phases on the labeled
//! subset alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{DataSource, EtaRule, ExperimentConfig};
use crate::das::{select_anchors, update_labeled_set, AnchorSelection, AnchorSet, ClusterState};
use crate::data::{self, load_dir, load_embeddings, synth_gmm, GcdDataset};
use crate::error::{Error, Result};
use crate::eval::{anchor_purity, cluster_acc, EvalReport};
use crate::hessian::FlatnessReport;
use crate::losses::{Batch, LossBreakdown};
use crate::model::{Model, Prediction};
use crate::objective::ModelObjective;
use crate::optim::{LspConfig, Optimizer};
use crate::rng::{seeded, stream, Rng};

pub const METRICS_HEADER: &str = "epoch,phase,loss_total,loss_unsup_con,loss_sup_con,loss_unsup_ce,\
loss_sup_ce,entropy,acc_all,acc_old,acc_new,anchors,anchor_purity,eta,t_tru,lr,aborted_steps";

pub const ANCHORS_HEADER: &str = "sample_index,assigned_class,max_prob,is_anchor";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Initial,
    Anchor,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Initial => "initial",
            Phase::Anchor => "anchor",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based across both phases.
    pub epoch: usize,
    pub phase: Phase,
    /// Means over the epoch's completed steps.
    pub loss: LossBreakdown,
    pub acc_all: f64,
    pub acc_old: f64,
    pub acc_new: f64,
    pub anchors: usize,
    pub anchor_purity: Option<f64>,
    pub eta: Option<usize>,
    pub t_tru: Option<f64>,
    /// Learning rate of the last step.
    pub lr: f64,
    pub aborted_steps: usize,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase.as_str(),
            l.total,
            l.unsup_con,
            l.sup_con,
            l.unsup_ce,
            l.sup_ce,
            l.entropy,
            self.acc_all,
            self.acc_old,
            self.acc_new,
            self.anchors,
            opt(self.anchor_purity),
            opt(self.eta),
            opt(self.t_tru),
            self.lr,
            self.aborted_steps
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<GcdDataset> {
    match &cfg.data {
        DataSource::Synth(s) => synth_gmm(s),
        DataSource::Dir(d) => load_dir(d),
        DataSource::Files {
            features,
            labels,
            old_classes,
            num_classes,
            split_seed,
        } => load_embeddings(features, labels, old_classes, *num_classes, *split_seed),
    }
}

/// Per-cluster anchor budget override, or `None` for the quantile rule.
pub fn eta_override(cfg: &ExperimentConfig, ds: &GcdDataset) -> Option<usize> {
    match cfg.eta {
        EtaRule::Fixed(n) => Some(n),
        EtaRule::Dynamic => None,
        EtaRule::Auto if ds.old_classes.is_empty() => None,
        EtaRule::Auto => {
            let n = ds.labeled_indices().len() as f64 / ds.old_classes.len() as f64;
            Some((n.round() as usize).max(1))
        }
    }
}

/// Predictions on the unlabeled samples.
pub fn predict_unlabeled(model: &Model, ds: &GcdDataset, tau: f64) -> Result<(Vec<usize>, Prediction)> {
    let idx = ds.unlabeled_indices();
    let pred = model.predict(&ds.rows(&idx), tau)?;
    Ok((idx, pred))
}

/// Clustering accuracy of `model` on the unlabeled samples.
pub fn evaluate(model: &Model, ds: &GcdDataset, tau: f64) -> Result<EvalReport> {
    let (idx, pred) = predict_unlabeled(model, ds, tau)?;
    let truth: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    cluster_acc(&pred.argmax(), &truth, ds.num_classes, &ds.old_classes)
}

/// Anchors in force during an epoch, with the statistics of the selection
/// that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorState {
    pub selection: AnchorSelection,
    /// Purity under the Hungarian mapping of the selecting model.
    pub purity: Option<f64>,
    pub eval: EvalReport,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: Model,
    pub rows: Vec<MetricsRow>,
    pub final_eval: EvalReport,
    /// Anchors picked from the initial-phase model.
    pub initial_anchors: Option<AnchorState>,
    pub last_anchors: Option<AnchorState>,
    pub flatness: Option<FlatnessReport>,
    pub steps: usize,
    pub aborted_steps: usize,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.rows)
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    ds: &'a GcdDataset,
    model: Model,
    optimizer: Optimizer,
    shuffle: Rng,
    augment: Rng,
    steps: usize,
    aborted: usize,
    out: Option<PathBuf>,
}

struct EpochStats {
    loss: LossBreakdown,
    lr: f64,
    aborted: usize,
}

impl Runner<'_> {
    fn batches_per_epoch(&self) -> usize {
        let n = self.ds.len();
        let b = self.cfg.batch_size;
        n / b + usize::from(n % b >= 2)
    }

    fn train_epoch(&mut self, labels: &[Option<usize>], epoch0: usize, phase_step: &mut usize, phase_steps: usize) -> Result<EpochStats> {
        use rand::seq::SliceRandom;
        let cfg = self.cfg;
        let tau_t = cfg.loss.teacher_temperature(epoch0);
        let mut order: Vec<usize> = (0..self.ds.len()).collect();
        order.shuffle(&mut self.shuffle);

        let mut sum = LossBreakdown::default();
        let mut done = 0usize;
        let mut aborted = 0usize;
        let mut lr = cfg.lsp.lr_at(0.0);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let x = self.ds.rows(chunk);
            let (view1, view2) = cfg.augment.views(&x, &mut self.augment);
            let batch = Batch {
                view1,
                view2,
                labels: chunk.iter().map(|&i| labels[i]).collect(),
            };
            let progress = *phase_step as f64 / (phase_steps.max(2) - 1) as f64;
            lr = cfg.lsp.lr_at(progress);
            *phase_step += 1;
            self.steps += 1;

            let mut params = self.model.flatten();
            let (outcome, first) = {
                let obj = ModelObjective::new(&self.model, &batch, &cfg.loss, tau_t);
                let res = self.optimizer.step(&mut params, &obj, lr);
                (res, obj.first_breakdown())
            };
            match outcome {
                Ok(_) => {
                    self.model.load_flat(&params)?;
                    let b = first.unwrap_or_default();
                    sum.total += b.total;
                    sum.unsup_con += b.unsup_con;
                    sum.sup_con += b.sup_con;
                    sum.unsup_ce += b.unsup_ce;
                    sum.sup_ce += b.sup_ce;
                    sum.entropy += b.entropy;
                    done += 1;
                }
                Err(Error::Numeric(what)) => {
                    log::warn!("epoch {}: step aborted on non-finite {what}", epoch0 + 1);
                    aborted += 1;
                    self.aborted += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let k = done.max(1) as f64;
        Ok(EpochStats {
            loss: LossBreakdown {
                total: sum.total / k,
                unsup_con: sum.unsup_con / k,
                sup_con: sum.sup_con / k,
                unsup_ce: sum.unsup_ce / k,
                sup_ce: sum.sup_ce / k,
                entropy: sum.entropy / k,
            },
            lr,
            aborted,
        })
    }

    /// DAS on the current model; also writes `anchors_epoch_<epoch>.csv`.
    fn select(&self, epoch: usize, base: &[Option<usize>]) -> Result<(AnchorState, Vec<Option<usize>>)> {
        let ds = self.ds;
        let (idx, pred) = predict_unlabeled(&self.model, ds, self.cfg.loss.tau_student)?;
        let assigned = pred.argmax();
        let truth: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let eval = cluster_acc(&assigned, &truth, ds.num_classes, &ds.old_classes)?;
        let state = ClusterState::new(pred.features, pred.probs, idx)?;
        let mut das = self.cfg.das.clone();
        das.eta_override = eta_override(self.cfg, ds);
        let selection = select_anchors(&state, &ds.new_classes(), &das, epoch)?;
        let purity = anchor_purity(&selection.anchors.pairs(), &ds.labels, &eval.mapping);
        if let Some(dir) = &self.out {
            write_anchor_dump(&dir.join(format!("anchors_epoch_{epoch}.csv")), &state, &ds.new_classes(), &selection.anchors)?;
        }
        let labels = update_labeled_set(base, &selection.anchors)?;
        log::info!(
            "epoch {epoch}: {} anchors (eta {}, purity {})",
            selection.anchors.len(),
            selection.eta,
            opt(purity)
        );
        Ok((AnchorState { selection, purity, eval }, labels))
    }

    fn row(&self, epoch: usize, phase: Phase, stats: &EpochStats, anchors: Option<&AnchorState>) -> Result<MetricsRow> {
        let eval = evaluate(&self.model, self.ds, self.cfg.loss.tau_student)?;
        Ok(MetricsRow {
            epoch,
            phase,
            loss: stats.loss,
            acc_all: eval.acc_all,
            acc_old: eval.acc_old,
            acc_new: eval.acc_new,
            anchors: anchors.map_or(0, |a| a.selection.anchors.len()),
            anchor_purity: anchors.and_then(|a| a.purity),
            eta: anchors.filter(|a| !a.selection.skipped).map(|a| a.selection.eta),
            t_tru: anchors.and_then(|a| a.selection.threshold),
            lr: stats.lr,
            aborted_steps: stats.aborted,
        })
    }

    fn flatness(&self) -> Result<FlatnessReport> {
        flatness(self.cfg, self.ds, &self.model)
    }
}

/// Sharpness of `model` on a seeded probe batch: a fixed sample of the
/// dataset with augmented views and only the ground-truth labeled subset.
pub fn flatness(cfg: &ExperimentConfig, ds: &GcdDataset, model: &Model) -> Result<FlatnessReport> {
    let d = &cfg.diag;
    let idx = data::sample_indices(ds.len(), d.probe_size, cfg.seed);
    let x = ds.rows(&idx);
    let (view1, view2) = cfg.augment.views(&x, &mut seeded(cfg.seed, stream::PROBE));
    let visible = ds.visible_labels();
    let batch = Batch {
        view1,
        view2,
        labels: idx.iter().map(|&i| visible[i]).collect(),
    };
    let tau_t = cfg.loss.tau_teacher_final;
    let obj = ModelObjective::new(model, &batch, &cfg.loss, tau_t);
    let params = model.flatten();
    let mut report = FlatnessReport::compute(&obj, &params, d.power_iters, d.power_tol, d.trace_probes, cfg.seed)?;
    report.probe_batch = vec![
        ("probe_size".into(), idx.len().to_string()),
        ("probe_seed".into(), cfg.seed.to_string()),
        ("probe_labels".into(), "ground_truth_labeled_subset".into()),
        ("probe_tau_teacher".into(), tau_t.to_string()),
    ];
    Ok(report)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Every sample assigned to a new class, with its confidence and whether
/// it was chosen.
pub fn write_anchor_dump(path: &Path, state: &ClusterState, new_classes: &[usize], anchors: &AnchorSet) -> Result<()> {
    let chosen: std::collections::BTreeSet<usize> = anchors.pairs().into_iter().map(|(i, _)| i).collect();
    let conf = state.confidences();
    let mut s = String::from(ANCHORS_HEADER);
    s.push('\n');
    for r in 0..state.len() {
        let c = state.assignments[r];
        if !new_classes.contains(&c) {
            continue;
        }
        let id = state.sample_ids[r];
        let _ = writeln!(s, "{id},{c},{},{}", conf[r], u8::from(chosen.contains(&id)));
    }
    write_file(path, &s)
}

/// Train, evaluate and (when `cfg.out` is set) write every artifact.
/// Initial phase, anchor phase, then flatness diagnostics. Writes the run
/// artifacts when `cfg.out` is set.
pub fn run(cfg: &ExperimentConfig, ds: &GcdDataset) -> Result<RunOutput> {
    cfg.validate()?;
    if ds.len() < 2 {
        return Err(Error::Contract("training needs at least two samples".into()));
    }
    if ds.unlabeled_indices().is_empty() {
        return Err(Error::Contract("no unlabeled samples to cluster".into()));
    }
    let model_cfg = cfg.model_config(ds.dim(), ds.num_classes);
    let model = Model::new(model_cfg, &mut seeded(cfg.seed, stream::INIT))?;
    let optimizer = Optimizer::new(LspConfig {
        rho: cfg.effective_rho(),
        enabled: cfg.method.uses_lsp(),
        ..cfg.lsp.clone()
    });
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("config.resolved"), &cfg.resolved())?;
    }
    let mut r = Runner {
        cfg,
        ds,
        model,
        optimizer,
        shuffle: seeded(cfg.seed, stream::SHUFFLE),
        augment: seeded(cfg.seed, stream::AUGMENT),
        steps: 0,
        aborted: 0,
        out: cfg.out.clone(),
    };

    let base = ds.visible_labels();
    let per_epoch = r.batches_per_epoch();
    let mut rows = Vec::with_capacity(cfg.epochs + cfg.anchor_epochs);

    let mut step = 0;
    for e in 0..cfg.epochs {
        let stats = r.train_epoch(&base, e, &mut step, per_epoch * cfg.epochs)?;
        rows.push(r.row(e + 1, Phase::Initial, &stats, None)?);
        log::debug!("{}", rows.last().unwrap().csv());
    }

    let mut initial_anchors = None;
    let mut current: Option<AnchorState> = None;
    let mut labels = base.clone();
    if cfg.method.uses_das() {
        let (state, l) = r.select(cfg.epochs + 1, &base)?;
        initial_anchors = Some(state.clone());
        current = Some(state);
        labels = l;
    }

    let mut step = 0;
    for e in 0..cfg.anchor_epochs {
        let epoch = cfg.epochs + e + 1;
        if cfg.method.uses_das() && e >= cfg.das.alpha && e > 0 {
            let (state, l) = r.select(epoch, &base)?;
            current = Some(state);
            labels = l;
        }
        let stats = r.train_epoch(&labels, epoch - 1, &mut step, per_epoch * cfg.anchor_epochs)?;
        rows.push(r.row(epoch, Phase::Anchor, &stats, current.as_ref())?);
        log::debug!("{}", rows.last().unwrap().csv());
    }

    if r.aborted as f64 > cfg.max_abort_fraction * r.steps as f64 {
        return Err(Error::Numeric("too many aborted steps"));
    }

    let final_eval = evaluate(&r.model, ds, cfg.loss.tau_student)?;
    let flatness = if cfg.diag.enabled { Some(r.flatness()?) } else { None };

    if let Some(dir) = &cfg.out {
        write_file(&dir.join("metrics.csv"), &metrics_csv(&rows))?;
        checkpoint::save(&dir.join("model.ckpt"), &r.model)?;
        if let Some(f) = &flatness {
            f.write(&dir.join("flatness.txt"))?;
        }
    }

    Ok(RunOutput {
        model: r.model,
        rows,
        final_eval,
        initial_anchors,
        last_anchors: current,
        flatness,
        steps: r.steps,
        aborted_steps: r.aborted,
    })
}
