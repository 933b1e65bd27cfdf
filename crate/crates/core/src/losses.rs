//! Representation and classification losses and their λ-weighted sum.
//!
//! ```text
//! L_rep = (1-λ)·L_con^u + λ·L_con^s
//! L_cls = (1-λ)·L_ce^u  + λ·L_ce^s        (L_ce^u includes -ε·H(p̄))
//! L_all = L_rep + L_cls
//! ```

use crate::autodiff::{softmax_in_place, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ParamVars};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Temperature of the self-supervised contrastive term.
    pub tau_unsup: f64,
    /// Temperature of the supervised contrastive term.
    pub tau_sup: f64,
    /// Student (classifier) temperature.
    pub tau_student: f64,
    pub tau_teacher_initial: f64,
    pub tau_teacher_final: f64,
    /// Epochs over which the teacher temperature anneals, cosine-shaped.
    pub teacher_warmup_epochs: usize,
    /// Weight of the supervised terms.
    pub lambda: f64,
    /// Weight of the mean-entropy bonus.
    pub entropy_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_unsup: 0.07,
            tau_sup: 1.0,
            tau_student: 0.1,
            tau_teacher_initial: 0.07,
            tau_teacher_final: 0.04,
            teacher_warmup_epochs: 30,
            lambda: 0.35,
            entropy_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let temps = [
            self.tau_unsup,
            self.tau_sup,
            self.tau_student,
            self.tau_teacher_initial,
            self.tau_teacher_final,
        ];
        if temps.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("all temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0,1], got {}", self.lambda)));
        }
        if !(self.entropy_weight >= 0.0) {
            return Err(Error::Config("entropy weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Teacher temperature at a zero-based epoch.
    pub fn teacher_temperature(&self, epoch: usize) -> f64 {
        let n = self.teacher_warmup_epochs;
        if epoch >= n {
            return self.tau_teacher_final;
        }
        let t = epoch as f64 / n as f64;
        self.tau_teacher_final
            + 0.5 * (self.tau_teacher_initial - self.tau_teacher_final) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Which entries of an `n×n` similarity matrix count toward a contrastive
/// denominator: every other row of the stacked batch, never the anchor
/// itself.
pub fn contrastive_denominator_mask(n: usize) -> Vec<bool> {
    let mut m = vec![true; n * n];
    (0..n).for_each(|i| m[i * n + i] = false);
    m
}

/// Self-supervised contrastive loss on a stacked `[Z; Z']` batch of `2B`
/// unit rows, where row `i` and row `i±B` are the two views of a sample.
pub fn unsup_contrastive_stacked(tape: &mut Tape, zz: Var, tau: f64) -> Result<Var> {
    let n = tape.value(zz).rows();
    if n < 4 || n % 2 != 0 {
        return Err(Error::Contract(format!(
            "contrastive loss needs two views of at least 2 samples, got {n} rows"
        )));
    }
    let b = n / 2;
    let sim = tape.matmul_t(zz, zz)?;
    let ls = tape.masked_log_softmax_rows(sim, 1.0 / tau, Some(contrastive_denominator_mask(n)))?;
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let pos = if i < b { i + b } else { i - b };
        w[i * n + pos] = -1.0 / n as f64;
    }
    tape.weighted_sum(ls, Tensor::matrix(n, n, w)?)
}

/// Self-supervised contrastive loss between views `z` and `z'` (`B×d`).
pub fn unsup_contrastive(tape: &mut Tape, z: Var, z_prime: Var, tau: f64) -> Result<Var> {
    if tape.value(z).shape() != tape.value(z_prime).shape() {
        return Err(Error::dim("unsup_contrastive", "views differ in shape"));
    }
    let zz = tape.concat_rows(&[z, z_prime])?;
    unsup_contrastive_stacked(tape, zz, tau)
}

#[derive(Clone, Copy, Debug)]
pub struct SupCon {
    pub loss: Var,
    /// Rows that had at least one positive and contributed.
    pub active_anchors: usize,
}

impl SupCon {
    /// True when no row had a positive and the loss is the constant 0.
    pub fn skipped_all(&self) -> bool {
        self.active_anchors == 0
    }
}

/// Supervised contrastive loss over unit rows `z` with class `labels`.
/// Rows without a same-label partner are skipped.
pub fn sup_contrastive(tape: &mut Tape, z: Var, labels: &[usize], tau: f64) -> Result<SupCon> {
    let n = tape.value(z).rows();
    if labels.len() != n {
        return Err(Error::dim("sup_contrastive", format!("{n} rows, {} labels", labels.len())));
    }
    let positives: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect())
        .collect();
    let active = positives.iter().filter(|p| !p.is_empty()).count();
    if active == 0 {
        let zero = tape.leaf(Tensor::scalar(0.0));
        return Ok(SupCon {
            loss: zero,
            active_anchors: 0,
        });
    }
    let sim = tape.matmul_t(z, z)?;
    let ls = tape.masked_log_softmax_rows(sim, 1.0 / tau, Some(contrastive_denominator_mask(n)))?;
    let mut w = vec![0.0; n * n];
    for (i, pos) in positives.iter().enumerate() {
        for &j in pos {
            w[i * n + j] = -1.0 / (pos.len() * active) as f64;
        }
    }
    let loss = tape.weighted_sum(ls, Tensor::matrix(n, n, w)?)?;
    Ok(SupCon {
        loss,
        active_anchors: active,
    })
}

/// Mean of `-log p[y]` given row-wise log-probabilities.
pub fn ce_supervised(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let t = tape.value(log_probs);
    let (n, c) = (t.rows(), t.cols());
    if labels.len() != n || n == 0 {
        return Err(Error::dim("ce_supervised", format!("{n} rows, {} labels", labels.len())));
    }
    let mut w = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Contract(format!("label {y} out of range for {c} classes")));
        }
        w[i * c + y] = -1.0 / n as f64;
    }
    tape.weighted_sum(log_probs, Tensor::matrix(n, c, w)?)
}

/// Sharpened soft targets for a stacked two-view batch: row `i` of the
/// result is `softmax(l_{i±B} / τ_t)`, the other view's prediction. The
/// result is a plain tensor, so no gradient flows through the teacher.
pub fn teacher_targets(stacked_logits: &Tensor, tau_teacher: f64) -> Result<Tensor> {
    if tau_teacher <= 0.0 {
        return Err(Error::Config("teacher temperature must be positive".into()));
    }
    let (n, c) = (stacked_logits.rows(), stacked_logits.cols());
    if n % 2 != 0 {
        return Err(Error::dim("teacher_targets", "expected an even number of rows"));
    }
    let b = n / 2;
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let src = if i < b { i + b } else { i - b };
        let mut row = stacked_logits.row(src).to_vec();
        softmax_in_place(&mut row, 1.0 / tau_teacher);
        out.extend(row);
    }
    Tensor::matrix(n, c, out)
}

#[derive(Clone, Copy, Debug)]
pub struct SelfDistill {
    /// `cross_entropy - ε·entropy`
    pub loss: Var,
    pub cross_entropy: Var,
    /// `H(p̄)` of the batch-mean student distribution.
    pub entropy: Var,
}

/// `H(mean_rows(probs))`.
pub fn mean_entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    let avg = tape.mean_rows(probs)?;
    let log_avg = tape.log(avg)?;
    let plogp = tape.dot(avg, log_avg)?;
    tape.scale(plogp, -1.0)
}

/// Self-distillation of student logits toward constant `targets`, minus the
/// weighted mean-entropy bonus.
pub fn self_distill(
    tape: &mut Tape,
    student_logits: Var,
    targets: &Tensor,
    tau_student: f64,
    entropy_weight: f64,
) -> Result<SelfDistill> {
    if tau_student <= 0.0 {
        return Err(Error::Config("student temperature must be positive".into()));
    }
    let t = tape.value(student_logits);
    if t.shape() != targets.shape() {
        return Err(Error::dim(
            "self_distill",
            format!("logits {:?} vs targets {:?}", t.shape(), targets.shape()),
        ));
    }
    let n = t.rows();
    let log_p = tape.log_softmax_rows(student_logits, 1.0 / tau_student)?;
    let w = targets.map(|q| -q / n as f64);
    let cross_entropy = tape.weighted_sum(log_p, w)?;
    let p = tape.softmax_rows(student_logits, 1.0 / tau_student)?;
    let entropy = mean_entropy(tape, p)?;
    let bonus = tape.scale(entropy, -entropy_weight)?;
    let loss = tape.add(cross_entropy, bonus)?;
    Ok(SelfDistill {
        loss,
        cross_entropy,
        entropy,
    })
}

/// One mini-batch: two augmented views and a label (or hole) per sample.
/// Anchored samples carry their pseudo-label exactly like ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub view1: Tensor,
    pub view2: Tensor,
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labeled(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_some()).collect()
    }
}

/// Scalar values of every loss component.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub unsup_con: f64,
    pub sup_con: f64,
    /// Self-distillation term, entropy bonus included.
    pub unsup_ce: f64,
    pub sup_ce: f64,
    pub entropy: f64,
}

impl LossBreakdown {
    /// Re-add the four components with weight `λ`.
    pub fn recompose(&self, lambda: f64) -> f64 {
        let rep = (1.0 - lambda) * self.unsup_con + lambda * self.sup_con;
        let cls = (1.0 - lambda) * self.unsup_ce + lambda * self.sup_ce;
        rep + cls
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Build the full objective for `batch` on `tape`.
pub fn total_loss(
    tape: &mut Tape,
    model: &Model,
    params: &ParamVars,
    batch: &Batch,
    cfg: &LossConfig,
    tau_teacher: f64,
) -> Result<LossTerms> {
    total_loss_with_teacher(tape, model, params, batch, cfg, tau_teacher, None)
}

/// [`total_loss`] with the distillation targets supplied instead of derived
/// from this forward pass. Both give the same gradient, since targets are
/// constants either way.
pub fn total_loss_with_teacher(
    tape: &mut Tape,
    model: &Model,
    params: &ParamVars,
    batch: &Batch,
    cfg: &LossConfig,
    tau_teacher: f64,
    teacher: Option<&Tensor>,
) -> Result<LossTerms> {
    cfg.validate()?;
    let b = batch.len();
    if batch.view1.rows() != b || batch.view2.shape() != batch.view1.shape() {
        return Err(Error::dim("total_loss", "views and labels disagree in size"));
    }
    let x = tape.leaf(Tensor::matrix(
        2 * b,
        batch.view1.cols(),
        [batch.view1.data(), batch.view2.data()].concat(),
    )?);
    let fwd = model.forward(tape, params, x)?;

    let unsup_con = unsup_contrastive_stacked(tape, fwd.projection, cfg.tau_unsup)?;

    let targets = match teacher {
        Some(t) if t.shape() == tape.value(fwd.logits).shape() => t.clone(),
        Some(_) => return Err(Error::dim("total_loss", "teacher targets do not match logits")),
        None => teacher_targets(tape.value(fwd.logits), tau_teacher)?,
    };
    let sd = self_distill(tape, fwd.logits, &targets, cfg.tau_student, cfg.entropy_weight)?;

    let labeled = batch.labeled();
    let (sup_con, sup_ce) = if labeled.is_empty() {
        let z = tape.leaf(Tensor::scalar(0.0));
        (z, z)
    } else {
        let rows: Vec<usize> = labeled.iter().copied().chain(labeled.iter().map(|i| i + b)).collect();
        let ys: Vec<usize> = rows.iter().map(|&r| batch.labels[r % b].unwrap()).collect();
        let zl = tape.gather_rows(fwd.projection, &rows)?;
        let sc = sup_contrastive(tape, zl, &ys, cfg.tau_sup)?.loss;
        let lp = tape.log_softmax_rows(fwd.logits, 1.0 / cfg.tau_student)?;
        let lpl = tape.gather_rows(lp, &rows)?;
        (sc, ce_supervised(tape, lpl, &ys)?)
    };

    let lam = cfg.lambda;
    let a = tape.scale(unsup_con, 1.0 - lam)?;
    let bb = tape.scale(sup_con, lam)?;
    let rep = tape.add(a, bb)?;
    let c = tape.scale(sd.loss, 1.0 - lam)?;
    let d = tape.scale(sup_ce, lam)?;
    let cls = tape.add(c, d)?;
    let total = tape.add(rep, cls)?;

    let v = |t: &Tape, var: Var| t.value(var).item();
    let breakdown = LossBreakdown {
        total: v(tape, total),
        unsup_con: v(tape, unsup_con),
        sup_con: v(tape, sup_con),
        unsup_ce: v(tape, sd.loss),
        sup_ce: v(tape, sup_ce),
        entropy: v(tape, sd.entropy),
    };
    Ok(LossTerms { total, breakdown })
}
