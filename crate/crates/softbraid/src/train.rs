//! Winner-takes-all training of the refinement pipeline.
//!
//! Every refinement iteration is supervised: per iteration the mode
//! closest to the ground truth (joint mean displacement over agents)
//! is selected without gradient, its elementwise Huber error is
//! averaged, and the per-iteration losses are averaged into the total.
//! Optimization is decoupled-weight-decay Adam under a cosine learning
//! rate schedule, with seeded shuffling and an index-ordered gradient
//! fold so a run is reproducible bit for bit at any thread count.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive::ParameterArchive;
use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::metrics;
use crate::refiner::{
    build_refine_tape, refine, RefinerConfig, RefinerParams, SceneContext, TapeRefine,
};
use crate::scenario::{ModeSet, Scenario};
use crate::seeds;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate; the cosine schedule decays it to zero over
    /// the total step count.
    pub lr: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    /// Seeds parameter init, shuffling, and hence the whole run.
    pub seed: u64,
    /// Fraction of scenarios held out by stride for validation; 0
    /// disables the split.
    pub val_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Scenarios per batch evaluated concurrently. Any value yields the
    /// same bits; >1 just spends more cores.
    pub threads: usize,
    pub huber_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 64,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 1e-4,
            seed: 0,
            val_fraction: 0.1,
            grad_clip: 0.0,
            threads: 1,
            huber_delta: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight decay must be non-negative and finite, got {}",
                self.weight_decay
            )));
        }
        if !(self.val_fraction.is_finite() && (0.0..1.0).contains(&self.val_fraction)) {
            return Err(Error::config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config(format!(
                "grad_clip must be non-negative and finite, got {}",
                self.grad_clip
            )));
        }
        if self.threads < 1 {
            return Err(Error::config("threads must be at least 1"));
        }
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            return Err(Error::config(format!(
                "huber_delta must be positive and finite, got {}",
                self.huber_delta
            )));
        }
        Ok(())
    }
}

fn mean_displacement(pred: &[Vec2], gt: &[Vec2]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (*p - *g).norm()).sum();
    sum / pred.len() as f64
}

/// Index of the mode whose mean-over-agents mean displacement against
/// the ground truth is smallest; ties take the smallest index.
pub fn wta_mode(modes: &ModeSet, gt: &[Vec<Vec2>]) -> Result<usize> {
    modes.validate()?;
    if modes.n() != gt.len() {
        return Err(Error::shape(format!(
            "candidates cover {} agents, ground truth {}",
            modes.n(),
            gt.len()
        )));
    }
    for (i, g) in gt.iter().enumerate() {
        if g.len() != modes.t_plus() {
            return Err(Error::shape(format!(
                "ground truth for agent {i} has {} steps, candidates have {}",
                g.len(),
                modes.t_plus()
            )));
        }
    }
    let mut best = (f64::INFINITY, 0usize);
    for (k, mode) in modes.modes.iter().enumerate() {
        let joint: f64 = mode
            .iter()
            .zip(gt)
            .map(|(pred, g)| mean_displacement(pred, g))
            .sum::<f64>()
            / gt.len() as f64;
        if joint < best.0 {
            best = (joint, k);
        }
    }
    Ok(best.1)
}

fn huber_value(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

/// Huber loss of the winning mode against the ground truth, averaged
/// over agents, timesteps, and coordinates. Returns (loss, winner).
/// Accumulation order matches the tape path (agents stacked, elements
/// row-major) so the two agree bit for bit.
pub fn iteration_loss(modes: &ModeSet, gt: &[Vec<Vec2>], delta: f64) -> Result<(f64, usize)> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::config(format!(
            "huber delta must be positive and finite, got {delta}"
        )));
    }
    let k = wta_mode(modes, gt)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pred, g) in modes.modes[k].iter().zip(gt) {
        for (p, q) in pred.iter().zip(g) {
            sum += huber_value(p.x - q.x, delta);
            sum += huber_value(p.y - q.y, delta);
            count += 2;
        }
    }
    Ok((sum / count as f64, k))
}

/// Loss breakdown of one scenario: each iteration's winner and Huber
/// loss, and their average.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub per_iteration: Vec<f64>,
    pub total: f64,
    pub winners: Vec<usize>,
}

/// Averages the per-iteration losses; each iteration selects its own
/// winning mode.
pub fn total_loss(iterations: &[ModeSet], gt: &[Vec<Vec2>], delta: f64) -> Result<LossReport> {
    if iterations.is_empty() {
        return Err(Error::invalid("total loss needs at least one iteration"));
    }
    let mut per_iteration = Vec::with_capacity(iterations.len());
    let mut winners = Vec::with_capacity(iterations.len());
    for modes in iterations {
        let (loss, k) = iteration_loss(modes, gt, delta)?;
        per_iteration.push(loss);
        winners.push(k);
    }
    let total = per_iteration.iter().sum::<f64>() / per_iteration.len() as f64;
    Ok(LossReport {
        per_iteration,
        total,
        winners,
    })
}

fn points_tensor(points: &[Vec2]) -> Tensor {
    Tensor::from_vec(
        points.len(),
        2,
        points.iter().flat_map(|p| [p.x, p.y]).collect(),
    )
}

fn tensor_points(t: &Tensor) -> Vec<Vec2> {
    (0..t.rows()).map(|r| Vec2::new(t.get(r, 0), t.get(r, 1))).collect()
}

/// Builds the WTA objective on top of an unrolled refinement graph.
/// Winners are selected from forward values; only the winning branches
/// join the differentiable loss.
pub fn build_loss_tape(
    tape: &mut Tape,
    tr: &TapeRefine,
    gt: &[Vec<Vec2>],
    delta: f64,
) -> Result<(Var, LossReport)> {
    let iterations = tr.y_iters.len();
    if iterations == 0 {
        return Err(Error::invalid("total loss needs at least one iteration"));
    }
    let gt_consts: Vec<Var> = gt.iter().map(|g| tape.constant(points_tensor(g))).collect();
    let mut per_iteration = Vec::with_capacity(iterations);
    let mut winners = Vec::with_capacity(iterations);
    let mut loss_vars = Vec::with_capacity(iterations);
    for y_l in &tr.y_iters {
        let value_modes = ModeSet {
            modes: y_l
                .iter()
                .map(|mode| mode.iter().map(|v| tensor_points(tape.value(*v))).collect())
                .collect(),
        };
        let k = wta_mode(&value_modes, gt)?;
        winners.push(k);
        let diffs: Vec<Var> = y_l[k]
            .iter()
            .zip(&gt_consts)
            .map(|(y, g)| tape.sub(*y, *g))
            .collect();
        let stacked = tape.concat(&diffs, Axis::Rows);
        let h = tape.huber(stacked, delta);
        let l = tape.mean(h);
        per_iteration.push(tape.value(l).item());
        loss_vars.push(l);
    }
    let total = if loss_vars.len() == 1 {
        loss_vars[0]
    } else {
        let mut acc = loss_vars[0];
        for l in &loss_vars[1..] {
            acc = tape.add(acc, *l);
        }
        tape.scale(acc, 1.0 / loss_vars.len() as f64)
    };
    let report = LossReport {
        per_iteration,
        total: tape.value(total).item(),
        winners,
    };
    Ok((total, report))
}

/// Learning rate at `step` of `total_steps`: cosine from `base` at the
/// first step to exactly zero at the last. A single-step schedule stays
/// at `base`.
pub fn cosine_lr(base: f64, step: u64, total_steps: u64) -> f64 {
    debug_assert!(step < total_steps.max(1));
    if total_steps <= 1 {
        return base;
    }
    let x = step as f64 / (total_steps - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Decoupled-weight-decay adaptive-moment optimizer over the canonical
/// tensor list.
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(shapes: &[Tensor], weight_decay: f64) -> AdamW {
        AdamW {
            m: shapes.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
            t: 0,
            weight_decay,
        }
    }

    /// One update. `lr = 0` leaves the parameters bit-identical.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gd[i];
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * pd[i]);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_avg_min_fde: Option<f64>,
    pub val_avg_min_ade: Option<f64>,
}

pub struct TrainOutcome {
    pub params: RefinerParams,
    /// Final parameters plus `opt.m.*` / `opt.v.*` moment entries.
    pub archive: ParameterArchive,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// Deterministic stride split: with fraction f, every round(1/f)-th
/// scenario (starting at 0) validates, the rest train.
fn split_indices(count: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if val_fraction <= 0.0 {
        return ((0..count).collect(), Vec::new());
    }
    let stride = (1.0 / val_fraction).round().max(2.0) as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..count {
        if i % stride == 0 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// Forward+backward of one scenario: total WTA loss and its gradient
/// in canonical entry order.
fn scenario_pass(
    params: &RefinerParams,
    scn: &Scenario,
    y0: &ModeSet,
    rcfg: &RefinerConfig,
    delta: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let ctx = SceneContext::new(scn, rcfg)?;
    let mut tape = Tape::new();
    let (vars, leaves) = params.bind_ordered(&mut tape, true);
    let tr = build_refine_tape(&mut tape, &vars, &ctx, y0, rcfg)?;
    let gt: Vec<Vec<Vec2>> = scn.agents.iter().map(|a| a.future_gt.clone()).collect();
    let (loss_var, report) = build_loss_tape(&mut tape, &tr, &gt, delta)?;
    let mut grads = tape.backward(loss_var);
    let gvec = leaves.iter().map(|v| grads.take(*v)).collect();
    Ok((report.total, gvec))
}

/// Losses and gradients of a batch, folded in scenario order regardless
/// of thread count.
fn batch_pass(
    data: &[(Scenario, ModeSet)],
    batch: &[usize],
    params: &RefinerParams,
    rcfg: &RefinerConfig,
    delta: f64,
    threads: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let results: Vec<Result<(f64, Vec<Tensor>)>> = if threads <= 1 || batch.len() <= 1 {
        batch
            .iter()
            .map(|&idx| scenario_pass(params, &data[idx].0, &data[idx].1, rcfg, delta))
            .collect()
    } else {
        let workers = threads.min(batch.len());
        let chunk = batch.len().div_ceil(workers);
        let mut slots: Vec<Option<Result<(f64, Vec<Tensor>)>>> = Vec::new();
        slots.resize_with(batch.len(), || None);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (w, part) in batch.chunks(chunk).enumerate() {
                let handle = scope.spawn(move || {
                    part.iter()
                        .map(|&idx| scenario_pass(params, &data[idx].0, &data[idx].1, rcfg, delta))
                        .collect::<Vec<_>>()
                });
                handles.push((w * chunk, handle));
            }
            for (base, handle) in handles {
                for (off, res) in handle.join().expect("worker panicked").into_iter().enumerate() {
                    slots[base + off] = Some(res);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("slot filled")).collect()
    };

    let mut loss_sum = 0.0;
    let mut grad_sum: Option<Vec<Tensor>> = None;
    for res in results {
        let (loss, grads) = res?;
        loss_sum += loss;
        match &mut grad_sum {
            None => grad_sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    let ad = a.data_mut();
                    for (x, y) in ad.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = grad_sum.expect("batch not empty");
    for g in &mut grads {
        for x in g.data_mut() {
            *x *= scale;
        }
    }
    Ok((loss_sum * scale, grads))
}

fn clip_gradients(grads: &mut [Tensor], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
}

fn validate_dataset(data: &[(Scenario, ModeSet)]) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::config("training needs at least one scenario"));
    }
    let t_plus = data[0].0.t_plus;
    for (i, (scn, modes)) in data.iter().enumerate() {
        modes
            .validate_against(scn)
            .map_err(|e| Error::invalid(format!("dataset entry {i}: {e}")))?;
        if scn.t_plus != t_plus {
            return Err(Error::config(format!(
                "dataset entry {i} has horizon {}, entry 0 has {t_plus}; one head serves one horizon",
                scn.t_plus
            )));
        }
    }
    Ok(t_plus)
}

/// Trains from scratch on (scenario, coarse candidates) pairs and
/// reports each epoch to `observer`.
pub fn train(
    data: &[(Scenario, ModeSet)],
    rcfg: &RefinerConfig,
    tcfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    rcfg.validate()?;
    tcfg.validate()?;
    let t_plus = validate_dataset(data)?;
    let (train_idx, val_idx) = split_indices(data.len(), tcfg.val_fraction);
    if train_idx.is_empty() {
        return Err(Error::config(
            "validation split consumed every scenario; lower val_fraction",
        ));
    }

    let mut params = RefinerParams::init(rcfg, t_plus, tcfg.seed)?;
    let names: Vec<String> = params.entries().into_iter().map(|(n, _)| n).collect();
    let mut tensors = params.ordered_tensors();
    let mut opt = AdamW::new(&tensors, tcfg.weight_decay);

    let steps_per_epoch = train_idx.len().div_ceil(tcfg.batch_size) as u64;
    let total_steps = tcfg.epochs as u64 * steps_per_epoch;
    let mut shuffle_rng = seeds::rng(seeds::mix_seed(tcfg.seed, 1));
    let mut global_step = 0u64;
    let mut log = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let mut loss_acc = 0.0;
        let mut batches = 0usize;
        let mut last_lr = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let lr = cosine_lr(tcfg.lr, global_step, total_steps);
            let (batch_loss, mut grads) =
                batch_pass(data, batch, &params, rcfg, tcfg.huber_delta, tcfg.threads)?;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric {
                    step: global_step,
                    msg: format!("batch loss became {batch_loss}"),
                });
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric {
                    step: global_step,
                    msg: "a parameter gradient became non-finite".into(),
                });
            }
            clip_gradients(&mut grads, tcfg.grad_clip);
            opt.step(&mut tensors, &grads, lr);
            params = RefinerParams::from_ordered_tensors(tensors.clone(), rcfg.heads)?;
            loss_acc += batch_loss;
            batches += 1;
            last_lr = lr;
            global_step += 1;
        }

        let (val_loss, val_fde, val_ade) = if val_idx.is_empty() {
            (None, None, None)
        } else {
            let mut vloss = 0.0;
            let mut scns = Vec::with_capacity(val_idx.len());
            let mut finals = Vec::with_capacity(val_idx.len());
            for &idx in &val_idx {
                let (scn, y0) = &data[idx];
                let out = refine(&params, scn, y0, rcfg)?;
                let gt: Vec<Vec<Vec2>> = scn.agents.iter().map(|a| a.future_gt.clone()).collect();
                vloss += total_loss(&out.iterations, &gt, tcfg.huber_delta)?.total;
                scns.push(scn.clone());
                finals.push(out.final_modes().clone());
            }
            let report = metrics::evaluate(&scns, &finals)?;
            (
                Some(vloss / val_idx.len() as f64),
                Some(report.avg_min_fde),
                Some(report.avg_min_ade),
            )
        };

        let entry = EpochLog {
            epoch,
            step: global_step,
            lr: last_lr,
            train_loss: loss_acc / batches as f64,
            val_loss,
            val_avg_min_fde: val_fde,
            val_avg_min_ade: val_ade,
        };
        observer(&entry);
        log.push(entry);
    }

    let mut archive = params.to_archive(global_step);
    for (i, name) in names.iter().enumerate() {
        archive.push(format!("opt.m.{name}"), opt.m[i].clone());
        archive.push(format!("opt.v.{name}"), opt.v[i].clone());
    }
    Ok(TrainOutcome {
        params,
        archive,
        log,
        steps: global_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_err;
    use crate::generator::{coarse_predict_all, generate, Archetype, GeneratorDims};
    use crate::refiner::RefinerVars;
    use crate::scenario::{Agent, Lane};

    const RATE: f64 = 10.0;

    fn straight_agent(id: u64, start: Vec2, heading: f64, speed: f64, t_minus: usize, t_plus: usize) -> Agent {
        let step = Vec2::new(heading.cos(), heading.sin()) * (speed / RATE);
        let history: Vec<Vec2> = (0..t_minus).map(|m| start + step * m as f64).collect();
        let origin = history[t_minus - 1];
        let future_gt = (1..=t_plus).map(|t| origin + step * t as f64).collect();
        Agent { id, history, future_gt }
    }

    fn scene(agents: Vec<Agent>, lanes: Vec<Lane>) -> Scenario {
        let t_minus = agents[0].history.len();
        let t_plus = agents[0].future_gt.len();
        Scenario { sample_rate: RATE, t_minus, t_plus, agents, lanes }
    }

    fn diag_lane(id: u64) -> Lane {
        Lane {
            id,
            centerline: (0..6).map(|i| Vec2::new(-3.0 + 1.8 * i as f64, -3.0 + 1.8 * i as f64)).collect(),
            tag: "through".into(),
        }
    }

    fn tiny_scene() -> Scenario {
        scene(
            vec![
                straight_agent(1, Vec2::new(0.0, -2.0), 0.9, 6.0, 3, 5),
                straight_agent(2, Vec2::new(1.0, 2.5), -0.7, 7.0, 3, 5),
            ],
            vec![diag_lane(10)],
        )
    }

    fn offset_modes(gt: &[Vec<Vec2>], offsets: &[Vec2]) -> ModeSet {
        ModeSet {
            modes: offsets
                .iter()
                .map(|d| gt.iter().map(|traj| traj.iter().map(|p| *p + *d).collect()).collect())
                .collect(),
        }
    }

    fn gt_of(scn: &Scenario) -> Vec<Vec<Vec2>> {
        scn.agents.iter().map(|a| a.future_gt.clone()).collect()
    }

    #[test]
    fn wta_picks_exact_match_and_means() {
        let scn = tiny_scene();
        let gt = gt_of(&scn);
        // Mode 0 equals GT exactly.
        let modes = offset_modes(&gt, &[Vec2::ZERO, Vec2::new(1.0, 0.0)]);
        assert_eq!(wta_mode(&modes, &gt).unwrap(), 0);

        // Mode 0 displacements {1, 3}, mode 1 {1.5, 1.5}: means 2 vs 1.5.
        let mut uneven = offset_modes(&gt, &[Vec2::ZERO, Vec2::ZERO]);
        for p in &mut uneven.modes[0][0] {
            p.y += 1.0;
        }
        for p in &mut uneven.modes[0][1] {
            p.y += 3.0;
        }
        for agent in &mut uneven.modes[1] {
            for p in agent.iter_mut() {
                p.y += 1.5;
            }
        }
        assert_eq!(wta_mode(&uneven, &gt).unwrap(), 1);

        // Identical modes tie-break to 0.
        let tied = offset_modes(&gt, &[Vec2::new(0.3, 0.3), Vec2::new(0.3, 0.3)]);
        assert_eq!(wta_mode(&tied, &gt).unwrap(), 0);

        // Argmin is invariant under positive rescaling of displacements.
        let scaled = offset_modes(&gt, &[Vec2::new(0.0, 3.0), Vec2::new(0.0, 4.5)]);
        let small = offset_modes(&gt, &[Vec2::new(0.0, 0.002), Vec2::new(0.0, 0.003)]);
        assert_eq!(wta_mode(&scaled, &gt).unwrap(), wta_mode(&small, &gt).unwrap());
    }

    #[test]
    fn iteration_loss_matches_huber_branches() {
        let scn = tiny_scene();
        let gt = gt_of(&scn);
        let exact = offset_modes(&gt, &[Vec2::ZERO]);
        assert_eq!(iteration_loss(&exact, &gt, 1.0).unwrap(), (0.0, 0));

        // 0.5 m on both coordinates: every element in the quadratic
        // branch contributes 0.125.
        let near = offset_modes(&gt, &[Vec2::new(0.5, 0.5)]);
        let (l, _) = iteration_loss(&near, &gt, 1.0).unwrap();
        assert!((l - 0.125).abs() < 1e-12, "{l}");

        // 3 m: linear branch, 3 − 0.5 per element.
        let far = offset_modes(&gt, &[Vec2::new(3.0, 3.0)]);
        let (l, _) = iteration_loss(&far, &gt, 1.0).unwrap();
        assert!((l - 2.5).abs() < 1e-12, "{l}");

        // Offset on x only halves the mean.
        let half = offset_modes(&gt, &[Vec2::new(0.5, 0.0)]);
        let (l, _) = iteration_loss(&half, &gt, 1.0).unwrap();
        assert!((l - 0.0625).abs() < 1e-12, "{l}");

        // The winner's loss is reported, not the loser's.
        let pair = offset_modes(&gt, &[Vec2::new(3.0, 3.0), Vec2::new(0.5, 0.5)]);
        let (l, k) = iteration_loss(&pair, &gt, 1.0).unwrap();
        assert_eq!(k, 1);
        assert!((l - 0.125).abs() < 1e-12);
    }

    #[test]
    fn total_loss_averages_iterations() {
        let scn = tiny_scene();
        let gt = gt_of(&scn);
        let a = offset_modes(&gt, &[Vec2::new(0.5, 0.5)]);
        let b = offset_modes(&gt, &[Vec2::new(3.0, 3.0)]);

        let single = total_loss(&[a.clone()], &gt, 1.0).unwrap();
        assert_eq!(single.total, iteration_loss(&a, &gt, 1.0).unwrap().0);
        assert_eq!(single.winners, vec![0]);

        let same = total_loss(&[b.clone(), b.clone(), b.clone()], &gt, 1.0).unwrap();
        assert!((same.total - 2.5).abs() < 1e-12);

        let mixed = total_loss(&[a, b], &gt, 1.0).unwrap();
        assert!((mixed.total - (0.125 + 2.5) / 2.0).abs() < 1e-12);
        assert!(mixed.total >= 0.0);
        assert!(total_loss(&[], &gt, 1.0).is_err());
    }

    #[test]
    fn tape_loss_matches_value_oracle_bitwise() {
        let rcfg = RefinerConfig {
            iterations: 2,
            embed_dim: 8,
            heads: 2,
            lane_points_per_key: 3,
            pe_bands: 1,
            ..RefinerConfig::default()
        };
        let scn = tiny_scene();
        let gt = gt_of(&scn);
        let y0 = offset_modes(&gt, &[Vec2::new(0.4, -0.2), Vec2::new(-0.3, 0.5)]);
        let params = RefinerParams::init(&rcfg, scn.t_plus, 3).unwrap();

        let out = refine(&params, &scn, &y0, &rcfg).unwrap();
        let oracle = total_loss(&out.iterations, &gt, 1.0).unwrap();

        let ctx = SceneContext::new(&scn, &rcfg).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let tr = build_refine_tape(&mut tape, &vars, &ctx, &y0, &rcfg).unwrap();
        let (_, report) = build_loss_tape(&mut tape, &tr, &gt, 1.0).unwrap();

        assert_eq!(report.winners, oracle.winners);
        assert_eq!(report.per_iteration, oracle.per_iteration);
        assert_eq!(report.total, oracle.total);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(3e-4, 0, 100), 3e-4);
        assert!(cosine_lr(3e-4, 99, 100) <= 1e-8);
        let mid = cosine_lr(2.0, 50, 101);
        assert!((mid - 1.0).abs() < 1e-12);
        assert_eq!(cosine_lr(3e-4, 0, 1), 3e-4);
        // Monotone decay.
        let mut prev = f64::INFINITY;
        for s in 0..10 {
            let lr = cosine_lr(1.0, s, 10);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adamw_zero_lr_is_identity_and_first_step_matches_hand_math() {
        let mut params = vec![Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0])];
        let grads = vec![Tensor::from_vec(1, 3, vec![0.1, -0.2, 0.0])];
        let before = params.clone();
        let mut opt = AdamW::new(&params, 0.01);
        opt.step(&mut params, &grads, 0.0);
        assert_eq!(params, before);

        let mut opt = AdamW::new(&params, 0.01);
        opt.step(&mut params, &grads, 0.1);
        for i in 0..3 {
            let g = grads[0].data()[i];
            let theta = before[0].data()[i];
            // After one step m̂ = g and v̂ = g².
            let want = theta - 0.1 * (g / (g.abs() + ADAM_EPS) + 0.01 * theta);
            let got = params[0].data()[i];
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let rcfg = RefinerConfig {
            iterations: 2,
            embed_dim: 4,
            heads: 2,
            lane_points_per_key: 2,
            pe_bands: 0,
            ..RefinerConfig::default()
        };
        let scn = tiny_scene();
        let gt = gt_of(&scn);
        let y0 = offset_modes(&gt, &[Vec2::new(0.4, -0.2)]);
        let ctx = SceneContext::new(&scn, &rcfg).unwrap();
        let params = RefinerParams::init(&rcfg, scn.t_plus, 45).unwrap();
        let leaves = jittered(&params, 145);
        let heads = rcfg.heads;
        let build = move |tape: &mut Tape, vars: &[Var]| -> Var {
            let rv = RefinerVars::from_ordered(vars, heads);
            let tr = build_refine_tape(tape, &rv, &ctx, &y0, &rcfg).unwrap();
            build_loss_tape(tape, &tr, &gt, 1.0).unwrap().0
        };
        let err = max_rel_err(&build, &leaves);
        assert!(err < 1e-5, "max relative gradient error {err}");
    }

    /// Same generic-point jitter as the refiner gradient checks: zero
    /// biases park dead layers exactly on the relu kink.
    fn jittered(params: &RefinerParams, seed: u64) -> Vec<Tensor> {
        use rand::Rng;
        let mut rng = seeds::rng(seed);
        params
            .ordered_tensors()
            .into_iter()
            .map(|mut t| {
                for v in t.data_mut() {
                    *v += rng.gen_range(-0.05..0.05);
                }
                t
            })
            .collect()
    }

    fn overfit_dataset(count: usize) -> Vec<(Scenario, ModeSet)> {
        let dims = GeneratorDims {
            n_min: 2,
            n_max: 2,
            t_minus: 4,
            t_plus: 6,
            sample_rate: RATE,
        };
        let scns = generate(&[Archetype::CarFollow, Archetype::LaneFollow], count, 77, &dims).unwrap();
        let modes = coarse_predict_all(&scns, 2, 78).unwrap();
        scns.into_iter().zip(modes).collect()
    }

    #[test]
    fn config_validation_and_split() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 64);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.lr, 3e-4);
        assert_eq!(cfg.weight_decay, 1e-4);
        cfg.validate().unwrap();
        for bad in [
            TrainConfig { epochs: 0, ..cfg.clone() },
            TrainConfig { batch_size: 0, ..cfg.clone() },
            TrainConfig { lr: 0.0, ..cfg.clone() },
            TrainConfig { weight_decay: -0.1, ..cfg.clone() },
            TrainConfig { val_fraction: 1.0, ..cfg.clone() },
            TrainConfig { grad_clip: -1.0, ..cfg.clone() },
            TrainConfig { threads: 0, ..cfg.clone() },
            TrainConfig { huber_delta: 0.0, ..cfg.clone() },
        ] {
            assert!(bad.validate().is_err());
        }

        let (train, val) = split_indices(20, 0.1);
        assert_eq!(val, vec![0, 10]);
        assert_eq!(train.len(), 18);
        let (train, val) = split_indices(5, 0.0);
        assert_eq!(train.len(), 5);
        assert!(val.is_empty());

        let rcfg = RefinerConfig::default();
        assert!(train_err_is_config(&[], &rcfg, &TrainConfig::default()));
    }

    fn train_err_is_config(data: &[(Scenario, ModeSet)], rcfg: &RefinerConfig, tcfg: &TrainConfig) -> bool {
        matches!(train(data, rcfg, tcfg, &mut |_| {}), Err(Error::Config(_)))
    }

    #[test]
    fn same_seed_trains_bit_identically_and_threads_agree() {
        let data = overfit_dataset(4);
        let rcfg = RefinerConfig {
            iterations: 2,
            embed_dim: 8,
            heads: 2,
            lane_points_per_key: 3,
            pe_bands: 1,
            ..RefinerConfig::default()
        };
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            val_fraction: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(&data, &rcfg, &tcfg, &mut |_| {}).unwrap();
        let b = train(&data, &rcfg, &tcfg, &mut |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.steps, 4);

        let threaded = TrainConfig { threads: 3, ..tcfg };
        let c = train(&data, &rcfg, &threaded, &mut |_| {}).unwrap();
        assert_eq!(a.params, c.params);
        assert_eq!(a.log, c.log);

        let other_seed = TrainConfig { seed: 6, ..tcfg };
        let d = train(&data, &rcfg, &other_seed, &mut |_| {}).unwrap();
        assert_ne!(a.params, d.params);
    }

    #[test]
    fn training_log_and_archive_carry_state() {
        let data = overfit_dataset(10);
        let rcfg = RefinerConfig {
            iterations: 1,
            embed_dim: 8,
            heads: 2,
            lane_points_per_key: 3,
            pe_bands: 1,
            ..RefinerConfig::default()
        };
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            val_fraction: 0.2,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        let out = train(&data, &rcfg, &tcfg, &mut |e| seen.push(e.clone())).unwrap();
        assert_eq!(seen, out.log);
        assert_eq!(out.log.len(), 3);
        // 10 scenarios, stride 5 → val {0, 5}, 8 train → 2 batches/epoch.
        assert_eq!(out.steps, 6);
        for e in &out.log {
            assert!(e.train_loss.is_finite());
            assert!(e.val_loss.unwrap().is_finite());
            assert!(e.val_avg_min_fde.unwrap() >= 0.0);
            assert!(e.val_avg_min_ade.unwrap() >= 0.0);
        }
        assert!(out.log[2].lr < tcfg.lr);

        // Archive round-trips the final params and carries moments.
        let back = RefinerParams::from_archive(&out.archive, rcfg.heads).unwrap();
        assert_eq!(back, out.params);
        assert!(out.archive.get("opt.m.enc.l1.w").is_some());
        assert!(out.archive.get("opt.v.head.l3.b").is_some());
        assert_eq!(out.archive.len(), 48 * 3);

        // JSONL-ready log lines serialize stably.
        let line = serde_json::to_string(&out.log[0]).unwrap();
        assert!(line.contains("\"train_loss\""));
    }

    #[test]
    fn overfit_small_set_cuts_loss_below_ten_percent() {
        let data = overfit_dataset(20);
        let rcfg = RefinerConfig {
            iterations: 2,
            embed_dim: 8,
            heads: 2,
            lane_points_per_key: 3,
            pe_bands: 1,
            ..RefinerConfig::default()
        };
        let tcfg = TrainConfig {
            epochs: 200,
            batch_size: 4,
            lr: 2e-3,
            weight_decay: 0.0,
            val_fraction: 0.0,
            seed: 2,
            ..TrainConfig::default()
        };

        // Initial loss with untrained parameters.
        let init_params = RefinerParams::init(&rcfg, data[0].0.t_plus, tcfg.seed).unwrap();
        let mut initial = 0.0;
        for (scn, y0) in &data {
            let out = refine(&init_params, scn, y0, &rcfg).unwrap();
            initial += total_loss(&out.iterations, &gt_of(scn), tcfg.huber_delta).unwrap().total;
        }
        initial /= data.len() as f64;

        let out = train(&data, &rcfg, &tcfg, &mut |_| {}).unwrap();
        let final_loss = out.log.last().unwrap().train_loss;
        assert!(
            final_loss < 0.1 * initial,
            "final {final_loss} vs initial {initial}"
        );
    }
}
