//! Two-stage alternating optimization: a generator phase updating the
//! encoder/extractors/decoder (plus the channel codec) on the weighted
//! reconstruction + invariance + variance objective, then a discriminator
//! phase that finetunes the representation encoder and label classifier and
//! plays the adversarial game on the knowledge representations.
//!
//! Each phase updates only its named parameter groups; the tests pin that
//! isolation by fingerprinting every group around each step kind.

use crate::channel::{ChannelConfig, ChannelKind, TrainChannelDraw};
use crate::data::{make_batches, Batch, LabeledDataset};
use crate::error::{Result, UkieError};
use crate::eval;
use crate::graph::Tape;
use crate::losses::{proto_rows, present_classes, KlSign, LossWeights};
use crate::memory::SemanticMemory;
use crate::models::{save_checkpoint, BaselineKind, BaselineModel, ForwardMode, ModelSet};
use crate::nn::{Optimizer, OptimizerKind};
use crate::rng::derive_seed;
use ndarray::{Array2, Ix2};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Direction convention of the adversarial updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvSign {
    /// As the update equations are written: the discriminator ascends its
    /// own cross-entropy while the encoders descend it.
    Literal,
    /// Flipped: the discriminator learns to classify and the encoders are
    /// driven to hide class information (gradient reversal).
    Conventional,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub gen_iters: usize,
    pub mid_iters: usize,
    pub eta_ukie: f64,
    pub eta_mid: f64,
    pub eta_adv: f64,
    pub weights: LossWeights,
    /// EMA coefficient merging batch prototypes into the semantic memory.
    pub ema_beta: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// In-loop channel SNR (dB) and fading model.
    pub snr_train: f64,
    pub channel_kind: ChannelKind,
    pub optimizer: OptimizerKind,
    /// 0 disables the outer interpolation; otherwise params move to
    /// start + beta * (end - start) after each phase (or round).
    pub reptile_beta: f64,
    pub reptile_per_round: bool,
    pub adv_sign: AdvSign,
    pub kl_sign: KlSign,
    /// Per-group gradient-norm clip (0 disables).
    pub grad_clip: f64,
    /// Checkpoint every K rounds into the run directory (0 = off).
    pub checkpoint_every: usize,
    /// Held-out samples used for the per-round probe metrics.
    pub probe_size: usize,
    /// Off by default so metric CSVs are byte-identical across reruns;
    /// elapsed time then goes to the run manifest instead.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 20,
            gen_iters: 100,
            mid_iters: 100,
            eta_ukie: 1e-3,
            eta_mid: 1e-3,
            eta_adv: 1e-4,
            weights: LossWeights::default(),
            ema_beta: 0.1,
            seed: 7,
            batch_size: 64,
            snr_train: 5.0,
            channel_kind: ChannelKind::Rayleigh,
            optimizer: OptimizerKind::Adam,
            reptile_beta: 0.0,
            reptile_per_round: false,
            adv_sign: AdvSign::Literal,
            kl_sign: KlSign::Literal,
            grad_clip: 5.0,
            checkpoint_every: 0,
            probe_size: 512,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.gen_iters == 0 || self.mid_iters == 0 {
            return Err(UkieError::Config("rounds and phase iteration counts must be >= 1".into()));
        }
        for (name, eta) in [("eta_ukie", self.eta_ukie), ("eta_mid", self.eta_mid), ("eta_adv", self.eta_adv)] {
            if !(eta > 0.0) {
                return Err(UkieError::Config(format!("{name} must be > 0 (got {eta})")));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return Err(UkieError::Config("ema_beta must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.reptile_beta) {
            return Err(UkieError::Config("reptile_beta must lie in [0,1]".into()));
        }
        self.weights.validate()
    }

    fn train_channel(&self) -> ChannelConfig {
        ChannelConfig {
            kind: self.channel_kind,
            snr_db: self.snr_train,
            seed: derive_seed(self.seed, "train-channel", 0),
            compression_ratio: 1.0, // unused: M comes from the model
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GenLosses {
    pub l_rec: f64,
    pub l_mse: f64,
    pub l_kl: f64,
    pub l_iv: f64,
    pub l_v: f64,
    pub l_ukie: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MidLosses {
    pub l_iv: f64,
    pub l_gtc: f64,
    pub l_mid: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Mid,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Generator => "generator",
            Phase::Mid => "mid",
        }
    }
}

/// One metric-log row; column order is fixed by `CSV_HEADER`.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub round: usize,
    pub phase: Phase,
    pub step: u64,
    pub l_rec: f64,
    pub l_iv: f64,
    pub l_v: f64,
    pub l_gtc: f64,
    pub l_adv: f64,
    pub probe_psnr: f64,
    pub probe_acc: f64,
    pub wall_time_s: f64,
}

pub const CSV_HEADER: &str =
    "round,phase,step,L_rec,L_iv,L_v,L_gtc,L_adv,probe_psnr,probe_acc,wall_time_s";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.3}",
            self.round,
            self.phase.as_str(),
            self.step,
            self.l_rec,
            self.l_iv,
            self.l_v,
            self.l_gtc,
            self.l_adv,
            self.probe_psnr,
            self.probe_acc,
            self.wall_time_s
        )
    }
}

pub struct TrainOutcome {
    pub memory: SemanticMemory,
    pub metrics: Vec<MetricRow>,
    pub gen_steps: u64,
    pub mid_steps: u64,
    pub adv_steps: u64,
}

fn finite_or_abort(value: f64, what: &str, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(UkieError::Numeric(format!("{what} became {value} at step {step}")))
    }
}

fn compact_rows(labels: &[usize]) -> (Vec<usize>, usize) {
    let classes = present_classes(labels);
    let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(r, &c)| (c, r)).collect();
    (labels.iter().map(|y| index[y]).collect(), classes.len())
}

/// One gradient step of the generator phase: descends the weighted
/// reconstruction + invariance + variance objective for the encoder triple,
/// the decoder and the channel codec. The classifier and discriminator do
/// not move. Batch prototypes are EMA-merged into the semantic memory first
/// and enter the invariance term as constants.
pub fn generator_step(
    model: &mut ModelSet,
    opt: &mut Optimizer,
    batch: &Batch,
    cfg: &TrainConfig,
    memory: &mut SemanticMemory,
    step: u64,
) -> Result<GenLosses> {
    let built = build_generator_objective(
        model,
        batch,
        cfg,
        GenProtoSource::MergeIntoMemory { memory, ema_beta: cfg.ema_beta },
        None,
        step,
    )?;
    let GenForward { mut tape, vars, loss, losses, .. } = built;
    finite_or_abort(losses.l_ukie, "L_UKIE", step)?;

    tape.backward(loss);
    opt.step(&mut model.theta_e, &tape, &vars.e, cfg.eta_ukie, 1.0);
    opt.step(&mut model.theta_k, &tape, &vars.k, cfg.eta_ukie, 1.0);
    opt.step(&mut model.theta_v, &tape, &vars.v, cfg.eta_ukie, 1.0);
    opt.step(&mut model.theta_2, &tape, &vars.d, cfg.eta_ukie, 1.0);
    opt.step(&mut model.alpha_1, &tape, &vars.a1, cfg.eta_ukie, 1.0);
    opt.step(&mut model.alpha_2, &tape, &vars.a2, cfg.eta_ukie, 1.0);
    Ok(losses)
}

/// A built generator-phase objective: the tape, the bound variables and the
/// scalar loss node, ready for `backward`.
pub struct GenForward {
    pub tape: Tape,
    pub vars: crate::models::BoundVars,
    pub loss: crate::graph::Var,
    pub losses: GenLosses,
    /// The (mu, logvar) reference the KL term compared against; gradients do
    /// not flow into it.
    pub kl_reference: (Array2<f64>, Array2<f64>),
}

/// Where the invariance term's prototypes come from. Training merges the
/// batch prototypes into the semantic memory first; the gradient checks pin
/// a fixed set so the objective is a pure function of the parameters.
pub enum GenProtoSource<'a> {
    Fixed(&'a crate::losses::PrototypeSet),
    MergeIntoMemory { memory: &'a mut SemanticMemory, ema_beta: f64 },
}

/// Builds the generator objective; prototypes and channel noise enter as
/// constants. Shared by the training step and the finite-difference checks.
/// `kl_reference`: `None` re-encodes the reconstruction through frozen
/// parameters (the training behaviour); `Some` pins the reference moments,
/// which makes the objective a pure function of the parameters for the
/// finite-difference checks.
pub fn build_generator_objective(
    model: &ModelSet,
    batch: &Batch,
    cfg: &TrainConfig,
    proto_source: GenProtoSource<'_>,
    kl_reference: Option<&(Array2<f64>, Array2<f64>)>,
    step: u64,
) -> Result<GenForward> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let n = batch.len();
    let x = tape.constant(batch.images.clone().into_dyn());
    let eps = model.sample_eps(n, cfg.seed, "gen-eps", step);
    let (z, moments) = model.encode(&mut tape, &vars, x, &ForwardMode::Train { eps })?;
    let zk = model.extract_knowledge(&mut tape, &vars, z)?;
    let zv = model.extract_variant(&mut tape, &vars, z)?;

    let protos = match proto_source {
        GenProtoSource::Fixed(p) => p.clone(),
        GenProtoSource::MergeIntoMemory { memory, ema_beta } => {
            let zk_val = tape.value(zk).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
            let batch_protos = crate::losses::batch_prototypes(&zk_val, &batch.labels)?;
            for (&c, p) in &batch_protos.prototypes {
                memory.update_local(c, p, step, ema_beta);
            }
            memory.to_prototype_set()
        }
    };
    let (proto_matrix, rows, _) = proto_rows(&protos, &batch.labels)?;
    let d_zk = model.layout.d_zk();
    let d_zv = model.layout.d_zv();
    let zk_flat = tape.reshape(zk, &[n, d_zk]);
    let l_iv = tape.invariant_proto_loss(zk_flat, proto_matrix, &rows);

    let (crows, ngroups) = compact_rows(&batch.labels);
    let zv_flat = tape.reshape(zv, &[n, d_zv]);
    let l_v = tape.variant_hinge_loss(zv_flat, &crows, ngroups, cfg.weights.epsilon_var);

    // variant part through the channel at the training SNR
    let sym = model.channel_encode_symbols(&mut tape, &vars, zv)?;
    let ch = cfg.train_channel();
    let draw = TrainChannelDraw::generate(&ch, model.m_symbols, n, step * n as u64);
    let received = tape.row_affine(sym, draw.scale, draw.offset);
    let zv_hat = model.channel_decode_symbols(&mut tape, &vars, received)?;
    let x_hat = model.decode(&mut tape, &vars, zv_hat, zk)?;

    let l_mse = tape.per_class_mse(x_hat, batch.images.clone().into_dyn(), &crows, ngroups);

    // second encoder pass on the reconstruction, gradients blocked
    let (mu2, lv2) = match kl_reference {
        Some((mu, lv)) => (mu.clone(), lv.clone()),
        None => {
            let x_hat_const = tape.detach(x_hat);
            let frozen = model.bind_frozen(&mut tape);
            let (_, m2) = model.encode(&mut tape, &frozen, x_hat_const, &ForwardMode::Eval)?;
            let mu2_var = tape.reshape(m2.mu, &[n, model.layout.d_z()]);
            let lv2_var = tape.reshape(m2.logvar, &[n, model.layout.d_z()]);
            (
                tape.value(mu2_var).clone().into_dimensionality::<Ix2>().unwrap(),
                tape.value(lv2_var).clone().into_dimensionality::<Ix2>().unwrap(),
            )
        }
    };
    let mu1 = tape.reshape(moments.mu, &[n, model.layout.d_z()]);
    let lv1 = tape.reshape(moments.logvar, &[n, model.layout.d_z()]);
    let l_kl_sum = tape.per_class_gauss_kl(mu1, lv1, mu2.clone(), lv2.clone(), &crows, ngroups);
    let l_kl = tape.mul_scalar(l_kl_sum, 1.0 / model.layout.d_z() as f64);

    let kl_term = tape.mul_scalar(l_kl, cfg.kl_sign.factor());
    let l_rec = tape.add(l_mse, kl_term);

    let rec_w = tape.mul_scalar(l_rec, cfg.weights.alpha_rec);
    let iv_w = tape.mul_scalar(l_iv, cfg.weights.alpha_iv);
    let v_w = tape.mul_scalar(l_v, cfg.weights.alpha_v);
    let partial = tape.add(rec_w, iv_w);
    let l_ukie = tape.add(partial, v_w);

    let losses = GenLosses {
        l_rec: tape.scalar(l_rec),
        l_mse: tape.scalar(l_mse),
        l_kl: tape.scalar(l_kl),
        l_iv: tape.scalar(l_iv),
        l_v: tape.scalar(l_v),
        l_ukie: tape.scalar(l_ukie),
    };
    Ok(GenForward { tape, vars, loss: l_ukie, losses, kl_reference: (mu2, lv2) })
}

/// One step of the discriminator phase: descends the weighted invariance +
/// classification objective for the representation encoder and the label
/// classifier only.
pub fn mid_step(
    model: &mut ModelSet,
    opt: &mut Optimizer,
    batch: &Batch,
    cfg: &TrainConfig,
    memory: &SemanticMemory,
    step: u64,
) -> Result<MidLosses> {
    let protos = memory.to_prototype_set();
    let built = build_mid_objective(model, batch, cfg, &protos, step)?;
    let MidForward { mut tape, vars, loss, losses } = built;
    finite_or_abort(losses.l_mid, "L_MID", step)?;
    tape.backward(loss);
    opt.step(&mut model.theta_e, &tape, &vars.e, cfg.eta_mid, 1.0);
    opt.step(&mut model.xi, &tape, &vars.xi, cfg.eta_mid, 1.0);
    Ok(losses)
}

/// A built discriminator-phase objective.
pub struct MidForward {
    pub tape: Tape,
    pub vars: crate::models::BoundVars,
    pub loss: crate::graph::Var,
    pub losses: MidLosses,
}

/// Builds the weighted invariance + classification objective against a
/// fixed prototype set.
pub fn build_mid_objective(
    model: &ModelSet,
    batch: &Batch,
    cfg: &TrainConfig,
    protos: &crate::losses::PrototypeSet,
    step: u64,
) -> Result<MidForward> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let n = batch.len();
    let x = tape.constant(batch.images.clone().into_dyn());
    let eps = model.sample_eps(n, cfg.seed, "mid-eps", step);
    let (z, _) = model.encode(&mut tape, &vars, x, &ForwardMode::Train { eps })?;
    let zk = model.extract_knowledge(&mut tape, &vars, z)?;

    let (proto_matrix, rows, _) = proto_rows(protos, &batch.labels)?;
    let d_zk = model.layout.d_zk();
    let zk_flat = tape.reshape(zk, &[n, d_zk]);
    let l_iv = tape.invariant_proto_loss(zk_flat, proto_matrix, &rows);

    let logits = model.classify_invariant(&mut tape, &vars, zk)?;
    let l_gtc = tape.softmax_cross_entropy(logits, &batch.labels);

    let iv_w = tape.mul_scalar(l_iv, cfg.weights.alpha_iv);
    let gtc_w = tape.mul_scalar(l_gtc, cfg.weights.alpha_gtc);
    let l_mid = tape.add(iv_w, gtc_w);

    let losses = MidLosses {
        l_iv: tape.scalar(l_iv),
        l_gtc: tape.scalar(l_gtc),
        l_mid: tape.scalar(l_mid),
    };
    Ok(MidForward { tape, vars, loss: l_mid, losses })
}

/// The adversarial update: the discriminator moves against the encoders on
/// the same cross-entropy (directions per [`AdvSign`]). Only the
/// discriminator, representation encoder and knowledge extractor move.
pub fn adversarial_step(
    model: &mut ModelSet,
    opt: &mut Optimizer,
    batch: &Batch,
    cfg: &TrainConfig,
    step: u64,
) -> Result<f64> {
    let built = build_adv_objective(model, batch, cfg, step)?;
    let AdvForward { mut tape, vars, loss: l_adv, ce_value: value } = built;
    finite_or_abort(value, "L_adv", step)?;

    tape.backward(l_adv);
    let (psi_sign, enc_sign) = match cfg.adv_sign {
        AdvSign::Literal => (-1.0, 1.0),
        AdvSign::Conventional => (1.0, -1.0),
    };
    opt.step(&mut model.psi, &tape, &vars.psi, cfg.eta_adv, psi_sign);
    opt.step(&mut model.theta_e, &tape, &vars.e, cfg.eta_adv, enc_sign);
    opt.step(&mut model.theta_k, &tape, &vars.k, cfg.eta_adv, enc_sign);
    Ok(value)
}

/// A built adversarial objective (`loss` is the alpha_adv-scaled node).
pub struct AdvForward {
    pub tape: Tape,
    pub vars: crate::models::BoundVars,
    pub loss: crate::graph::Var,
    pub ce_value: f64,
}

/// Builds the discriminator cross-entropy on the knowledge representations.
pub fn build_adv_objective(
    model: &ModelSet,
    batch: &Batch,
    cfg: &TrainConfig,
    step: u64,
) -> Result<AdvForward> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let n = batch.len();
    let x = tape.constant(batch.images.clone().into_dyn());
    let eps = model.sample_eps(n, cfg.seed, "adv-eps", step);
    let (z, _) = model.encode(&mut tape, &vars, x, &ForwardMode::Train { eps })?;
    let zk = model.extract_knowledge(&mut tape, &vars, z)?;
    let logits = model.discriminate(&mut tape, &vars, zk)?;
    let ce = tape.softmax_cross_entropy(logits, &batch.labels);
    let ce_value = tape.scalar(ce);
    let l_adv = tape.mul_scalar(ce, cfg.weights.alpha_adv);
    Ok(AdvForward { tape, vars, loss: l_adv, ce_value })
}

struct BatchCursor<'a> {
    ds: &'a LabeledDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    batches: Vec<Vec<usize>>,
    pos: usize,
}

impl<'a> BatchCursor<'a> {
    fn new(ds: &'a LabeledDataset, batch_size: usize, seed: u64) -> Result<Self> {
        let batches = make_batches(ds, batch_size, derive_seed(seed, "epoch", 0))?;
        Ok(BatchCursor { ds, batch_size, seed, epoch: 0, batches, pos: 0 })
    }

    fn next(&mut self) -> Result<Batch> {
        if self.pos >= self.batches.len() {
            self.epoch += 1;
            self.batches =
                make_batches(self.ds, self.batch_size, derive_seed(self.seed, "epoch", self.epoch))?;
            self.pos = 0;
        }
        let batch = self.ds.gather(&self.batches[self.pos]);
        self.pos += 1;
        Ok(batch)
    }
}

fn probe_metrics(
    model: &ModelSet,
    memory: &SemanticMemory,
    probe: &LabeledDataset,
    cfg: &TrainConfig,
    round: usize,
) -> Result<(f64, f64)> {
    let ch = ChannelConfig {
        kind: cfg.channel_kind,
        snr_db: cfg.snr_train,
        seed: derive_seed(cfg.seed, "probe-channel", round as u64),
        compression_ratio: 1.0,
    };
    let chunk = 64usize;
    let mut correct = 0usize;
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    let mut pixels = 0usize;
    let mut frame_index = 0u64;
    for start in (0..probe.len()).step_by(chunk) {
        let idxs: Vec<usize> = (start..(start + chunk).min(probe.len())).collect();
        let b = probe.gather(&idxs);
        let (z, _, _) = model.encode_eval(&b.images)?;
        let zk = model.extract_knowledge_eval(&z)?;
        let zv = model.extract_variant_eval(&z)?;
        let logits = model.classify_eval(&zk)?;
        for (i, row) in logits.rows().into_iter().enumerate() {
            let pred = argmax(row.as_slice().unwrap());
            if pred == b.labels[i] {
                correct += 1;
            }
        }
        // knowledge-aided reconstruction through the training channel
        let sym = model.channel_encode_eval(&zv)?;
        let frames = crate::channel::frames_from_symbols(&sym, &b.labels)?;
        let mut rx_mat = Array2::<f64>::zeros(sym.dim());
        for (i, f) in frames.iter().enumerate() {
            let rx = crate::channel::equalize(&crate::channel::transmit_indexed(f, &ch, frame_index));
            frame_index += 1;
            let reals = rx.to_reals();
            for (j, v) in reals.iter().enumerate() {
                rx_mat[[i, j]] = *v;
            }
        }
        let zv_hat = model.channel_decode_eval(&rx_mat)?;
        // class prototype from memory; fall back to the sample's own
        // knowledge while memory is cold
        let mut zk_used = zk.clone();
        for (i, &y) in b.labels.iter().enumerate() {
            if let Ok(p) = memory.lookup(y) {
                zk_used.index_axis_mut(ndarray::Axis(0), i).assign(p);
            }
        }
        let x_hat = model.decode_eval(&zv_hat, &zk_used)?;
        sq_sum += (&x_hat - &b.images).iter().map(|v| v * v).sum::<f64>();
        pixels += x_hat.len();
        count += b.len();
    }
    let mse = sq_sum / pixels as f64;
    Ok((eval::psnr_from_mse(mse), correct as f64 / count as f64))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Runs the full alternating loop. Checkpoints land in `run_dir` when given;
/// a numeric abort leaves the last good checkpoint in place and returns the
/// error.
pub fn train(
    model: &mut ModelSet,
    train_ds: &LabeledDataset,
    probe_ds: &LabeledDataset,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let mut opt = Optimizer::new(cfg.optimizer).with_clip(cfg.grad_clip);
    let mut memory = SemanticMemory::new(0, 0.0, 1)?;
    let mut cursor = BatchCursor::new(train_ds, cfg.batch_size, cfg.seed)?;
    let mut metrics = Vec::new();
    let mut step: u64 = 0;
    let (mut gen_steps, mut mid_steps, mut adv_steps) = (0u64, 0u64, 0u64);
    let mut last_gen = GenLosses::default();
    let mut last_mid = MidLosses::default();
    let mut last_adv = 0.0f64;

    let probe = probe_ds.take(cfg.probe_size);

    for round in 0..cfg.rounds {
        let round_snapshot = (cfg.reptile_per_round && cfg.reptile_beta > 0.0)
            .then(|| model.groups().iter().map(|g| g.snapshot()).collect::<Vec<_>>());

        // generator phase
        let gen_snapshot = (!cfg.reptile_per_round && cfg.reptile_beta > 0.0).then(|| {
            [
                model.theta_e.snapshot(),
                model.theta_k.snapshot(),
                model.theta_v.snapshot(),
                model.theta_2.snapshot(),
                model.alpha_1.snapshot(),
                model.alpha_2.snapshot(),
            ]
        });
        for _ in 0..cfg.gen_iters {
            let batch = cursor.next()?;
            last_gen = generator_step(model, &mut opt, &batch, cfg, &mut memory, step)?;
            step += 1;
            gen_steps += 1;
        }
        if let Some(snaps) = gen_snapshot {
            let groups = [
                &mut model.theta_e,
                &mut model.theta_k,
                &mut model.theta_v,
                &mut model.theta_2,
                &mut model.alpha_1,
                &mut model.alpha_2,
            ];
            for (g, s) in groups.into_iter().zip(snaps.iter()) {
                g.interpolate_from(s, cfg.reptile_beta);
            }
        }
        let (psnr, acc) = probe_metrics(model, &memory, &probe, cfg, round)?;
        metrics.push(MetricRow {
            round,
            phase: Phase::Generator,
            step,
            l_rec: last_gen.l_rec,
            l_iv: last_gen.l_iv,
            l_v: last_gen.l_v,
            l_gtc: last_mid.l_gtc,
            l_adv: last_adv,
            probe_psnr: psnr,
            probe_acc: acc,
            wall_time_s: if cfg.log_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        });

        // MID + adversarial phase
        let mid_snapshot = (!cfg.reptile_per_round && cfg.reptile_beta > 0.0).then(|| {
            [
                model.theta_e.snapshot(),
                model.theta_k.snapshot(),
                model.xi.snapshot(),
                model.psi.snapshot(),
            ]
        });
        for _ in 0..cfg.mid_iters {
            let batch = cursor.next()?;
            last_mid = mid_step(model, &mut opt, &batch, cfg, &memory, step)?;
            last_adv = adversarial_step(model, &mut opt, &batch, cfg, step)?;
            step += 1;
            mid_steps += 1;
            adv_steps += 1;
        }
        if let Some(snaps) = mid_snapshot {
            let groups = [&mut model.theta_e, &mut model.theta_k, &mut model.xi, &mut model.psi];
            for (g, s) in groups.into_iter().zip(snaps.iter()) {
                g.interpolate_from(s, cfg.reptile_beta);
            }
        }
        if let Some(snaps) = round_snapshot {
            if cfg.reptile_beta > 0.0 {
                let groups = [
                    &mut model.theta_e,
                    &mut model.theta_k,
                    &mut model.theta_v,
                    &mut model.theta_2,
                    &mut model.alpha_1,
                    &mut model.alpha_2,
                    &mut model.xi,
                    &mut model.psi,
                ];
                for (g, s) in groups.into_iter().zip(snaps.iter()) {
                    g.interpolate_from(s, cfg.reptile_beta);
                }
            }
        }

        let (psnr, acc) = probe_metrics(model, &memory, &probe, cfg, round)?;
        metrics.push(MetricRow {
            round,
            phase: Phase::Mid,
            step,
            l_rec: last_gen.l_rec,
            l_iv: last_mid.l_iv,
            l_v: last_gen.l_v,
            l_gtc: last_mid.l_gtc,
            l_adv: last_adv,
            probe_psnr: psnr,
            probe_acc: acc,
            wall_time_s: if cfg.log_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        });

        if !model.all_finite() {
            return Err(UkieError::Numeric(format!("non-finite parameters after round {round}")));
        }
        if let Some(dir) = run_dir {
            let every = cfg.checkpoint_every.max(1);
            if cfg.checkpoint_every > 0 && (round + 1) % every == 0 {
                save_checkpoint(&dir.join("checkpoint"), model, step)?;
            }
        }
    }
    if let Some(dir) = run_dir {
        save_checkpoint(&dir.join("checkpoint"), model, step)?;
    }

    Ok(TrainOutcome { memory, metrics, gen_steps, mid_steps, adv_steps })
}

// ---------------------------------------------------------------------------
// baseline training (matched budgets for comparison runs)
// ---------------------------------------------------------------------------

/// Plain reconstruction training for the AE/VAE baselines with the same
/// channel in the loop. `beta_kl` only applies to the VAE objective.
#[derive(Debug, Clone, Copy)]
pub struct BaselineTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub snr_train: f64,
    pub channel_kind: ChannelKind,
    pub beta_kl: f64,
    pub grad_clip: f64,
}

pub fn train_baseline(
    model: &mut BaselineModel,
    train_ds: &LabeledDataset,
    cfg: &BaselineTrainConfig,
) -> Result<()> {
    let mut opt = Optimizer::new(cfg.optimizer).with_clip(cfg.grad_clip);
    let mut cursor = BatchCursor::new(train_ds, cfg.batch_size, cfg.seed)?;
    let ch = ChannelConfig {
        kind: cfg.channel_kind,
        snr_db: cfg.snr_train,
        seed: derive_seed(cfg.seed, "baseline-channel", 0),
        compression_ratio: 1.0,
    };
    for step in 0..cfg.steps as u64 {
        let batch = cursor.next()?;
        let n = batch.len();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(batch.images.clone().into_dyn());
        let eps = model.sample_eps(n, cfg.seed, "baseline-eps", step);
        let (z, moments) = model.encode(&mut tape, &bound, x, &ForwardMode::Train { eps });
        let sym = model.channel_encode_symbols(&mut tape, &bound, z);
        let draw = TrainChannelDraw::generate(&ch, model.m_symbols, n, step * n as u64);
        let received = tape.row_affine(sym, draw.scale, draw.offset);
        let z_hat = model.channel_decode_symbols(&mut tape, &bound, received);
        let x_hat = model.decode(&mut tape, &bound, z_hat);

        let diff = tape.sub(x_hat, x);
        let sq = tape.mul(diff, diff);
        let mse = tape.mean_all(sq);
        let loss = match (model.kind, moments) {
            (BaselineKind::Ae, _) | (BaselineKind::Vae, None) => mse,
            (BaselineKind::Vae, Some(m)) => {
                let d = model.latent_channels * 64;
                let mu = tape.reshape(m.mu, &[n, d]);
                let lv = tape.reshape(m.logvar, &[n, d]);
                let rows = vec![0usize; n];
                let kl = tape.per_class_gauss_kl(
                    mu,
                    lv,
                    Array2::zeros((n, d)),
                    Array2::zeros((n, d)),
                    &rows,
                    1,
                );
                let klw = tape.mul_scalar(kl, cfg.beta_kl);
                tape.add(mse, klw)
            }
        };
        finite_or_abort(tape.scalar(loss), "baseline loss", step)?;
        tape.backward(loss);
        opt.step(&mut model.enc_group, &tape, &bound.enc, cfg.lr, 1.0);
        opt.step(&mut model.dec_group, &tape, &bound.dec, cfg.lr, 1.0);
        opt.step(&mut model.codec_group, &tape, &bound.codec, cfg.lr, 1.0);
    }
    Ok(())
}

/// Channel-in-loop reconstruction PSNR of a trained baseline.
pub fn baseline_link_psnr(
    model: &BaselineModel,
    test_ds: &LabeledDataset,
    kind: ChannelKind,
    snr_db: f64,
    seed: u64,
) -> Result<f64> {
    let ch = ChannelConfig {
        kind,
        snr_db,
        seed: derive_seed(seed, "baseline-eval", 0),
        compression_ratio: 1.0,
    };
    let chunk = 64usize;
    let mut sq_sum = 0.0;
    let mut pixels = 0usize;
    let mut frame_index = 0u64;
    for start in (0..test_ds.len()).step_by(chunk) {
        let idxs: Vec<usize> = (start..(start + chunk).min(test_ds.len())).collect();
        let b = test_ds.gather(&idxs);
        let n = b.len();
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let x = tape.constant(b.images.clone().into_dyn());
        let (z, _) = model.encode(&mut tape, &bound, x, &ForwardMode::Eval);
        let sym = model.channel_encode_symbols(&mut tape, &bound, z);
        let draw = TrainChannelDraw::generate(&ch, model.m_symbols, n, frame_index);
        frame_index += n as u64;
        let received = tape.row_affine(sym, draw.scale, draw.offset);
        let z_hat = model.channel_decode_symbols(&mut tape, &bound, received);
        let x_hat = model.decode(&mut tape, &bound, z_hat);
        let xh = tape.value(x_hat);
        sq_sum += (&b.images.clone().into_dyn() - xh).iter().map(|v| v * v).sum::<f64>();
        pixels += b.images.len();
    }
    Ok(eval::psnr_from_mse(sq_sum / pixels as f64))
}
