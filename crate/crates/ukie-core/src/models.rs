//! Model construction: the semantic encoder triple (representation encoder,
//! knowledge extractor, variant extractor), the knowledge-conditioned
//! decoder, the learned channel codec, classifier and discriminator heads,
//! and the plain AE/VAE baselines used for comparison runs.
//!
//! Every network keeps its parameters in a named [`ParamGroup`]; the training
//! phases update whole groups, so group boundaries are the isolation contract.

use crate::error::{Result, UkieError};
use crate::graph::{Tape, Var};
use crate::nn::{Conv2d, Dense, ParamGroup};
use crate::rng::stream;
use ndarray::{Array2, Array4, ArrayD, Ix4, IxDyn};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

/// Latent spatial grid is fixed at 8x8; capacity is steered by channel counts.
pub const LATENT_SPATIAL: usize = 8;

/// Split of the bottleneck channels into invariant (knowledge) and variant
/// (transmitted) parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LatentLayout {
    pub total_channels: usize,
    pub invariant_channels: usize,
    pub variant_channels: usize,
}

impl LatentLayout {
    pub fn new(total: usize, invariant: usize) -> Result<Self> {
        if invariant == 0 || invariant >= total {
            return Err(UkieError::Config(format!(
                "latent split needs 1 <= invariant < total (got invariant={invariant}, total={total})"
            )));
        }
        Ok(LatentLayout {
            total_channels: total,
            invariant_channels: invariant,
            variant_channels: total - invariant,
        })
    }

    pub fn d_z(&self) -> usize {
        self.total_channels * LATENT_SPATIAL * LATENT_SPATIAL
    }

    pub fn d_zk(&self) -> usize {
        self.invariant_channels * LATENT_SPATIAL * LATENT_SPATIAL
    }

    pub fn d_zv(&self) -> usize {
        self.variant_channels * LATENT_SPATIAL * LATENT_SPATIAL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    /// Lean conv stack for desk-scale CPU budgets.
    Small,
    /// Residual encoder/decoder in the spirit of the full-scale setup.
    Resnet9,
}

/// Architecture hyperparameters. Width defaults suit a single CPU core.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchConfig {
    pub kind: ArchKind,
    /// Base channel width of the encoder/decoder backbone.
    pub width: usize,
    /// Hidden channels of the two 3-layer extractor CNNs.
    pub extractor_width: usize,
    /// Hidden units of the classifier/discriminator MLPs.
    pub mlp_width: usize,
    /// Init gain on the variant extractor's output layer. The symbol power
    /// normalization makes decoding scale-invariant in z_V, so the variant
    /// part can ride at a small absolute scale; starting it small keeps the
    /// within-class spread near zero, the operating point the variance
    /// hinge's reported values correspond to.
    #[serde(default = "default_variant_head_gain")]
    pub variant_head_gain: f64,
}

fn default_variant_head_gain() -> f64 {
    0.05
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            kind: ArchKind::Small,
            width: 12,
            extractor_width: 14,
            mlp_width: 96,
            variant_head_gain: default_variant_head_gain(),
        }
    }
}

impl ArchConfig {
    pub fn resnet9() -> Self {
        ArchConfig {
            kind: ArchKind::Resnet9,
            width: 32,
            extractor_width: 32,
            mlp_width: 256,
            variant_head_gain: default_variant_head_gain(),
        }
    }
}

/// Evaluation runs use the posterior mean; training samples via the
/// reparameterization eps supplied by the caller.
pub enum ForwardMode {
    Eval,
    Train { eps: Array4<f64> },
}

#[derive(Debug, Clone)]
struct ConvStack {
    layers: Vec<(Conv2d, bool)>, // (layer, relu after)
    residual_pairs: Vec<(usize, usize)>, // output of layer b += input of layer a
}

impl ConvStack {
    fn forward(&self, tape: &mut Tape, vars: &[Var], mut x: Var) -> Var {
        let mut taps: Vec<Var> = Vec::with_capacity(self.layers.len() + 1);
        for (i, (layer, relu)) in self.layers.iter().enumerate() {
            taps.push(x);
            let mut y = layer.forward(tape, vars, x);
            if let Some(&(a, _)) = self.residual_pairs.iter().find(|&&(_, b)| b == i) {
                y = tape.add(y, taps[a]);
            }
            x = if *relu { tape.relu(y) } else { y };
        }
        x
    }
}

/// All parameter groups of one semantic-communication model, individually
/// addressable for the phased updates of the training loop.
#[derive(Clone)]
pub struct ModelSet {
    pub layout: LatentLayout,
    pub arch: ArchConfig,
    /// Input shape after ingestion padding: (channels, size, size).
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    /// Complex channel symbols per frame.
    pub m_symbols: usize,
    pub seed: u64,

    pub theta_e: ParamGroup,
    pub theta_k: ParamGroup,
    pub theta_v: ParamGroup,
    pub theta_2: ParamGroup,
    pub alpha_1: ParamGroup,
    pub alpha_2: ParamGroup,
    pub xi: ParamGroup,
    pub psi: ParamGroup,

    enc: ConvStack,
    enc_mu: Conv2d,
    enc_lv: Conv2d,
    ext_k: ConvStack,
    ext_v: ConvStack,
    dec: ConvStack,
    up_positions: Vec<usize>,
    codec_tx: Dense,
    codec_rx: Dense,
    cls: Vec<Dense>,
    disc: Vec<Dense>,
}

/// Tape bindings for every group of a [`ModelSet`].
pub struct BoundVars {
    pub e: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
    pub d: Vec<Var>,
    pub a1: Vec<Var>,
    pub a2: Vec<Var>,
    pub xi: Vec<Var>,
    pub psi: Vec<Var>,
}

/// Latent distribution parameters produced by the stochastic encoder head.
pub struct Moments {
    pub mu: Var,
    pub logvar: Var,
}

const LOGVAR_CLAMP: f64 = 3.0;

fn stages_for(size: usize) -> Result<usize> {
    match size {
        8 => Ok(0),
        16 => Ok(1),
        32 => Ok(2),
        other => Err(UkieError::Config(format!(
            "input spatial size {other} not supported; expected 8, 16 or 32 (pad or resize upstream)"
        ))),
    }
}

impl ModelSet {
    /// Builds all parameter groups for the given architecture, latent layout
    /// and (padded) input shape. `m_symbols` sizes the channel codec;
    /// `seed` pins every initial weight.
    pub fn build(
        arch: ArchConfig,
        layout: LatentLayout,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        m_symbols: usize,
        seed: u64,
    ) -> Result<Self> {
        let (cin, h, w) = input_shape;
        if h != w {
            return Err(UkieError::Config(format!("non-square input {h}x{w}")));
        }
        let n_stages = stages_for(h)?;
        if m_symbols == 0 {
            return Err(UkieError::Config("channel codec needs m_symbols >= 1".into()));
        }
        let wbase = arch.width;

        let mut theta_e = ParamGroup::new("theta_e");
        let mut enc_layers: Vec<(Conv2d, bool)> = Vec::new();
        let mut enc_res: Vec<(usize, usize)> = Vec::new();
        let mut li = 0u64;
        enc_layers.push((Conv2d::new(&mut theta_e, "stem", cin, wbase, 3, 1, 1, seed, li), true));
        li += 1;
        let mut ch = wbase;
        for s in 0..n_stages {
            let next = ch + wbase / 2;
            enc_layers.push((
                Conv2d::new(&mut theta_e, &format!("down{s}"), ch, next, 3, 2, 1, seed, li),
                true,
            ));
            li += 1;
            ch = next;
            if arch.kind == ArchKind::Resnet9 {
                let a = enc_layers.len(); // index of first block layer's input tap
                enc_layers.push((
                    Conv2d::new(&mut theta_e, &format!("res{s}a"), ch, ch, 3, 1, 1, seed, li),
                    true,
                ));
                li += 1;
                enc_layers.push((
                    Conv2d::new(&mut theta_e, &format!("res{s}b"), ch, ch, 3, 1, 1, seed, li),
                    true,
                ));
                li += 1;
                enc_res.push((a, a + 1));
            }
        }
        let enc = ConvStack { layers: enc_layers, residual_pairs: enc_res };
        let enc_mu = Conv2d::new(&mut theta_e, "mu", ch, layout.total_channels, 3, 1, 1, seed, li);
        li += 1;
        let enc_lv = Conv2d::new(&mut theta_e, "lv", ch, layout.total_channels, 3, 1, 1, seed, li);

        let ew = arch.extractor_width;
        let mut theta_k = ParamGroup::new("theta_k");
        let ext_k = ConvStack {
            layers: vec![
                (Conv2d::new(&mut theta_k, "c1", layout.total_channels, ew, 3, 1, 1, seed, 0), true),
                (Conv2d::new(&mut theta_k, "c2", ew, ew, 3, 1, 1, seed, 1), true),
                (Conv2d::new(&mut theta_k, "c3", ew, layout.invariant_channels, 3, 1, 1, seed, 2), false),
            ],
            residual_pairs: vec![],
        };
        let mut theta_v = ParamGroup::new("theta_v");
        let ext_v = ConvStack {
            layers: vec![
                (Conv2d::new(&mut theta_v, "c1", layout.total_channels, ew, 3, 1, 1, seed, 0), true),
                (Conv2d::new(&mut theta_v, "c2", ew, ew, 3, 1, 1, seed, 1), true),
                (Conv2d::new(&mut theta_v, "c3", ew, layout.variant_channels, 3, 1, 1, seed, 2), false),
            ],
            residual_pairs: vec![],
        };
        if arch.variant_head_gain != 1.0 {
            let last = theta_v.params.len() - 2; // output conv weight
            theta_v.params[last].value *= arch.variant_head_gain;
            theta_v.params[last + 1].value *= arch.variant_head_gain;
        }

        let mut theta_2 = ParamGroup::new("theta_2");
        let mut dec_layers: Vec<(Conv2d, bool)> = Vec::new();
        let mut dec_res: Vec<(usize, usize)> = Vec::new();
        let mut dch = ch;
        li = 0;
        dec_layers.push((
            Conv2d::new(&mut theta_2, "stem", layout.total_channels, dch, 3, 1, 1, seed, li),
            true,
        ));
        li += 1;
        if arch.kind == ArchKind::Resnet9 {
            let a = dec_layers.len();
            dec_layers.push((Conv2d::new(&mut theta_2, "resa", dch, dch, 3, 1, 1, seed, li), true));
            li += 1;
            dec_layers.push((Conv2d::new(&mut theta_2, "resb", dch, dch, 3, 1, 1, seed, li), true));
            li += 1;
            dec_res.push((a, a + 1));
        }
        // upsample stages are inserted at forward time between these convs
        let mut up_convs = Vec::new();
        for s in 0..n_stages {
            let next = (dch - wbase / 2).max(wbase / 2);
            up_convs.push(dec_layers.len());
            dec_layers.push((
                Conv2d::new(&mut theta_2, &format!("up{s}"), dch, next, 3, 1, 1, seed, li),
                true,
            ));
            li += 1;
            dch = next;
        }
        dec_layers.push((Conv2d::new(&mut theta_2, "out", dch, cin, 3, 1, 1, seed, li), false));
        let dec = ConvStack { layers: dec_layers, residual_pairs: dec_res };

        let mut alpha_1 = ParamGroup::new("alpha_1");
        let codec_tx = Dense::new(&mut alpha_1, "tx", layout.d_zv(), 2 * m_symbols, seed, 0);
        let mut alpha_2 = ParamGroup::new("alpha_2");
        let codec_rx = Dense::new(&mut alpha_2, "rx", 2 * m_symbols, layout.d_zv(), seed, 0);

        let mw = arch.mlp_width;
        let mut xi = ParamGroup::new("xi");
        let cls = vec![
            Dense::new(&mut xi, "fc1", layout.d_zk(), mw, seed, 0),
            Dense::new(&mut xi, "fc2", mw, mw / 2, seed, 1),
            Dense::new(&mut xi, "fc3", mw / 2, num_classes, seed, 2),
        ];
        let mut psi = ParamGroup::new("psi");
        let disc = vec![
            Dense::new(&mut psi, "fc1", layout.d_zk(), mw, seed, 10),
            Dense::new(&mut psi, "fc2", mw, mw / 2, seed, 11),
            Dense::new(&mut psi, "fc3", mw / 2, num_classes, seed, 12),
        ];

        Ok(ModelSet {
            layout,
            arch,
            input_shape,
            num_classes,
            m_symbols,
            seed,
            theta_e,
            theta_k,
            theta_v,
            theta_2,
            alpha_1,
            alpha_2,
            xi,
            psi,
            enc,
            enc_mu,
            enc_lv,
            ext_k,
            ext_v,
            dec,
            codec_tx,
            codec_rx,
            cls,
            disc,
            up_positions: up_convs,
        })
    }

    /// Registers every group on the tape as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundVars {
        BoundVars {
            e: self.theta_e.bind(tape),
            k: self.theta_k.bind(tape),
            v: self.theta_v.bind(tape),
            d: self.theta_2.bind(tape),
            a1: self.alpha_1.bind(tape),
            a2: self.alpha_2.bind(tape),
            xi: self.xi.bind(tape),
            psi: self.psi.bind(tape),
        }
    }

    /// Frozen bindings for evaluation passes.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundVars {
        BoundVars {
            e: self.theta_e.bind_frozen(tape),
            k: self.theta_k.bind_frozen(tape),
            v: self.theta_v.bind_frozen(tape),
            d: self.theta_2.bind_frozen(tape),
            a1: self.alpha_1.bind_frozen(tape),
            a2: self.alpha_2.bind_frozen(tape),
            xi: self.xi.bind_frozen(tape),
            psi: self.psi.bind_frozen(tape),
        }
    }

    /// Reparameterization noise for a training forward pass.
    pub fn sample_eps(&self, batch: usize, seed: u64, tag: &str, index: u64) -> Array4<f64> {
        let mut rng = stream(seed, tag, index);
        let mut eps = Array4::<f64>::zeros((
            batch,
            self.layout.total_channels,
            LATENT_SPATIAL,
            LATENT_SPATIAL,
        ));
        crate::rng::fill_gaussian(&mut rng, eps.as_slice_mut().unwrap());
        eps
    }

    /// x -> (z, moments). In eval mode z is the posterior mean; in train mode
    /// z = mu + exp(0.5*logvar) * eps.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &BoundVars,
        x: Var,
        mode: &ForwardMode,
    ) -> Result<(Var, Moments)> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || (xs[1], xs[2], xs[3]) != self.input_shape {
            return Err(UkieError::Shape(format!(
                "encode: input {:?} does not match model input shape {:?}",
                xs, self.input_shape
            )));
        }
        let feat = self.enc.forward(tape, &vars.e, x);
        let mu = self.enc_mu.forward(tape, &vars.e, feat);
        let lv_raw = self.enc_lv.forward(tape, &vars.e, feat);
        let lv = tape.clamp(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        let z = match mode {
            ForwardMode::Eval => mu,
            ForwardMode::Train { eps } => {
                let half_lv = tape.mul_scalar(lv, 0.5);
                let std = tape.exp(half_lv);
                let eps_v = tape.constant(eps.clone().into_dyn());
                let noise = tape.mul(std, eps_v);
                tape.add(mu, noise)
            }
        };
        Ok((z, Moments { mu, logvar: lv }))
    }

    pub fn extract_knowledge(&self, tape: &mut Tape, vars: &BoundVars, z: Var) -> Result<Var> {
        self.check_latent(tape, z)?;
        Ok(self.ext_k.forward(tape, &vars.k, z))
    }

    pub fn extract_variant(&self, tape: &mut Tape, vars: &BoundVars, z: Var) -> Result<Var> {
        self.check_latent(tape, z)?;
        Ok(self.ext_v.forward(tape, &vars.v, z))
    }

    fn check_latent(&self, tape: &Tape, z: Var) -> Result<()> {
        let s = tape.value(z).shape().to_vec();
        if s.len() != 4
            || s[1] != self.layout.total_channels
            || s[2] != LATENT_SPATIAL
            || s[3] != LATENT_SPATIAL
        {
            return Err(UkieError::Shape(format!(
                "latent {:?} does not match layout ({} x {} x {})",
                s, self.layout.total_channels, LATENT_SPATIAL, LATENT_SPATIAL
            )));
        }
        Ok(())
    }

    /// (z_v_hat, z_k) -> x_hat in [0,1]. `z_k` may come from the semantic
    /// memory (a class prototype) instead of the sample's own encoding.
    pub fn decode(&self, tape: &mut Tape, vars: &BoundVars, zv: Var, zk: Var) -> Result<Var> {
        let sv = tape.value(zv).shape().to_vec();
        let sk = tape.value(zk).shape().to_vec();
        if sv.len() != 4 || sv[1] != self.layout.variant_channels {
            return Err(UkieError::Shape(format!("decode: z_v shape {:?}", sv)));
        }
        if sk.len() != 4 || sk[1] != self.layout.invariant_channels {
            return Err(UkieError::Shape(format!("decode: z_k shape {:?}", sk)));
        }
        let joint = tape.concat_channels(zv, zk);
        let mut x = joint;
        let mut taps: Vec<Var> = Vec::with_capacity(self.dec.layers.len());
        for (i, (layer, relu)) in self.dec.layers.iter().enumerate() {
            if self.up_positions.contains(&i) {
                x = tape.upsample_nearest2x(x);
            }
            taps.push(x);
            let mut y = layer.forward(tape, &vars.d, x);
            if let Some(&(a, _)) = self.dec.residual_pairs.iter().find(|&&(_, b)| b == i) {
                y = tape.add(y, taps[a]);
            }
            x = if *relu { tape.relu(y) } else { y };
        }
        Ok(tape.sigmoid(x))
    }

    pub fn classify_invariant(&self, tape: &mut Tape, vars: &BoundVars, zk: Var) -> Result<Var> {
        self.mlp_forward(tape, &vars.xi, &self.cls, zk)
    }

    pub fn discriminate(&self, tape: &mut Tape, vars: &BoundVars, zk: Var) -> Result<Var> {
        self.mlp_forward(tape, &vars.psi, &self.disc, zk)
    }

    fn mlp_forward(&self, tape: &mut Tape, vars: &[Var], mlp: &[Dense], zk: Var) -> Result<Var> {
        let s = tape.value(zk).shape().to_vec();
        let n = s[0];
        let d: usize = s[1..].iter().product();
        if d != self.layout.d_zk() {
            return Err(UkieError::Shape(format!(
                "classifier input dim {d} != d_zk {}",
                self.layout.d_zk()
            )));
        }
        let mut x = tape.reshape(zk, &[n, d]);
        for (i, layer) in mlp.iter().enumerate() {
            x = layer.forward(tape, vars, x);
            if i + 1 < mlp.len() {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// z_v -> power-normalized paired-real symbols (N, 2M).
    pub fn channel_encode_symbols(&self, tape: &mut Tape, vars: &BoundVars, zv: Var) -> Result<Var> {
        let s = tape.value(zv).shape().to_vec();
        let n = s[0];
        let d: usize = s[1..].iter().product();
        if d != self.layout.d_zv() {
            return Err(UkieError::Shape(format!(
                "channel encoder input dim {d} != d_zv {}",
                self.layout.d_zv()
            )));
        }
        let flat = tape.reshape(zv, &[n, d]);
        let sym = self.codec_tx.forward(tape, &vars.a1, flat);
        Ok(tape.power_normalize_frames(sym, self.m_symbols))
    }

    /// (N, 2M) received symbols -> z_v_hat (N, C_v, 8, 8).
    pub fn channel_decode_symbols(&self, tape: &mut Tape, vars: &BoundVars, sym: Var) -> Result<Var> {
        let s = tape.value(sym).shape().to_vec();
        if s.len() != 2 || s[1] != 2 * self.m_symbols {
            return Err(UkieError::Shape(format!(
                "channel decoder input {:?}, expected (*, {})",
                s,
                2 * self.m_symbols
            )));
        }
        let n = s[0];
        let flat = self.codec_rx.forward(tape, &vars.a2, sym);
        Ok(tape.reshape(
            flat,
            &[n, self.layout.variant_channels, LATENT_SPATIAL, LATENT_SPATIAL],
        ))
    }

    pub fn groups(&self) -> [&ParamGroup; 8] {
        [
            &self.theta_e,
            &self.theta_k,
            &self.theta_v,
            &self.theta_2,
            &self.alpha_1,
            &self.alpha_2,
            &self.xi,
            &self.psi,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.groups().iter().all(|g| g.all_finite())
    }

    // ---------------------------------------------------------------
    // concrete (non-tape) helpers for evaluation pipelines
    // ---------------------------------------------------------------

    /// Deterministic eval-mode encoding returning owned arrays:
    /// (z, mu, logvar).
    pub fn encode_eval(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Array4<f64>, Array4<f64>)> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone().into_dyn());
        let (z, m) = self.encode(&mut tape, &vars, xv, &ForwardMode::Eval)?;
        Ok((
            to4(tape.value(z)),
            to4(tape.value(m.mu)),
            to4(tape.value(m.logvar)),
        ))
    }

    pub fn extract_knowledge_eval(&self, z: &Array4<f64>) -> Result<Array4<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone().into_dyn());
        let zk = self.extract_knowledge(&mut tape, &vars, zv)?;
        Ok(to4(tape.value(zk)))
    }

    pub fn extract_variant_eval(&self, z: &Array4<f64>) -> Result<Array4<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone().into_dyn());
        let out = self.extract_variant(&mut tape, &vars, zv)?;
        Ok(to4(tape.value(out)))
    }

    pub fn decode_eval(&self, zv: &Array4<f64>, zk: &Array4<f64>) -> Result<Array4<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let a = tape.constant(zv.clone().into_dyn());
        let b = tape.constant(zk.clone().into_dyn());
        let x = self.decode(&mut tape, &vars, a, b)?;
        Ok(to4(tape.value(x)))
    }

    pub fn classify_eval(&self, zk: &Array4<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let z = tape.constant(zk.clone().into_dyn());
        let logits = self.classify_invariant(&mut tape, &vars, z)?;
        Ok(tape
            .value(logits)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap())
    }

    pub fn channel_encode_eval(&self, zv: &Array4<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let z = tape.constant(zv.clone().into_dyn());
        let sym = self.channel_encode_symbols(&mut tape, &vars, z)?;
        Ok(tape
            .value(sym)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap())
    }

    pub fn channel_decode_eval(&self, sym: &Array2<f64>) -> Result<Array4<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let s = tape.constant(sym.clone().into_dyn());
        let z = self.channel_decode_symbols(&mut tape, &vars, s)?;
        Ok(to4(tape.value(z)))
    }
}

fn to4(a: &ArrayD<f64>) -> Array4<f64> {
    a.clone().into_dimensionality::<Ix4>().unwrap()
}

// ---------------------------------------------------------------------------
// AE / VAE baselines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Ae,
    Vae,
}

/// Plain autoencoder / variational autoencoder with the same backbone and a
/// matched total latent dimension, plus its own learned channel codec so
/// link evaluations are like-for-like.
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub arch: ArchConfig,
    pub input_shape: (usize, usize, usize),
    pub latent_channels: usize,
    pub m_symbols: usize,
    pub seed: u64,
    pub enc_group: ParamGroup,
    pub dec_group: ParamGroup,
    pub codec_group: ParamGroup,
    enc: ConvStack,
    head_mu: Conv2d,
    head_lv: Option<Conv2d>,
    dec: ConvStack,
    up_positions: Vec<usize>,
    codec_tx: Dense,
    codec_rx: Dense,
}

pub struct BaselineBound {
    pub enc: Vec<Var>,
    pub dec: Vec<Var>,
    pub codec: Vec<Var>,
}

impl BaselineModel {
    pub fn build(
        kind: BaselineKind,
        arch: ArchConfig,
        input_shape: (usize, usize, usize),
        latent_channels: usize,
        m_symbols: usize,
        seed: u64,
    ) -> Result<Self> {
        let (cin, h, w) = input_shape;
        if h != w {
            return Err(UkieError::Config(format!("non-square input {h}x{w}")));
        }
        let n_stages = stages_for(h)?;
        let wbase = arch.width;
        let mut enc_group = ParamGroup::new("baseline_enc");
        let mut layers = vec![(Conv2d::new(&mut enc_group, "stem", cin, wbase, 3, 1, 1, seed, 0), true)];
        let mut ch = wbase;
        for s in 0..n_stages {
            let next = ch + wbase / 2;
            layers.push((
                Conv2d::new(&mut enc_group, &format!("down{s}"), ch, next, 3, 2, 1, seed, s as u64 + 1),
                true,
            ));
            ch = next;
        }
        let enc = ConvStack { layers, residual_pairs: vec![] };
        let head_mu = Conv2d::new(&mut enc_group, "mu", ch, latent_channels, 3, 1, 1, seed, 20);
        let head_lv = match kind {
            BaselineKind::Ae => None,
            BaselineKind::Vae => {
                Some(Conv2d::new(&mut enc_group, "lv", ch, latent_channels, 3, 1, 1, seed, 21))
            }
        };

        let mut dec_group = ParamGroup::new("baseline_dec");
        let mut dec_layers =
            vec![(Conv2d::new(&mut dec_group, "stem", latent_channels, ch, 3, 1, 1, seed, 0), true)];
        let mut up_positions = Vec::new();
        let mut dch = ch;
        for s in 0..n_stages {
            let next = (dch - wbase / 2).max(wbase / 2);
            up_positions.push(dec_layers.len());
            dec_layers.push((
                Conv2d::new(&mut dec_group, &format!("up{s}"), dch, next, 3, 1, 1, seed, s as u64 + 1),
                true,
            ));
            dch = next;
        }
        dec_layers.push((Conv2d::new(&mut dec_group, "out", dch, cin, 3, 1, 1, seed, 19), false));
        let dec = ConvStack { layers: dec_layers, residual_pairs: vec![] };

        let d_z = latent_channels * LATENT_SPATIAL * LATENT_SPATIAL;
        let mut codec_group = ParamGroup::new("baseline_codec");
        let codec_tx = Dense::new(&mut codec_group, "tx", d_z, 2 * m_symbols, seed, 0);
        let codec_rx = Dense::new(&mut codec_group, "rx", 2 * m_symbols, d_z, seed, 1);

        Ok(BaselineModel {
            kind,
            arch,
            input_shape,
            latent_channels,
            m_symbols,
            seed,
            enc_group,
            dec_group,
            codec_group,
            enc,
            head_mu,
            head_lv,
            dec,
            up_positions,
            codec_tx,
            codec_rx,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BaselineBound {
        BaselineBound {
            enc: self.enc_group.bind(tape),
            dec: self.dec_group.bind(tape),
            codec: self.codec_group.bind(tape),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BaselineBound {
        BaselineBound {
            enc: self.enc_group.bind_frozen(tape),
            dec: self.dec_group.bind_frozen(tape),
            codec: self.codec_group.bind_frozen(tape),
        }
    }

    /// x -> (z, optional moments). VAE samples with the supplied eps in
    /// train mode and uses the mean in eval mode.
    pub fn encode(
        &self,
        tape: &mut Tape,
        b: &BaselineBound,
        x: Var,
        mode: &ForwardMode,
    ) -> (Var, Option<Moments>) {
        let feat = self.enc.forward(tape, &b.enc, x);
        let mu = self.head_mu.forward(tape, &b.enc, feat);
        match (&self.head_lv, mode) {
            (None, _) => (mu, None),
            (Some(lv_layer), mode) => {
                let lv_raw = lv_layer.forward(tape, &b.enc, feat);
                let lv = tape.clamp(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
                let z = match mode {
                    ForwardMode::Eval => mu,
                    ForwardMode::Train { eps } => {
                        let half = tape.mul_scalar(lv, 0.5);
                        let std = tape.exp(half);
                        let e = tape.constant(eps.clone().into_dyn());
                        let n = tape.mul(std, e);
                        tape.add(mu, n)
                    }
                };
                (z, Some(Moments { mu, logvar: lv }))
            }
        }
    }

    pub fn decode(&self, tape: &mut Tape, b: &BaselineBound, z: Var) -> Var {
        let mut x = z;
        for (i, (layer, relu)) in self.dec.layers.iter().enumerate() {
            if self.up_positions.contains(&i) {
                x = tape.upsample_nearest2x(x);
            }
            let y = layer.forward(tape, &b.dec, x);
            x = if *relu { tape.relu(y) } else { y };
        }
        tape.sigmoid(x)
    }

    pub fn channel_encode_symbols(&self, tape: &mut Tape, b: &BaselineBound, z: Var) -> Var {
        let s = tape.value(z).shape().to_vec();
        let n = s[0];
        let d: usize = s[1..].iter().product();
        let flat = tape.reshape(z, &[n, d]);
        let sym = self.codec_tx.forward(tape, &b.codec, flat);
        tape.power_normalize_frames(sym, self.m_symbols)
    }

    pub fn channel_decode_symbols(&self, tape: &mut Tape, b: &BaselineBound, sym: Var) -> Var {
        let s = tape.value(sym).shape().to_vec();
        let n = s[0];
        let flat = self.codec_rx.forward(tape, &b.codec, sym);
        tape.reshape(flat, &[n, self.latent_channels, LATENT_SPATIAL, LATENT_SPATIAL])
    }

    pub fn sample_eps(&self, batch: usize, seed: u64, tag: &str, index: u64) -> Array4<f64> {
        let mut rng = stream(seed, tag, index);
        let mut eps =
            Array4::<f64>::zeros((batch, self.latent_channels, LATENT_SPATIAL, LATENT_SPATIAL));
        crate::rng::fill_gaussian(&mut rng, eps.as_slice_mut().unwrap());
        eps
    }

    pub fn groups_mut(&mut self) -> [&mut ParamGroup; 3] {
        [&mut self.enc_group, &mut self.dec_group, &mut self.codec_group]
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: u32 = 0x554b4731; // "UKG1"

fn write_group(dir: &Path, group: &ParamGroup) -> Result<()> {
    let path = dir.join(format!("{}.bin", group.name));
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC.to_le_bytes());
    out.extend_from_slice(&(group.params.len() as u32).to_le_bytes());
    for p in &group.params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_group(dir: &Path, group: &mut ParamGroup) -> Result<()> {
    let path = dir.join(format!("{}.bin", group.name));
    let mut bytes = Vec::new();
    std::fs::File::open(&path)
        .map_err(|_| UkieError::MissingArtifact(path.display().to_string()))?
        .read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let rd_u32 = |bytes: &[u8], at: &mut usize| -> Result<u32> {
        if *at + 4 > bytes.len() {
            return Err(UkieError::MissingArtifact(format!("{}: truncated", path.display())));
        }
        let v = u32::from_le_bytes(bytes[*at..*at + 4].try_into().unwrap());
        *at += 4;
        Ok(v)
    };
    if rd_u32(&bytes, &mut at)? != CKPT_MAGIC {
        return Err(UkieError::Config(format!("{}: not a checkpoint file", path.display())));
    }
    let n = rd_u32(&bytes, &mut at)? as usize;
    if n != group.params.len() {
        return Err(UkieError::Config(format!(
            "{}: {n} tensors but model expects {}",
            path.display(),
            group.params.len()
        )));
    }
    for p in group.params.iter_mut() {
        let name_len = rd_u32(&bytes, &mut at)? as usize;
        let name = String::from_utf8_lossy(&bytes[at..at + name_len]).to_string();
        at += name_len;
        if name != p.name {
            return Err(UkieError::Config(format!(
                "{}: tensor '{name}' does not match expected '{}'",
                path.display(),
                p.name
            )));
        }
        let ndim = rd_u32(&bytes, &mut at)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(rd_u32(&bytes, &mut at)? as usize);
        }
        if shape != p.value.shape() {
            return Err(UkieError::Config(format!(
                "{}: tensor '{name}' shape {:?} != {:?}",
                path.display(),
                shape,
                p.value.shape()
            )));
        }
        let len: usize = shape.iter().product();
        let mut flat = Vec::with_capacity(len);
        for _ in 0..len {
            flat.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
            at += 8;
        }
        p.value = ArrayD::from_shape_vec(IxDyn(&shape), flat).unwrap();
    }
    Ok(())
}

/// Plain-text key=value manifest describing the checkpointed model.
pub fn model_manifest(m: &ModelSet, step: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "kind=ukie");
    let _ = writeln!(s, "arch={}", match m.arch.kind { ArchKind::Small => "small", ArchKind::Resnet9 => "resnet9" });
    let _ = writeln!(s, "width={}", m.arch.width);
    let _ = writeln!(s, "extractor_width={}", m.arch.extractor_width);
    let _ = writeln!(s, "mlp_width={}", m.arch.mlp_width);
    let _ = writeln!(s, "variant_head_gain={}", m.arch.variant_head_gain);
    let _ = writeln!(s, "c_total={}", m.layout.total_channels);
    let _ = writeln!(s, "c_invariant={}", m.layout.invariant_channels);
    let _ = writeln!(s, "input_channels={}", m.input_shape.0);
    let _ = writeln!(s, "input_size={}", m.input_shape.1);
    let _ = writeln!(s, "num_classes={}", m.num_classes);
    let _ = writeln!(s, "m_symbols={}", m.m_symbols);
    let _ = writeln!(s, "seed={}", m.seed);
    let _ = writeln!(s, "step={step}");
    s
}

pub fn parse_manifest(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Writes one file per parameter group plus `manifest.txt`.
pub fn save_checkpoint(dir: &Path, m: &ModelSet, step: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for g in m.groups() {
        write_group(dir, g)?;
    }
    let mut f = std::fs::File::create(dir.join("manifest.txt"))?;
    f.write_all(model_manifest(m, step).as_bytes())?;
    Ok(())
}

/// Rebuilds a model from a checkpoint directory, validating the manifest
/// against the stored shapes.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelSet, u64)> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|_| UkieError::MissingArtifact(manifest_path.display().to_string()))?;
    let kv = parse_manifest(&text);
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| UkieError::Config(format!("manifest missing key '{k}'")))
    };
    let kind = match get("arch")?.as_str() {
        "small" => ArchKind::Small,
        "resnet9" => ArchKind::Resnet9,
        other => return Err(UkieError::Config(format!("unknown arch '{other}'"))),
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| UkieError::Config(format!("manifest key '{k}' not an integer")))
    };
    let arch = ArchConfig {
        kind,
        width: parse_usize("width")?,
        extractor_width: parse_usize("extractor_width")?,
        mlp_width: parse_usize("mlp_width")?,
        variant_head_gain: kv
            .get("variant_head_gain")
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(default_variant_head_gain),
    };
    let layout = LatentLayout::new(parse_usize("c_total")?, parse_usize("c_invariant")?)?;
    let input_shape = (parse_usize("input_channels")?, parse_usize("input_size")?, parse_usize("input_size")?);
    let seed = get("seed")?.parse::<u64>().map_err(|_| UkieError::Config("bad seed".into()))?;
    let step = get("step")?.parse::<u64>().unwrap_or(0);
    let mut model = ModelSet::build(
        arch,
        layout,
        input_shape,
        parse_usize("num_classes")?,
        parse_usize("m_symbols")?,
        seed,
    )?;
    for g in [
        &mut model.theta_e,
        &mut model.theta_k,
        &mut model.theta_v,
        &mut model.theta_2,
        &mut model.alpha_1,
        &mut model.alpha_2,
        &mut model.xi,
        &mut model.psi,
    ] {
        read_group(dir, g)?;
    }
    Ok((model, step))
}
