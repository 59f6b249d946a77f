//! Metrics (PSNR, MSE, accuracy, representation variance, a binned
//! mutual-information estimate), end-to-end link evaluation through the
//! simulated channel, and the ablation sweeps.

use crate::channel::{equalize, frames_from_symbols, transmit_indexed, ChannelConfig};
use crate::data::LabeledDataset;
use crate::error::{Result, UkieError};
use crate::losses::cosine_similarity;
use crate::memory::SemanticMemory;
use crate::models::{ArchConfig, LatentLayout, ModelSet};
use crate::rng::{fill_gaussian, stream};
use crate::training::{train, TrainConfig};
use ndarray::{Array2, Array4, Axis};
use std::fmt::Write as _;
use std::path::Path;

/// Mean squared error over all elements.
pub fn mse(x: &Array4<f64>, x_hat: &Array4<f64>) -> f64 {
    debug_assert_eq!(x.dim(), x_hat.dim());
    (x - x_hat).iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// 10*log10(peak^2 / mse) with peak fixed at 1.0; a perfect reconstruction
/// yields the +inf sentinel.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(x: &Array4<f64>, x_hat: &Array4<f64>) -> f64 {
    psnr_from_mse(mse(x, x_hat))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    Classifier,
    NearestPrototype,
}

/// Classification accuracy from the invariant representations, either via
/// the trained classifier head or by nearest-prototype matching against the
/// semantic memory.
pub fn accuracy_invariant(
    model: &ModelSet,
    memory: &SemanticMemory,
    test: &LabeledDataset,
    mode: AccuracyMode,
) -> Result<f64> {
    if test.is_empty() {
        return Err(UkieError::Config("accuracy on an empty dataset".into()));
    }
    let chunk = 64usize;
    let mut correct = 0usize;
    let proto_classes = memory.classes();
    for start in (0..test.len()).step_by(chunk) {
        let idxs: Vec<usize> = (start..(start + chunk).min(test.len())).collect();
        let b = test.gather(&idxs);
        let (z, _, _) = model.encode_eval(&b.images)?;
        let zk = model.extract_knowledge_eval(&z)?;
        match mode {
            AccuracyMode::Classifier => {
                let logits = model.classify_eval(&zk)?;
                for (i, row) in logits.rows().into_iter().enumerate() {
                    if argmax(row.as_slice().unwrap()) == b.labels[i] {
                        correct += 1;
                    }
                }
            }
            AccuracyMode::NearestPrototype => {
                if proto_classes.is_empty() {
                    return Err(UkieError::ColdStart(b.labels[0]));
                }
                for i in 0..b.len() {
                    let flat = zk.index_axis(Axis(0), i);
                    let flat = flat.as_standard_layout().into_owned();
                    let zs = flat.as_slice().unwrap();
                    let mut best = (f64::NEG_INFINITY, 0usize);
                    for &c in &proto_classes {
                        let p = memory.lookup(c)?;
                        let p = p.as_standard_layout().into_owned();
                        let sim = cosine_similarity(zs, p.as_slice().unwrap())?;
                        if sim > best.0 {
                            best = (sim, c);
                        }
                    }
                    if best.1 == b.labels[i] {
                        correct += 1;
                    }
                }
            }
        }
    }
    Ok(correct as f64 / test.len() as f64)
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

/// Dimension-normalized batch variance: (1/(N*d)) * sum_i ||z_i - mean||^2.
pub fn representation_variance(z: &Array2<f64>) -> f64 {
    let (n, d) = z.dim();
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mean = z.mean_axis(Axis(0)).unwrap();
    let mut sq = 0.0;
    for row in z.rows() {
        for (v, m) in row.iter().zip(mean.iter()) {
            let dv = v - m;
            sq += dv * dv;
        }
    }
    sq / (n as f64 * d as f64)
}

/// Histogram mutual information of two scalar samples, in nats.
pub fn mi_1d(a: &[f64], b: &[f64], bins: usize) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 || bins < 2 {
        return 0.0;
    }
    let bound = |xs: &[f64]| {
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (alo, ahi) = bound(a);
    let (blo, bhi) = bound(b);
    if !(ahi - alo).is_finite() || !(bhi - blo).is_finite() || ahi - alo < 1e-12 || bhi - blo < 1e-12 {
        return 0.0;
    }
    let idx = |v: f64, lo: f64, hi: f64| -> usize {
        (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
    };
    let mut joint = vec![0.0f64; bins * bins];
    for i in 0..n {
        joint[idx(a[i], alo, ahi) * bins + idx(b[i], blo, bhi)] += 1.0;
    }
    for v in joint.iter_mut() {
        *v /= n as f64;
    }
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            pa[i] += joint[i * bins + j];
            pb[j] += joint[i * bins + j];
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j];
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Binned MI estimate between the two representation families: averages the
/// 1-D histogram MI over `pairs` independent random-projection pairs. The
/// estimator carries the usual positive histogram bias of roughly
/// (bins-1)^2 / (2N) nats; compare against same-size calibrations.
pub fn mutual_information_estimate(
    zk: &Array2<f64>,
    zv: &Array2<f64>,
    bins: usize,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    let n = zk.nrows();
    if n == 0 || zv.nrows() != n {
        return Err(UkieError::Config(format!(
            "MI estimate needs matching nonempty batches (got {} and {})",
            n,
            zv.nrows()
        )));
    }
    let mut total = 0.0;
    for k in 0..pairs {
        let mut rng = stream(seed, "mi-projection", k as u64);
        let mut u = vec![0.0; zk.ncols()];
        fill_gaussian(&mut rng, &mut u);
        let mut v = vec![0.0; zv.ncols()];
        fill_gaussian(&mut rng, &mut v);
        let a: Vec<f64> = zk.rows().into_iter().map(|r| r.iter().zip(&u).map(|(x, w)| x * w).sum()).collect();
        let b: Vec<f64> = zv.rows().into_iter().map(|r| r.iter().zip(&v).map(|(x, w)| x * w).sum()).collect();
        total += mi_1d(&a, &b, bins);
    }
    Ok(total / pairs as f64)
}

/// One evaluation-report row; the CSV column order is fixed.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub compression_ratio: f64,
    pub snr_db: f64,
    pub channel_kind: String,
    pub psnr_db: f64,
    pub mse: f64,
    pub accuracy: f64,
    pub var_z: f64,
    pub var_zv: f64,
    pub mi_estimate: f64,
    pub comm_cost: f64,
}

pub const EVAL_CSV_HEADER: &str =
    "compression_ratio,snr_db,channel_kind,psnr_db,mse,accuracy,var_z,var_zV,mi_estimate,comm_cost";

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{:.6},{:.2},{},{:.4},{:.8},{:.4},{:.6},{:.6},{:.6},{:.1}",
            self.compression_ratio,
            self.snr_db,
            self.channel_kind,
            self.psnr_db,
            self.mse,
            self.accuracy,
            self.var_z,
            self.var_zv,
            self.mi_estimate,
            self.comm_cost
        )
    }
}

/// Per-frame channel trace row (optional CSV dump).
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub frame_index: u64,
    pub fade_magnitude: f64,
    pub noise_power: f64,
    pub frame_mse: f64,
}

pub const TRACE_CSV_HEADER: &str = "frame_index,fade_magnitude,noise_power,frame_mse";

impl TraceRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.8}",
            self.frame_index, self.fade_magnitude, self.noise_power, self.frame_mse
        )
    }
}

fn kind_name(cfg: &ChannelConfig) -> String {
    match cfg.kind {
        crate::channel::ChannelKind::Awgn => "awgn".into(),
        crate::channel::ChannelKind::Rayleigh => "rayleigh".into(),
    }
}

/// Full link evaluation: encode, split, transmit the variant part through
/// the channel, equalize, decode with the memory prototype selected by the
/// error-free label sideband, and score the reconstruction.
pub fn evaluate_link(
    model: &ModelSet,
    memory: &SemanticMemory,
    test: &LabeledDataset,
    cfg: &ChannelConfig,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<EvalRow> {
    if test.is_empty() {
        return Err(UkieError::Config("link evaluation on an empty dataset".into()));
    }
    let chunk = 64usize;
    let mut sq_sum = 0.0;
    let mut pixels = 0usize;
    let mut correct = 0usize;
    let mut frame_index = 0u64;
    let mut zk_all: Vec<Array2<f64>> = Vec::new();
    let mut zv_all: Vec<Array2<f64>> = Vec::new();
    let mut z_all: Vec<Array2<f64>> = Vec::new();
    for start in (0..test.len()).step_by(chunk) {
        let idxs: Vec<usize> = (start..(start + chunk).min(test.len())).collect();
        let b = test.gather(&idxs);
        let (z, _, _) = model.encode_eval(&b.images)?;
        let zk = model.extract_knowledge_eval(&z)?;
        let zv = model.extract_variant_eval(&z)?;
        let logits = model.classify_eval(&zk)?;
        for (i, row) in logits.rows().into_iter().enumerate() {
            if argmax(row.as_slice().unwrap()) == b.labels[i] {
                correct += 1;
            }
        }
        let sym = model.channel_encode_eval(&zv)?;
        let frames = frames_from_symbols(&sym, &b.labels)?;
        let mut rx_mat = Array2::<f64>::zeros(sym.dim());
        let mut fades = Vec::with_capacity(frames.len());
        let mut noise_powers = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let rx = transmit_indexed(f, cfg, frame_index + i as u64);
            // realized noise power |rx - h*s|^2 averaged over symbols
            let noise_p = f
                .symbols
                .iter()
                .zip(&rx.symbols)
                .map(|(s, r)| (r - rx.h * s).norm_sqr())
                .sum::<f64>()
                / f.symbols.len() as f64;
            noise_powers.push(noise_p);
            let eq = equalize(&rx);
            fades.push(rx.h.norm());
            for (j, v) in eq.to_reals().iter().enumerate() {
                rx_mat[[i, j]] = *v;
            }
        }
        let zv_hat = model.channel_decode_eval(&rx_mat)?;
        // knowledge lookup by the sideband label index
        let mut zk_mem = Array4::<f64>::zeros(zk.dim());
        for (i, &y) in b.labels.iter().enumerate() {
            zk_mem.index_axis_mut(Axis(0), i).assign(memory.lookup(y)?);
        }
        let x_hat = model.decode_eval(&zv_hat, &zk_mem)?;
        if let Some(tr) = trace.as_deref_mut() {
            for i in 0..b.len() {
                let a = b.images.index_axis(Axis(0), i);
                let h = x_hat.index_axis(Axis(0), i);
                let fmse =
                    (&a.to_owned() - &h.to_owned()).iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
                tr.push(TraceRow {
                    frame_index: frame_index + i as u64,
                    fade_magnitude: fades[i],
                    noise_power: noise_powers[i],
                    frame_mse: fmse,
                });
            }
        }
        frame_index += b.len() as u64;
        sq_sum += (&x_hat - &b.images).iter().map(|v| v * v).sum::<f64>();
        pixels += x_hat.len();
        zk_all.push(crate::losses::flatten_batch(&zk));
        zv_all.push(crate::losses::flatten_batch(&zv));
        z_all.push(crate::losses::flatten_batch(&z));
    }
    let zk_flat = concat_rows(&zk_all);
    let zv_flat = concat_rows(&zv_all);
    let z_flat = concat_rows(&z_all);
    let mse_val = sq_sum / pixels as f64;
    Ok(EvalRow {
        compression_ratio: cfg.compression_ratio,
        snr_db: cfg.snr_db,
        channel_kind: kind_name(cfg),
        psnr_db: psnr_from_mse(mse_val),
        mse: mse_val,
        accuracy: correct as f64 / test.len() as f64,
        var_z: representation_variance(&z_flat),
        var_zv: representation_variance(&zv_flat),
        mi_estimate: mutual_information_estimate(&zk_flat, &zv_flat, 16, 16, cfg.seed)?,
        comm_cost: model.m_symbols as f64,
    })
}

fn concat_rows(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

/// Rebuilds a semantic memory from scratch: per-class means of the knowledge
/// representations over (a prefix of) the training split. Used when a
/// checkpoint is evaluated without its training-time memory.
pub fn build_memory_from_dataset(
    model: &ModelSet,
    train: &LabeledDataset,
    limit: usize,
) -> Result<SemanticMemory> {
    let sub = train.take(limit.max(1));
    let mut memory = SemanticMemory::new(0, 0.0, 1)?;
    let chunk = 64usize;
    let mut sums: std::collections::BTreeMap<usize, (ndarray::Array3<f64>, usize)> =
        std::collections::BTreeMap::new();
    for start in (0..sub.len()).step_by(chunk) {
        let idxs: Vec<usize> = (start..(start + chunk).min(sub.len())).collect();
        let b = sub.gather(&idxs);
        let (z, _, _) = model.encode_eval(&b.images)?;
        let zk = model.extract_knowledge_eval(&z)?;
        for (i, &y) in b.labels.iter().enumerate() {
            let row = zk.index_axis(Axis(0), i);
            match sums.get_mut(&y) {
                Some((acc, n)) => {
                    *acc += &row;
                    *n += 1;
                }
                None => {
                    sums.insert(y, (row.to_owned(), 1));
                }
            }
        }
    }
    for (y, (acc, n)) in sums {
        memory.update_local(y, &(acc / n as f64), 0, 1.0);
    }
    Ok(memory)
}

/// Writes an evaluation report with `# ` header lines carrying the budget
/// declaration, then the fixed column header and rows.
pub fn write_report_csv(path: &Path, budget_note: &str, rows: &[EvalRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for line in budget_note.lines() {
        let _ = writeln!(out, "# {line}");
    }
    let _ = writeln!(out, "{EVAL_CSV_HEADER}");
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ablation sweeps
// ---------------------------------------------------------------------------

/// Desk-scale budget for one sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepBudget {
    pub train_samples: usize,
    pub test_samples: usize,
    pub rounds: usize,
    pub gen_iters: usize,
    pub mid_iters: usize,
    pub batch_size: usize,
}

impl SweepBudget {
    pub fn describe(&self) -> String {
        format!(
            "budget: train_samples={} test_samples={} rounds={} gen_iters={} mid_iters={} batch_size={}",
            self.train_samples,
            self.test_samples,
            self.rounds,
            self.gen_iters,
            self.mid_iters,
            self.batch_size
        )
    }
}

/// Trains one cell and evaluates the link at the training SNR.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep_cell(
    arch: ArchConfig,
    layout: LatentLayout,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    budget: &SweepBudget,
    tcfg_base: &TrainConfig,
    channel: &ChannelConfig,
    seed: u64,
) -> Result<(EvalRow, ModelSet, SemanticMemory)> {
    let (c, h, w) = train_ds.shape();
    let d_x = c * h * w;
    let m_symbols = channel.num_symbols(d_x)?;
    let mut model = ModelSet::build(arch, layout, (c, h, w), train_ds.num_classes, m_symbols, seed)?;
    let mut tcfg = *tcfg_base;
    tcfg.rounds = budget.rounds;
    tcfg.gen_iters = budget.gen_iters;
    tcfg.mid_iters = budget.mid_iters;
    tcfg.batch_size = budget.batch_size;
    tcfg.seed = seed;
    let sub_train = train_ds.take(budget.train_samples);
    let sub_test = test_ds.take(budget.test_samples);
    let outcome = train(&mut model, &sub_train, &sub_test, &tcfg, None)?;
    let row = evaluate_link(&model, &outcome.memory, &sub_test, channel, None)?;
    Ok((row, model, outcome.memory))
}

/// Varies the total bottleneck width at a fixed split policy (half
/// invariant, half variant). The report's ratio column carries the
/// source-to-variant compression d_x / d_zv.
#[allow(clippy::too_many_arguments)]
pub fn sweep_bottleneck(
    c_values: &[usize],
    arch: ArchConfig,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    budget: &SweepBudget,
    tcfg: &TrainConfig,
    channel: &ChannelConfig,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let (c, h, w) = train_ds.shape();
    let d_x = (c * h * w) as f64;
    let mut rows = Vec::new();
    for (i, &c_total) in c_values.iter().enumerate() {
        let layout = LatentLayout::new(c_total, (c_total / 2).max(1))?;
        let (mut row, _, _) = run_sweep_cell(
            arch,
            layout,
            train_ds,
            test_ds,
            budget,
            tcfg,
            channel,
            seed.wrapping_add(i as u64),
        )?;
        row.compression_ratio = d_x / layout.d_zv() as f64;
        rows.push(row);
    }
    Ok(rows)
}

/// Varies the invariant share at a fixed total width. The pinned ratio
/// example: 3x32x32 source with 8 variant channels gives 3072/512 = 6.
#[allow(clippy::too_many_arguments)]
pub fn sweep_invariant_split(
    c_total: usize,
    c_iv_values: &[usize],
    arch: ArchConfig,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    budget: &SweepBudget,
    tcfg: &TrainConfig,
    channel: &ChannelConfig,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let (c, h, w) = train_ds.shape();
    let d_x = (c * h * w) as f64;
    let mut rows = Vec::new();
    for (i, &c_iv) in c_iv_values.iter().enumerate() {
        let layout = LatentLayout::new(c_total, c_iv)?;
        let (mut row, _, _) = run_sweep_cell(
            arch,
            layout,
            train_ds,
            test_ds,
            budget,
            tcfg,
            channel,
            seed.wrapping_add(1000 + i as u64),
        )?;
        row.compression_ratio = d_x / layout.d_zv() as f64;
        rows.push(row);
    }
    Ok(rows)
}

/// One coefficient assignment of the loss-weight grid.
#[derive(Debug, Clone, Copy)]
pub struct CoefficientCell {
    pub alpha_gtc: f64,
    pub alpha_iv: f64,
    pub alpha_v: f64,
    pub alpha_rec: f64,
}

/// Sweeps loss-coefficient assignments at a fixed layout.
#[allow(clippy::too_many_arguments)]
pub fn sweep_coefficients(
    grid: &[CoefficientCell],
    arch: ArchConfig,
    layout: LatentLayout,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    budget: &SweepBudget,
    tcfg_base: &TrainConfig,
    channel: &ChannelConfig,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (i, cell) in grid.iter().enumerate() {
        let mut tcfg = *tcfg_base;
        tcfg.weights.alpha_gtc = cell.alpha_gtc;
        tcfg.weights.alpha_iv = cell.alpha_iv;
        tcfg.weights.alpha_v = cell.alpha_v;
        tcfg.weights.alpha_rec = cell.alpha_rec;
        let (row, _, _) = run_sweep_cell(
            arch,
            layout,
            train_ds,
            test_ds,
            budget,
            &tcfg,
            channel,
            seed.wrapping_add(2000 + i as u64),
        )?;
        rows.push(row);
    }
    Ok(rows)
}
