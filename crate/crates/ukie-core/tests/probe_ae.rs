use ukie_core::channel::{ChannelConfig, ChannelKind, TrainChannelDraw};
use ukie_core::data::make_synthetic;
use ukie_core::graph::Tape;
use ukie_core::models::{ArchConfig, ArchKind, BaselineKind, BaselineModel, ForwardMode};
use ukie_core::nn::{Optimizer, OptimizerKind};
use ukie_core::rng::derive_seed;

#[test]
fn probe_ae_curve() {
    let ds = make_synthetic(192, 4, (1, 8, 8), 3).unwrap();
    let mut model = BaselineModel::build(
        BaselineKind::Ae,
        ArchConfig { kind: ArchKind::Small, width: 14, extractor_width: 8, mlp_width: 16, ..ArchConfig::default() },
        (1, 8, 8), 1, 64, 5,
    ).unwrap();
    let ch = ChannelConfig { kind: ChannelKind::Awgn, snr_db: 300.0, seed: derive_seed(5, "baseline-channel", 0), compression_ratio: 1.0 };
    let mut opt = Optimizer::new(OptimizerKind::Adam).with_clip(5.0);
    let idxs: Vec<usize> = (0..32).collect();
    for step in 0..1200u64 {
        let batch = ds.gather(&idxs);
        let n = batch.len();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(batch.images.clone().into_dyn());
        let (z, _) = model.encode(&mut tape, &bound, x, &ForwardMode::Eval);
        let sym = model.channel_encode_symbols(&mut tape, &bound, z);
        let draw = TrainChannelDraw::generate(&ch, model.m_symbols, n, step * n as u64);
        let received = tape.row_affine(sym, draw.scale, draw.offset);
        let z_hat = model.channel_decode_symbols(&mut tape, &bound, received);
        let x_hat = model.decode(&mut tape, &bound, z_hat);
        let diff = tape.sub(x_hat, x);
        let sq = tape.mul(diff, diff);
        let mse = tape.mean_all(sq);
        if step % 150 == 0 {
            eprintln!("step {step}: mse {:.6} psnr {:.2}", tape.scalar(mse), 10.0*(1.0/tape.scalar(mse)).log10());
        }
        tape.backward(mse);
        opt.step(&mut model.enc_group, &tape, &bound.enc, 2e-3, 1.0);
        opt.step(&mut model.dec_group, &tape, &bound.dec, 2e-3, 1.0);
        opt.step(&mut model.codec_group, &tape, &bound.codec, 2e-3, 1.0);
    }
}
