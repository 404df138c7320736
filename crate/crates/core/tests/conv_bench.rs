//! Throughput probe for the convolution kernels at training-like shapes.
//! Ignored by default; run with `cargo test -p hetseg-core --test
//! conv_bench -- --ignored --nocapture` when sizing experiment configs.

use std::time::Instant;

use hetseg_core::autodiff::{ConvGeom, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_one(b: usize, c_in: usize, c_out: usize, h: usize, w: usize, dil: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let geom = ConvGeom::infer(&[b, c_in, h, w], &[c_out, c_in, 3, 3], 1, dil, dil).unwrap();
    let x: Vec<f32> = (0..b * c_in * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt: Vec<f32> = (0..c_out * c_in * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bias: Vec<f32> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f32; b * c_out * geom.h_out * geom.w_out];
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; wt.len()];
    let mut db = vec![0.0f32; bias.len()];

    let macs = (b * c_out * geom.h_out * geom.w_out * c_in * 9) as f64;
    let reps = (2e8 / macs).max(1.0) as usize;

    let t0 = Instant::now();
    for _ in 0..reps {
        hetseg_core::autodiff::bench_conv_fwd(&geom, &x, &wt, &bias, &mut out);
    }
    let fwd = 2.0 * macs * reps as f64 / t0.elapsed().as_secs_f64() / 1e9;

    let t0 = Instant::now();
    for _ in 0..reps {
        hetseg_core::autodiff::bench_conv_bwd(&geom, &x, &wt, &out, &mut dx, &mut dw, &mut db);
    }
    let bwd = 2.0 * 2.0 * macs * reps as f64 / t0.elapsed().as_secs_f64() / 1e9;
    let _ = Tensor::<f32>::zeros(vec![1]);
    (fwd, bwd)
}

#[test]
#[ignore]
fn train_step_timing() {
    use hetseg_core::losses::{
        base_graph, label_flip_graph, masked_mean_graph, mc_draw_block, predictive_variance_graph_flat,
        BaseLoss,
    };
    use hetseg_core::model::{ArchConfig, HeteroMode, Model};
    use hetseg_core::Tape32;

    for (depth, c, t_draws, mode) in [
        (1usize, 5usize, 4usize, HeteroMode::Plain),
        (1, 5, 4, HeteroMode::LabelFlip),
        (1, 5, 4, HeteroMode::PredVar),
        (1, 6, 4, HeteroMode::Plain),
        (1, 6, 4, HeteroMode::LabelFlip),
        (1, 6, 4, HeteroMode::PredVar),
        (1, 6, 10, HeteroMode::PredVar),
        (1, 8, 10, HeteroMode::LabelFlip),
        (2, 8, 10, HeteroMode::LabelFlip),
    ] {
        let cfg = ArchConfig {
            n_slices: 7,
            base_channels: c,
            encoder_depth: depth,
            bottleneck_dilations: vec![1, 2, 4, 8],
            n_tasks: 11,
            hetero: mode,
            leaky_slope: 0.1,
        };
        let n_params = Model::<f32>::count_params(&cfg);
        let model = Model::<f32>::build(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor::new(
            vec![2, 7, 48, 48],
            (0..2 * 7 * 48 * 48).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        );
        let labels = Tensor::new(
            vec![2, 11, 48, 48],
            (0..2 * 11 * 48 * 48).map(|_| if rng.gen_bool(0.2) { 1.0f32 } else { 0.0 }).collect(),
        );
        let mask = Tensor::new(vec![2, 11, 48, 48], vec![1.0f32; 2 * 11 * 48 * 48]);
        let reps = 30;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape32::new();
            let params = model.insert_params(&mut tape);
            let x = tape.constant(input.clone());
            let out = model.forward(&mut tape, &params, x).unwrap();
            let per = match mode {
                HeteroMode::Plain => {
                    let target = tape.constant(labels.clone());
                    base_graph(&mut tape, BaseLoss::Bce, out, target)
                }
                HeteroMode::LabelFlip => {
                    let logits = tape.narrow(out, 0, 11);
                    let raw_q = tape.narrow(out, 11, 11);
                    label_flip_graph(&mut tape, logits, raw_q, &labels, BaseLoss::Bce)
                }
                HeteroMode::PredVar => {
                    let logits = tape.narrow(out, 0, 11);
                    let log_var = tape.narrow(out, 11, 11);
                    let block = mc_draw_block(labels.len(), t_draws, &mut rng);
                    predictive_variance_graph_flat(&mut tape, logits, log_var, &labels, block, BaseLoss::Bce)
                }
            };
            let loss = masked_mean_graph(&mut tape, per, &mask);
            let grads = tape.backward(loss).unwrap();
            std::hint::black_box(grads.data(params[0]));
        }
        let ms = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;
        println!(
            "depth {depth} C={c} T={t_draws} {mode:?} ({n_params} params): {ms:.1} ms/step, 25k steps = {:.1} min/arm",
            ms * 25_000.0 / 60_000.0
        );
    }
}

#[test]
#[ignore]
fn conv_throughput() {
    for (name, b, ci, co, h, w, dil) in [
        ("slicered 7->8 48x48", 2usize, 7usize, 8usize, 48usize, 48usize, 1usize),
        ("enc0 8->16 48x48", 2, 8, 16, 48, 48, 1),
        ("enc1 16->32 24x24", 2, 16, 32, 24, 24, 1),
        ("bottleneck 32->8 12x12 d2", 2, 32, 8, 12, 12, 2),
        ("dec0 32->8 48x48", 2, 32, 8, 48, 48, 1),
        ("batch48 8->16 48x48", 48, 8, 16, 48, 48, 1),
    ] {
        let (f, bw) = bench_one(b, ci, co, h, w, dil);
        println!("{name}: fwd {f:.2} GFLOP/s, bwd {bw:.2} GFLOP/s");
    }
}
