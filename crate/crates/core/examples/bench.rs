// throughput probe for the training-step hot path
use cld_core::backbone::{BackboneConfig, Model};
use cld_core::grid::{ChannelGrid, GridShape};
use cld_core::rng::SeedTree;
use rand::Rng;
use std::time::Instant;

fn main() {
    let cfg = BackboneConfig {
        in_channels: 1,
        classes: 5,
        encoder_stages: 3,
        base_channels: 4,
        use_short_residual: false,
        init_seed: 1,
    };
    let model = Model::<f32>::build(cfg).unwrap();
    println!("params: {}", model.param_count());
    let shape = GridShape::new(48, 48, 16);
    let mut rng = SeedTree::new(2).stream("bench", &[]);
    let mut input = ChannelGrid::zeros(1, shape);
    for v in input.data.iter_mut() {
        *v = rng.gen_range(-1.0f32..1.0);
    }
    let mut dlogits = ChannelGrid::zeros(5, shape);
    for v in dlogits.data.iter_mut() {
        *v = rng.gen_range(-1e-3f32..1e-3);
    }

    // warm up
    let (_l, cache) = model.forward_cached(&input).unwrap();
    let mut grads = vec![0.0f32; model.param_count()];
    model.backward(&cache, &dlogits, &mut grads);

    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let l = model.forward(&input).unwrap();
        std::hint::black_box(&l);
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;

    let t1 = Instant::now();
    for _ in 0..reps {
        let (l, cache) = model.forward_cached(&input).unwrap();
        std::hint::black_box(&l);
        let mut grads = vec![0.0f32; model.param_count()];
        model.backward(&cache, &dlogits, &mut grads);
        std::hint::black_box(&grads);
    }
    let fb = t1.elapsed().as_secs_f64() / reps as f64;
    println!(
        "forward: {:.1} ms   forward+backward: {:.1} ms",
        fwd * 1e3,
        fb * 1e3
    );
    // one optimizer step trains 8 crops (2 models x (2 labeled + 2 unlabeled))
    let step = 8.0 * fb;
    let run = step * 16.0 * 40.0; // 16 steps/epoch x 40 epochs
    println!(
        "est. step: {:.2} s   est. run (640 steps): {:.1} s   9 runs: {:.1} min",
        step,
        run,
        9.0 * run / 60.0
    );
}
