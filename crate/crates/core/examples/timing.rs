// temp timing check
use cropseg::decoder::SegmentationModel;
use cropseg::params::ParamStore;
use cropseg::swin::{Encoder, Mode, ModelConfig};
use cropseg::tensor::{ops, Tape, Tensor};
use cropseg::rng::SplitMix64;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::tiny();
    let mut rng = SplitMix64::new(7);
    let x = Tensor::<f32>::rand_uniform(&[2, 4, 16, 48, 48], &mut rng);
    let labels: Vec<u8> = (0..2 * 48 * 48).map(|i| (i % 5) as u8).collect();

    // encoder only
    let mut store = ParamStore::<f32>::new();
    let mut r2 = SplitMix64::new(42);
    let enc = Encoder::new(&mut store, &mut r2, &cfg).unwrap();
    let t = Instant::now();
    let n = 5;
    for _ in 0..n {
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, true);
        let xi = tape.constant(x.clone());
        let out = enc.forward(&mut tape, &staged, xi, &mut Mode::Eval).unwrap();
        let flat = ops::reshape(&mut tape, out.bottleneck, &[2, 1 * 3 * 3 * 96]).unwrap();
        let s = ops::sum_all(&mut tape, flat).unwrap();
        tape.backward(s).unwrap();
    }
    println!("encoder fwd+bwd avg: {:?}", t.elapsed() / n);

    let model = SegmentationModel::<f32>::new(&cfg, 42).unwrap();
    let t = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, true);
        let xi = tape.constant(x.clone());
        let logits = model.forward(&mut tape, &staged, xi, &mut Mode::Eval).unwrap();
        let loss = ops::cross_entropy(&mut tape, logits, &labels, 255).unwrap();
        tape.backward(loss).unwrap();
    }
    println!("full step avg: {:?}", t.elapsed() / n);
}
