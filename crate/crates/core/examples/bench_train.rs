use lanepilot::dataset::{Dataset, Sample};
use lanepilot::preprocess::{InputTensor, INPUT_LEN};
use lanepilot::rng::CounterRng;
use lanepilot::train::{train_on, OptimSettings, TrainConfig};
use lanepilot::nn::ModelConfig;
use std::time::Instant;

fn main() {
    let mut rng = CounterRng::new(1);
    let samples: Vec<Sample> = (0..512)
        .map(|i| {
            let data: Vec<f32> = (0..INPUT_LEN).map(|_| rng.uniform() as f32).collect();
            Sample { input: InputTensor::from_data(data), action: [0.3, -0.4], domain_id: (i % 4) as u8 }
        })
        .collect();
    let ds = Dataset::from_samples(samples);
    let cfg = TrainConfig {
        mix: None,
        epochs: 2,
        batch_size: 64,
        optimizer: OptimSettings::default(),
        model: ModelConfig::default(),
        seed: 1,
        val_fraction: 0.30,
        split_seed: None,
    };
    let t0 = Instant::now();
    let (_, h) = train_on(&ds, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    // 2 epochs over 358 train samples (5 full batches + tail of 38) + 2x154 val evals
    println!("2 epochs on 358 train / 154 val samples: {dt:.2} s");
    println!("per train sample+step amortized: {:.2} ms", dt * 1000.0 / (2.0 * 358.0 + 2.0 * 154.0));
    println!("losses: {:?}", h.train_loss);
}
