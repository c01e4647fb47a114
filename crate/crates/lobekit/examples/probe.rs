use lobekit::augment::AugmentConfig;
use lobekit::config::{ablate, RunConfig};
use lobekit::model::LobeNetSpec;
use lobekit::phantom::{generate, PhantomConfig};
use lobekit::trainer::TrainConfig;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let data: Vec<_> = (0..10u64)
        .map(|i| generate(&PhantomConfig { dims: [16, 32, 32], seed: 3000 + i, ..PhantomConfig::default() }).unwrap())
        .collect();
    let base = RunConfig {
        network: LobeNetSpec { base_width: 16, num_classes: 6, seed: 7 },
        train: TrainConfig {
            epochs,
            seed: 7,
            augment: Some(AugmentConfig { shift_max: 4, flip_z_prob: 0.0, seed: 7, ..AugmentConfig::default() }),
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    let t0 = std::time::Instant::now();
    let report = ablate(&data, &base).unwrap();
    println!("{}", report.render_table());
    for arm in &report.arms {
        println!("{:9} final_loss {:.4}", arm.mode.label(), arm.final_mean_loss);
    }
    println!("elapsed {:.0}s", t0.elapsed().as_secs_f64());
}
