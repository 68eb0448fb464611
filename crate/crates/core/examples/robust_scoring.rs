//! Streams durations through a scoring window and prints the robust z of a
//! few spikes, next to the streaming threshold estimate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use spanscope::scoring::{exact_median, robust_z, ScoreKey, ScoringConfig, Scorer};

fn main() {
    let cfg = ScoringConfig::default();
    println!("{cfg:?}");
    let mut scorer = Scorer::new(cfg);
    let key = ScoreKey::Operation("Pay.charge".into());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let normal = LogNormal::new(6.0, 0.25).unwrap();
    for i in 0..2000u64 {
        let mut x = normal.sample(&mut rng) as u64;
        if i % 500 == 499 {
            x *= 6;
        }
        let z = scorer.observe(&key, x);
        if i % 500 == 499 || i < 3 {
            println!("#{i:<5} {x:>6}us  z {:>8.2}  threshold {:.2}", z.value, scorer.z_threshold(&key));
        }
    }
    let w = scorer.window(&key).unwrap();
    println!("window median {:?}, mad {:?}", w.median(), w.mad());

    let xs = [10.0, 11.0, 12.0, 12.0, 13.0, 40.0];
    let m = exact_median(&xs).unwrap();
    println!("z of 40 in {xs:?}: {:.2}", robust_z(40.0, m, 1.0, 1e3).value);
    println!("zero MAD: {:?} and {:?}", robust_z(5.0, 5.0, 0.0, 40.0), robust_z(6.0, 5.0, 0.0, 40.0));
}
