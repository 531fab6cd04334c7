use pfdiff::grid::{cases, NormalizationBounds, SampleLayout};
use pfdiff::pf::{generate_dataset, residual_imbalance, GenerationConfig};
use rand::Rng;
use rand_distr::StandardNormal;

fn noise_imbalance(
    bounds: &NormalizationBounds,
    layout: &SampleLayout,
    y: &pfdiff::grid::AdmittanceMatrix,
    n: usize,
) -> f64 {
    let mut rng = pfdiff::rng::stream(99, "calibrate");
    let mut acc = 0.0;
    for _ in 0..n {
        let z: Vec<f64> = (0..layout.dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let phys = bounds.physical_from_model(&z).unwrap();
        acc += residual_imbalance(&phys, layout, y).unwrap().mean;
    }
    acc / n as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(400);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(7);
    let sweeps: [(_, f64, &[f64]); 2] = [
        (cases::ieee14(), 2.75, &[1.8, 1.9, 2.0, 2.1, 2.2][..]),
        (cases::ieee30(), 2.87, &[4.0, 4.2, 4.4, 4.6, 4.8][..]),
    ];
    for (case, target, ks) in sweeps {
        let t0 = std::time::Instant::now();
        let mut cfg = GenerationConfig::default();
        cfg.abort_rate = 1.01; // diagnose: never abort, count every family
        cfg.max_attempts = 5_000;
        let ds = match generate_dataset(&case, n, seed, &cfg) {
            Ok(d) => d,
            Err(e) => {
                println!("{}: generation failed: {e}", case.name);
                continue;
            }
        };
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "{}: n={} seed={} attempts={} rate={:.1}% [dispatch={} diverged={} {:?}] {:.1}s",
            case.name,
            n,
            seed,
            ds.stats.attempts,
            100.0 * ds.stats.rejection_rate(),
            ds.stats.dispatch_infeasible,
            ds.stats.diverged,
            ds.stats.constraint,
            secs
        );
        let layout = ds.layout.clone();
        let y = pfdiff::grid::build_admittance(&case).unwrap();
        let physical: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.physical(i).unwrap()).collect();
        for &k in ks {
            let b = NormalizationBounds::from_data(&physical, &case, &layout, k).unwrap();
            let r = noise_imbalance(&b, &layout, &y, 1500);
            println!("  k={:>4}: R = {:.4}  ratio {:.3}", k, r, r / target);
        }
    }
}
