use std::sync::Arc;

use gridmarket::hjb::{shadow_price, solve_riccati_unchecked, ValueSolution};
use gridmarket::instances::{b1, scalar_model};
use gridmarket::market::{PriceField, ProfitFloor};
use gridmarket::model::{GridModel, TimeGrid};
use gridmarket::response::{best_response_policy, FnPolicy, NashPolicy, Policy};
use gridmarket::sim::{simulate, DeviatedPolicy, Estimate, NoiseBundle, PathBundle, PolicyOverride};
use nalgebra::DVector;

fn nash(model: &GridModel) -> Vec<NashPolicy> {
    let v = Arc::new(ValueSolution::Riccati(solve_riccati_unchecked(model).unwrap()));
    let h: Arc<dyn PriceField> = Arc::new(shadow_price(v, ProfitFloor::zero(model.n_agents())));
    (0..model.n_agents()).map(|i| best_response_policy(i, Arc::clone(&h))).collect()
}

fn run(model: &GridModel, pols: &[NashPolicy], noise: &Arc<NoiseBundle>, x0: &[f64]) -> PathBundle {
    let refs: Vec<&dyn Policy> = pols.iter().map(|p| p as &dyn Policy).collect();
    simulate(model, &refs, noise, &DVector::from_column_slice(x0)).unwrap()
}

#[test]
fn ornstein_uhlenbeck_moments() {
    let (a, d) = (-1.0, 0.3);
    let m = scalar_model(a, 0.0, d);
    let grid = TimeGrid::with_step(0.0, 1.0, 1.0 / 400.0).unwrap();
    let noise = Arc::new(NoiseBundle::generate(17, 10_000, grid, 2));
    let zero = FnPolicy::zero(0);
    let b = simulate(&m, &[&zero], &noise, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
    let xt: Vec<f64> = (0..b.n_paths()).map(|p| b.terminal_state(p)[1]).collect();
    let e = Estimate::from_samples(&xt).unwrap();
    let mean = a.exp();
    let var = d * d * (1.0 - (2.0 * a).exp()) / (-2.0 * a);
    assert!(e.within(mean, 3.0), "mean {} vs {mean}, se {}", e.mean, e.std_error);
    let sample_var = e.std_error.powi(2) * e.n as f64;
    assert!((sample_var / var - 1.0).abs() < 0.1, "variance {sample_var} vs {var}");
}

#[test]
fn euler_maruyama_strong_order() {
    let m = b1();
    let pols = nash(&m);
    let fine = Arc::new(NoiseBundle::generate(5, 200, TimeGrid::new(0.0, 1.0, 6400).unwrap(), 3));
    let x0 = [0.5, 0.3, -0.3];
    let reference = run(&m, &pols, &fine, &x0);
    let err = |factor: usize| {
        let b = run(&m, &pols, &Arc::new(fine.coarsen(factor).unwrap()), &x0);
        (0..b.n_paths())
            .map(|p| {
                let (x, y) = (b.terminal_state(p), reference.terminal_state(p));
                x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / b.n_paths() as f64
    };
    let (e1, e2, e4) = (err(16), err(32), err(64));
    let order = 0.5 * ((e4 / e1).log2());
    assert!(order >= 0.9, "errors {e1:e} {e2:e} {e4:e}, order {order}");
    assert!(e2 > e1 && e4 > e2);
}

#[test]
fn reruns_are_bit_identical() {
    let m = b1();
    let pols = nash(&m);
    let g = *m.time_grid();
    let a = run(&m, &pols, &Arc::new(NoiseBundle::generate(9, 64, g, 3)), &[0.5, 0.3, -0.3]);
    let b = run(&m, &pols, &Arc::new(NoiseBundle::generate(9, 64, g, 3)), &[0.5, 0.3, -0.3]);
    assert_eq!(a.fingerprint(), b.fingerprint());
}

#[test]
fn deviation_runs_share_noise_and_respect_boxes() {
    let m = b1().with_boxes(0.3);
    let pols = nash(&m);
    let noise = Arc::new(NoiseBundle::generate(4, 64, *m.time_grid(), 3));
    let base = run(&m, &pols, &noise, &[0.5, 0.3, -0.3]);
    let o = PolicyOverride::additive(0, vec![0.25]);
    let dev = DeviatedPolicy::new(Arc::new(pols[0].clone()), o.perturbation.clone());
    let refs: Vec<&dyn Policy> = vec![&dev, &pols[1]];
    let other = simulate(&m, &refs, &noise, &DVector::from_vec(vec![0.5, 0.3, -0.3])).unwrap();
    assert!(base.shares_noise_with(&other));
    assert_eq!(base.noise().fingerprint(), other.noise().fingerprint());
    for b in [&base, &other] {
        for k in 0..b.grid().n_steps() {
            for p in 0..b.n_paths() {
                assert!(b.control(k, p).iter().all(|u| u.abs() <= 0.3));
            }
        }
    }
}
