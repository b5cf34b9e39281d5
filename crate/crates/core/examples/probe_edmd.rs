use koopflow_core::dynamics::{boundary_starts, generate_dataset, grid_starts, integrate, DomainBox, VectorFieldSpec};
use koopflow_core::edmd::{fit_generator_edmd, Dictionary};

fn run(n_traj: usize, steps: usize, ridge: f64, deg: usize) {
    let sys = VectorFieldSpec::ex1(-0.7f64, -0.3);
    let box_ = DomainBox::centered(5.0, 2);
    let starts = boundary_starts(&box_, n_traj, 3);
    let ds = generate_dataset(&sys, &box_, &starts, 0.065, steps).unwrap();
    let dict = Dictionary::monomial(2, deg);
    let (model, diag) = fit_generator_edmd(&ds, &dict, ridge).unwrap();
    let mut worst: f64 = 0.0;
    let mut sum = 0.0;
    let grid = grid_starts(&box_, 10);
    for x0 in &grid {
        let truth = integrate(&sys, x0, 0.065, 200).unwrap();
        let pred = model.predict_trajectory(x0, 0.065, 200);
        let se: f64 = truth.states.iter().zip(pred.iter()).map(|(a, b)| (a - b).norm_squared()).sum();
        let rmse = (se / (2.0 * 201.0)).sqrt();
        worst = worst.max(rmse);
        sum += rmse;
    }
    println!("traj={n_traj} steps={steps} ridge={ridge:.0e} deg={deg}: mean_rmse={:.6e} worst={:.6e} abscissa={:.4} rank={} recon={:.3e}",
        sum / grid.len() as f64, worst, diag.spectral_abscissa, diag.effective_rank, diag.reconstruction_rmse);
}

fn main() {
    for ridge in [1e-8, 0.0] {
        run(12, 100, ridge, 5);
        run(24, 199, ridge, 5);
        run(24, 199, ridge, 7);
    }
}
