//! Levenberg-Marquardt refinement of a perturbed synthetic reconstruction.
//!
//! ```text
//! cargo run --example bundle_adjustment
//! ```

use sfm_semval::bundle::{lm_refine, reprojection_cost, BaProblem, LmOptions};
use sfm_semval::synthetic::{exact_scene, perturb_model};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = exact_scene(5, 50, 11);
    let noisy = perturb_model(&model, 1f64.to_radians(), 0.01, 0.01, 12);

    // Keep the exact observations as the measurement set.
    let exact = BaProblem::from_model(&model)?;
    let noisy_problem = BaProblem::from_model(&noisy)?;
    let mut problem = BaProblem::new(
        noisy_problem.poses().clone(),
        noisy_problem.intrinsics().clone(),
        noisy_problem.points().clone(),
        exact.observations().to_vec(),
    )?;
    problem.fix_first_image();

    println!(
        "problem: {} poses ({} fixed), {} points, {} observations, {} parameters",
        problem.poses().len(),
        problem.fixed_images().len(),
        problem.points().len(),
        problem.observations().len(),
        problem.parameter_count()
    );
    println!("initial cost: {:.6e}", reprojection_cost(&problem)?);

    let opts = LmOptions {
        max_iters: 100,
        cost_tol: 0.0,
        ..Default::default()
    };
    let (refined, trace) = lm_refine(&problem, &opts)?;
    println!("\naccepted-cost trace ({} entries):", trace.len());
    for (i, cost) in trace.iter().enumerate() {
        println!("  {i:>3}: {cost:.6e}");
    }
    println!("\nfinal cost: {:.6e}", reprojection_cost(&refined)?);

    let worst_point = refined
        .points()
        .iter()
        .map(|(pid, xyz)| (*pid, (xyz - model.points[pid].xyz).norm()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    println!(
        "largest remaining point offset vs ground truth: {:.2e} (point {})",
        worst_point.1, worst_point.0
    );
    Ok(())
}
