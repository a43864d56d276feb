//! Write a sparse model in both encodings and load it back.
//!
//! ```text
//! cargo run --example model_roundtrip
//! ```

use sfm_semval::camera::mean_reprojection_stats;
use sfm_semval::model_io::{load_model, write_model_binary, write_model_text, Format};
use sfm_semval::synthetic::exact_scene;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = exact_scene(6, 120, 42);
    let stats = mean_reprojection_stats(&model)?;
    println!(
        "synthetic scene: {} images, {} points, {} observations",
        stats.images, stats.points, stats.observations
    );
    println!(
        "mean track length {:.3}, mean reprojection error {:.2e} px",
        stats.mean_track_length.unwrap(),
        stats.mean_reproj_error.unwrap()
    );

    let dir = tempfile::tempdir()?;
    let text_dir = dir.path().join("text");
    let bin_dir = dir.path().join("binary");
    write_model_text(&model, &text_dir)?;
    write_model_binary(&model, &bin_dir)?;

    let from_text = load_model(&text_dir, Format::Auto)?;
    let from_bin = load_model(&bin_dir, Format::Auto)?;
    println!("\nreloaded text model:   {} points", from_text.points.len());
    println!("reloaded binary model: {} points", from_bin.points.len());

    // Binary is bit-exact; text rounds at the 12th significant digit.
    assert_eq!(from_bin, model);
    let max_drift = model
        .points
        .values()
        .zip(from_text.points.values())
        .map(|(a, b)| (a.xyz - b.xyz).norm())
        .fold(0.0f64, f64::max);
    println!("max text-encoding drift: {max_drift:.2e} scene units");

    for name in ["cameras.txt", "images.txt", "points3D.txt"] {
        let size = std::fs::metadata(text_dir.join(name))?.len();
        println!("  {name:<13} {size:>8} bytes");
    }
    Ok(())
}
