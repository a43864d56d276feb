//! Attach semantic classes to every observation of a model and export the
//! labelled-points CSV.
//!
//! ```text
//! cargo run --example semantic_labeling
//! ```

use std::collections::BTreeMap;

use sfm_semval::semantics::{
    compute_iou, export_labeled_csv, label_model, ClassTable, LabelMap, LabelOptions,
};
use sfm_semval::synthetic::exact_scene;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let table = ClassTable::cityscapes();
    let model = exact_scene(3, 30, 5);

    // One raster per image: left half building, right half road.
    let (w, h) = (1280u32, 720u32);
    let mut maps = BTreeMap::new();
    for image in model.images.values() {
        let mut data = vec![0u8; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                data[(y * w + x) as usize] =
                    if x < w / 2 { table.id_by_name("building").unwrap() } else { 7 };
            }
        }
        let map = LabelMap::new(image.name.clone(), w, h, data, &table)?;
        maps.insert(image.name.clone(), map);
    }

    let observations = label_model(&model, &maps, &LabelOptions::default())?;
    let mut histogram: BTreeMap<u8, usize> = BTreeMap::new();
    for obs in &observations {
        *histogram.entry(obs.class_id).or_default() += 1;
    }
    println!("labelled {} observations:", observations.len());
    for (class, count) in &histogram {
        println!("  {:<12} {count}", table.name_of(*class).unwrap());
    }

    let mut csv = Vec::new();
    export_labeled_csv(&observations, &model, &table, &mut csv)?;
    let csv = String::from_utf8(csv)?;
    println!("\nlabelled-points CSV ({} rows), first lines:", csv.lines().count() - 1);
    for line in csv.lines().take(4) {
        println!("  {line}");
    }

    // Segmentation quality metric on a perturbed copy of one raster.
    let truth = maps.values().next().unwrap();
    let mut noisy = truth.data().to_vec();
    for v in noisy.iter_mut().step_by(17) {
        *v = 7;
    }
    let pred = LabelMap::new("noisy", w, h, noisy, &table)?;
    let building = table.id_by_name("building").unwrap();
    println!(
        "\nIoU(building) against a corrupted copy: {:.4}",
        compute_iou(&pred, truth, building)?.unwrap()
    );
    Ok(())
}
