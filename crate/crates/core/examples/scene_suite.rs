//! Runs the two-concept scene suite for each variant and prints summaries.
//!
//! Usage: `scene_suite [config.toml] [variant...]`

use std::time::Instant;

use std::path::Path;

use mc2_core::harness::render::write_png;
use mc2_core::harness::{run_scenario, ScenarioConfig, Variant};
use mc2_core::numerics::Tensor;

/// Tiles images into rows of `per_row`, each upscaled by `zoom`.
fn contact_sheet(images: &[&Tensor], per_row: usize, zoom: usize) -> Tensor {
    let (h, w) = (images[0].shape()[0], images[0].shape()[1]);
    let rows = images.len().div_ceil(per_row);
    let (th, tw) = (h * zoom + 2, w * zoom + 2);
    let (sh, sw) = (rows * th, per_row * tw);
    let mut out = Tensor::full(&[sh, sw, 3], 1.0);
    for (i, img) in images.iter().enumerate() {
        let (oy, ox) = ((i / per_row) * th + 1, (i % per_row) * tw + 1);
        for y in 0..h * zoom {
            for x in 0..w * zoom {
                for k in 0..3 {
                    out.data_mut()[((oy + y) * sw + ox + x) * 3 + k] =
                        img.data()[((y / zoom) * w + x / zoom) * 3 + k];
                }
            }
        }
    }
    out
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let cfg: ScenarioConfig = match args.next() {
        Some(path) if path.ends_with(".toml") => toml::from_str(&std::fs::read_to_string(path)?)?,
        _ => ScenarioConfig::default(),
    };
    let mut variants: Vec<Variant> = args.map(|a| Variant::parse(&a)).collect::<Result<_, _>>()?;
    if variants.is_empty() {
        variants = vec![Variant::Full, Variant::NoGuidance, Variant::NoInter, Variant::NoIntra];
    }
    for v in variants {
        let start = Instant::now();
        let r = run_scenario(&cfg, v)?;
        if let Ok(dir) = std::env::var("SCENE_DUMP") {
            std::fs::create_dir_all(&dir)?;
            let tiles: Vec<&Tensor> = r.images.iter().collect();
            write_png(&Path::new(&dir).join(format!("{}.png", v.name())), &contact_sheet(&tiles, 10, 6))?;
        }
        let flags: String = r.scenes.iter().map(|s| if s.co_occurrence { '+' } else { '.' }).collect();
        println!(
            "{:<13} co={:.2} inter={:?} presence={:?} [{}] {:.1}s",
            v.name(),
            r.summary.co_occurrence_rate,
            r.summary.mean_final_inter_loss,
            r.summary.mean_presence,
            flags,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
