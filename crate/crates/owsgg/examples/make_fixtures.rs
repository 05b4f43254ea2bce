//! Regenerate the bundled replay fixtures under `fixtures/`.
//!
//! `cargo run -p owsgg --example make_fixtures`

use std::path::Path;

use owsgg::synthetic::{predcls_world, record_fixture, sgdet_world};
use owsgg_core::model::{CoordinateStyle, Task};
use owsgg_core::PipelineConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");

    let sgdet = PipelineConfig::default();
    let summary = record_fixture(sgdet_world(), &sgdet, &root.join("replay5"))?;
    println!("replay5: {} images, {} errors, {} live calls", summary.images, summary.errors.len(), summary.live_calls);

    let predcls =
        PipelineConfig { task: Task::Predcls, coordinate_style: CoordinateStyle::Normalized01, ..Default::default() };
    let summary = record_fixture(predcls_world(), &predcls, &root.join("predcls3"))?;
    println!("predcls3: {} images, {} errors, {} live calls", summary.images, summary.errors.len(), summary.live_calls);
    Ok(())
}
