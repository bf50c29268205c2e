//! Regenerates the checked-in scenario files from the programmatic builders:
//!
//! ```text
//! cargo run -p laneflow --example gen_scenarios
//! ```

use std::path::Path;

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    std::fs::create_dir_all(&dir).expect("create scenarios directory");
    let path = dir.join("grid2x3.json");
    let cfg = laneflow::scenario::grid2x3();
    std::fs::write(&path, laneflow::scenario::to_pretty_json(&cfg)).expect("write scenario file");
    println!("wrote {}", path.display());
}
