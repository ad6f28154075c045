//! Renders the bracket at every default bend angle and writes the sprites as PNGs.
//!
//! Usage: `cargo run -p sdg-core --example render_gallery -- OUT_DIR [ROUGHNESS] [POWER]`

use sdg_core::scene::{Scene, SceneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "gallery".into()));
    let roughness: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.4);
    let power: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10.0);
    std::fs::create_dir_all(&out)?;
    let scene = Scene::new(SceneConfig::default())?;
    for angle in [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0] {
        let sprite = scene.render_part(angle, roughness, power)?;
        let path = out.join(format!("bend_{angle:+05.1}.png"));
        sprite.rgba.save(&path)?;
        println!("{} covered={}", path.display(), sprite.mask.count());
    }
    Ok(())
}
