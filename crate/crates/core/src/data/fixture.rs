use std::path::Path;

use super::resample::CropBox;
use crate::error::{Error, Result};
use crate::model::ImageTensor;
use crate::rng::{derive_seed, SeededRng};

fn smoothstep(edge: f32, x: f32) -> f32 {
    (0.5 + x / edge).clamp(0.0, 1.0)
}

/// Synthetic "creature" art: a two-colour gradient background, an outlined
/// ellipse body with two eyes, and fine per-pixel grain.
pub fn toy_art(res: usize, seed: u64) -> ImageTensor {
    let mut rng = SeededRng::new(seed);
    let colour = |rng: &mut SeededRng| [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
    let top = colour(&mut rng);
    let bottom = colour(&mut rng);
    let body = colour(&mut rng);
    let cx = rng.uniform_range(0.35, 0.65);
    let cy = rng.uniform_range(0.4, 0.65);
    let rx = rng.uniform_range(0.18, 0.32);
    let ry = rng.uniform_range(0.18, 0.32);
    let eye_dx = rx * rng.uniform_range(0.3, 0.5);
    let eye_y = cy - ry * rng.uniform_range(0.2, 0.45);
    let eye_r = rng.uniform_range(0.03, 0.06);
    let grain = rng.uniform_range(0.04, 0.12);
    let mut grain_rng = SeededRng::derive(seed, 1);
    let px = 1.0 / res as f32;
    let mut pixels = Vec::with_capacity(res * res * 3);
    for y in 0..res {
        for x in 0..res {
            let u = (x as f32 + 0.5) * px;
            let v = (y as f32 + 0.5) * px;
            let mut c = [0.0f32; 3];
            for k in 0..3 {
                c[k] = top[k] * (1.0 - v) + bottom[k] * v;
            }
            // signed distance-ish to the ellipse boundary, in pixels
            let e = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
            let d = (1.0 - e) * rx.min(ry) / px;
            let inside = smoothstep(1.5, d);
            let outline = smoothstep(1.5, d) * (1.0 - smoothstep(1.5, d - 2.0));
            for k in 0..3 {
                c[k] = c[k] * (1.0 - inside) + body[k] * inside;
                c[k] = c[k] * (1.0 - outline) - outline;
            }
            for ex in [cx - eye_dx, cx + eye_dx] {
                let de = (eye_r - ((u - ex).powi(2) + (v - eye_y).powi(2)).sqrt()) / px;
                let a = smoothstep(1.5, de);
                for ch in c.iter_mut() {
                    *ch = *ch * (1.0 - a) + a;
                }
            }
            let g = grain * grain_rng.normal();
            pixels.extend(c.iter().map(|ch| (ch + g).clamp(-1.0, 1.0)));
        }
    }
    ImageTensor::new(res, pixels).expect("sized")
}

/// `n` toy images; image `i` uses `derive_seed(seed, i)`.
pub fn toy_dataset(n: usize, res: usize, seed: u64) -> Vec<ImageTensor> {
    (0..n).map(|i| toy_art(res, derive_seed(seed, i as u64))).collect()
}

/// Size of a fixture card and where its art sits.
pub const CARD_WIDTH: usize = 80;
pub const CARD_HEIGHT: usize = 112;
pub const CARD_ART: CropBox = CropBox {
    x: 8,
    y: 18,
    width: 64,
    height: 64,
};

/// Writes `n` card images (framed toy art) plus a `catalog.json` carrying
/// tags and the art crop box into `dir`.
pub fn write_card_fixture(dir: &Path, n: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut catalog = Vec::new();
    for i in 0..n {
        let tag = ["monster", "spell", "trap"][i % 3];
        let frame: [u8; 3] = match tag {
            "monster" => [200, 120, 40],
            "spell" => [30, 150, 110],
            _ => [170, 40, 120],
        };
        let mut card = image::RgbImage::from_pixel(CARD_WIDTH as u32, CARD_HEIGHT as u32, image::Rgb(frame));
        let art = toy_art(CARD_ART.width, derive_seed(seed, i as u64)).to_rgb8();
        image::imageops::replace(&mut card, &art, CARD_ART.x as i64, CARD_ART.y as i64);
        // text box
        for y in 88..106 {
            for x in 6..74 {
                let ink = (x / 3 + y) % 5 == 0;
                card.put_pixel(x, y, image::Rgb(if ink { [20, 20, 20] } else { [235, 225, 200] }));
            }
        }
        let name = format!("card{i:03}.png");
        let path = dir.join(&name);
        card.save(&path)?;
        catalog.push(serde_json::json!({
            "id": format!("card{i:03}"),
            "image": name,
            "tags": [tag],
            "crop_box": CARD_ART,
        }));
    }
    let path = dir.join(super::fetch::CATALOG_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&catalog)?).map_err(|e| Error::io(&path, e))
}
