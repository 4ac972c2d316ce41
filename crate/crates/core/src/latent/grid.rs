use crate::error::{Error, Result};
use crate::model::{style_mix, GeneratorCheckpoint, ImageTensor, LatentWPlus, NoiseBuffers, StyleMixSpec};

/// Style-mixing grid: cell `(i, j)` keeps the layers of `coarse[i]` below
/// `cutoff` and takes the rest from `fine[j]`. All cells share `noise`.
pub fn mix_grid(
    ckpt: &GeneratorCheckpoint,
    coarse: &[LatentWPlus],
    fine: &[LatentWPlus],
    cutoff: usize,
    noise: &NoiseBuffers,
) -> Result<Vec<Vec<ImageTensor>>> {
    if coarse.is_empty() || fine.is_empty() {
        return Err(Error::invalid("mix grid needs at least one coarse and one fine source"));
    }
    let spec = StyleMixSpec {
        cutoff,
        strength: 1.0,
        mix_seed: 0,
    };
    let g = &ckpt.generator;
    coarse
        .iter()
        .map(|c| {
            let cells = fine.iter().map(|f| style_mix(c, f, &spec)).collect::<Result<Vec<_>>>()?;
            g.synthesize_batch(&cells, &vec![noise; cells.len()], &ckpt.gates)
        })
        .collect()
}

/// Tiles a grid into one image, rows top to bottom.
pub fn tile_grid(grid: &[Vec<ImageTensor>]) -> Result<image::RgbImage> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    let size = grid.first().and_then(|r| r.first()).map_or(0, ImageTensor::size);
    if rows == 0 || cols == 0 || grid.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("grid must be a non-empty rectangle"));
    }
    let mut out = image::RgbImage::new((cols * size) as u32, (rows * size) as u32);
    for (i, row) in grid.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let tile = cell.to_rgb8();
            image::imageops::replace(&mut out, &tile, (j * size) as i64, (i * size) as i64);
        }
    }
    Ok(out)
}
