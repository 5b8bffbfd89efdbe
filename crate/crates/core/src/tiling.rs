//! Splitting large scenes into 2 or 4 parts for memory-bounded inference and
//! stitching the per-tile outputs back together.

use crate::error::{Error, Result};
use crate::network::{predict_binary, GlobalMindModel};
use crate::raster::{BinaryMap, HyperCube};
use crate::tensor::Tensor;

/// Half-open pixel rectangle `rows × cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileRect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl TileRect {
    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }
}

fn halves(n: usize) -> [(usize, usize); 2] {
    [(0, n / 2), (n / 2, n)]
}

/// Tile rectangles for an `h×w` scene. `parts = 1` is the whole scene, `2`
/// the upper and lower halves, `4` the 2×2 quadrants. The last tile along an
/// axis absorbs an odd remainder.
pub fn tile_grid(h: usize, w: usize, parts: usize) -> Result<Vec<TileRect>> {
    let rect = |(row0, row1), (col0, col1)| TileRect { row0, row1, col0, col1 };
    let tiles: Vec<TileRect> = match parts {
        1 => vec![rect((0, h), (0, w))],
        2 => halves(h).into_iter().map(|r| rect(r, (0, w))).collect(),
        4 => halves(h)
            .into_iter()
            .flat_map(|r| halves(w).into_iter().map(move |c| rect(r, c)))
            .collect(),
        _ => return Err(Error::Usage(format!("tile count must be 1, 2 or 4, got {parts}"))),
    };
    if tiles.iter().any(|t| t.height() == 0 || t.width() == 0) {
        return Err(Error::Input(format!("a {h}×{w} scene is too small for {parts} tiles")));
    }
    Ok(tiles)
}

pub fn tile_split(cube: &HyperCube, parts: usize) -> Result<Vec<(TileRect, HyperCube)>> {
    Ok(tile_grid(cube.height(), cube.width(), parts)?
        .into_iter()
        .map(|t| (t, cube.crop(t.row0, t.row1, t.col0, t.col1)))
        .collect())
}

/// Reassembles per-tile rasters with `depth` values per pixel into an `h×w`
/// raster. Overlapping or missing coverage is an integrity error.
fn merge_pixels<V: Copy + Default>(
    h: usize,
    w: usize,
    depth: usize,
    tiles: &[(TileRect, &[V])],
) -> Result<Vec<V>> {
    let mut out = vec![V::default(); h * w * depth];
    let mut covered = vec![false; h * w];
    for (t, data) in tiles {
        if t.row1 > h || t.col1 > w || t.row0 >= t.row1 || t.col0 >= t.col1 {
            return Err(Error::Integrity(format!("tile {t:?} lies outside the {h}×{w} scene")));
        }
        if data.len() != t.height() * t.width() * depth {
            return Err(Error::Integrity(format!(
                "tile {t:?} carries {} values, expected {}",
                data.len(),
                t.height() * t.width() * depth
            )));
        }
        for r in t.row0..t.row1 {
            for c in t.col0..t.col1 {
                let p = r * w + c;
                if covered[p] {
                    return Err(Error::Integrity(format!("tiles overlap at pixel ({r}, {c})")));
                }
                covered[p] = true;
                let src = ((r - t.row0) * t.width() + c - t.col0) * depth;
                out[p * depth..(p + 1) * depth].copy_from_slice(&data[src..src + depth]);
            }
        }
    }
    if let Some(p) = covered.iter().position(|&c| !c) {
        return Err(Error::Integrity(format!(
            "tiles leave pixel ({}, {}) uncovered",
            p / w,
            p % w
        )));
    }
    Ok(out)
}

pub fn tile_merge(h: usize, w: usize, maps: &[(TileRect, BinaryMap)]) -> Result<BinaryMap> {
    let parts: Vec<_> = maps.iter().map(|(t, m)| (*t, m.data())).collect();
    BinaryMap::new(h, w, merge_pixels(h, w, 1, &parts)?)
}

/// Merges per-tile `[h, w, depth]` tensors.
pub fn tile_merge_tensor(h: usize, w: usize, tiles: &[(TileRect, Tensor<f32>)]) -> Result<Tensor<f32>> {
    let depth = tiles.first().map_or(1, |(_, t)| t.last_dim());
    let parts: Vec<_> = tiles.iter().map(|(r, t)| (*r, t.data())).collect();
    Tensor::new(&[h, w, depth], merge_pixels(h, w, depth, &parts)?)
}

/// Change probabilities (first map) and binary prediction of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub probabilities: Tensor<f32>,
    pub map: BinaryMap,
}

/// Runs the model on each tile independently, concurrently over tiles, and
/// stitches the outputs.
pub fn infer_tiled(
    model: &GlobalMindModel<f32>,
    x: &HyperCube,
    y: &HyperCube,
    parts: usize,
) -> Result<Inference> {
    if x.dims() != y.dims() {
        return Err(Error::Input(format!(
            "bi-temporal cubes differ in shape: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let grid = tile_grid(x.height(), x.width(), parts)?;
    let outputs = crate::parallel::map_range(grid.len(), |i| -> Result<_> {
        let t = grid[i];
        let xt = x.crop(t.row0, t.row1, t.col0, t.col1);
        let yt = y.crop(t.row0, t.row1, t.col0, t.col1);
        let pair = model.forward(xt.tensor(), yt.tensor())?;
        let map = predict_binary(&pair)?;
        Ok((pair.phi1, map))
    });
    let mut probs = Vec::with_capacity(grid.len());
    let mut maps = Vec::with_capacity(grid.len());
    for (t, out) in grid.into_iter().zip(outputs) {
        let (p, m) = out?;
        probs.push((t, p));
        maps.push((t, m));
    }
    Ok(Inference {
        probabilities: tile_merge_tensor(x.height(), x.width(), &probs)?,
        map: tile_merge(x.height(), x.width(), &maps)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_way_split_of_bay_sized_scene() {
        let g = tile_grid(600, 500, 2).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|t| t.height() == 300 && t.width() == 500));
    }

    #[test]
    fn four_way_split_covers_odd_scene_once() {
        let g = tile_grid(985, 741, 4).unwrap();
        let mut hits = vec![0u8; 985 * 741];
        for t in &g {
            for r in t.row0..t.row1 {
                for c in t.col0..t.col1 {
                    hits[r * 741 + c] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
        assert_eq!(g.iter().map(|t| t.height() * t.width()).sum::<usize>(), 985 * 741);
    }

    #[test]
    fn merge_inverts_split() {
        let data: Vec<u8> = (0..7 * 5).map(|i| (i % 3 == 0) as u8).collect();
        let map = BinaryMap::new(7, 5, data).unwrap();
        for parts in [1, 2, 4] {
            let tiles: Vec<_> = tile_grid(7, 5, parts)
                .unwrap()
                .into_iter()
                .map(|t| {
                    let d = (t.row0..t.row1)
                        .flat_map(|r| (t.col0..t.col1).map(move |c| (r, c)))
                        .map(|(r, c)| map.get(r, c))
                        .collect();
                    (t, BinaryMap::new(t.height(), t.width(), d).unwrap())
                })
                .collect();
            assert_eq!(tile_merge(7, 5, &tiles).unwrap(), map);
        }
    }

    #[test]
    fn overlap_and_gap_are_integrity_errors() {
        let t = |row0, row1| TileRect { row0, row1, col0: 0, col1: 2 };
        let m = |h| BinaryMap::new(h, 2, vec![0; h * 2]).unwrap();
        let overlap = [(t(0, 2), m(2)), (t(1, 3), m(2))];
        assert!(matches!(tile_merge(3, 2, &overlap), Err(Error::Integrity(_))));
        let gap = [(t(0, 1), m(1)), (t(2, 3), m(1))];
        assert!(matches!(tile_merge(3, 2, &gap), Err(Error::Integrity(_))));
    }

    #[test]
    fn unsupported_part_count_is_rejected() {
        assert!(tile_grid(8, 8, 3).is_err());
    }
}
