//! Overlapping tile plans over a latent and Gaussian-weighted merging.
//!
//! Tiles step by `stride` along each axis; the last tile on an axis is
//! shifted back so it ends exactly at the border. When an axis is shorter
//! than the tile, the tile shrinks to the axis length. Every tile carries a
//! separable Gaussian window (`sigma = side / 4`), and the windows are
//! normalized per pixel when the plan is built, so merging is a plain
//! weighted sum.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    height: usize,
    width: usize,
    tile_h: usize,
    tile_w: usize,
    stride: usize,
    offsets: Vec<(usize, usize)>,
    /// Per tile, `[tile_h * tile_w]` window values divided by the sum of all
    /// windows covering each pixel.
    weights: Vec<Vec<f64>>,
}

fn axis_offsets(n: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + tile < n {
        out.push(o);
        o += stride;
    }
    out.push(n - tile);
    out.dedup();
    out
}

fn window(n: usize) -> Vec<f64> {
    let sigma = (n as f64 / 4.0).max(SIGMA_FLOOR);
    let center = (n as f64 - 1.0) / 2.0;
    (0..n)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

impl TilePlan {
    /// Plans `tile x tile` tiles with the given stride over an `h x w`
    /// latent.
    pub fn new(h: usize, w: usize, tile: usize, stride: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(invalid!("cannot tile an empty {}x{} latent", h, w));
        }
        if tile == 0 || stride == 0 {
            return Err(invalid!("tile ({}) and stride ({}) must be positive", tile, stride));
        }
        if stride > tile {
            return Err(invalid!("stride {} exceeds tile {} and would leave gaps", stride, tile));
        }
        let (th, tw) = (tile.min(h), tile.min(w));
        let ys = axis_offsets(h, th, stride);
        let xs = axis_offsets(w, tw, stride);
        let offsets: Vec<(usize, usize)> = ys
            .iter()
            .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
            .collect();
        let (wy, wx) = (window(th), window(tw));
        let raw: Vec<f64> = wy.iter().flat_map(|a| wx.iter().map(move |b| a * b)).collect();
        let mut total = vec![0f64; h * w];
        for &(oy, ox) in &offsets {
            for y in 0..th {
                for x in 0..tw {
                    total[(oy + y) * w + ox + x] += raw[y * tw + x];
                }
            }
        }
        let weights = offsets
            .iter()
            .map(|&(oy, ox)| {
                (0..th * tw)
                    .map(|i| raw[i] / total[(oy + i / tw) * w + ox + i % tw])
                    .collect()
            })
            .collect();
        Ok(TilePlan {
            height: h,
            width: w,
            tile_h: th,
            tile_w: tw,
            stride,
            offsets,
            weights,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tile_shape(&self) -> (usize, usize) {
        (self.tile_h, self.tile_w)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Normalized merge weight of tile `i` at tile-local `(y, x)`.
    pub fn weight(&self, i: usize, y: usize, x: usize) -> f64 {
        self.weights[i][y * self.tile_w + x]
    }

    fn check(&self, z: &Tensor<f32>) -> Result<usize> {
        let [c, h, w] = z.chw()?;
        if (h, w) != (self.height, self.width) {
            return Err(shape_err!(
                "latent {}x{} does not match a plan for {}x{}",
                h,
                w,
                self.height,
                self.width
            ));
        }
        Ok(c)
    }

    /// Crops of a `[C, H, W]` tensor, one per tile.
    pub fn split(&self, z: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        self.check(z)?;
        self.offsets
            .iter()
            .map(|&(y, x)| z.crop(y, x, self.tile_h, self.tile_w))
            .collect()
    }

    /// Weighted average of overlapping tiles.
    pub fn merge(&self, tiles: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        if tiles.len() != self.offsets.len() {
            return Err(shape_err!("{} tiles for a plan of {}", tiles.len(), self.offsets.len()));
        }
        let c = tiles[0].chw()?[0];
        let (h, w) = (self.height, self.width);
        let mut acc = vec![0f64; c * h * w];
        for (i, (t, &(oy, ox))) in tiles.iter().zip(&self.offsets).enumerate() {
            if t.shape() != [c, self.tile_h, self.tile_w] {
                return Err(shape_err!(
                    "tile {} has shape {:?}, expected {:?}",
                    i,
                    t.shape(),
                    [c, self.tile_h, self.tile_w]
                ));
            }
            let wts = &self.weights[i];
            for p in 0..c {
                for y in 0..self.tile_h {
                    for x in 0..self.tile_w {
                        let k = y * self.tile_w + x;
                        acc[(p * h + oy + y) * w + ox + x] +=
                            wts[k] * t.data()[(p * self.tile_h + y) * self.tile_w + x] as f64;
                    }
                }
            }
        }
        Tensor::new([c, h, w], acc.into_iter().map(|v| v as f32).collect())
    }
}
