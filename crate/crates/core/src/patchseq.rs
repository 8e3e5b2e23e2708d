//! Patch geometry, random masking, sequence concatenation and the recovery
//! window geometry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{Mat, Scalar};

/// Marks a zero-filled slot in a gather index map.
pub const ZERO_SLOT: u32 = u32::MAX;

/// Non-overlapping `patch x patch` tiling of an image; the image is cropped to
/// `grid_h*patch x grid_w*patch`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::InvalidSpec("patch size must be >= 1".into()));
        }
        if height < patch || width < patch {
            return Err(Error::ImageTooSmall { height, width, patch });
        }
        Ok(PatchGrid {
            patch,
            grid_h: height / patch,
            grid_w: width / patch,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn crop_height(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn crop_width(&self) -> usize {
        self.grid_w * self.patch
    }

    /// `(row, col)` grid coordinate of raster patch index `id`.
    pub fn position(&self, id: usize) -> (usize, usize) {
        (id / self.grid_w, id % self.grid_w)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.grid_w + col
    }

    /// Gather map from a channel-last `(height*width) x channels` image to the
    /// `n_patches x (patch*patch*channels)` block matrix. Each row flattens one
    /// patch in `(py, px, c)` order.
    pub fn patch_gather(&self, width: usize, channels: usize) -> Vec<u32> {
        let p = self.patch;
        let mut idx = Vec::with_capacity(self.n_patches() * p * p * channels);
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                for py in 0..p {
                    for px in 0..p {
                        let pix = (gy * p + py) * width + gx * p + px;
                        for c in 0..channels {
                            idx.push((pix * channels + c) as u32);
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Random split of a grid's patches into masked and unmasked sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub ratio: f64,
    pub masked_ids: Vec<usize>,
    pub unmasked_ids: Vec<usize>,
    pub seed: u64,
}

/// Number of masked patches for ratio `rho`.
pub fn masked_count(n_patches: usize, rho: f64) -> usize {
    ((rho * n_patches as f64).round() as usize).min(n_patches)
}

/// Draws `round(rho * n)` patches uniformly without replacement.
pub fn plan_mask(grid: &PatchGrid, rho: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidSpec(format!("masking ratio {rho} outside [0, 1]")));
    }
    let n = grid.n_patches();
    let k = masked_count(n, rho);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let unmasked = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        ratio: rho,
        masked_ids: masked,
        unmasked_ids: unmasked,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Ordered token embeddings with their grid positions and domain tags.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<T> {
    pub embeddings: Mat<T>,
    pub positions: Vec<(usize, usize)>,
    pub domains: Vec<Domain>,
}

impl<T: Scalar> PatchSequence<T> {
    pub fn len(&self) -> usize {
        self.embeddings.rows
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols
    }

    /// Keeps only the rows listed in `ids`, in the given order.
    pub fn select(&self, ids: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(self.embeddings.row(i));
        }
        PatchSequence {
            embeddings: Mat::from_vec(ids.len(), d, data),
            positions: ids.iter().map(|&i| self.positions[i]).collect(),
            domains: ids.iter().map(|&i| self.domains[i]).collect(),
        }
    }
}

/// Linear patch embedding plus positional table, outside the autodiff tape.
/// `img` is channel-last over the full `height x width` raster.
pub fn patchify<T: Scalar>(
    img: &Mat<T>,
    height: usize,
    width: usize,
    grid: &PatchGrid,
    weight: &Mat<T>,
    bias: &Mat<T>,
    pos: &Mat<T>,
    domain: Domain,
) -> Result<PatchSequence<T>> {
    if height < grid.patch || width < grid.patch {
        return Err(Error::ImageTooSmall {
            height,
            width,
            patch: grid.patch,
        });
    }
    let channels = img.cols;
    let block = grid.patch * grid.patch * channels;
    if weight.rows != block {
        return Err(Error::Shape(format!(
            "patch embedding expects {} inputs, image patches have {block}",
            weight.rows
        )));
    }
    let idx = grid.patch_gather(width, channels);
    let blocks = Mat::from_vec(grid.n_patches(), block, idx.iter().map(|&i| img.data[i as usize]).collect());
    let mut emb = blocks.matmul(weight);
    for r in 0..emb.rows {
        for c in 0..emb.cols {
            let v = emb.at(r, c) + bias.data[c] + pos.at(r, c);
            emb.set(r, c, v);
        }
    }
    Ok(PatchSequence {
        embeddings: emb,
        positions: (0..grid.n_patches()).map(|i| grid.position(i)).collect(),
        domains: vec![domain; grid.n_patches()],
    })
}

/// Source tokens first, then the unmasked target tokens in their given order.
pub fn concat_for_mae<T: Scalar>(src: &PatchSequence<T>, tgt_unmasked: &PatchSequence<T>) -> Result<PatchSequence<T>> {
    if !tgt_unmasked.is_empty() && src.dim() != tgt_unmasked.dim() {
        return Err(Error::Shape(format!(
            "embedding dims differ: source {}, target {}",
            src.dim(),
            tgt_unmasked.dim()
        )));
    }
    let mut data = src.embeddings.data.clone();
    data.extend_from_slice(&tgt_unmasked.embeddings.data);
    let mut positions = src.positions.clone();
    positions.extend_from_slice(&tgt_unmasked.positions);
    let mut domains = src.domains.clone();
    domains.extend_from_slice(&tgt_unmasked.domains);
    Ok(PatchSequence {
        embeddings: Mat::from_vec(src.len() + tgt_unmasked.len(), src.dim(), data),
        positions,
        domains,
    })
}

/// Window length and stride of the sequence-recovery convolution: stride 1
/// and a window just long enough that the output has `n_target` elements.
pub fn recovery_geometry(len_concat: usize, n_target: usize) -> Result<(usize, usize)> {
    if len_concat < n_target || n_target == 0 {
        return Err(Error::SourceTooShort { len_concat, n_target });
    }
    Ok((len_concat - n_target + 1, 1))
}

/// Output length of a valid 1-D convolution.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

/// Gather map `n_out x (kernel*dim)` over a `len x dim` sequence; positions at
/// or beyond `available` read as zero.
pub fn window_gather(n_out: usize, kernel: usize, dim: usize, available: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(n_out * kernel * dim);
    for j in 0..n_out {
        for t in 0..kernel {
            let src = j + t;
            for c in 0..dim {
                idx.push(if src < available { (src * dim + c) as u32 } else { ZERO_SLOT });
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_floor_rule() {
        assert_eq!(PatchGrid::new(64, 64, 16).unwrap().n_patches(), 16);
        let g = PatchGrid::new(70, 70, 16).unwrap();
        assert_eq!((g.n_patches(), g.crop_height()), (16, 64));
        assert!(matches!(PatchGrid::new(8, 64, 16), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn mask_extremes() {
        let g = PatchGrid::new(64, 64, 16).unwrap();
        assert!(plan_mask(&g, 0.0, 1).unwrap().masked_ids.is_empty());
        assert_eq!(plan_mask(&g, 1.0, 1).unwrap().masked_ids.len(), 16);
        assert!(plan_mask(&g, 1.5, 1).is_err());
    }

    #[test]
    fn half_mask_over_seeds() {
        let g = PatchGrid::new(64, 64, 16).unwrap();
        for seed in 0..100 {
            let p = plan_mask(&g, 0.5, seed).unwrap();
            assert_eq!(p.masked_ids.len(), 8);
            let mut all: Vec<_> = p.masked_ids.iter().chain(&p.unmasked_ids).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..16).collect::<Vec<_>>());
            assert!(p.unmasked_ids.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn recovery_examples() {
        assert_eq!(recovery_geometry(24, 16).unwrap(), (9, 1));
        assert_eq!(recovery_geometry(72, 16).unwrap(), (57, 1));
        assert_eq!(recovery_geometry(16, 16).unwrap(), (1, 1));
        assert_eq!(
            recovery_geometry(8, 16).unwrap_err().to_string(),
            "source too short for masking ratio (sequence 8 < target 16)"
        );
    }

    fn seq(n: usize, d: usize, dom: Domain, grid_w: usize) -> PatchSequence<f64> {
        PatchSequence {
            embeddings: Mat::from_vec(n, d, (0..n * d).map(|v| v as f64).collect()),
            positions: (0..n).map(|i| (i / grid_w, i % grid_w)).collect(),
            domains: vec![dom; n],
        }
    }

    #[test]
    fn concat_examples() {
        let src = seq(16, 4, Domain::Source, 4);
        let tgt = seq(16, 4, Domain::Target, 4).select(&[1, 3, 4, 6, 9, 10, 12, 15]);
        let c = concat_for_mae(&src, &tgt).unwrap();
        assert_eq!(c.len(), 24);
        assert!(c.domains[..16].iter().all(|&d| d == Domain::Source));
        assert!(c.domains[16..].iter().all(|&d| d == Domain::Target));
        assert!(c.positions[16..].windows(2).all(|w| w[0] < w[1]));
        let empty = seq(16, 4, Domain::Target, 4).select(&[]);
        assert_eq!(concat_for_mae(&src, &empty).unwrap(), src);
        assert!(concat_for_mae(&src, &seq(2, 3, Domain::Target, 4)).is_err());
    }

    #[test]
    fn zero_image_gives_positional_table() {
        let g = PatchGrid::new(32, 32, 16).unwrap();
        let img = Mat::<f64>::zeros(32 * 32, 2);
        let w = Mat::filled(16 * 16 * 2, 3, 0.5);
        let b = Mat::zeros(1, 3);
        let pos = Mat::from_vec(4, 3, (0..12).map(|v| v as f64).collect());
        let s = patchify(&img, 32, 32, &g, &w, &b, &pos, Domain::Source).unwrap();
        assert_eq!(s.embeddings, pos);
    }

    #[test]
    fn patch_gather_is_raster_bijection() {
        let g = PatchGrid::new(8, 12, 4).unwrap();
        let idx = g.patch_gather(12, 1);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..96).collect::<Vec<u32>>());
        // first element of patch (1, 2) is pixel (4, 8)
        let row = g.index(1, 2);
        assert_eq!(idx[row * 16], (4 * 12 + 8) as u32);
        for id in 0..g.n_patches() {
            let (r, c) = g.position(id);
            assert_eq!(g.index(r, c), id);
        }
    }
}
