//! Synthetic thin-lens scene renderer.
//!
//! Scenes are a textured background plane plus up to a handful of flat
//! textured cut-outs at different depths, with the nearest one sitting
//! exactly on the focal plane. Rendering produces a matched pair: an
//! all-in-focus image and a shallow depth-of-field image where each
//! plane is blurred by its circle of confusion and composited
//! back-to-front with occlusion-aware alpha.
//!
//! Blur uses a normalized hard-edge disk kernel. Image borders are
//! renormalized by the blurred coverage of an all-ones plane, so a
//! constant image blurs to itself everywhere. The disk is separable
//! into per-row runs, which prefix sums evaluate in O(K) per pixel.

use crate::error::DataError;
use crate::rng::DetRng;

/// Thin-lens camera: blur radius in pixels for a plane at `depth`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThinLens {
    pub aperture: f64,
    pub focus_depth: f64,
}

impl ThinLens {
    /// Circle-of-confusion radius, quantized to quarter pixels so that
    /// nearby depths share blur kernels.
    pub fn coc_radius(&self, depth: f64) -> f64 {
        let r = self.aperture * (1.0 / depth - 1.0 / self.focus_depth).abs();
        (4.0 * r).round() / 4.0
    }
}

/// Hard-edge disk of a given radius, stored as per-row run half-widths.
/// Every covered cell carries the same weight and the weights sum to 1.
#[derive(Debug, Clone)]
pub struct DiskKernel {
    pub radius: f64,
    /// Rows cover dy in -half..=half.
    pub half: usize,
    /// Half-width of the run at |dy| = index.
    pub runs: Vec<usize>,
    pub weight: f64,
}

impl DiskKernel {
    pub fn new(radius: f64) -> Self {
        assert!(radius.is_finite() && radius >= 0.0, "bad radius {radius}");
        let half = radius.floor() as usize;
        let r2 = radius * radius;
        let runs: Vec<usize> = (0..=half)
            .map(|dy| ((r2 - (dy * dy) as f64).sqrt().floor()) as usize)
            .collect();
        let cells: usize = (0..=half)
            .map(|dy| 2 * runs[dy] + 1)
            .sum::<usize>()
            * 2
            - (2 * runs[0] + 1);
        DiskKernel {
            radius,
            half,
            runs,
            weight: 1.0 / cells as f64,
        }
    }

    pub fn extent(&self) -> usize {
        2 * self.half + 1
    }
}

/// Zero-padded windowed sums scaled by the full-disc weight; the
/// renormalized blur divides two of these.
fn disk_sum(img: &[f64], h: usize, w: usize, kernel: &DiskKernel) -> Vec<f64> {
    assert_eq!(img.len(), h * w);
    // per-row prefix sums, pf[y][x+1] - pf[y][x0] = sum of img[y][x0..=x]
    let mut pf = vec![0.0; h * (w + 1)];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        let dst = &mut pf[y * (w + 1)..(y + 1) * (w + 1)];
        for (x, &v) in row.iter().enumerate() {
            dst[x + 1] = dst[x] + v;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let dy_lo = -(kernel.half.min(y) as isize);
        let dy_hi = kernel.half.min(h - 1 - y) as isize;
        for x in 0..w {
            let mut acc = 0.0;
            for dy in dy_lo..=dy_hi {
                let run = kernel.runs[dy.unsigned_abs()];
                let lo = x.saturating_sub(run);
                let hi = (x + run).min(w - 1);
                let row = (y as isize + dy) as usize * (w + 1);
                acc += pf[row + hi + 1] - pf[row + lo];
            }
            out[y * w + x] = acc * kernel.weight;
        }
    }
    out
}

/// Disk blur of one plane. Partial kernels at the borders renormalize
/// over the cells that fall inside the image, so flat fields stay flat
/// right up to the edge.
pub fn disk_blur(img: &[f64], h: usize, w: usize, kernel: &DiskKernel) -> Vec<f64> {
    if kernel.extent() == 1 {
        assert_eq!(img.len(), h * w);
        return img.to_vec();
    }
    let coverage = disk_sum(&vec![1.0; h * w], h, w, kernel);
    disk_sum(img, h, w, kernel)
        .iter()
        .zip(&coverage)
        .map(|(&b, &c)| b / c)
        .collect()
}

/// The same border-renormalized blur with the coverage plane computed
/// once and reused across channels.
#[derive(Debug)]
pub struct PlaneBlur {
    kernel: DiskKernel,
    coverage: Vec<f64>,
    h: usize,
    w: usize,
}

impl PlaneBlur {
    pub fn new(kernel: DiskKernel, h: usize, w: usize) -> Result<Self, DataError> {
        let extent = kernel.extent();
        if extent > h || extent > w {
            return Err(DataError::KernelExceedsImage {
                radius: kernel.radius,
                kernel: extent,
                extent: h.min(w),
            });
        }
        let coverage = if extent == 1 {
            Vec::new()
        } else {
            disk_sum(&vec![1.0; h * w], h, w, &kernel)
        };
        Ok(Self {
            kernel,
            coverage,
            h,
            w,
        })
    }

    pub fn apply(&self, img: &[f64]) -> Vec<f64> {
        if self.kernel.extent() == 1 {
            assert_eq!(img.len(), self.h * self.w);
            return img.to_vec();
        }
        disk_sum(img, self.h, self.w, &self.kernel)
            .iter()
            .zip(&self.coverage)
            .map(|(&b, &c)| b / c)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    /// Center and radii in normalized [0, 1] image coordinates.
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    /// Simple polygon, vertices in normalized coordinates.
    Polygon { pts: Vec<(f64, f64)> },
}

impl Mask {
    /// Binary coverage plane at the given raster size.
    pub fn alpha(&self, size: usize) -> Vec<f64> {
        let mut out = vec![0.0; size * size];
        for y in 0..size {
            let py = (y as f64 + 0.5) / size as f64;
            for x in 0..size {
                let px = (x as f64 + 0.5) / size as f64;
                if self.contains(px, py) {
                    out[y * size + x] = 1.0;
                }
            }
        }
        out
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        match self {
            Mask::Ellipse { cx, cy, rx, ry } => {
                let dx = (px - cx) / rx;
                let dy = (py - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Mask::Polygon { pts } => {
                // even-odd ray cast toward +x
                let mut inside = false;
                for i in 0..pts.len() {
                    let (x1, y1) = pts[i];
                    let (x2, y2) = pts[(i + 1) % pts.len()];
                    if (y1 > py) != (y2 > py) {
                        let xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1);
                        if px < xint {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Flat([f64; 3]),
    /// Smooth value noise modulating a base color.
    Noise {
        seed: u64,
        cells: usize,
        base: [f64; 3],
        amp: f64,
    },
    /// Smooth base field plus fine speckle. Out-of-focus surfaces use
    /// this: the speckle survives the capture downsample but averages
    /// away under a defocus disk, which is what separates the blurred
    /// target from a naively upscaled input.
    Detail {
        seed: u64,
        base_cells: usize,
        detail_cells: usize,
        base: [f64; 3],
        base_amp: f64,
        detail_amp: f64,
    },
}

impl Texture {
    /// Three [0, 1] channel planes at the given raster size.
    pub fn planes(&self, size: usize) -> [Vec<f64>; 3] {
        match self {
            Texture::Flat(c) => [
                vec![c[0]; size * size],
                vec![c[1]; size * size],
                vec![c[2]; size * size],
            ],
            Texture::Noise {
                seed,
                cells,
                base,
                amp,
            } => {
                let n = value_noise(*seed, *cells, size);
                let chan = |b: f64| -> Vec<f64> {
                    n.iter()
                        .map(|&v| (b + amp * (v - 0.5)).clamp(0.0, 1.0))
                        .collect()
                };
                [chan(base[0]), chan(base[1]), chan(base[2])]
            }
            Texture::Detail {
                seed,
                base_cells,
                detail_cells,
                base,
                base_amp,
                detail_amp,
            } => {
                let smooth = value_noise(*seed, *base_cells, size);
                let fine = value_noise(seed ^ 0x9E37_79B9_7F4A_7C15, *detail_cells, size);
                let chan = |b: f64| -> Vec<f64> {
                    smooth
                        .iter()
                        .zip(&fine)
                        .map(|(&s, &f)| {
                            (b + base_amp * (s - 0.5) + detail_amp * (f - 0.5)).clamp(0.0, 1.0)
                        })
                        .collect()
                };
                [chan(base[0]), chan(base[1]), chan(base[2])]
            }
        }
    }
}

/// Bilinear value noise in [0, 1] with smoothstep interpolation.
fn value_noise(seed: u64, cells: usize, size: usize) -> Vec<f64> {
    let cells = cells.max(1);
    let g = cells + 1;
    let mut rng = DetRng::new(seed);
    let grid: Vec<f64> = (0..g * g).map(|_| rng.unit()).collect();
    let mut out = Vec::with_capacity(size * size);
    let scale = cells as f64 / size as f64;
    for y in 0..size {
        let fy = (y as f64 + 0.5) * scale;
        let iy = (fy as usize).min(cells - 1);
        let ty = fy - iy as f64;
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..size {
            let fx = (x as f64 + 0.5) * scale;
            let ix = (fx as usize).min(cells - 1);
            let tx = fx - ix as f64;
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let v00 = grid[iy * g + ix];
            let v01 = grid[iy * g + ix + 1];
            let v10 = grid[(iy + 1) * g + ix];
            let v11 = grid[(iy + 1) * g + ix + 1];
            let top = v00 + (v01 - v00) * sx;
            let bot = v10 + (v11 - v10) * sx;
            out.push(top + (bot - top) * sy);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub depth: f64,
    pub mask: Mask,
    pub texture: Texture,
}

/// A renderable scene. Layers are ordered far to near and the nearest
/// layer is the subject, sitting exactly on the focal plane when the
/// scene comes from [`SceneSpec::sample`]. Scenes with no layers are
/// valid: they render the bare background.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub background: Texture,
    pub background_depth: f64,
    pub layers: Vec<Layer>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.background_depth > 0.0) || !self.background_depth.is_finite() {
            return Err(DataError::SceneInvalid(format!(
                "background depth {} must be positive",
                self.background_depth
            )));
        }
        let mut prev = self.background_depth;
        for (i, layer) in self.layers.iter().enumerate() {
            if !(layer.depth > 0.0) || !layer.depth.is_finite() {
                return Err(DataError::SceneInvalid(format!(
                    "layer {i} depth {} must be positive",
                    layer.depth
                )));
            }
            if layer.depth >= prev {
                return Err(DataError::SceneInvalid(format!(
                    "layer {i} at depth {} is not strictly nearer than {prev}",
                    layer.depth
                )));
            }
            prev = layer.depth;
            match &layer.mask {
                Mask::Ellipse { rx, ry, .. } => {
                    if !(*rx > 0.0 && *ry > 0.0) {
                        return Err(DataError::SceneInvalid(format!(
                            "layer {i} ellipse radii must be positive"
                        )));
                    }
                }
                Mask::Polygon { pts } => {
                    if pts.len() < 3 {
                        return Err(DataError::SceneInvalid(format!(
                            "layer {i} polygon needs at least 3 vertices"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn subject(&self) -> Option<&Layer> {
        self.layers.last()
    }

    /// Draws a random scene: speckled background far away, up to three
    /// mid-depth layers, and a smoothly textured subject on the focal
    /// plane. Everything off the focal plane carries fine detail so the
    /// defocus blur has something to destroy.
    pub fn sample(rng: &mut DetRng, focus_depth: f64, max_depth: f64) -> SceneSpec {
        let background = Texture::Detail {
            seed: rng.next_u64(),
            base_cells: 4 + rng.below(4) as usize,
            detail_cells: 34 + rng.below(12) as usize,
            base: [
                rng.uniform(0.40, 0.60),
                rng.uniform(0.40, 0.60),
                rng.uniform(0.40, 0.60),
            ],
            base_amp: rng.uniform(0.10, 0.18),
            detail_amp: rng.uniform(0.5, 0.7),
        };
        let background_depth = rng.uniform(0.6 * max_depth, max_depth);

        let mut layers = Vec::new();
        let (mid_lo, mid_hi) = (focus_depth + 0.6, 0.5 * max_depth);
        let n_mid = if mid_hi > mid_lo + 0.3 {
            rng.below(3) as usize
        } else {
            0
        };
        for slot in 0..n_mid {
            // one depth per band, nearest band last, keeps depths ordered;
            // centers scatter across quadrants so occluders rarely nest,
            // which keeps the compositing's halo exchange small
            let band = (mid_hi - mid_lo) / n_mid as f64;
            let hi = mid_hi - slot as f64 * band;
            let depth = rng.uniform(hi - 0.9 * band, hi - 0.1 * band);
            let cx = if slot & 1 == 0 {
                rng.uniform(0.40, 0.46)
            } else {
                rng.uniform(0.54, 0.60)
            };
            let cy = if slot & 2 == 0 {
                rng.uniform(0.40, 0.46)
            } else {
                rng.uniform(0.54, 0.60)
            };
            layers.push(Layer {
                depth,
                mask: sample_mask(rng, cx, cy, 0.06, 0.11),
                texture: sample_texture(rng, false),
            });
        }
        let cx = rng.uniform(0.42, 0.58);
        let cy = rng.uniform(0.42, 0.58);
        layers.push(Layer {
            depth: focus_depth,
            mask: sample_mask(rng, cx, cy, 0.08, 0.16),
            texture: sample_texture(rng, true),
        });
        SceneSpec {
            background,
            background_depth,
            layers,
        }
    }
}

fn sample_mask(rng: &mut DetRng, cx: f64, cy: f64, r_lo: f64, r_hi: f64) -> Mask {
    // callers keep centers away from the frame edge so blurred
    // coverage stays inside
    if rng.below(2) == 0 {
        Mask::Ellipse {
            cx,
            cy,
            rx: rng.uniform(r_lo, r_hi),
            ry: rng.uniform(r_lo, r_hi),
        }
    } else {
        let k = 3 + rng.below(4) as usize;
        let pts = (0..k)
            .map(|i| {
                let ang = std::f64::consts::TAU * (i as f64 + rng.uniform(-0.3, 0.3)) / k as f64;
                let r = rng.uniform(r_lo, r_hi);
                (cx + r * ang.cos(), cy + r * ang.sin())
            })
            .collect();
        Mask::Polygon { pts }
    }
}

fn sample_texture(rng: &mut DetRng, subject: bool) -> Texture {
    if subject {
        // the in-focus subject stays smooth; its texture survives to
        // the target verbatim
        let base = [
            rng.uniform(0.15, 0.85),
            rng.uniform(0.15, 0.85),
            rng.uniform(0.15, 0.85),
        ];
        return Texture::Noise {
            seed: rng.next_u64(),
            cells: 4 + rng.below(6) as usize,
            base,
            amp: rng.uniform(0.25, 0.45),
        };
    }
    Texture::Detail {
        seed: rng.next_u64(),
        base_cells: 3 + rng.below(5) as usize,
        detail_cells: 30 + rng.below(10) as usize,
        base: [
            rng.uniform(0.40, 0.60),
            rng.uniform(0.40, 0.60),
            rng.uniform(0.40, 0.60),
        ],
        base_amp: rng.uniform(0.12, 0.22),
        detail_amp: rng.uniform(0.45, 0.65),
    }
}

/// All-in-focus rasterization plus the per-pixel depth plane.
pub struct Raster {
    pub size: usize,
    /// Three channel planes in [0, 1].
    pub rgb: [Vec<f64>; 3],
    /// Depth of the frontmost surface at each pixel, in scene units.
    pub depth: Vec<f64>,
}

pub fn rasterize(scene: &SceneSpec, size: usize) -> Result<Raster, DataError> {
    scene.validate()?;
    let mut rgb = scene.background.planes(size);
    let mut depth = vec![scene.background_depth; size * size];
    for layer in &scene.layers {
        let alpha = layer.mask.alpha(size);
        let planes = layer.texture.planes(size);
        for (i, &a) in alpha.iter().enumerate() {
            if a > 0.5 {
                for ch in 0..3 {
                    rgb[ch][i] = planes[ch][i];
                }
                depth[i] = layer.depth;
            }
        }
    }
    Ok(Raster { size, rgb, depth })
}

/// Shallow depth-of-field render: each plane blurred by its circle of
/// confusion, composited back to front with blurred coverage.
pub fn bokeh(scene: &SceneSpec, lens: &ThinLens, size: usize) -> Result<[Vec<f64>; 3], DataError> {
    scene.validate()?;
    let bg_blur = PlaneBlur::new(
        DiskKernel::new(lens.coc_radius(scene.background_depth)),
        size,
        size,
    )?;
    let planes = scene.background.planes(size);
    let mut acc = [
        bg_blur.apply(&planes[0]),
        bg_blur.apply(&planes[1]),
        bg_blur.apply(&planes[2]),
    ];
    for layer in &scene.layers {
        let blur = PlaneBlur::new(DiskKernel::new(lens.coc_radius(layer.depth)), size, size)?;
        let alpha = layer.mask.alpha(size);
        let planes = layer.texture.planes(size);
        let ab = blur.apply(&alpha);
        for ch in 0..3 {
            let premult: Vec<f64> = planes[ch]
                .iter()
                .zip(&alpha)
                .map(|(&c, &a)| c * a)
                .collect();
            let cb = blur.apply(&premult);
            for ((dst, &c), &a) in acc[ch].iter_mut().zip(&cb).zip(&ab) {
                *dst = c + (1.0 - a) * *dst;
            }
        }
    }
    Ok(acc)
}
