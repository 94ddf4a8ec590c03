use log::info;

use crate::data::{render, GroupedDataset};
use crate::model::{Cigmo, ViewDependence};
use crate::nn::{Matrix, Scalar, SeededRng};

use super::{EvalError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CategorySwap {
    pub category: usize,
    /// Images assigned to the category (its weight in the overall score).
    pub images: usize,
    pub pairs: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapReport {
    pub categories: Vec<CategorySwap>,
    /// Categories left out because they hold fewer than two images.
    pub skipped: Vec<usize>,
    /// Size-weighted mean of the per-category errors.
    pub error: f64,
}

/// Squared error of `generated` against `truth`, divided by the squared
/// deviation of `truth` from its own mean image. Predicting that mean scores 1.
pub fn normalized_error(generated: &Matrix<f64>, truth: &Matrix<f64>) -> Result<f64> {
    if generated.rows() != truth.rows() || generated.cols() != truth.cols() || truth.rows() == 0 {
        return Err(EvalError::Usage(format!(
            "generated [{}, {}] and ground truth [{}, {}] must match and be non-empty",
            generated.rows(),
            generated.cols(),
            truth.rows(),
            truth.cols()
        )));
    }
    let n = truth.rows() as f64;
    let mut mean = vec![0.0; truth.cols()];
    for row in truth.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut err = 0.0;
    let mut norm = 0.0;
    for (g, t) in generated.iter_rows().zip(truth.iter_rows()) {
        for j in 0..t.len() {
            err += (g[j] - t[j]).powi(2);
            norm += (t[j] - mean[j]).powi(2);
        }
    }
    if norm <= 0.0 {
        return Err(EvalError::Domain("ground-truth images are all identical".into()));
    }
    Ok(err / norm)
}

fn renderable(ds: &GroupedDataset) -> Result<usize> {
    if ds.render.is_none() {
        return Err(EvalError::Usage("swapping error needs a synthetic dataset with render information".into()));
    }
    if ds.channels != 1 || ds.height != ds.width {
        return Err(EvalError::Usage(format!(
            "renderer produces square grayscale images, dataset is {}x{}x{}",
            ds.channels, ds.height, ds.width
        )));
    }
    Ok(ds.height)
}

/// Images of `view_src` with the shapes of `shape_src`, all decoded in category `c`.
pub fn swap_images<T: Scalar>(
    model: &Cigmo<T>,
    ds: &GroupedDataset,
    view_src: &[usize],
    shape_src: &[usize],
    c: usize,
) -> Result<Matrix<f64>> {
    let xa: Matrix<T> = ds.images.select_rows(view_src).cast();
    let xb: Matrix<T> = ds.images.select_rows(shape_src).cast();
    let head = match model.config().view {
        ViewDependence::Universal => None,
        ViewDependence::PerCategory => Some(c),
    };
    let views = model.infer_view(&xa, head)?;
    let shapes = model.shape_codes(&xb, c)?;
    let y = Matrix::from_rows(&views.into_iter().map(|v| v.mean).collect::<Vec<_>>());
    let z = Matrix::from_rows(&shapes.into_iter().map(|s| s.mean).collect::<Vec<_>>());
    Ok(model.decode(&y, &z, c)?.cast())
}

fn ground_truth(ds: &GroupedDataset, view_src: &[usize], shape_src: &[usize], size: usize) -> Result<Matrix<f64>> {
    let info = ds.render.as_ref().expect("checked by renderable");
    let mut rows = Vec::with_capacity(view_src.len());
    for (&a, &b) in view_src.iter().zip(shape_src) {
        let id = ds.identities[b];
        let shape =
            info.shape_of(id).ok_or_else(|| EvalError::Usage(format!("no render information for identity {id}")))?;
        rows.push(render(shape, &info.views[a], size).into_iter().map(f64::from).collect::<Vec<_>>());
    }
    Ok(Matrix::from_rows(&rows))
}

/// Shape/view swapping error against re-rendered ground truth. Pairs are drawn
/// within each predicted category; the shape donor comes from another
/// identity whenever the category holds more than one.
pub fn swapping_error<T: Scalar>(
    model: &Cigmo<T>,
    ds: &GroupedDataset,
    pairs_per_category: usize,
    seed: u64,
) -> Result<SwapReport> {
    let size = renderable(ds)?;
    if pairs_per_category == 0 {
        return Err(EvalError::Usage("pairs_per_category must be at least 1".into()));
    }
    let cats = model.classify(&ds.images.cast())?;
    let root = SeededRng::new(seed);
    let mut report = SwapReport { categories: Vec::new(), skipped: Vec::new(), error: 0.0 };
    for c in 0..model.config().categories {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| cats[i] == c).collect();
        if members.len() < 2 {
            info!("swapping error skips category {c} ({} images)", members.len());
            report.skipped.push(c);
            continue;
        }
        let mut rng = root.fork(c as u64);
        let (mut va, mut sb) = (Vec::new(), Vec::new());
        for _ in 0..pairs_per_category {
            let a = members[rng.below(members.len())];
            let mut b = members[rng.below(members.len())];
            for _ in 0..16 {
                if ds.identities[b] != ds.identities[a] {
                    break;
                }
                b = members[rng.below(members.len())];
            }
            va.push(a);
            sb.push(b);
        }
        let generated = swap_images(model, ds, &va, &sb, c)?;
        let truth = ground_truth(ds, &va, &sb, size)?;
        match normalized_error(&generated, &truth) {
            Ok(error) => report.categories.push(CategorySwap { category: c, images: members.len(), pairs: va.len(), error }),
            Err(EvalError::Domain(_)) => report.skipped.push(c),
            Err(e) => return Err(e),
        }
    }
    let weight: usize = report.categories.iter().map(|s| s.images).sum();
    if weight == 0 {
        return Err(EvalError::Usage("no category holds enough images to score swaps".into()));
    }
    report.error = report.categories.iter().map(|s| s.error * s.images as f64).sum::<f64>() / weight as f64;
    Ok(report)
}

/// Grid of swaps for category `c`: `n` example images, cell `(r, k)` renders
/// image `k`'s view with image `r`'s shape, so the diagonal holds plain
/// reconstructions. The top row shows view sources and the left column shape
/// sources; the corner stays blank. Returns `[(n + 1) * height, (n + 1) * width]`.
pub fn swap_grid<T: Scalar>(model: &Cigmo<T>, ds: &GroupedDataset, c: usize, n: usize, seed: u64) -> Result<Matrix<f64>> {
    if ds.channels != 1 {
        return Err(EvalError::Usage("swap grids are drawn for grayscale images only".into()));
    }
    let cats = model.classify(&ds.images.cast())?;
    let mut members: Vec<usize> = (0..ds.len()).filter(|&i| cats[i] == c).collect();
    if members.is_empty() {
        return Err(EvalError::Usage(format!("no image is assigned to category {c}")));
    }
    SeededRng::new(seed).shuffle(&mut members);
    members.truncate(n.max(1));
    let n = members.len();
    let (h, w) = (ds.height, ds.width);
    let mut view_src = Vec::with_capacity(n * n);
    let mut shape_src = Vec::with_capacity(n * n);
    for &r in &members {
        for &k in &members {
            view_src.push(k);
            shape_src.push(r);
        }
    }
    let cells = swap_images(model, ds, &view_src, &shape_src, c)?;
    let mut canvas = Matrix::zeros((n + 1) * h, (n + 1) * w);
    let mut blit = |tr: usize, tc: usize, pixels: &[f64]| {
        for y in 0..h {
            canvas.row_mut(tr * h + y)[tc * w..(tc + 1) * w].copy_from_slice(&pixels[y * w..(y + 1) * w]);
        }
    };
    for (i, &img) in members.iter().enumerate() {
        let pixels: Vec<f64> = ds.images.row(img).iter().map(|&v| f64::from(v)).collect();
        blit(0, i + 1, &pixels);
        blit(i + 1, 0, &pixels);
    }
    for r in 0..n {
        for k in 0..n {
            blit(r + 1, k + 1, cells.row(r * n + k));
        }
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::{Arch, CigmoConfig};
    use crate::nn::Shape;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = SeededRng::new(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(0.0, 1.0)).collect())
    }

    #[test]
    fn perfect_output_scores_zero_and_the_mean_image_scores_one() {
        let truth = random(7, 9, 1);
        assert_eq!(normalized_error(&truth, &truth).unwrap(), 0.0);
        let mut mean = vec![0.0; 9];
        for row in truth.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / 7.0;
            }
        }
        let flat = Matrix::from_rows(&vec![mean; 7]);
        assert!((normalized_error(&flat, &truth).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_error_rejects_bad_input() {
        let t = random(3, 4, 2);
        assert!(matches!(normalized_error(&random(2, 4, 3), &t), Err(EvalError::Usage(_))));
        let same = Matrix::from_rows(&vec![vec![0.5; 4]; 3]);
        assert!(matches!(normalized_error(&t, &same), Err(EvalError::Domain(_))));
    }

    fn tiny_setup() -> (Cigmo<f64>, GroupedDataset) {
        let ds = generate_synthetic(&SynthConfig {
            identities_per_class: 3,
            views_per_identity: 3,
            image_size: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = CigmoConfig {
            arch: Arch::Mlp,
            image: Shape::Image { channels: 1, height: 8, width: 8 },
            hidden: 12,
            shape_dim: 3,
            view_dim: 2,
            categories: 2,
            ..CigmoConfig::default()
        };
        (Cigmo::new(cfg, 4).unwrap(), ds)
    }

    #[test]
    fn swapping_error_covers_every_populated_category() {
        let (model, ds) = tiny_setup();
        let r = swapping_error(&model, &ds, 10, 0).unwrap();
        let cats = model.classify(&ds.images.cast()).unwrap();
        for s in &r.categories {
            assert_eq!(s.images, cats.iter().filter(|&&c| c == s.category).count());
            assert_eq!(s.pairs, 10);
            assert!(s.error.is_finite() && s.error > 0.0);
        }
        assert_eq!(r.categories.len() + r.skipped.len(), 2);
        let again = swapping_error(&model, &ds, 10, 0).unwrap();
        assert_eq!(r, again);
        let mut plain = ds.clone();
        plain.render = None;
        assert!(matches!(swapping_error(&model, &plain, 10, 0), Err(EvalError::Usage(_))));
    }

    #[test]
    fn swap_grid_diagonal_is_reconstruction() {
        let (model, ds) = tiny_setup();
        let c = model.classify(&ds.images.cast()).unwrap()[0];
        let grid = swap_grid(&model, &ds, c, 3, 1).unwrap();
        let n = grid.rows() / 8 - 1;
        assert_eq!((grid.rows(), grid.cols()), ((n + 1) * 8, (n + 1) * 8));
        assert!((0..8).all(|y| grid.row(y)[..8].iter().all(|&v| v == 0.0)));
        // Recover the source image from the header column and reconstruct it directly.
        let src: Vec<f64> = (0..8).flat_map(|y| grid.row(8 + y)[..8].to_vec()).collect();
        let idx = (0..ds.len()).find(|&i| ds.images.row(i).iter().zip(&src).all(|(&a, &b)| f64::from(a) == b)).unwrap();
        let recon = swap_images(&model, &ds, &[idx], &[idx], c).unwrap();
        let cell: Vec<f64> = (0..8).flat_map(|y| grid.row(8 + y)[8..16].to_vec()).collect();
        for (a, b) in cell.iter().zip(recon.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
