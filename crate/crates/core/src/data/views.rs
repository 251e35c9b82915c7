//! Multi-view construction: vertical splits and the corrupted two-view
//! variant.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::idx;
use crate::data::MultiViewDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Split an `[H, W]` image into left and right halves; an odd width gives
/// the extra column to the left view. Concatenating the views restores
/// the image.
pub fn split_vertical(image: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = image.shape();
    assert_eq!(shape.len(), 2, "split_vertical wants an [H, W] image");
    let (h, w) = (shape[0], shape[1]);
    if w < 2 {
        return Err(Error::TooNarrow(w));
    }
    let w1 = w.div_ceil(2);
    let w2 = w - w1;
    let mut left = Vec::with_capacity(h * w1);
    let mut right = Vec::with_capacity(h * w2);
    for r in 0..h {
        let row = image.row(r);
        left.extend_from_slice(&row[..w1]);
        right.extend_from_slice(&row[w1..]);
    }
    Ok((Tensor::matrix(h, w1, left)?, Tensor::matrix(h, w2, right)?))
}

/// Two corrupted views of one image: view 1 has a `mask x mask` block set
/// to zero at a uniformly drawn position, view 2 adds i.i.d. uniform noise
/// on `[0, noise_max]` per pixel and truncates back to `[0, 1]`.
///
/// Draw order is fixed (mask row, mask column, then noise row-major), so a
/// seeded generator reproduces the corruption exactly.
pub fn corrupt_views(
    image: &Tensor,
    mask: usize,
    noise_max: f64,
    rng: &mut Rng,
) -> (Tensor, Tensor) {
    let shape = image.shape();
    assert_eq!(shape.len(), 2, "corrupt_views wants an [H, W] image");
    let (h, w) = (shape[0], shape[1]);
    assert!(mask <= h && mask <= w, "mask {mask} larger than image {h}x{w}");

    let r0 = rng.gen_range(0..=h - mask);
    let c0 = rng.gen_range(0..=w - mask);
    let mut occluded = image.data().to_vec();
    for r in r0..r0 + mask {
        occluded[r * w + c0..r * w + c0 + mask].fill(0.0);
    }

    let noisy: Vec<f64> = image
        .data()
        .iter()
        .map(|&p| (p + rng.gen_range(0.0..=noise_max)).clamp(0.0, 1.0))
        .collect();

    (
        Tensor::matrix(h, w, occluded).unwrap(),
        Tensor::matrix(h, w, noisy).unwrap(),
    )
}

fn flatten_rows(images: Vec<Tensor>) -> Tensor {
    let n = images.len();
    let d = images[0].len();
    let mut data = Vec::with_capacity(n * d);
    for im in images {
        data.extend_from_slice(im.data());
    }
    Tensor::matrix(n, d, data).unwrap()
}

fn split_set(set: &idx::LabeledImages, limit: Option<usize>) -> Result<MultiViewDataset> {
    let n = limit.unwrap_or(set.labels.len()).min(set.labels.len());
    let mut lefts = Vec::with_capacity(n);
    let mut rights = Vec::with_capacity(n);
    for i in 0..n {
        let image = Tensor::matrix(set.rows, set.cols, set.images.row(i).to_vec())?;
        let (l, r) = split_vertical(&image)?;
        lefts.push(l);
        rights.push(r);
    }
    MultiViewDataset::new(
        vec![flatten_rows(lefts), flatten_rows(rights)],
        set.labels[..n].to_vec(),
        10,
    )
}

/// MNIST train and test sets, each image split vertically into two views.
pub fn load_two_view_mnist(
    dir: &Path,
    limit_train: Option<usize>,
    limit_test: Option<usize>,
) -> Result<(MultiViewDataset, MultiViewDataset)> {
    let [(tri, trl), (tei, tel)] = idx::mnist_paths(dir);
    let train = idx::load_idx(&tri, &trl)?;
    let test = idx::load_idx(&tei, &tel)?;
    Ok((split_set(&train, limit_train)?, split_set(&test, limit_test)?))
}

/// Corrupted two-view dataset: pool both MNIST splits, corrupt every image
/// once at generation time, then draw disjoint train and test subsets.
pub fn build_corrupted_two_view(
    dir: &Path,
    mask: usize,
    noise_max: f64,
    train_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<(MultiViewDataset, MultiViewDataset)> {
    let [(tri, trl), (tei, tel)] = idx::mnist_paths(dir);
    let a = idx::load_idx(&tri, &trl)?;
    let b = idx::load_idx(&tei, &tel)?;
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    let total = a.labels.len() + b.labels.len();
    if train_size + test_size > total {
        return Err(Error::BadConfig(format!(
            "requested {}+{} samples from a pool of {total}",
            train_size, test_size
        )));
    }

    let mut rng = crate::rng::derived(seed, "corruption");
    let mut v1 = Vec::with_capacity(total);
    let mut v2 = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for set in [&a, &b] {
        for i in 0..set.labels.len() {
            let image = Tensor::matrix(set.rows, set.cols, set.images.row(i).to_vec())?;
            let (occluded, noisy) = corrupt_views(&image, mask, noise_max, &mut rng);
            v1.push(occluded);
            v2.push(noisy);
            labels.push(set.labels[i]);
        }
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut crate::rng::derived(seed, "corruption-split"));

    let pick = |idx: &[usize]| -> Result<MultiViewDataset> {
        let l = flatten_rows(idx.iter().map(|&i| v1[i].clone()).collect());
        let r = flatten_rows(idx.iter().map(|&i| v2[i].clone()).collect());
        MultiViewDataset::new(vec![l, r], idx.iter().map(|&i| labels[i]).collect(), 10)
    };
    let train = pick(&order[..train_size])?;
    let test = pick(&order[train_size..train_size + test_size])?;
    Ok((train, test))
}
