//! Imputation baselines that turn an incomplete image into a full grid for a CNN.

use crate::error::{Error, Result};
use crate::imagegraph::IncompleteImage;
use crate::tensor::Tensor;

/// Observed values with zeros in the hole, plus a channel that is 1 at missing pixels.
pub fn zero_mask_impute(img: &IncompleteImage) -> Tensor {
    let l = img.channels();
    let mut out = Vec::with_capacity(img.missing_mask().len() * (l + 1));
    for (px, &m) in img.values().data().chunks_exact(l).zip(img.missing_mask()) {
        if m {
            out.extend(std::iter::repeat(0.0).take(l));
        } else {
            out.extend_from_slice(px);
        }
        out.push(if m { 1.0 } else { 0.0 });
    }
    Tensor::from_vec([img.height(), img.width(), l + 1], out).expect("sized")
}

/// Per-coordinate, per-channel mean of observed training values.
#[derive(Clone, Debug, Default)]
pub struct MeanStats {
    dims: Vec<usize>,
    sum: Vec<f64>,
    count: Vec<u64>,
}

impl MeanStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fit<'a>(images: impl IntoIterator<Item = &'a IncompleteImage>) -> Result<Self> {
        let mut stats = MeanStats::new();
        for img in images {
            stats.observe(img)?;
        }
        Ok(stats)
    }

    pub fn observe(&mut self, img: &IncompleteImage) -> Result<()> {
        let dims = img.values().dims();
        if self.dims.is_empty() {
            self.dims = dims.to_vec();
            self.sum = vec![0.0; img.values().numel()];
            self.count = vec![0; img.values().numel()];
        } else if self.dims != dims {
            return Err(Error::shape("MeanStats", &self.dims, dims));
        }
        let l = img.channels();
        for (p, &m) in img.missing_mask().iter().enumerate() {
            if !m {
                for c in p * l..(p + 1) * l {
                    self.sum[c] += img.values().data()[c];
                    self.count[c] += 1;
                }
            }
        }
        Ok(())
    }

    /// Mean tensor; coordinates never observed get the global observed mean.
    pub fn mean(&self) -> Result<Tensor> {
        let total: u64 = self.count.iter().sum();
        if total == 0 {
            return Err(Error::Unfitted);
        }
        let global = self.sum.iter().sum::<f64>() / total as f64;
        let data = self
            .sum
            .iter()
            .zip(&self.count)
            .map(|(&s, &n)| if n == 0 { global } else { s / n as f64 })
            .collect();
        Tensor::from_vec(self.dims.as_slice(), data)
    }

    pub fn impute(&self, img: &IncompleteImage) -> Result<Tensor> {
        let mean = self.mean()?;
        fill_missing(img, &mean)
    }
}

fn fill_missing(img: &IncompleteImage, fill: &Tensor) -> Result<Tensor> {
    if fill.dims() != img.values().dims() {
        return Err(Error::shape("impute", img.values().dims(), fill.dims()));
    }
    let l = img.channels();
    let mut out = img.values().clone();
    for (p, &m) in img.missing_mask().iter().enumerate() {
        if m {
            out.data_mut()[p * l..(p + 1) * l].copy_from_slice(&fill.data()[p * l..(p + 1) * l]);
        }
    }
    Ok(out)
}

/// 1 for every observed value of `img`, 0 inside the hole.
fn query_weights(img: &IncompleteImage) -> Vec<f64> {
    let l = img.channels();
    img.missing_mask()
        .iter()
        .flat_map(|&m| std::iter::repeat(if m { 0.0 } else { 1.0 }).take(l))
        .collect()
}

/// `sum w_i (a_i - b_i)^2`, accumulated in eight fixed lanes so it vectorizes
/// while keeping one summation order.
fn masked_sq_dist(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let n = a.len() / LANES * LANES;
    for ((x, y), m) in a[..n]
        .chunks_exact(LANES)
        .zip(b[..n].chunks_exact(LANES))
        .zip(w[..n].chunks_exact(LANES))
    {
        for j in 0..LANES {
            let d = x[j] - y[j];
            acc[j] += m[j] * d * d;
        }
    }
    let mut sum = acc.iter().sum::<f64>();
    for i in n..a.len() {
        let d = a[i] - b[i];
        sum += w[i] * d * d;
    }
    sum
}

/// Brute-force nearest-neighbor imputation over a pool of training images.
#[derive(Clone, Debug)]
pub struct KnnPool {
    images: Vec<IncompleteImage>,
    complete: Vec<bool>,
    k: usize,
    fallback: Tensor,
}

impl KnnPool {
    pub fn new(images: Vec<IncompleteImage>, k: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("k-NN pool is empty".into()));
        }
        if k == 0 || k > images.len() {
            return Err(Error::Config(format!("k = {k} with a pool of {}", images.len())));
        }
        let fallback = MeanStats::fit(&images)?.mean()?;
        let complete = images.iter().map(|im| im.missing_count() == 0).collect();
        Ok(KnnPool {
            images,
            complete,
            k,
            fallback,
        })
    }

    /// Pool of complete images.
    pub fn complete(images: &[Tensor], k: usize) -> Result<Self> {
        let images = images
            .iter()
            .map(|t| IncompleteImage::complete(t.clone()))
            .collect::<Result<_>>()?;
        Self::new(images, k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Mean squared difference over pixels observed in both images;
    /// infinite when they share no observed pixel.
    pub fn distance(query: &IncompleteImage, candidate: &IncompleteImage) -> f64 {
        let l = query.channels();
        let q = query.values().data();
        let c = candidate.values().data();
        let qm = query.missing_mask();
        let cm = candidate.missing_mask();
        let mut sum = 0.0;
        let mut shared = 0usize;
        if candidate.missing_count() == 0 {
            let w = query_weights(query);
            sum = masked_sq_dist(q, c, &w);
            shared = query.observed_count();
        } else {
            for (p, (&a, &b)) in qm.iter().zip(cm).enumerate() {
                if !a && !b {
                    for i in p * l..(p + 1) * l {
                        let d = q[i] - c[i];
                        sum += d * d;
                    }
                    shared += 1;
                }
            }
        }
        if shared == 0 {
            f64::INFINITY
        } else {
            sum / (shared * l) as f64
        }
    }

    /// Indices of the `k` closest candidates, nearest first; ties go to the lower index.
    pub fn neighbors(&self, img: &IncompleteImage) -> Result<Vec<usize>> {
        self.neighbors_excluding(img, None)
    }

    /// [`KnnPool::neighbors`] ignoring candidate `skip`, so a training image
    /// never retrieves its own clean copy.
    pub fn neighbors_excluding(&self, img: &IncompleteImage, skip: Option<usize>) -> Result<Vec<usize>> {
        if img.values().dims() != self.images[0].values().dims() {
            return Err(Error::shape("knn_impute", img.values().dims(), self.images[0].values().dims()));
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(self.k + 1);
        let w = query_weights(img);
        let observed = (img.observed_count() * img.channels()) as f64;
        for (j, cand) in self.images.iter().enumerate() {
            if Some(j) == skip {
                continue;
            }
            let d = if self.complete[j] && observed > 0.0 {
                masked_sq_dist(img.values().data(), cand.values().data(), &w) / observed
            } else {
                Self::distance(img, cand)
            };
            if best.len() == self.k && d >= best[self.k - 1].0 {
                continue;
            }
            let at = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(at, (d, j));
            best.truncate(self.k);
        }
        Ok(best.into_iter().map(|(_, j)| j).collect())
    }

    pub fn impute(&self, img: &IncompleteImage) -> Result<Tensor> {
        self.impute_excluding(img, None)
    }

    pub fn impute_excluding(&self, img: &IncompleteImage, skip: Option<usize>) -> Result<Tensor> {
        let nb = self.neighbors_excluding(img, skip)?;
        let l = img.channels();
        let mut out = img.values().clone();
        for (p, &m) in img.missing_mask().iter().enumerate() {
            if !m {
                continue;
            }
            let mut acc = vec![0.0; l];
            let mut n = 0usize;
            for &j in &nb {
                let cand = &self.images[j];
                if !cand.missing_mask()[p] {
                    for (a, v) in acc.iter_mut().zip(&cand.values().data()[p * l..(p + 1) * l]) {
                        *a += v;
                    }
                    n += 1;
                }
            }
            let dst = &mut out.data_mut()[p * l..(p + 1) * l];
            if n == 0 {
                dst.copy_from_slice(&self.fallback.data()[p * l..(p + 1) * l]);
            } else {
                for (d, a) in dst.iter_mut().zip(acc) {
                    *d = a / n as f64;
                }
            }
        }
        Ok(out)
    }
}

/// Same as [`KnnPool::impute`]; the pool carries its own `k`.
pub fn knn_impute(pool: &KnnPool, img: &IncompleteImage) -> Result<Tensor> {
    pool.impute(img)
}

pub fn mean_impute(stats: &MeanStats, img: &IncompleteImage) -> Result<Tensor> {
    stats.impute(img)
}

/// How a CNN baseline sees an incomplete image.
#[derive(Clone, Debug)]
pub enum Imputer {
    ZeroMask,
    Mean(MeanStats),
    Knn(KnnPool),
}

impl Imputer {
    pub fn impute(&self, img: &IncompleteImage) -> Result<Tensor> {
        self.impute_excluding(img, None)
    }

    /// `skip` names the k-NN pool entry holding this image's own clean copy.
    pub fn impute_excluding(&self, img: &IncompleteImage, skip: Option<usize>) -> Result<Tensor> {
        match self {
            Imputer::ZeroMask => Ok(zero_mask_impute(img)),
            Imputer::Mean(s) => s.impute(img),
            Imputer::Knn(p) => p.impute_excluding(img, skip),
        }
    }

    /// Channel count of the imputed tensor for `l`-channel images.
    pub fn output_channels(&self, l: usize) -> usize {
        match self {
            Imputer::ZeroMask => l + 1,
            _ => l,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;
    use crate::imagegraph::{apply_patch, PatchSpec};
    use crate::nn::{masked_mse, Region};

    fn random(rng: &mut Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.next_f64()).collect()).unwrap()
    }

    #[test]
    fn zero_mask_channel() {
        let mut rng = Rng::new(1);
        let x = random(&mut rng, &[28, 28, 1]);
        let full = zero_mask_impute(&IncompleteImage::complete(x.clone()).unwrap());
        assert_eq!(full.dims(), &[28, 28, 2]);
        assert!(full.data().chunks(2).zip(x.data()).all(|(p, v)| p == [*v, 0.0]));
        let img = apply_patch(&x, PatchSpec { top: 3, left: 9, size: 13 }).unwrap();
        let t = zero_mask_impute(&img);
        assert_eq!(t.data().chunks(2).map(|p| p[1]).sum::<f64>(), 169.0);
        assert!(t.data().chunks(2).filter(|p| p[1] == 1.0).all(|p| p[0] == 0.0));
    }

    #[test]
    fn mean_of_two_observations() {
        let a = IncompleteImage::complete(Tensor::full([1, 2, 1], 0.2)).unwrap();
        let b = IncompleteImage::with_missing(Tensor::full([1, 2, 1], 0.4), &[(0, 1)]).unwrap();
        let stats = MeanStats::fit([&a, &b]).unwrap();
        let m = stats.mean().unwrap();
        assert!((m.data()[0] - 0.3).abs() < 1e-15);
        assert_eq!(m.data()[1], 0.2);
        let q = IncompleteImage::with_missing(Tensor::full([1, 2, 1], 0.9), &[(0, 0)]).unwrap();
        let filled = stats.impute(&q).unwrap();
        assert!((filled.data()[0] - 0.3).abs() < 1e-15);
        assert_eq!(filled.data()[1], 0.9);
    }

    #[test]
    fn unobserved_coordinate_uses_global_mean() {
        let a = IncompleteImage::with_missing(Tensor::from_vec([1, 2, 1], vec![0.0, 0.6]).unwrap(), &[(0, 0)]).unwrap();
        let m = MeanStats::fit([&a]).unwrap().mean().unwrap();
        assert_eq!(m.data(), &[0.6, 0.6]);
        assert!(matches!(MeanStats::new().mean(), Err(Error::Unfitted)));
    }

    #[test]
    fn imputers_are_identity_on_complete_images() {
        let mut rng = Rng::new(2);
        let pool: Vec<Tensor> = (0..6).map(|_| random(&mut rng, &[4, 4, 2])).collect();
        let x = random(&mut rng, &[4, 4, 2]);
        let img = IncompleteImage::complete(x.clone()).unwrap();
        let stats = MeanStats::fit(&KnnPool::complete(&pool, 1).unwrap().images).unwrap();
        assert_eq!(stats.impute(&img).unwrap(), x);
        assert_eq!(KnnPool::complete(&pool, 3).unwrap().impute(&img).unwrap(), x);
    }

    #[test]
    fn exact_copy_in_pool_gives_perfect_fill() {
        let mut rng = Rng::new(3);
        let mut pool: Vec<Tensor> = (0..20).map(|_| random(&mut rng, &[8, 8, 1])).collect();
        let truth = pool[13].clone();
        pool.swap(13, 2);
        let img = apply_patch(&truth, PatchSpec { top: 2, left: 2, size: 4 }).unwrap();
        let filled = KnnPool::complete(&pool, 1).unwrap().impute(&img).unwrap();
        assert_eq!(masked_mse(&filled, &truth, img.missing_mask(), Region::Inside).unwrap(), 0.0);
    }

    #[test]
    fn two_candidate_hand_example() {
        // Query [[0.1, ?], [0.3, 0.4]]; candidate A = [[0.1, 0.9], [0.3, 0.5]] at
        // distance 0.01/3, candidate B = [[0.5, 0.2], [0.3, 0.4]] at 0.16/3.
        let q = IncompleteImage::with_missing(Tensor::from_vec([2, 2, 1], vec![0.1, 0.0, 0.3, 0.4]).unwrap(), &[(0, 1)]).unwrap();
        let a = Tensor::from_vec([2, 2, 1], vec![0.1, 0.9, 0.3, 0.5]).unwrap();
        let b = Tensor::from_vec([2, 2, 1], vec![0.5, 0.2, 0.3, 0.4]).unwrap();
        let pool = KnnPool::complete(&[b.clone(), a.clone()], 1).unwrap();
        assert_eq!(pool.neighbors(&q).unwrap(), vec![1]);
        assert_eq!(pool.impute(&q).unwrap().data()[1], 0.9);
        let pool = KnnPool::complete(&[a, b], 2).unwrap();
        assert!((pool.impute(&q).unwrap().data()[1] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn ties_prefer_lower_index_and_masked_candidates_are_skipped() {
        let q = IncompleteImage::with_missing(Tensor::from_vec([1, 2, 1], vec![0.5, 0.0]).unwrap(), &[(0, 1)]).unwrap();
        let same = |v: f64| Tensor::from_vec([1, 2, 1], vec![0.5, v]).unwrap();
        let pool = KnnPool::complete(&[same(0.1), same(0.2), same(0.3)], 2).unwrap();
        assert_eq!(pool.neighbors(&q).unwrap(), vec![0, 1]);
        assert_eq!(pool.neighbors_excluding(&q, Some(0)).unwrap(), vec![1, 2]);

        // The nearest candidate lacks the pixel, so only the second one fills it.
        let holed = IncompleteImage::with_missing(same(0.7), &[(0, 1)]).unwrap();
        let far = IncompleteImage::complete(Tensor::from_vec([1, 2, 1], vec![0.9, 0.25]).unwrap()).unwrap();
        let pool = KnnPool::new(vec![holed, far], 2).unwrap();
        assert_eq!(pool.impute(&q).unwrap().data()[1], 0.25);
        assert!(KnnPool::new(Vec::new(), 1).is_err());
    }

    #[test]
    fn observed_pixels_never_change() {
        let mut rng = Rng::new(4);
        let pool: Vec<Tensor> = (0..10).map(|_| random(&mut rng, &[6, 6, 1])).collect();
        let x = random(&mut rng, &[6, 6, 1]);
        let img = apply_patch(&x, PatchSpec { top: 1, left: 1, size: 3 }).unwrap();
        let knn = Imputer::Knn(KnnPool::complete(&pool, 5).unwrap());
        let mean = Imputer::Mean(MeanStats::fit(&KnnPool::complete(&pool, 1).unwrap().images).unwrap());
        for imp in [knn, mean] {
            let out = imp.impute(&img).unwrap();
            for (p, &m) in img.missing_mask().iter().enumerate() {
                if !m {
                    assert_eq!(out.data()[p], x.data()[p]);
                }
            }
        }
    }
}
