use std::collections::BTreeSet;

use gridgraph::data::Rng;
use gridgraph::imagegraph::{apply_patch, build_graph, coord_of, Coord, IncompleteImage, PatchSpec};
use gridgraph::nn::{masked_mse_batch, Region};
use gridgraph::tensor::Parameterized;
use gridgraph::train::{build_autoencoder, graph_batch, AutoencoderConfig};
use gridgraph::Tensor;

fn unit(rng: &mut Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.next_f64()).collect()).unwrap()
}

/// `(src coord, dst coord)` for every ordered pair of observed pixels at
/// Chebyshev distance at most one, found by scanning all pairs.
pub fn brute_force_edges(img: &IncompleteImage) -> BTreeSet<(Coord, Coord)> {
    let (h, w) = (img.height(), img.width());
    let observed: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| !img.is_missing(r, c))
        .collect();
    let mut out = BTreeSet::new();
    for &(r1, c1) in &observed {
        for &(r2, c2) in &observed {
            if r1.abs_diff(r2) <= 1 && c1.abs_diff(c2) <= 1 {
                out.insert((coord_of(h, r1, c1), coord_of(h, r2, c2)));
            }
        }
    }
    out
}

/// Every image up to 5x5 under every single square patch (and no patch),
/// checked against [`brute_force_edges`]. Returns the number of graphs built.
pub fn check_all_small_graphs() -> usize {
    let mut rng = Rng::new(11);
    let mut checked = 0;
    for h in 1..=5 {
        for w in 1..=5 {
            let values = unit(&mut rng, &[h, w, 1]);
            let mut patches = vec![None];
            for s in 1..=h.min(w) {
                for top in 0..=h - s {
                    for left in 0..=w - s {
                        patches.push(Some(PatchSpec { top, left, size: s }));
                    }
                }
            }
            for patch in patches {
                let img = match patch {
                    None => IncompleteImage::complete(values.clone()).unwrap(),
                    Some(p) => apply_patch(&values, p).unwrap(),
                };
                if img.observed_count() == 0 {
                    assert!(build_graph(&img).is_err());
                    continue;
                }
                let g = build_graph(&img).unwrap();
                let got: Vec<(Coord, Coord)> = g
                    .edges()
                    .iter()
                    .map(|e| (g.coords()[e.src], g.coords()[e.dst]))
                    .collect();
                let set: BTreeSet<_> = got.iter().copied().collect();
                assert_eq!(set.len(), got.len(), "duplicate edge in {h}x{w} {patch:?}");
                assert_eq!(set, brute_force_edges(&img), "{h}x{w} {patch:?}");
                for e in g.edges() {
                    let (a, b) = (g.coords()[e.src], g.coords()[e.dst]);
                    assert_eq!((i64::from(e.offset.dx), i64::from(e.offset.dy)), (b.x - a.x, b.y - a.y));
                }
                assert_eq!(g.num_nodes(), img.observed_count());
                for (i, &c) in g.coords().iter().enumerate() {
                    let (r, col) = ((h as i64 - 1 - c.y) as usize, c.x as usize);
                    assert_eq!(g.features().row(i), img.pixel(r, col));
                }
                checked += 1;
            }
        }
    }
    checked
}


/// Trains one step of a small autoencoder on two 8x8 images with a 3x3 hole
/// at `(top, left)`, once with the true targets and once with random values
/// inside the hole. True when the parameter gradients agree bit for bit and
/// are not all zero.
pub fn hidden_targets_leave_gradients_unchanged(seed: u64, top: usize, left: usize) -> bool {
    let mut rng = Rng::new(seed);
    let cfg = AutoencoderConfig {
        encoder_widths: vec![3, 3],
        filters: 2,
        decoder_widths: [3, 3, 3, 3],
        ..Default::default()
    };
    let mut model = build_autoencoder(&cfg, 1).unwrap();
    let values: Vec<Tensor> = (0..2).map(|_| unit(&mut rng, &[8, 8, 1])).collect();
    let imgs: Vec<IncompleteImage> = values
        .iter()
        .map(|v| apply_patch(v, PatchSpec { top, left, size: 3 }).unwrap())
        .collect();
    let batch = graph_batch(&imgs).unwrap();
    let missing: Vec<&[bool]> = imgs.iter().map(|i| i.missing_mask()).collect();
    let mut grads = Vec::new();
    for scramble in [false, true] {
        let mut target = Vec::new();
        for (v, img) in values.iter().zip(&imgs) {
            for (p, &m) in img.missing_mask().iter().enumerate() {
                target.push(if scramble && m { rng.next_f64() } else { v.data()[p] });
            }
        }
        let target = Tensor::from_vec([2, 8, 8, 1], target).unwrap();
        let pred = model.forward(&batch, true).unwrap();
        let (_, g) = masked_mse_batch(&pred, &target, &missing, Region::Outside).unwrap();
        model.zero_grads();
        model.backward(&batch, &g).unwrap();
        let mut flat = Vec::new();
        model.visit_params(&mut |_, p| flat.extend(p.grad.data().iter().map(|v| v.to_bits())));
        grads.push(flat);
    }
    grads[0].iter().any(|&b| b != 0) && grads[0] == grads[1]
}
