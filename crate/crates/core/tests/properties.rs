mod common;

use std::collections::BTreeSet;

use gridgraph::data::{decode_idx_images, encode_idx_images, Rng};
use gridgraph::equiv::verify_equivalence;
use gridgraph::graphconv::{GcnLayer, SgcnLayer};
use gridgraph::imagegraph::{
    apply_patch, build_graph, coord_of, scatter_to_grid, Coord, IncompleteImage, PatchSpec, PixelGraph,
};
use gridgraph::imputation::{zero_mask_impute, KnnPool, MeanStats};
use gridgraph::nn::{masked_mse, softmax_xent, Activation, BatchNorm, Region};
use gridgraph::refconv::{conv2d, ConvMask};
use gridgraph::tensor::{matmul, reduce, sum_all, Parameterized, Reduction};
use gridgraph::Tensor;
use proptest::prelude::*;

fn random(rng: &mut Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn unit(rng: &mut Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.next_f64()).collect()).unwrap()
}

#[test]
fn graph_matches_pairwise_enumeration_for_every_small_patch() {
    assert!(common::check_all_small_graphs() > 300);
}

fn holed_image(rng: &mut Rng, h: usize, w: usize, l: usize, hole: usize) -> IncompleteImage {
    let values = unit(rng, &[h, w, l]);
    if hole == 0 {
        return IncompleteImage::complete(values).unwrap();
    }
    let s = hole.min(h.min(w) - 1).max(1);
    let top = rng.index(h - s + 1);
    let left = rng.index(w - s + 1);
    apply_patch(&values, PatchSpec { top, left, size: s }).unwrap()
}

fn random_biases(layer: &mut dyn Parameterized, rng: &mut Rng) {
    layer.visit_params(&mut |name, p| {
        if name.ends_with("bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.3, 0.3));
        }
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn identity_matmul_is_exact(n in 1usize..7, m in 1usize..7, seed in any::<u64>()) {
        let x = random(&mut Rng::new(seed), &[n, m]);
        prop_assert_eq!(matmul(&Tensor::eye(n), &x).unwrap(), x);
    }

    #[test]
    fn full_reduction_is_the_sequential_sum(n in 1usize..6, m in 1usize..6, seed in any::<u64>()) {
        let x = random(&mut Rng::new(seed), &[n, m]);
        let flat = x.clone().reshape([n * m]).unwrap();
        let total = reduce(&flat, 0, Reduction::Sum).unwrap();
        let seq = x.data().iter().fold(0.0, |s, v| s + v);
        prop_assert_eq!(total.data()[0].to_bits(), seq.to_bits());
        prop_assert_eq!(sum_all(&x).to_bits(), seq.to_bits());
    }

    #[test]
    fn scatter_inverts_graph_construction(h in 2usize..9, w in 2usize..9, l in 1usize..3, hole in 0usize..5, seed in any::<u64>()) {
        let img = holed_image(&mut Rng::new(seed), h, w, l, hole);
        let g = build_graph(&img).unwrap();
        let grid = scatter_to_grid(&g, g.features(), h, w, 0.0, false).unwrap();
        let filled = zero_mask_impute(&img);
        let expected: Vec<f64> = filled.data().chunks_exact(l + 1).flat_map(|px| px[..l].to_vec()).collect();
        prop_assert_eq!(grid, Tensor::from_vec([h, w, l], expected).unwrap());
    }

    #[test]
    fn edges_come_in_opposite_pairs(h in 1usize..9, w in 1usize..9, hole in 0usize..5, seed in any::<u64>()) {
        prop_assume!(h * w > 1);
        let img = holed_image(&mut Rng::new(seed), h, w, 1, hole);
        let g = build_graph(&img).unwrap();
        let set: BTreeSet<(usize, usize, i8, i8)> =
            g.edges().iter().map(|e| (e.src, e.dst, e.offset.dx, e.offset.dy)).collect();
        for &(s, d, dx, dy) in &set {
            prop_assert!(set.contains(&(d, s, -dx, -dy)));
        }
    }

    #[test]
    fn removing_a_pixel_removes_only_its_edges(h in 2usize..8, w in 2usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let values = unit(&mut rng, &[h, w, 1]);
        let (r, c) = (rng.index(h), rng.index(w));
        let full = build_graph(&IncompleteImage::complete(values.clone()).unwrap()).unwrap();
        let cut = build_graph(&IncompleteImage::with_missing(values, &[(r, c)]).unwrap()).unwrap();
        for (i, d) in full.degrees().into_iter().enumerate() {
            let Coord { x, y } = full.coords()[i];
            let interior = x > 0 && y > 0 && x + 1 < w as i64 && y + 1 < h as i64;
            prop_assert!(!interior || d == 9);
        }
        let gone = coord_of(h, r, c);
        let pairs = |g: &PixelGraph| -> BTreeSet<(Coord, Coord)> {
            g.edges().iter().map(|e| (g.coords()[e.src], g.coords()[e.dst])).collect()
        };
        let expected: BTreeSet<_> = pairs(&full).into_iter().filter(|&(a, b)| a != gone && b != gone).collect();
        prop_assert_eq!(pairs(&cut), expected);
        prop_assert_eq!(cut.num_nodes() + 1, full.num_nodes());
        prop_assert!(cut.node_at(gone).is_none());
    }

    #[test]
    fn region_losses_recombine(h in 2usize..7, w in 2usize..7, l in 1usize..3, hole in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let img = holed_image(&mut rng, h, w, l, hole);
        let pred = unit(&mut rng, &[h, w, l]);
        let target = img.values();
        let inside = masked_mse(&pred, target, img.missing_mask(), Region::Inside).unwrap();
        let outside = masked_mse(&pred, target, img.missing_mask(), Region::Outside).unwrap();
        let none = vec![false; h * w];
        let all = masked_mse(&pred, target, &none, Region::Outside).unwrap();
        let k = img.missing_count() as f64;
        let n = (h * w) as f64;
        prop_assert!(((inside * k + outside * (n - k)) / n - all).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_nonnegative(b in 1usize..5, c in 2usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let logits = random(&mut rng, &[b, c]).map(|v| 20.0 * v);
        let labels: Vec<usize> = (0..b).map(|_| rng.index(c)).collect();
        prop_assert!(softmax_xent(&logits, &labels).unwrap().0 >= 0.0);
        let (uniform, _) = softmax_xent(&Tensor::full([b, c], 0.7), &labels).unwrap();
        prop_assert!((uniform - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn eval_batch_norm_is_a_fixed_affine_map(rows in 2usize..6, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut bn = BatchNorm::new(c);
        bn.forward(&random(&mut rng, &[rows, c]), true).unwrap();
        bn.gamma.value = random(&mut rng, &[c]);
        bn.beta.value = random(&mut rng, &[c]);
        let x = random(&mut rng, &[rows, c]);
        let y = bn.forward(&x, false).unwrap();
        prop_assert_eq!(&bn.forward(&x, false).unwrap(), &y);
        for r in 0..rows {
            for ch in 0..c {
                let scale = bn.gamma.value.data()[ch] / (bn.running_var.data()[ch] + bn.epsilon).sqrt();
                let expect = scale * (x.row(r)[ch] - bn.running_mean.data()[ch]) + bn.beta.value.data()[ch];
                prop_assert!((y.row(r)[ch] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgcn_ignores_absolute_position(h in 2usize..8, w in 2usize..8, hole in 0usize..4, dx in -50i64..50, dy in -50i64..50, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let img = holed_image(&mut rng, h, w, 2, hole);
        let g = build_graph(&img).unwrap();
        let mut layer = SgcnLayer::random(&mut rng, 2, 3, 3, Activation::Relu);
        let a = layer.forward(&g, g.features()).unwrap();
        let moved = g.translated(dx, dy);
        prop_assert_eq!(layer.forward(&moved, moved.features()).unwrap(), a);
    }

    #[test]
    fn shifted_content_gives_shifted_sgcn_output(h in 2usize..6, w in 2usize..6, r0 in 0usize..3, c0 in 0usize..3, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let small = unit(&mut rng, &[h, w, 1]);
        let (big_h, big_w) = (h + 3, w + 3);
        let embed = |r0: usize, c0: usize| {
            let mut v = vec![0.0; big_h * big_w];
            let mut missing = Vec::new();
            for r in 0..big_h {
                for c in 0..big_w {
                    if r >= r0 && r < r0 + h && c >= c0 && c < c0 + w {
                        v[r * big_w + c] = small.data()[(r - r0) * w + (c - c0)];
                    } else {
                        missing.push((r, c));
                    }
                }
            }
            build_graph(&IncompleteImage::with_missing(Tensor::from_vec([big_h, big_w, 1], v).unwrap(), &missing).unwrap()).unwrap()
        };
        let mut layer = SgcnLayer::random(&mut rng, 1, 2, 4, Activation::Relu);
        let (ga, gb) = (embed(0, 0), embed(r0, c0));
        let a = layer.forward(&ga, ga.features()).unwrap();
        let b = layer.forward(&gb, gb.features()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn node_order_permutes_outputs(h in 2usize..7, w in 2usize..7, hole in 0usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let img = holed_image(&mut rng, h, w, 2, hole);
        let g = build_graph(&img).unwrap();
        let n = g.num_nodes();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let coords = perm.iter().map(|&p| g.coords()[p]).collect();
        let feats = perm.iter().flat_map(|&p| g.features().row(p).to_vec()).collect();
        let pg = PixelGraph::from_nodes(coords, Tensor::from_vec([n, 2], feats).unwrap()).unwrap();
        let mut sgcn = SgcnLayer::random(&mut rng, 2, 3, 2, Activation::Relu);
        let mut gcn = GcnLayer::random(&mut rng, 2, 3);
        random_biases(&mut gcn, &mut rng);
        for (a, b) in [
            (sgcn.forward(&g, g.features()).unwrap(), sgcn.forward(&pg, pg.features()).unwrap()),
            (gcn.forward(&g, g.features()).unwrap(), gcn.forward(&pg, pg.features()).unwrap()),
        ] {
            for (i, &p) in perm.iter().enumerate() {
                for (x, y) in b.row(i).iter().zip(a.row(p)) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deleting_a_node_is_felt_only_nearby(h in 3usize..8, w in 3usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let values = unit(&mut rng, &[h, w, 1]);
        let (r, c) = (rng.index(h), rng.index(w));
        let full = build_graph(&IncompleteImage::complete(values.clone()).unwrap()).unwrap();
        let cut = build_graph(&IncompleteImage::with_missing(values, &[(r, c)]).unwrap()).unwrap();
        let mut layers: Vec<SgcnLayer> = (0..2).map(|i| SgcnLayer::random(&mut rng, if i == 0 { 1 } else { 3 }, 3, 2, Activation::Relu)).collect();
        let run = |layers: &mut Vec<SgcnLayer>, g: &PixelGraph| {
            let mut x = g.features().clone();
            for l in layers.iter_mut() {
                x = l.forward(g, &x).unwrap();
            }
            x
        };
        let (a, b) = (run(&mut layers, &full), run(&mut layers, &cut));
        let gone = coord_of(h, r, c);
        for (i, &coord) in cut.coords().iter().enumerate() {
            let far = (coord.x - gone.x).abs().max((coord.y - gone.y).abs()) > 2;
            if far {
                let j = full.node_at(coord).unwrap();
                prop_assert_eq!(b.row(i), a.row(j));
            }
        }
    }

    #[test]
    fn gcn_never_reads_coordinates(h in 2usize..7, w in 2usize..7, hole in 0usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let img = holed_image(&mut rng, h, w, 1, hole);
        let g = build_graph(&img).unwrap();
        // Quarter turn about the origin keeps Chebyshev adjacency.
        let turned: Vec<Coord> = g.coords().iter().map(|c| Coord { x: -c.y, y: c.x }).collect();
        let tg = PixelGraph::from_nodes(turned, g.features().clone()).unwrap();
        let mut gcn = GcnLayer::random(&mut rng, 1, 3);
        random_biases(&mut gcn, &mut rng);
        let a = gcn.forward(&g, g.features()).unwrap();
        let b = gcn.forward(&tg, tg.features()).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn convolution_is_linear(h in 1usize..7, w in 1usize..7, a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mask = ConvMask::random(&mut rng, 2, 2);
        let (x, y) = (random(&mut rng, &[h, w, 2]), random(&mut rng, &[h, w, 2]));
        let mut mix = x.map(|v| a * v);
        mix.axpy(b, &y).unwrap();
        let mut expect = conv2d(&mask, &x, 1).unwrap().map(|v| a * v);
        expect.axpy(b, &conv2d(&mask, &y, 1).unwrap()).unwrap();
        prop_assert!(conv2d(&mask, &mix, 1).unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn compiled_masks_match_convolution(h in 1usize..9, w in 1usize..9, ci in 1usize..4, co in 1usize..4, hole in 0usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        prop_assume!(h * w > 1 || hole == 0);
        let mut mask = ConvMask::random(&mut rng, ci, co);
        mask.bias.value.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        let img = holed_image(&mut rng, h, w, ci, hole);
        let report = verify_equivalence(&mask, &img, 1e-9).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn imputers_keep_observed_pixels(h in 2usize..7, w in 2usize..7, hole in 0usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let pool: Vec<Tensor> = (0..6).map(|_| unit(&mut rng, &[h, w, 1])).collect();
        let complete: Vec<IncompleteImage> = pool.iter().map(|t| IncompleteImage::complete(t.clone()).unwrap()).collect();
        let mean = MeanStats::fit(&complete).unwrap();
        let knn = KnnPool::complete(&pool, 3).unwrap();
        let img = holed_image(&mut rng, h, w, 1, hole);
        for filled in [mean.impute(&img).unwrap(), knn.impute(&img).unwrap()] {
            for (p, &m) in img.missing_mask().iter().enumerate() {
                if !m {
                    prop_assert_eq!(filled.data()[p], img.values().data()[p]);
                }
            }
        }
        let whole = IncompleteImage::complete(img.values().clone()).unwrap();
        prop_assert_eq!(&mean.impute(&whole).unwrap(), whole.values());
        prop_assert_eq!(&knn.impute(&whole).unwrap(), whole.values());
    }

    #[test]
    fn idx_bytes_round_trip(n in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let bytes: Vec<u8> = (0..n * h * w).map(|_| rng.index(256) as u8).collect();
        let mut file = vec![0, 0, 8, 3];
        for d in [n, h, w] {
            file.extend_from_slice(&(d as u32).to_be_bytes());
        }
        file.extend_from_slice(&bytes);
        let (_, _, images) = decode_idx_images(&file).unwrap();
        prop_assert!(images.iter().all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
        prop_assert_eq!(encode_idx_images(&images).unwrap(), file);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn hidden_targets_never_reach_the_gradient(top in 0usize..5, left in 0usize..5, seed in any::<u64>()) {
        prop_assert!(common::hidden_targets_leave_gradients_unchanged(seed, top, left));
    }
}
