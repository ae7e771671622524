//! Contract tests for mask synthesis: forced-count and zero-perturbation
//! cases, measured perturbation bounds, rasterization semantics, channel
//! and annotation invariants over a seeded corpus, and bit-exact
//! determinism including PNG round-trips.

use nup_core::rng::substream;
use nup_core::synth::{
    geometry, place_background_nuclei, place_glandular_nuclei, rasterize, sample_gland_layout,
    stylize_nucleus, synthesize_image, Category, GlandSpec, IntensityBand, NucleusSpec,
    SynthConfig,
};

fn desk_config() -> SynthConfig {
    SynthConfig::default()
}

#[test]
fn gland_layout_respects_count_range_and_axes() {
    let mut cfg = desk_config();
    cfg.gland_count_range = [0, 0];
    let mut rng = substream(7, "t", 0);
    assert!(sample_gland_layout(&cfg, &mut rng).unwrap().is_empty());

    cfg.gland_count_range = [3, 3];
    cfg.image_size = 128;
    let mut rng = substream(7, "t", 1);
    let glands = sample_gland_layout(&cfg, &mut rng).unwrap();
    assert_eq!(glands.len(), 3);
    for g in &glands {
        for ax in g.semi_axes {
            assert!(ax >= cfg.gland_semi_axis_range[0] && ax <= cfg.gland_semi_axis_range[1]);
        }
        assert!(g.center[0] > 0.0 && g.center[0] < 128.0);
        assert!(g.center[1] > 0.0 && g.center[1] < 128.0);
        assert!(g.deformation >= 0.0);
    }

    let mut rng_a = substream(9, "t", 2);
    let mut rng_b = substream(9, "t", 2);
    let a = sample_gland_layout(&cfg, &mut rng_a).unwrap();
    let b = sample_gland_layout(&cfg, &mut rng_b).unwrap();
    assert_eq!(a, b, "same config+seed must give identical layouts");
}

#[test]
fn glandular_placement_counts_and_zero_perturbation() {
    let mut cfg = desk_config();
    cfg.angular_step = std::f32::consts::TAU / 12.0;
    cfg.nuclei_per_angle_range = [0, 0];
    cfg.radial_perturbation = 0.0;
    let gland = GlandSpec {
        center: [32.0, 32.0],
        orientation: 0.0,
        semi_axes: [10.0, 10.0],
        deformation: 0.0,
    };
    let mut rng = substream(1, "t", 0);
    let placed = place_glandular_nuclei(&gland, &cfg, &mut rng);
    assert_eq!(placed.len(), 12, "one nucleus per polar step");
    for (c, cat) in &placed {
        assert_eq!(*cat, Category::Epithelial);
        let d = ((c[0] - 32.0).powi(2) + (c[1] - 32.0).powi(2)).sqrt();
        assert!(
            (d - 10.0).abs() < 1e-4,
            "zero perturbation on a circular gland pins distance, got {d}"
        );
    }
}

#[test]
fn glandular_radial_perturbation_is_bounded() {
    // Measured over 1000 sampled nuclei: every centre distance must land in
    // [r - delta, r + delta] on an undeformed circular gland.
    let mut cfg = desk_config();
    cfg.nuclei_per_angle_range = [0, 2];
    cfg.radial_perturbation = 1.5;
    let gland = GlandSpec {
        center: [32.0, 32.0],
        orientation: 0.3,
        semi_axes: [9.0, 9.0],
        deformation: 0.0,
    };
    let mut seen = 0usize;
    let mut round = 0u64;
    let mut min_d = f32::INFINITY;
    let mut max_d = f32::NEG_INFINITY;
    while seen < 1000 {
        let mut rng = substream(33, "perturb", round);
        for (c, _) in place_glandular_nuclei(&gland, &cfg, &mut rng) {
            let d = ((c[0] - 32.0).powi(2) + (c[1] - 32.0).powi(2)).sqrt();
            assert!(
                (7.4999..=10.5001).contains(&d),
                "distance {d} outside [r-delta, r+delta]"
            );
            min_d = min_d.min(d);
            max_d = max_d.max(d);
            seen += 1;
        }
        round += 1;
    }
    // The band should actually be exercised, not just contained.
    assert!(min_d < 8.0 && max_d > 10.0, "perturbation band unused: [{min_d}, {max_d}]");
}

#[test]
fn background_grid_pins_centres_without_jitter() {
    let mut cfg = desk_config();
    cfg.image_size = 64;
    cfg.background_grid_pitch = 32.0;
    cfg.background_grid_jitter = 0.0;
    let mut rng = substream(1, "t", 0);
    let mut centres: Vec<[f32; 2]> =
        place_background_nuclei(&cfg, &[], &mut rng).into_iter().map(|(c, _)| c).collect();
    centres.sort_by(|a, b| (a[0], a[1]).partial_cmp(&(b[0], b[1])).unwrap());
    assert_eq!(
        centres,
        vec![[16.0, 16.0], [16.0, 48.0], [48.0, 16.0], [48.0, 48.0]],
        "pitch 32 on 64x64 gives the four cell centres"
    );
}

#[test]
fn background_grid_full_exclusion_and_jitter_bound() {
    let mut cfg = desk_config();
    cfg.image_size = 64;
    cfg.background_grid_pitch = 16.0;
    cfg.background_grid_jitter = 0.0;
    // Occupied giants covering the whole image exclude everything.
    let occupied: Vec<([f32; 2], f32)> = vec![([32.0, 32.0], 64.0)];
    let mut rng = substream(1, "t", 0);
    assert!(place_background_nuclei(&cfg, &occupied, &mut rng).is_empty());

    cfg.background_grid_jitter = 3.0;
    let mut rng = substream(5, "t", 1);
    let placed = place_background_nuclei(&cfg, &[], &mut rng);
    assert!(!placed.is_empty());
    for (c, cat) in placed {
        assert_eq!(cat, Category::Other);
        let gi = ((c[0] / 16.0) - 0.5).round();
        let gj = ((c[1] / 16.0) - 0.5).round();
        let dx = (c[0] - (gi + 0.5) * 16.0).abs();
        let dy = (c[1] - (gj + 0.5) * 16.0).abs();
        assert!(dx <= 3.0001 && dy <= 3.0001, "centre strayed over jitter bound");
    }
}

#[test]
fn stylized_nucleus_has_fixed_sample_count_and_intensity() {
    let mut cfg = desk_config();
    cfg.bezier_samples = 24;
    cfg.epithelial_intensity = IntensityBand { base: 200.0, perturbation: 0.0 };
    let mut rng = substream(2, "t", 0);
    let n = stylize_nucleus([32.0, 32.0], Category::Epithelial, &cfg, &mut rng).unwrap();
    assert_eq!(n.vertices.len(), 24);
    assert!(geometry::polygon_area(&n.vertices) > 0.0);
    assert!(geometry::polygon_is_simple(&n.vertices));
    assert_eq!(n.fill_intensity, 200, "zero perturbation pins the fill intensity");
}

#[test]
fn smoothed_triangles_stay_simple() {
    // Forced 3-vertex polygons through the smoother, checked against the
    // segment-intersection oracle over many draws.
    let mut cfg = desk_config();
    cfg.polygon_vertex_range = [3, 3];
    for i in 0..200 {
        let mut rng = substream(77, "tri", i);
        let n = stylize_nucleus([32.0, 32.0], Category::Other, &cfg, &mut rng).unwrap();
        assert!(geometry::polygon_is_simple(&n.vertices), "draw {i} self-intersects");
        assert!(geometry::polygon_area(&n.vertices) > 0.0);
    }
}

fn circle_polygon(center: [f32; 2], r: f32, n: usize) -> Vec<[f32; 2]> {
    (0..n)
        .map(|i| {
            let t = i as f32 / n as f32 * std::f32::consts::TAU;
            [center[0] + r * t.cos(), center[1] + r * t.sin()]
        })
        .collect()
}

#[test]
fn rasterize_single_disk_uses_expected_channels() {
    let cfg = desk_config();
    let disk = NucleusSpec {
        center: [20.0, 20.0],
        vertices: circle_polygon([20.0, 20.0], 6.0, 32),
        category: Category::Epithelial,
        fill_intensity: 180,
    };
    let (img, instances, stats) = rasterize(&[disk], &cfg);
    assert_eq!(stats.placed, 1);
    assert_eq!(instances.len(), 1);
    let mut ch0 = 0;
    let mut ch1 = 0;
    let mut ch2 = 0;
    for i in 0..64 {
        for j in 0..64 {
            if img.pixels[[i, j, 0]] != 0 {
                ch0 += 1;
                assert_eq!(img.pixels[[i, j, 0]], 180);
            }
            if img.pixels[[i, j, 1]] != 0 {
                ch1 += 1;
            }
            if img.pixels[[i, j, 2]] != 0 {
                ch2 += 1;
                assert_eq!(img.pixels[[i, j, 2]], 255);
            }
        }
    }
    assert!(ch0 > 80, "disk interior fills ch0");
    assert_eq!(ch1, 0, "no other-class pixels");
    assert!(ch2 > 20 && ch2 < ch0, "boundary ring in ch2");
    // Boundary matches the instance mask contour exactly.
    let want = geometry::mask_boundary(&instances[0].mask, 64, 64);
    for i in 0..64 {
        for j in 0..64 {
            assert_eq!(img.pixels[[i, j, 2]] != 0, want[i * 64 + j]);
        }
    }
}

#[test]
fn rasterize_empty_list_gives_blank_image() {
    let cfg = desk_config();
    let (img, instances, stats) = rasterize(&[], &cfg);
    assert!(img.pixels.iter().all(|&v| v == 0));
    assert!(instances.is_empty());
    assert_eq!(stats.placed, 0);
}

#[test]
fn small_overlap_keeps_both_nuclei_and_union_matches_support() {
    let cfg = desk_config();
    // Two radius-6 disks whose centres are far enough apart for roughly
    // 10% overlap of either area.
    let a = NucleusSpec {
        center: [26.0, 30.0],
        vertices: circle_polygon([26.0, 30.0], 6.0, 48),
        category: Category::Epithelial,
        fill_intensity: 200,
    };
    let b = NucleusSpec {
        center: [36.0, 30.0],
        vertices: circle_polygon([36.0, 30.0], 6.0, 48),
        category: Category::Other,
        fill_intensity: 190,
    };
    let (img, instances, stats) = rasterize(&[a, b], &cfg);
    assert_eq!(stats.placed, 2, "10% overlap is under the 0.2 tolerance");
    assert_eq!(stats.dropped_overlap, 0);
    let shared = instances[0]
        .mask
        .iter()
        .zip(instances[1].mask.iter())
        .filter(|(&x, &y)| x && y)
        .count();
    let min_area = instances[0].area.min(instances[1].area);
    assert!(shared > 0, "the disks should actually overlap");
    assert!((shared as f32) <= 0.2 * min_area as f32);
    // Union of instance masks equals the nonzero support of ch0 plus ch1.
    for i in 0..64 {
        for j in 0..64 {
            let in_union = instances.iter().any(|inst| inst.mask[i * 64 + j]);
            let in_support = img.pixels[[i, j, 0]] != 0 || img.pixels[[i, j, 1]] != 0;
            assert_eq!(in_union, in_support, "mismatch at ({i},{j})");
        }
    }
}

#[test]
fn oversized_overlap_drops_later_nucleus_and_reports_it() {
    let cfg = desk_config();
    let a = NucleusSpec {
        center: [30.0, 30.0],
        vertices: circle_polygon([30.0, 30.0], 6.0, 48),
        category: Category::Epithelial,
        fill_intensity: 200,
    };
    let b = NucleusSpec {
        center: [33.0, 30.0],
        vertices: circle_polygon([33.0, 30.0], 6.0, 48),
        category: Category::Other,
        fill_intensity: 190,
    };
    let (_, instances, stats) = rasterize(&[a, b], &cfg);
    assert_eq!(instances.len(), 1, "later nucleus dropped");
    assert_eq!(stats.dropped_overlap, 1, "drop recorded, not silent");
    assert_eq!(instances[0].category, Category::Epithelial, "first nucleus kept");
}

/// Invariants over a small seeded corpus. The acceptance suite runs the
/// same checks at the thousand-image scale.
#[test]
fn corpus_invariants_hold() {
    let cfg = desk_config();
    for idx in 0..40u64 {
        let (img, ann, stats) =
            synthesize_image(&cfg, 1234, idx, &format!("img_{idx:04}")).unwrap();
        let s = cfg.image_size;
        assert_eq!(ann.instances.len(), stats.placed);

        // Tight bboxes.
        for inst in &ann.instances {
            let mut x0 = s;
            let mut y0 = s;
            let mut x1 = 0usize;
            let mut y1 = 0usize;
            for i in 0..s {
                for j in 0..s {
                    if inst.mask[i * s + j] {
                        x0 = x0.min(j);
                        y0 = y0.min(i);
                        x1 = x1.max(j);
                        y1 = y1.max(i);
                    }
                }
            }
            assert_eq!(
                inst.bbox,
                [x0 as u32, y0 as u32, (x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32]
            );
        }

        // Union of instance masks equals fill support; boundary channel
        // equals union of instance contours; pairwise overlap within
        // tolerance.
        let mut union = vec![false; s * s];
        let mut contour = vec![false; s * s];
        for inst in &ann.instances {
            for (u, &m) in union.iter_mut().zip(inst.mask.iter()) {
                *u |= m;
            }
            for (c, &b) in contour.iter_mut().zip(geometry::mask_boundary(&inst.mask, s, s).iter())
            {
                *c |= b;
            }
        }
        for i in 0..s {
            for j in 0..s {
                let support = img.pixels[[i, j, 0]] != 0 || img.pixels[[i, j, 1]] != 0;
                assert_eq!(union[i * s + j], support);
                assert_eq!(contour[i * s + j], img.pixels[[i, j, 2]] != 0);
            }
        }
        for (i, a) in ann.instances.iter().enumerate() {
            for b in ann.instances.iter().skip(i + 1) {
                let shared = a.mask.iter().zip(b.mask.iter()).filter(|(&x, &y)| x && y).count();
                assert!(
                    shared as f32 <= cfg.overlap_tolerance * a.area.min(b.area) as f32 + 1e-3,
                    "kept pair exceeds overlap tolerance"
                );
            }
        }
    }
}

#[test]
fn synthesis_is_bit_exact_across_runs_and_png_roundtrip() {
    let cfg = desk_config();
    let tmp = tempfile::tempdir().unwrap();
    for idx in [0u64, 3, 17] {
        let (img_a, ann_a, _) = synthesize_image(&cfg, 99, idx, "x").unwrap();
        let (img_b, ann_b, _) = synthesize_image(&cfg, 99, idx, "x").unwrap();
        assert_eq!(img_a, img_b, "mask image must be bit-identical");
        assert_eq!(ann_a, ann_b, "annotations must be bit-identical");

        let png = tmp.path().join(format!("{idx}.png"));
        nup_core::synth::save_mask_png(&png, &img_a).unwrap();
        let back = nup_core::synth::load_mask_png(&png).unwrap();
        assert_eq!(img_a, back, "PNG round-trip must be lossless");

        let ja = tmp.path().join(format!("{idx}.json"));
        nup_core::synth::save_annotations(&ja, &ann_a).unwrap();
        let back = nup_core::synth::load_annotations(&ja).unwrap();
        assert_eq!(ann_a.instances.len(), back.instances.len());
        for (x, y) in ann_a.instances.iter().zip(back.instances.iter()) {
            assert_eq!(x.bbox, y.bbox);
            assert_eq!(x.category, y.category);
            assert_eq!(x.mask, y.mask, "re-rasterized polygon must reproduce the mask");
        }
    }
}

#[test]
fn different_seeds_differ() {
    let cfg = desk_config();
    let (a, _, _) = synthesize_image(&cfg, 1, 0, "x").unwrap();
    let (b, _, _) = synthesize_image(&cfg, 2, 0, "x").unwrap();
    assert_ne!(a, b);
}
