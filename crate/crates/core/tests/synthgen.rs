use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vessel_synth::config::DatasetVariant;
use vessel_synth::synthgen::{
    gen_point, generate_raw_with_tree, generate_tree, in_circle, rasterize_segment, sample_branch_angle, Point,
};
use vessel_synth::{generate_raw, BinaryMask, GenerateError, GeneratorConfig, GrayImage};

fn small_config() -> GeneratorConfig {
    GeneratorConfig {
        image_size: 64,
        circle_center: [32, 32],
        circle_radius: 28.0,
        mean_length: 8.0,
        sigma_length: 2.0,
        ..GeneratorConfig::for_variant(DatasetVariant::Two)
    }
}

#[test]
fn single_segment_with_zero_variance() {
    let cfg = GeneratorConfig {
        max_nodes: 1,
        max_children: 1,
        sigma_length: 0.0,
        sigma_angle: 0.0,
        ..GeneratorConfig::for_variant(DatasetVariant::Two)
    };
    for seed in 0..20 {
        let tree = generate_tree(&cfg, seed).unwrap();
        assert_eq!(tree.edges.len(), 1);
        let root = tree.nodes[0];
        let child = tree.nodes[1];
        let turn = (child.direction - root.direction + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
            - std::f64::consts::PI;
        assert!((turn.abs() - cfg.branch_angle).abs() < 1e-12, "turn {turn}");
        assert_eq!(child.position, gen_point(root.position, child.direction, cfg.mean_length));
        let dx = f64::from(child.position.x - root.position.x);
        let dy = f64::from(child.position.y - root.position.y);
        assert!(((dx * dx + dy * dy).sqrt() - cfg.mean_length).abs() <= std::f64::consts::SQRT_2 / 2.0 + 1e-9);
    }
}

#[test]
fn branch_sign_is_a_fair_coin() {
    // P(|K - 5000| > 500) for K ~ Bin(10^4, 1/2) is below 1e-23 (Hoeffding:
    // 2 exp(-2 * 500^2 / 10^4)), so this bound never flakes.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plus = (0..10_000).filter(|_| sample_branch_angle(0.0, 0.5, 0.0, &mut rng) > 0.0).count();
    assert!((4_500..=5_500).contains(&plus), "{plus}");
}

#[test]
fn pixel_geometry_examples() {
    assert_eq!(gen_point(Point::new(100, 100), 0.0, 10.0), Point::new(110, 100));
    assert_eq!(gen_point(Point::new(100, 100), std::f64::consts::FRAC_PI_2, 10.0), Point::new(100, 110));
    assert_eq!(gen_point(Point::new(0, 0), std::f64::consts::FRAC_PI_4, 2f64.sqrt()), Point::new(1, 1));
    let c = Point::new(10, 10);
    assert!(in_circle(c, c, 3.0));
    assert!(in_circle(Point::new(13, 10), c, 3.0));
    assert!(!in_circle(Point::new(14, 10), c, 3.0));

    let mut img = GrayImage::new(32, 32);
    let mut lbl = BinaryMask::new(32, 32);
    rasterize_segment(&mut img, &mut lbl, Point::new(10, 10), Point::new(20, 10), 0.8, 1);
    assert_eq!(lbl.count_ones(), 11);
    assert_eq!(img.as_slice().iter().filter(|&&v| v == 0.8).count(), 11);

    let before = (img.clone(), lbl.clone());
    rasterize_segment(&mut img, &mut lbl, Point::new(-20, -5), Point::new(-3, -9), 0.5, 3);
    assert_eq!((img.clone(), lbl.clone()), before);

    let mut img = GrayImage::new(32, 32);
    let mut lbl = BinaryMask::new(32, 32);
    rasterize_segment(&mut img, &mut lbl, Point::new(5, 10), Point::new(15, 10), 0.3, 1);
    rasterize_segment(&mut img, &mut lbl, Point::new(10, 5), Point::new(10, 15), 0.9, 1);
    assert_eq!(img.get(10, 10), 0.9);
}

#[test]
fn mean_of_logged_lengths_concentrates() {
    let cfg = GeneratorConfig {
        max_nodes: 40,
        max_children: 3,
        ..GeneratorConfig::for_variant(DatasetVariant::Two)
    };
    let draws: Vec<f64> = (0..1000).flat_map(|s| generate_tree(&cfg, s).unwrap().trace.length_draws).collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let bound = 3.0 * cfg.sigma_length / n.sqrt();
    assert!((mean - cfg.mean_length).abs() <= bound, "mean {mean} over {n} draws, bound {bound}");
}

#[test]
fn degenerate_root_names_the_length_parameter() {
    let cfg = GeneratorConfig {
        mean_length: 500.0,
        sigma_length: 0.0,
        ..GeneratorConfig::for_variant(DatasetVariant::Two)
    };
    match generate_raw(&cfg, 1) {
        Err(GenerateError::Degenerate { parameter, .. }) => assert_eq!(parameter, "mean_length"),
        other => panic!("{other:?}"),
    }
    let bad = GeneratorConfig {
        gray_range: [0.0, 0.5],
        ..GeneratorConfig::default()
    };
    assert!(matches!(generate_raw(&bad, 1), Err(GenerateError::Config(_))));
}

fn arb_config() -> impl Strategy<Value = GeneratorConfig> {
    (1usize..40, 1usize..4, 3.0f64..12.0, 0.0f64..4.0, 0.1f64..1.5, 0.0f64..0.5, 1usize..4, 0.05f64..1.0)
        .prop_map(|(n, chd, lm, sl, am, sa, w, lo)| GeneratorConfig {
            max_nodes: n,
            max_children: chd,
            mean_length: lm,
            sigma_length: sl,
            branch_angle: am,
            sigma_angle: sa,
            line_width: w,
            gray_range: [lo, (lo + 0.3).min(1.0)],
            ..small_config()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tree_and_raster_invariants(cfg in arb_config(), seed in any::<u64>()) {
        let (sample, tree) = generate_raw_with_tree(&cfg, seed).unwrap();
        let center = cfg.center();

        // Budget and connectivity of the recorded tree.
        prop_assert!(tree.branch_count() <= cfg.max_nodes);
        for (i, node) in tree.nodes.iter().enumerate() {
            prop_assert!(tree.children_of(i) <= cfg.max_children);
            prop_assert!(in_circle(node.position, center, cfg.circle_radius));
        }
        for e in &tree.edges {
            prop_assert!(e.parent < e.child && e.child < tree.nodes.len());
            prop_assert!(e.gray >= cfg.gray_range[0] as f32 && e.gray <= cfg.gray_range[1] as f32);
        }

        // Raw image support equals the label, and stays near the circle.
        let reach = cfg.circle_radius + cfg.line_width as f64;
        for y in 0..cfg.image_size {
            for x in 0..cfg.image_size {
                let on = sample.label.get(x, y);
                prop_assert_eq!(sample.image.get(x, y) > 0.0, on);
                if on {
                    let dx = x as f64 - f64::from(center.x);
                    let dy = y as f64 - f64::from(center.y);
                    prop_assert!((dx * dx + dy * dy).sqrt() <= reach);
                }
            }
        }
        if tree.branch_count() > 1 {
            prop_assert_eq!(sample.label.dilate(1).components().1.len(), 1);
        }

        let again = generate_raw(&cfg, seed).unwrap();
        prop_assert_eq!(again, sample);
    }
}
