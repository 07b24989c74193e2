mod common;

use std::collections::HashSet;

use ata_core::tasks::{
    generate_domain, sample_episode, sample_episode_relabeled, task_to_vector, vector_to_task, DomainSpec, ShapeKind, ShiftParams,
};
use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn episodes_are_balanced_and_reproducible(way in 1usize..6, shot in 1usize..4, q in 1usize..4, s in any::<u64>()) {
        let data = domain("p", 7, 0, 8, 7, ShiftParams::default());
        let task = sample_episode(&data, way, shot, q, s).unwrap();
        prop_assert_eq!(task.support_x.shape(), &[way * shot, 3, 8, 8][..]);
        prop_assert_eq!(task.query_x.shape(), &[way * q, 3, 8, 8][..]);
        for c in 0..way {
            prop_assert_eq!(task.support_y.iter().filter(|&&y| y == c).count(), shot);
            prop_assert_eq!(task.query_y.iter().filter(|&&y| y == c).count(), q);
        }
        prop_assert_eq!(&sample_episode(&data, way, shot, q, s).unwrap(), &task);
    }

    #[test]
    fn task_vector_round_trips(way in 1usize..5, shot in 1usize..3, q in 1usize..3, s in any::<u64>()) {
        let data = domain("p", 5, 0, 4, 5, ShiftParams::default());
        let task = sample_episode(&data, way, shot, q, s).unwrap();
        let v = task_to_vector(&task);
        prop_assert_eq!(v.data.len(), (way * (shot + q)) * (3 * 16 + 1));
        prop_assert_eq!(vector_to_task(&v).unwrap(), task);
    }

    #[test]
    fn relabeling_only_permutes_labels(s in any::<u64>(), r in any::<u64>()) {
        let data = domain("p", 6, 0, 4, 4, ShiftParams::default());
        let a = sample_episode_relabeled(&data, 4, 1, 2, s, r).unwrap();
        let b = sample_episode_relabeled(&data, 4, 1, 2, s, r.wrapping_add(1)).unwrap();
        let rows = |t: &ata_core::tasks::Task| {
            let mut v: Vec<Vec<u64>> = t.images().data().chunks(48).map(|c| c.iter().map(|x| x.to_bits()).collect()).collect();
            v.sort();
            v
        };
        prop_assert_eq!(rows(&a), rows(&b));
    }
}

#[test]
fn first_class_offsets_give_disjoint_slices() {
    let all = domain("all", 20, 0, 8, 3, ShiftParams::default());
    let head = domain("head", 12, 0, 8, 3, ShiftParams::default());
    let tail = domain("tail", 8, 12, 8, 3, ShiftParams::default());
    let head_names: HashSet<&str> = head.class_names().into_iter().collect();
    let tail_names: HashSet<&str> = tail.class_names().into_iter().collect();
    assert!(head_names.is_disjoint(&tail_names));
    assert_eq!(head.classes(), &all.classes()[..12]);
    assert_eq!(tail.classes(), &all.classes()[12..]);
}

#[test]
fn shifted_domain_keeps_class_identities() {
    let plain = domain("plain", 6, 3, 8, 2, ShiftParams::default());
    let hue = domain(
        "hue",
        6,
        3,
        8,
        2,
        ShiftParams {
            hue_rotation_deg: 120.0,
            ..Default::default()
        },
    );
    assert_eq!(plain.class_names(), hue.class_names());
    assert_ne!(plain.classes()[0].images, hue.classes()[0].images);
}

#[test]
fn every_shape_renders_distinctly() {
    let mut spec = DomainSpec::new("shapes", 1, 0);
    spec.render.image_size = 16;
    spec.render.noise_level = 0.0;
    spec.render.colour_jitter = 0.0;
    spec.render.textures.truncate(1);
    spec.render.palette.truncate(1);
    let mut seen = Vec::new();
    for shape in ShapeKind::ALL {
        spec.render.shapes = vec![shape];
        let d = generate_domain(&spec, 1).unwrap();
        let img = d.classes()[0].images[0].clone();
        assert!(img.iter().any(|&v| v > 0.5), "{shape:?} left no foreground");
        assert!(!seen.contains(&img), "{shape:?} duplicates another shape");
        seen.push(img);
    }
}

#[test]
fn combination_budget_is_enforced() {
    // 12 shapes, 3 textures, 4 colours
    assert!(DomainSpec::new("d", 144, 0).validate().is_ok());
    assert!(DomainSpec::new("d", 145, 0).validate().is_err());
    let mut spec = DomainSpec::new("d", 100, 0);
    spec.first_class = 45;
    assert!(spec.validate().is_err());
}

#[test]
fn colour_can_vary_within_a_class() {
    let mut spec = DomainSpec::new("cpi", 4, 5);
    spec.render.colour_per_class = false;
    spec.render.noise_level = 0.0;
    spec.render.colour_jitter = 0.0;
    let d = generate_domain(&spec, 12).unwrap();
    for class in d.classes() {
        assert!(class.name.ends_with("-any"), "{}", class.name);
        let max_red: HashSet<u64> = class
            .images
            .iter()
            .map(|img| img[..256].iter().copied().fold(0.0, f64::max).to_bits())
            .collect();
        assert!(max_red.len() > 1, "class {} has a single colour", class.name);
    }
    // 12 shapes x 3 textures
    spec.class_count = 37;
    assert!(spec.validate().is_err());
}
