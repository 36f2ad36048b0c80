//! Corpus generator: determinism, locality, separation and cardinality.

use facerestore::rng::{self, purpose};
use facerestore::synthgen::{
    self, attribute_region, AttrVector, IdentityLatent, Manifest, Renderer, ATTR_COUNT, IDENTITY_DIM,
};
use proptest::prelude::*;

fn identity(seed: u64) -> IdentityLatent {
    IdentityLatent::random(&mut rng::rng_from(rng::derive(seed, purpose::CORPUS, 0)))
}

fn binary_attrs(bits: u32) -> AttrVector {
    AttrVector::new((0..ATTR_COUNT).map(|k| ((bits >> k) & 1) as f32).collect()).unwrap()
}

#[test]
fn small_corpus_has_expected_files_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = synthgen::build_corpus(10, 1, a.path()).unwrap();
    synthgen::build_corpus(10, 1, b.path()).unwrap();
    let text = std::fs::read_to_string(&sa.manifest_path).unwrap();
    assert_eq!(text.lines().count(), 10);
    let pngs = std::fs::read_dir(a.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 20);
    assert_eq!(
        std::fs::read(a.path().join(synthgen::MANIFEST_FILE)).unwrap(),
        std::fs::read(b.path().join(synthgen::MANIFEST_FILE)).unwrap()
    );
    for i in 0..10 {
        let name = format!("tar_{i:06}.png");
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
    }
}

#[test]
fn zero_count_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    assert!(synthgen::build_corpus(0, 1, d.path()).is_err());
}

#[test]
fn edited_index_is_balanced_over_a_thousand_records() {
    let d = tempfile::tempdir().unwrap();
    let s = synthgen::build_corpus(1000, 3, d.path()).unwrap();
    let (lo, hi) = (1000 / ATTR_COUNT, 1000usize.div_ceil(ATTR_COUNT));
    // Recount from the manifest rather than trusting the summary.
    let m = Manifest::load(d.path()).unwrap();
    let mut counts = vec![0usize; ATTR_COUNT];
    for r in &m.records {
        counts[r.edited_index] += 1;
    }
    assert_eq!(counts, s.per_edited_index);
    assert!(counts.iter().all(|&c| c == lo || c == hi), "{counts:?}");
    assert_eq!(counts.iter().sum::<usize>(), 1000);
}

#[test]
fn manifest_pairs_reload_to_the_rendered_images() {
    let d = tempfile::tempdir().unwrap();
    synthgen::build_corpus(6, 9, d.path()).unwrap();
    let m = Manifest::load(d.path()).unwrap();
    for i in 0..m.len() {
        let p = m.load_pair(i).unwrap();
        p.validate().unwrap();
        let again = synthgen::sample_pair(p.seed, p.edited_index).unwrap();
        // PNG storage quantises to 8 bits.
        let err = p.src_image.zip_map(&again.src_image, |a, b| (a - b).abs()).unwrap();
        assert!(err.as_slice().iter().all(|&e| e <= 0.5 / 255.0 + 1e-6));
        assert_eq!(p.src_attrs, again.src_attrs);
        assert_eq!(p.identity, again.identity);
    }
}

#[test]
fn wrong_attribute_count_is_rejected() {
    let attrs = AttrVector::new(vec![0.0; 5]).unwrap();
    assert!(synthgen::render_face(&identity(1), &attrs).is_err());
    assert!(synthgen::sample_pair(1, ATTR_COUNT).is_err());
}

#[test]
fn distant_identities_render_visibly_differently() {
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 100 {
        let a = identity(seed);
        let b = identity(seed + 100_000);
        seed += 1;
        if a.distance(&b) < 0.5 {
            continue;
        }
        let attrs = binary_attrs((seed % 64) as u32);
        let ia = synthgen::render_face(&a, &attrs).unwrap();
        let ib = synthgen::render_face(&b, &attrs).unwrap();
        let n = ia.height() * ia.width();
        let differing = (0..ia.height())
            .flat_map(|y| (0..ia.width()).map(move |x| (y, x)))
            .filter(|&(y, x)| (0..3).any(|c| (ia.get(y, x, c) - ib.get(y, x, c)).abs() >= 0.05))
            .count();
        assert!(differing * 100 >= n, "only {differing} of {n} pixels differ");
        checked += 1;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn toggling_one_attribute_stays_inside_its_region(seed in any::<u64>(), bits in 0u32..64, k in 0..ATTR_COUNT) {
        let id = identity(seed);
        let a = binary_attrs(bits);
        let b = a.with(k, 1.0 - a.get(k));
        let r = Renderer::default();
        let ia = r.render(&id, &a).unwrap();
        let ib = r.render(&id, &b).unwrap();
        let region = attribute_region(&id, k, ia.height()).unwrap();
        for y in 0..ia.height() {
            for x in 0..ia.width() {
                if !region.contains(x, y) {
                    for c in 0..3 {
                        prop_assert_eq!(ia.get(y, x, c), ib.get(y, x, c), "pixel ({}, {}) outside region changed", x, y);
                    }
                }
            }
        }
        prop_assert_ne!(ia, ib);
    }

    #[test]
    fn pairs_differ_only_at_the_edited_index(seed in any::<u64>(), k in 0..ATTR_COUNT) {
        let p = synthgen::sample_pair(seed, k).unwrap();
        prop_assert_eq!(p.clone(), synthgen::sample_pair(seed, k).unwrap());
        for i in 0..ATTR_COUNT {
            if i == k {
                prop_assert_eq!(p.src_attrs.get(i), 1.0 - p.tar_attrs.get(i));
            } else {
                prop_assert_eq!(p.src_attrs.get(i), p.tar_attrs.get(i));
            }
        }
        prop_assert_eq!(p.identity.values().len(), IDENTITY_DIM);
        prop_assert!(p.src_image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
