use spike2former::data::{generate, MIN_CLASS_PIXELS, NUM_CLASSES};

#[test]
fn same_seed_same_scenes() {
    assert_eq!(generate(3, 4, 32), generate(3, 4, 32));
    assert_ne!(generate(3, 2, 32), generate(4, 2, 32));
}

#[test]
fn scenes_satisfy_invariants() {
    for s in generate(11, 24, 64) {
        assert_eq!(s.image.shape(), [3, 64, 64]);
        assert_eq!(s.labels.len(), 64 * 64);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.labels.iter().all(|&l| l < NUM_CLASSES));
        let counts = s.class_pixels();
        assert!(counts[1..].iter().any(|&c| c > 0));
        for &c in &counts[1..] {
            assert!(c == 0 || c >= MIN_CLASS_PIXELS);
        }
    }
}
