use syncvoice_core::datamodel::MelGrid;
use syncvoice_core::numcore::Grid;
use syncvoice_core::rng::rng_from_seed;
use syncvoice_core::speaker::extract_segment;

/// Clip whose bin 0 holds the frame index, so a segment reveals its start.
fn indexed_clip(frames: usize) -> MelGrid {
    MelGrid::new(Grid::from_fn(&[2, frames], |i| (i % frames) as f64)).unwrap()
}

fn chi_square(counts: &[u64], draws: u64) -> f64 {
    let expected = draws as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

#[test]
fn segment_lengths_are_uniform() {
    // T = 60: lengths on 25..=60, 36 cells.
    let clip = indexed_clip(60);
    let mut rng = rng_from_seed(21);
    let draws = 36_000;
    let mut counts = vec![0u64; 36];
    for _ in 0..draws {
        let s = extract_segment(&clip, &mut rng).unwrap();
        counts[s.frames() - 25] += 1;
        let start = s.grid().data()[0] as usize;
        assert!(start + s.frames() <= 60);
    }
    // 35 degrees of freedom, upper 0.1 % point.
    assert!(chi_square(&counts, draws) < 66.62, "{counts:?}");
}

#[test]
fn segment_starts_are_uniform_for_a_fixed_length() {
    // T = 30: length 25..=30. Among length-25 segments the start is uniform on 0..=5.
    let clip = indexed_clip(30);
    let mut rng = rng_from_seed(22);
    let mut counts = vec![0u64; 6];
    let mut n = 0;
    while n < 12_000 {
        let s = extract_segment(&clip, &mut rng).unwrap();
        if s.frames() == 25 {
            counts[s.grid().data()[0] as usize] += 1;
            n += 1;
        }
    }
    // 5 degrees of freedom, upper 0.1 % point.
    assert!(chi_square(&counts, n) < 20.52, "{counts:?}");
}

#[test]
fn long_clips_cap_the_segment() {
    let clip = indexed_clip(400);
    let mut rng = rng_from_seed(23);
    for _ in 0..2000 {
        let s = extract_segment(&clip, &mut rng).unwrap();
        assert!((25..=190).contains(&s.frames()));
    }
    assert!(extract_segment(&indexed_clip(7), &mut rng).is_err());
    assert_eq!(extract_segment(&indexed_clip(8), &mut rng).unwrap().frames(), 8);
}
