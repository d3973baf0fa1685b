use baris_core::rng::stream;
use baris_harness::{boundary_f, iou, Mask};
use rand::Rng;

/// Boundary pixels by definition: foreground with a background 4-neighbour
/// inside the image.
fn oracle_boundary(m: &Mask) -> Vec<(i64, i64)> {
    let at = |y: i64, x: i64| m.bits[(y as usize) * m.w + x as usize];
    let (h, w) = (m.h as i64, m.w as i64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if at(y, x)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|&(dy, dx)| (0..h).contains(&(y + dy)) && (0..w).contains(&(x + dx)) && !at(y + dy, x + dx))
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// Compares every pixel pair, no neighbourhood shortcuts.
fn oracle_bf(pred: &Mask, gt: &Mask) -> f64 {
    let (bp, bg) = (oracle_boundary(pred), oracle_boundary(gt));
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let near = |a: &(i64, i64), set: &[(i64, i64)]| {
        set.iter().any(|b| (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt() <= 1.0)
    };
    let p = bp.iter().filter(|a| near(a, &bg)).count() as f64 / bp.len() as f64;
    let r = bg.iter().filter(|a| near(a, &bp)).count() as f64 / bg.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn rect(y0: usize, y1: usize, x0: usize, x1: usize) -> Mask {
    Mask::new(8, 8, (0..64).map(|i| (y0..y1).contains(&(i / 8)) && (x0..x1).contains(&(i % 8))).collect())
}

#[test]
fn diagonal_shift_by_hand() {
    // Two 4x4 squares offset by one pixel along the diagonal: one far corner
    // of each ring sits sqrt(2) from the other ring, so P = R = 11/12.
    let gt = rect(2, 6, 1, 5);
    let pred = rect(3, 7, 2, 6);
    assert_eq!(oracle_bf(&pred, &gt), 11.0 / 12.0);
    assert!((boundary_f(&pred, &gt) - 11.0 / 12.0).abs() < 1e-15);
    assert!((iou(&pred, &gt) - 9.0 / 23.0).abs() < 1e-15);
}

#[test]
fn one_pixel_shifts_match_brute_force() {
    let mut rng = stream(3, "bf-oracle");
    for _ in 0..200 {
        let gt = Mask::new(8, 8, (0..64).map(|_| rng.random_bool(0.4)).collect());
        let (dy, dx): (i64, i64) = [(0, 1), (1, 0), (0, -1), (-1, 0), (1, 1)][rng.random_range(0..5)];
        let pred = Mask::new(
            8,
            8,
            (0..64i64)
                .map(|i| {
                    let (y, x) = (i / 8 - dy, i % 8 - dx);
                    (0..8).contains(&y) && (0..8).contains(&x) && gt.bits[(y * 8 + x) as usize]
                })
                .collect(),
        );
        let want = oracle_bf(&pred, &gt);
        assert!((boundary_f(&pred, &gt) - want).abs() < 1e-12, "shift ({dy},{dx})");
    }
}
