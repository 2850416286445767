//! Pattern-specialized inner loops. Every center-containing 4-entry pattern has
//! its own monomorphized routine with the tap offsets fixed at compile time.

/// Geometry of one output tile against its input source (the input plane or a
/// tile buffer).
#[derive(Debug, Clone, Copy)]
pub(super) struct TileGeom {
    pub th: usize,
    pub tw: usize,
    pub uw: usize,
    pub stride: usize,
    pub src_origin: usize,
    pub src_pitch: usize,
    pub acc_origin: usize,
    pub acc_pitch: usize,
}

/// Accumulates one kernel over a tile; returns the number of source reads.
pub(super) type Routine = fn(&TileGeom, &mut [f64], &[f32], &[f32]) -> u64;

fn pattern_routine<const A: usize, const B: usize, const C: usize, const D: usize>(
    g: &TileGeom,
    acc: &mut [f64],
    src: &[f32],
    w: &[f32],
) -> u64 {
    let p = g.src_pitch;
    let off = [
        A / 3 * p + A % 3,
        B / 3 * p + B % 3,
        C / 3 * p + C % 3,
        D / 3 * p + D % 3,
    ];
    let w = [w[0] as f64, w[1] as f64, w[2] as f64, w[3] as f64];
    let mut loads = 0;
    for y in 0..g.th {
        let srow = g.src_origin + y * g.stride * p;
        let arow = g.acc_origin + y * g.acc_pitch;
        for xs in (0..g.tw).step_by(g.uw) {
            for x in xs..(xs + g.uw).min(g.tw) {
                let b = srow + x * g.stride;
                acc[arow + x] += w[0] * src[b + off[0]] as f64
                    + w[1] * src[b + off[1]] as f64
                    + w[2] * src[b + off[2]] as f64
                    + w[3] * src[b + off[3]] as f64;
                loads += 4;
            }
        }
    }
    loads
}

/// Full 3x3 window with no pattern knowledge; `w` holds nine weights.
pub(super) fn generic_routine(g: &TileGeom, acc: &mut [f64], src: &[f32], w: &[f32]) -> u64 {
    let p = g.src_pitch;
    let mut loads = 0;
    for y in 0..g.th {
        let srow = g.src_origin + y * g.stride * p;
        let arow = g.acc_origin + y * g.acc_pitch;
        for xs in (0..g.tw).step_by(g.uw) {
            for x in xs..(xs + g.uw).min(g.tw) {
                let b = srow + x * g.stride;
                let mut sum = 0.0;
                for (i, &wi) in w.iter().enumerate() {
                    sum += wi as f64 * src[b + i / 3 * p + i % 3] as f64;
                }
                acc[arow + x] += sum;
                loads += 9;
            }
        }
    }
    loads
}

macro_rules! routine_table {
    ($(($a:literal, $b:literal, $c:literal, $d:literal)),* $(,)?) => {
        static ROUTINES: [([usize; 4], Routine); 56] =
            [$(([$a, $b, $c, $d], pattern_routine::<$a, $b, $c, $d> as Routine)),*];
    };
}

routine_table!(
    (0, 1, 2, 4),
    (0, 1, 3, 4),
    (0, 1, 4, 5),
    (0, 1, 4, 6),
    (0, 1, 4, 7),
    (0, 1, 4, 8),
    (0, 2, 3, 4),
    (0, 2, 4, 5),
    (0, 2, 4, 6),
    (0, 2, 4, 7),
    (0, 2, 4, 8),
    (0, 3, 4, 5),
    (0, 3, 4, 6),
    (0, 3, 4, 7),
    (0, 3, 4, 8),
    (0, 4, 5, 6),
    (0, 4, 5, 7),
    (0, 4, 5, 8),
    (0, 4, 6, 7),
    (0, 4, 6, 8),
    (0, 4, 7, 8),
    (1, 2, 3, 4),
    (1, 2, 4, 5),
    (1, 2, 4, 6),
    (1, 2, 4, 7),
    (1, 2, 4, 8),
    (1, 3, 4, 5),
    (1, 3, 4, 6),
    (1, 3, 4, 7),
    (1, 3, 4, 8),
    (1, 4, 5, 6),
    (1, 4, 5, 7),
    (1, 4, 5, 8),
    (1, 4, 6, 7),
    (1, 4, 6, 8),
    (1, 4, 7, 8),
    (2, 3, 4, 5),
    (2, 3, 4, 6),
    (2, 3, 4, 7),
    (2, 3, 4, 8),
    (2, 4, 5, 6),
    (2, 4, 5, 7),
    (2, 4, 5, 8),
    (2, 4, 6, 7),
    (2, 4, 6, 8),
    (2, 4, 7, 8),
    (3, 4, 5, 6),
    (3, 4, 5, 7),
    (3, 4, 5, 8),
    (3, 4, 6, 7),
    (3, 4, 6, 8),
    (3, 4, 7, 8),
    (4, 5, 6, 7),
    (4, 5, 6, 8),
    (4, 5, 7, 8),
    (4, 6, 7, 8),
);

/// Specialized routine for a pattern given by its sorted flat tap indices.
pub(super) fn routine_for(flat: [usize; 4]) -> Routine {
    let i = ROUTINES
        .binary_search_by(|(key, _)| key.cmp(&flat))
        .expect("every valid pattern has a routine");
    ROUTINES[i].1
}
