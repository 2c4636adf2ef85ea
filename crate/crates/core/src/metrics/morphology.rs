//! Binary morphology on row-major `bool` masks with square structuring
//! elements. Pixels outside the image count as background.

/// Offsets covered by a `k`-wide square element, anchored at `k / 2`.
pub fn element_offsets(k: usize) -> (isize, isize) {
    let lo = -((k / 2) as isize);
    (lo, lo + k as isize - 1)
}

/// Separable running OR (dilate) or AND (erode) along one axis.
fn sweep(src: &[bool], height: usize, width: usize, k: usize, horizontal: bool, dilate: bool) -> Vec<bool> {
    let (lo, hi) = element_offsets(k);
    let mut out = vec![false; src.len()];
    let (lines, len) = if horizontal { (height, width) } else { (width, height) };
    let at = |line: usize, i: usize| if horizontal { line * width + i } else { i * width + line };
    for line in 0..lines {
        // prefix counts of set pixels along the line
        let mut prefix = vec![0usize; len + 1];
        for i in 0..len {
            prefix[i + 1] = prefix[i] + usize::from(src[at(line, i)]);
        }
        for i in 0..len {
            let a = i as isize + lo;
            let b = i as isize + hi;
            let inside_lo = a.max(0) as usize;
            let inside_hi = (b.min(len as isize - 1)).max(-1);
            let count = if inside_hi < inside_lo as isize {
                0
            } else {
                prefix[inside_hi as usize + 1] - prefix[inside_lo]
            };
            out[at(line, i)] = if dilate {
                count > 0
            } else {
                // every covered position must exist and be set
                a >= 0 && b < len as isize && count == k
            };
        }
    }
    out
}

pub fn dilate(mask: &[bool], height: usize, width: usize, k: usize) -> Vec<bool> {
    assert_eq!(mask.len(), height * width);
    if k <= 1 {
        return mask.to_vec();
    }
    let rows = sweep(mask, height, width, k, true, true);
    sweep(&rows, height, width, k, false, true)
}

pub fn erode(mask: &[bool], height: usize, width: usize, k: usize) -> Vec<bool> {
    assert_eq!(mask.len(), height * width);
    if k <= 1 {
        return mask.to_vec();
    }
    let rows = sweep(mask, height, width, k, true, false);
    sweep(&rows, height, width, k, false, false)
}

/// Exact Euclidean distance from every pixel to the nearest foreground pixel,
/// plus that pixel's raster index. Ties resolve to the lowest raster index.
/// Foreground pixels map to themselves at distance 0. Returns `None` when the
/// mask has no foreground.
pub fn distance_to_foreground(mask: &[bool], height: usize, width: usize) -> Option<(Vec<f64>, Vec<usize>)> {
    assert_eq!(mask.len(), height * width);
    if !mask.iter().any(|&m| m) {
        return None;
    }
    // Column pass: nearest foreground row in the same column, preferring the
    // one above on ties.
    let mut col_dist = vec![usize::MAX; mask.len()];
    let mut col_row = vec![0usize; mask.len()];
    for x in 0..width {
        let mut above: Option<usize> = None;
        for y in 0..height {
            if mask[y * width + x] {
                above = Some(y);
            }
            if let Some(a) = above {
                col_dist[y * width + x] = y - a;
                col_row[y * width + x] = a;
            }
        }
        let mut below: Option<usize> = None;
        for y in (0..height).rev() {
            if mask[y * width + x] {
                below = Some(y);
            }
            if let Some(b) = below {
                let d = b - y;
                if d < col_dist[y * width + x] {
                    col_dist[y * width + x] = d;
                    col_row[y * width + x] = b;
                }
            }
        }
    }
    // Row pass: choose the best column; ties go to the smaller (row, column).
    let mut dist = vec![0.0; mask.len()];
    let mut nearest = vec![0usize; mask.len()];
    for y in 0..height {
        let base = y * width;
        for x in 0..width {
            let mut best: Option<(usize, usize, usize)> = None;
            for xs in 0..width {
                let g = col_dist[base + xs];
                if g == usize::MAX {
                    continue;
                }
                let dx = x.abs_diff(xs);
                let d2 = dx * dx + g * g;
                let cand = (d2, col_row[base + xs], xs);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
            let (d2, row, col) = best.expect("foreground exists");
            dist[base + x] = (d2 as f64).sqrt();
            nearest[base + x] = row * width + col;
        }
    }
    Some((dist, nearest))
}
