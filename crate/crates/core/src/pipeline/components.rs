//! 6-connected component labelling of binary volumes.

use crate::volume::LabelVolume;

/// Component id per voxel (0 = background, ids from 1 in raster order of
/// first voxel) and the size of each component (index `id - 1`).
pub fn label_components(m: &LabelVolume) -> (Vec<u32>, Vec<usize>) {
    let [nx, ny, nz] = m.dims();
    let g = *m.geometry();
    let mut labels = vec![0u32; g.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..g.len() {
        if m.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut visit = |j: usize| {
                if m.data()[j] == 1 && labels[j] == 0 {
                    labels[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest component (the earliest on ties); empty stays empty.
pub fn largest_component(m: &LabelVolume) -> LabelVolume {
    let (labels, sizes) = label_components(m);
    let Some(best) = sizes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map(|(i, _)| i as u32 + 1)
    else {
        return m.clone();
    };
    let data = labels.iter().map(|&l| (l == best) as u8).collect();
    LabelVolume::new(*m.geometry(), data).expect("geometry unchanged")
}
