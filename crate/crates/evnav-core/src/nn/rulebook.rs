//! Execution plans for sparse convolution and pooling.
//!
//! A rulebook maps active-site indices between a layer's input and output so
//! the numeric kernels never touch the dense grid. Site lists are strictly
//! increasing row-major linear indices, as in [`crate::sparse::SparseTensor`].

use std::collections::BTreeMap;

/// Kernel tap offsets (dy, dx) in a fixed order; tap `k` corresponds to
/// kernel position (dy + 1, dx + 1).
pub const KERNEL_OFFSETS: [(i32, i32); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Rulebook for a 3x3 submanifold convolution: output sites equal input
/// sites, and tap `k` holds an (input_index, output_index) pair whenever the
/// input site sits at `KERNEL_OFFSETS[k]` from the output site.
#[derive(Debug, Clone)]
pub struct ConvRulebook {
    pub n_sites: usize,
    pub pairs: [Vec<(u32, u32)>; 9],
}

pub fn build_submanifold_rulebook(rows: usize, cols: usize, sites: &[u32]) -> ConvRulebook {
    let mut pairs: [Vec<(u32, u32)>; 9] = Default::default();
    for (oi, &lin) in sites.iter().enumerate() {
        let r = lin as usize / cols;
        let c = lin as usize % cols;
        for (k, &(dy, dx)) in KERNEL_OFFSETS.iter().enumerate() {
            let nr = r as i32 + dy;
            let nc = c as i32 + dx;
            if nr < 0 || nc < 0 || nr as usize >= rows || nc as usize >= cols {
                continue;
            }
            let nlin = (nr as usize * cols + nc as usize) as u32;
            if let Ok(ii) = sites.binary_search(&nlin) {
                pairs[k].push((ii as u32, oi as u32));
            }
        }
    }
    ConvRulebook {
        n_sites: sites.len(),
        pairs,
    }
}

/// Rulebook for a stride-2 2x2 max pool. The output grid is
/// (floor(rows/2), floor(cols/2)); an output site exists iff at least one
/// input site falls in its 2x2 receptive field. Input sites beyond the last
/// even row/column have no output site.
#[derive(Debug, Clone)]
pub struct PoolRulebook {
    pub out_rows: usize,
    pub out_cols: usize,
    /// Strictly increasing row-major output site indices.
    pub out_sites: Vec<u32>,
    /// Prefix offsets into `field_items`; field of output site `i` is
    /// `field_items[field_start[i]..field_start[i + 1]]`.
    pub field_start: Vec<u32>,
    /// Input site indices, ascending within each field.
    pub field_items: Vec<u32>,
}

pub fn build_pool_rulebook(rows: usize, cols: usize, sites: &[u32]) -> PoolRulebook {
    let out_rows = rows / 2;
    let out_cols = cols / 2;
    let mut fields: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (ii, &lin) in sites.iter().enumerate() {
        let r = lin as usize / cols;
        let c = lin as usize % cols;
        if r >= out_rows * 2 || c >= out_cols * 2 {
            continue;
        }
        let out_lin = ((r / 2) * out_cols + c / 2) as u32;
        fields.entry(out_lin).or_default().push(ii as u32);
    }
    let mut out_sites = Vec::with_capacity(fields.len());
    let mut field_start = Vec::with_capacity(fields.len() + 1);
    let mut field_items = Vec::new();
    field_start.push(0);
    for (out_lin, items) in fields {
        out_sites.push(out_lin);
        field_items.extend_from_slice(&items);
        field_start.push(field_items.len() as u32);
    }
    PoolRulebook {
        out_rows,
        out_cols,
        out_sites,
        field_start,
        field_items,
    }
}
