/// A constant row-sparse matrix, used for neighbor means, row selection and
/// scattering rows back into a larger block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows {
    cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert!(rows.iter().flatten().all(|(c, _)| *c < cols));
        SparseRows { cols, rows }
    }

    /// `rows` output rows, output row `i` averaging the input rows in `members[i]`.
    /// Rows with no members are zero.
    pub fn mean_of(cols: usize, members: &[Vec<usize>]) -> Self {
        let rows = members
            .iter()
            .map(|m| {
                let w = if m.is_empty() { 0.0 } else { 1.0 / m.len() as f64 };
                m.iter().map(|&c| (c, w)).collect()
            })
            .collect();
        SparseRows::new(cols, rows)
    }

    /// Places input row `j` at output row `targets[j]`; other rows are zero.
    pub fn scatter(out_rows: usize, targets: &[usize]) -> Self {
        let mut rows = vec![Vec::new(); out_rows];
        for (j, &t) in targets.iter().enumerate() {
            rows[t].push((j, 1.0));
        }
        SparseRows::new(targets.len(), rows)
    }

    /// Output row `i` is input row `sources[i]`.
    pub fn select(in_rows: usize, sources: &[usize]) -> Self {
        SparseRows::new(in_rows, sources.iter().map(|&s| vec![(s, 1.0)]).collect())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// `out[i, :] = Σ_j w_ij x[j, :]` with `x: [cols, width]`.
    pub(crate) fn apply(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * width];
        for (i, row) in self.rows.iter().enumerate() {
            let dst = &mut out[i * width..(i + 1) * width];
            for &(j, w) in row {
                let src = &x[j * width..(j + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// `out[j, :] = Σ_i w_ij g[i, :]`, the transpose product.
    pub(crate) fn apply_transpose(&self, g: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols * width];
        for (i, row) in self.rows.iter().enumerate() {
            let src = &g[i * width..(i + 1) * width];
            for &(j, w) in row {
                let dst = &mut out[j * width..(j + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}
