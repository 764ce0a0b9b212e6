use crate::scalar::Scalar;

/// Append-only key/value store, laid out `[layer][head]` with one contiguous
/// `positions × head_dim` buffer per head. Keys are also kept column-major so
/// scores over a run of positions read contiguous memory.
#[derive(Clone, Debug)]
pub struct KvCache<S> {
    heads: usize,
    head_dim: usize,
    keys: Vec<Vec<Vec<S>>>,
    key_cols: Vec<Vec<Vec<Vec<S>>>>,
    values: Vec<Vec<Vec<S>>>,
    lens: Vec<usize>,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            heads,
            head_dim,
            keys: vec![vec![Vec::new(); heads]; layers],
            key_cols: vec![vec![vec![Vec::new(); head_dim]; heads]; layers],
            values: vec![vec![Vec::new(); heads]; layers],
            lens: vec![0; layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.lens.len()
    }

    /// Positions stored for `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.lens[layer]
    }

    pub fn is_empty(&self) -> bool {
        self.lens.iter().all(|l| *l == 0)
    }

    /// Appends full-width key and value rows (all heads concatenated).
    pub fn append(&mut self, layer: usize, k: &[S], v: &[S]) {
        let dh = self.head_dim;
        for h in 0..self.heads {
            self.keys[layer][h].extend_from_slice(&k[h * dh..(h + 1) * dh]);
            for (col, &x) in self.key_cols[layer][h]
                .iter_mut()
                .zip(&k[h * dh..(h + 1) * dh])
            {
                col.push(x);
            }
            self.values[layer][h].extend_from_slice(&v[h * dh..(h + 1) * dh]);
        }
        self.lens[layer] += 1;
    }

    #[inline]
    pub fn key(&self, layer: usize, head: usize, pos: usize) -> &[S] {
        &self.keys[layer][head][pos * self.head_dim..(pos + 1) * self.head_dim]
    }

    /// Component `c` of the head-`head` key at every stored position.
    #[inline]
    pub fn key_column(&self, layer: usize, head: usize, c: usize) -> &[S] {
        &self.key_cols[layer][head][c]
    }

    #[inline]
    pub fn value(&self, layer: usize, head: usize, pos: usize) -> &[S] {
        &self.values[layer][head][pos * self.head_dim..(pos + 1) * self.head_dim]
    }

    /// Key row for `pos` with all heads concatenated.
    pub fn key_row(&self, layer: usize, pos: usize) -> Vec<S> {
        (0..self.heads)
            .flat_map(|h| self.key(layer, h, pos).iter().copied())
            .collect()
    }
}
