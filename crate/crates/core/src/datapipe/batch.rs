use super::vocab::PAD;
use super::EncodedExample;
use crate::numkernel::{Matrix, SeededRng};

/// Padded mini-batch of framed captions with their image features.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B x L` ids padded with PAD.
    pub ids: Vec<Vec<usize>>,
    /// `B x L`; 1 for real tokens (BOS..EOS), 0 for padding.
    pub mask: Vec<Vec<f64>>,
    pub features: Matrix,
    pub image_ids: Vec<String>,
}

impl Batch {
    pub fn from_examples(examples: &[&EncodedExample]) -> Self {
        assert!(!examples.is_empty(), "empty batch");
        let len = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
        let feat_dim = examples[0].feature.len();
        let mut features = Matrix::zeros(examples.len(), feat_dim);
        let mut ids = Vec::with_capacity(examples.len());
        let mut mask = Vec::with_capacity(examples.len());
        for (r, e) in examples.iter().enumerate() {
            assert_eq!(e.feature.len(), feat_dim, "feature width differs within batch");
            features.row_mut(r).copy_from_slice(&e.feature);
            let mut row = e.ids.clone();
            row.resize(len, PAD);
            ids.push(row);
            let mut m = vec![1.0; e.ids.len()];
            m.resize(len, 0.0);
            mask.push(m);
        }
        Self {
            ids,
            mask,
            features,
            image_ids: examples.iter().map(|e| e.image_id.clone()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Column `t` of the id matrix.
    pub fn column(&self, t: usize) -> Vec<usize> {
        self.ids.iter().map(|row| row[t]).collect()
    }

    pub fn mask_column(&self, t: usize) -> Vec<f64> {
        self.mask.iter().map(|row| row[t]).collect()
    }

    /// Number of real tokens.
    pub fn token_count(&self) -> f64 {
        self.mask.iter().flatten().sum()
    }

    /// Number of predicted positions (every real token after BOS).
    pub fn target_count(&self) -> f64 {
        self.mask.iter().map(|row| row.iter().skip(1).sum::<f64>()).sum()
    }
}

/// Shuffles with a stream derived from `(seed, epoch)` and cuts batches of
/// `batch_size`; the final partial batch is kept.
pub fn batch_iter(examples: &[EncodedExample], batch_size: usize, seed: u64, epoch: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    SeededRng::derive(seed, &[0xba7c4, epoch]).shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&EncodedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::vocab::{BOS, EOS};

    fn examples(n: usize) -> Vec<EncodedExample> {
        (0..n)
            .map(|i| EncodedExample {
                image_id: format!("img{i}"),
                ids: std::iter::once(BOS)
                    .chain((0..(i % 4)).map(|k| 4 + k))
                    .chain(std::iter::once(EOS))
                    .collect(),
                feature: vec![i as f64, 1.0],
            })
            .collect()
    }

    #[test]
    fn sizes_and_last_partial_batch() {
        let b = batch_iter(&examples(10), 3, 1, 0);
        let sizes: Vec<_> = b.iter().map(Batch::size).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn mask_counts_real_tokens() {
        let ex = examples(10);
        let total: usize = ex.iter().map(|e| e.ids.len()).sum();
        let b = batch_iter(&ex, 4, 2, 5);
        let masked: f64 = b.iter().map(Batch::token_count).sum();
        assert_eq!(masked as usize, total);
        for batch in &b {
            for (row, m) in batch.ids.iter().zip(&batch.mask) {
                for (&id, &w) in row.iter().zip(m) {
                    assert_eq!(w == 0.0, id == PAD);
                }
            }
        }
    }

    #[test]
    fn order_depends_only_on_seed_and_epoch() {
        let ex = examples(20);
        assert_eq!(batch_iter(&ex, 5, 3, 1), batch_iter(&ex, 5, 3, 1));
        assert_ne!(batch_iter(&ex, 5, 3, 1), batch_iter(&ex, 5, 3, 2));
    }
}
