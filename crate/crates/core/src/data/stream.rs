use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::RowSource;
use crate::error::{HsaeError, Result};
use crate::numerics::Matrix;
use crate::seed::derive_seed;

pub const DEFAULT_WINDOW: usize = 1_000_000;

/// Position of a stream; enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StreamCursor {
    pub epoch: u64,
    /// Rows already emitted in the current epoch.
    pub position: u64,
}

/// Endless (or epoch-bounded) stream of shuffled batches.
///
/// Each epoch walks the dataset in consecutive windows of `window` rows and
/// emits every window in a seeded random order, so the order depends only
/// on `(seed, epoch, window)`.
pub struct BatchStream<S> {
    source: S,
    batch_size: usize,
    seed: u64,
    window: usize,
    epochs: Option<u64>,
    cursor: StreamCursor,
    loaded: Option<(u64, usize, Matrix)>,
}

impl<S: RowSource> BatchStream<S> {
    pub fn new(source: S, batch_size: usize, seed: u64, epochs: Option<u64>) -> Result<Self> {
        Self::with_window(source, batch_size, seed, epochs, DEFAULT_WINDOW)
    }

    pub fn with_window(
        source: S,
        batch_size: usize,
        seed: u64,
        epochs: Option<u64>,
        window: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(HsaeError::InvalidArgument("batch_size must be >= 1".into()));
        }
        if window == 0 {
            return Err(HsaeError::InvalidArgument("shuffle window must be >= 1".into()));
        }
        if source.is_empty() {
            return Err(HsaeError::Data("cannot stream batches from an empty dataset".into()));
        }
        Ok(BatchStream {
            source,
            batch_size,
            seed,
            window,
            epochs,
            cursor: StreamCursor::default(),
            loaded: None,
        })
    }

    pub fn cursor(&self) -> StreamCursor {
        self.cursor
    }

    pub fn seek(&mut self, cursor: StreamCursor) -> Result<()> {
        if cursor.position > self.source.len() as u64 {
            return Err(HsaeError::Data(format!(
                "stream cursor {} beyond dataset of {} rows",
                cursor.position,
                self.source.len()
            )));
        }
        self.cursor = cursor;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    fn window_rows(&mut self, epoch: u64, w: usize) -> Result<&Matrix> {
        let fresh = !matches!(&self.loaded, Some((e, lw, _)) if *e == epoch && *lw == w);
        if fresh {
            let n = self.source.len();
            let start = w * self.window;
            let count = self.window.min(n - start);
            let rows = self.source.load(start, count)?;
            let mut order: Vec<usize> = (0..count).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "shuffle", &[epoch, w as u64]));
            order.shuffle(&mut rng);
            let d = rows.cols();
            let mut data = Vec::with_capacity(count * d);
            for &r in &order {
                data.extend_from_slice(rows.row(r));
            }
            self.loaded = Some((epoch, w, Matrix::from_vec(count, d, data)?));
        }
        Ok(&self.loaded.as_ref().unwrap().2)
    }

    /// Next batch; `None` once the epoch budget is spent. The final batch of
    /// a bounded stream may be short.
    pub fn next_batch(&mut self) -> Result<Option<Matrix>> {
        let n = self.source.len() as u64;
        let d = self.source.dim();
        let mut data = Vec::with_capacity(self.batch_size * d);
        let mut got = 0;
        while got < self.batch_size {
            if self.cursor.position == n {
                self.cursor.epoch += 1;
                self.cursor.position = 0;
            }
            if self.epochs.is_some_and(|e| self.cursor.epoch >= e) {
                break;
            }
            let (epoch, pos) = (self.cursor.epoch, self.cursor.position as usize);
            let w = pos / self.window;
            let offset = pos % self.window;
            let window_len = self.window_rows(epoch, w)?.rows();
            let take = (self.batch_size - got).min(window_len - offset);
            let rows = self.window_rows(epoch, w)?;
            data.extend_from_slice(&rows.as_slice()[offset * d..(offset + take) * d]);
            got += take;
            self.cursor.position += take as u64;
        }
        if got == 0 {
            return Ok(None);
        }
        Matrix::from_vec(got, d, data).map(Some)
    }
}
