//! Dense NHWC feature maps in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// A batch of feature maps stored as `[batch, height, width, channels]`,
/// channels fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn full(n: usize, h: usize, w: usize, c: usize, value: f64) -> Self {
        Self { n, h, w, c, data: vec![value; n * h * w * c] }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return shape_err(format!(
                "buffer of {} values cannot hold [{n}x{h}x{w}x{c}]",
                data.len()
            ));
        }
        Ok(Self { n, h, w, c, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    /// Number of spatial positions across the whole batch.
    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn offset(&self, b: usize, y: usize, x: usize) -> usize {
        ((b * self.h + y) * self.w + x) * self.c
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.offset(b, y, x) + ch]
    }

    /// The channel vector at one spatial position.
    pub fn pixel(&self, b: usize, y: usize, x: usize) -> &[f64] {
        let o = self.offset(b, y, x);
        &self.data[o..o + self.c]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.c)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if !self.same_shape(other) {
            return shape_err(format!("add {:?} + {:?}", self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { data, ..*self })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            return shape_err(format!("add {:?} += {:?}", self.shape(), other.shape()));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return shape_err(format!("concat {:?} with {:?}", a.shape(), b.shape()));
        }
        let c = a.c + b.c;
        let mut data = Vec::with_capacity(a.pixels() * c);
        for (ra, rb) in a.rows().zip(b.rows()) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        Ok(Tensor { n: a.n, h: a.h, w: a.w, c, data })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits after `first` channels.
    pub fn split_channels(&self, first: usize) -> Result<(Tensor, Tensor)> {
        if first > self.c {
            return shape_err(format!("split at {first} of {} channels", self.c));
        }
        let second = self.c - first;
        let mut a = Vec::with_capacity(self.pixels() * first);
        let mut b = Vec::with_capacity(self.pixels() * second);
        for row in self.rows() {
            a.extend_from_slice(&row[..first]);
            b.extend_from_slice(&row[first..]);
        }
        Ok((
            Tensor { n: self.n, h: self.h, w: self.w, c: first, data: a },
            Tensor { n: self.n, h: self.h, w: self.w, c: second, data: b },
        ))
    }

    /// Stacks single images (or batches) along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let Some(first) = items.first() else {
            return shape_err("cannot stack an empty list");
        };
        let mut data = Vec::with_capacity(items.iter().map(|t| t.data.len()).sum());
        let mut n = 0;
        for t in items {
            if t.h != first.h || t.w != first.w || t.c != first.c {
                return shape_err(format!("stack {:?} with {:?}", first.shape(), t.shape()));
            }
            n += t.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { n, h: first.h, w: first.w, c: first.c, data })
    }

    /// Extracts batch element `b` as a batch of one.
    pub fn item(&self, b: usize) -> Tensor {
        let len = self.h * self.w * self.c;
        Tensor {
            n: 1,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data[b * len..(b + 1) * len].to_vec(),
        }
    }

    /// Splits along the batch axis into `[0, first)` and `[first, n)`.
    pub fn split_batch(&self, first: usize) -> Result<(Tensor, Tensor)> {
        if first > self.n {
            return shape_err(format!("cannot split {} items at {first}", self.n));
        }
        let cut = first * self.h * self.w * self.c;
        let head = Tensor { n: first, data: self.data[..cut].to_vec(), ..*self };
        let tail = Tensor { n: self.n - first, data: self.data[cut..].to_vec(), ..*self };
        Ok((head, tail))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
