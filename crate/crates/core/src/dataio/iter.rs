//! Deterministic shuffled batching with crop and flip augmentation.

use rand::seq::SliceRandom;
use rand::Rng;

use super::SampleRecord;
use crate::error::{Error, Result};
use crate::types::{debug_validate, FlowField, Frame, OcclusionMap, RngSeed};

/// Crops every field of a record to the window at `(y0, x0)` of size `(h, w)`.
///
/// Pixels whose ground-truth target leaves the window become occluded.
pub fn crop_record(r: &SampleRecord, y0: usize, x0: usize, h: usize, w: usize) -> SampleRecord {
    let (fh, fw) = (r.height(), r.width());
    assert!(y0 + h <= fh && x0 + w <= fw, "crop window outside the frame");
    if (y0, x0, h, w) == (0, 0, fh, fw) {
        return r.clone();
    }
    let crop_frame = |f: &Frame| {
        Frame::from_fn(h, w, f.channels(), |y, x, c| f.get(y0 + y, x0 + x, c)).with_time(f.time_tag)
    };
    let flow = r.gt_flow.as_ref().map(|f| {
        let out = FlowField::from_fn(h, w, |y, x| f.get(y0 + y, x0 + x));
        let mask = f
            .valid()
            .map(|m| (0..h * w).map(|i| m[(y0 + i / w) * fw + x0 + i % w]).collect());
        out.with_valid(mask).expect("mask sized by construction")
    });
    let occ = r.gt_occ.as_ref().map(|o| {
        let vals = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let mut v = o.get(y0 + y, x0 + x);
                if let Some(f) = &flow {
                    let (u, vv) = f.get(y, x);
                    let (tx, ty) = (x as f64 + u as f64, y as f64 + vv as f64);
                    if tx < 0.0 || ty < 0.0 || tx > (w - 1) as f64 || ty > (h - 1) as f64 {
                        v = 1.0;
                    }
                }
                v
            })
            .collect();
        OcclusionMap::new(h, w, vals).expect("sized by construction")
    });
    SampleRecord {
        id: r.id.clone(),
        frame0: crop_frame(&r.frame0),
        frame1: crop_frame(&r.frame1),
        gt_flow: flow,
        gt_occ: occ,
        motion: None,
    }
}

/// Mirrors a record left to right; horizontal flow components change sign.
pub fn flip_record(r: &SampleRecord) -> SampleRecord {
    let (h, w) = (r.height(), r.width());
    let flip_frame =
        |f: &Frame| Frame::from_fn(h, w, f.channels(), |y, x, c| f.get(y, w - 1 - x, c)).with_time(f.time_tag);
    let flow = r.gt_flow.as_ref().map(|f| {
        let out = FlowField::from_fn(h, w, |y, x| {
            let (u, v) = f.get(y, w - 1 - x);
            (-u, v)
        });
        let mask = f.valid().map(|m| (0..h * w).map(|i| m[(i / w) * w + w - 1 - i % w]).collect());
        out.with_valid(mask).expect("mask sized by construction")
    });
    let occ = r.gt_occ.as_ref().map(|o| {
        OcclusionMap::new(h, w, (0..h * w).map(|i| o.get(i / w, w - 1 - i % w)).collect())
            .expect("sized by construction")
    });
    SampleRecord {
        id: r.id.clone(),
        frame0: flip_frame(&r.frame0),
        frame1: flip_frame(&r.frame1),
        gt_flow: flow,
        gt_occ: occ,
        motion: None,
    }
}

/// Endless stream of batches.
///
/// Batch `k` is a pure function of the records, the seed and `k`: epoch
/// `k / batches_per_epoch` uses its own shuffle, and each batch draws its
/// crops and flips from its own random stream. Trailing records that do
/// not fill a batch are skipped for that epoch.
#[derive(Clone, Debug)]
pub struct DatasetIter<'a> {
    records: &'a [SampleRecord],
    batch: usize,
    seed: RngSeed,
    crop: (usize, usize),
    augment: bool,
    cursor: u64,
}

impl<'a> DatasetIter<'a> {
    pub fn new(
        records: &'a [SampleRecord],
        batch: usize,
        seed: RngSeed,
        crop: (usize, usize),
        augment: bool,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if records.len() < batch {
            return Err(Error::config(
                "batch",
                format!("batch of {batch} exceeds the {} available records", records.len()),
            ));
        }
        for r in records {
            debug_validate(r)?;
            if crop.0 > r.height() || crop.1 > r.width() {
                return Err(Error::config(
                    "crop",
                    format!(
                        "crop {}x{} is larger than record `{}` ({}x{})",
                        crop.0,
                        crop.1,
                        r.id,
                        r.height(),
                        r.width()
                    ),
                ));
            }
        }
        if crop.0 < 8 || crop.1 < 8 {
            return Err(Error::config("crop", "crops must be at least 8x8"));
        }
        Ok(Self {
            records,
            batch,
            seed,
            crop,
            augment,
            cursor: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.records.len() / self.batch
    }

    /// Index of the next batch to be emitted.
    pub fn position(&self) -> u64 {
        self.cursor
    }

    pub fn seek(&mut self, position: u64) {
        self.cursor = position;
    }

    /// Record order for one epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut self.seed.rng_for("shuffle", epoch));
        order
    }

    /// The batch at global position `k`.
    pub fn batch_at(&self, k: u64) -> Vec<SampleRecord> {
        let per = self.batches_per_epoch() as u64;
        let (epoch, slot) = (k / per, (k % per) as usize);
        let order = self.epoch_order(epoch);
        let mut rng = self.seed.rng_for("augment", k);
        order[slot * self.batch..(slot + 1) * self.batch]
            .iter()
            .map(|&i| {
                let r = &self.records[i];
                let (ch, cw) = self.crop;
                let y0 = rng.random_range(0..=r.height() - ch);
                let x0 = rng.random_range(0..=r.width() - cw);
                let flip = rng.random_bool(0.5);
                let mut out = crop_record(r, y0, x0, ch, cw);
                if self.augment && flip {
                    out = flip_record(&out);
                }
                out
            })
            .collect()
    }
}

impl Iterator for DatasetIter<'_> {
    type Item = Vec<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch_at(self.cursor);
        self.cursor += 1;
        Some(b)
    }
}
