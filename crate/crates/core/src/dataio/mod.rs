//! Flow file formats, synthetic data and dataset iteration.

mod flo;
mod iter;
mod manifest;
mod png;
mod synth;

pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use iter::{crop_record, flip_record, DatasetIter};
pub use manifest::{
    list_kitti, list_sintel, load_entry, load_manifest, read_manifest, write_manifest, FileSource, ManifestEntry,
    SyntheticSource,
};
pub use png::{read_frame_png, read_kitti_png, read_occ_png, write_frame_png, write_kitti_png, write_occ_png};
pub use synth::{
    analytic_backward_flow, analytic_flow, forward_coverage_occlusion, make_subsampled_pair, synth_corpus, synth_pair,
    synth_pair_channels, synth_specs, texture, Affine2, Motion, MotionKind, SyntheticMotionSpec, TEXTURE_SIGMA,
};

use crate::error::{Error, Result};
use crate::types::{FlowField, Frame, OcclusionMap, Validate};

/// One labeled (or unlabeled) frame pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub frame0: Frame,
    pub frame1: Frame,
    pub gt_flow: Option<FlowField>,
    pub gt_occ: Option<OcclusionMap>,
    /// Generating motion, for synthetic records.
    pub motion: Option<SyntheticMotionSpec>,
}

impl SampleRecord {
    pub fn unlabeled(id: impl Into<String>, frame0: Frame, frame1: Frame) -> Self {
        Self {
            id: id.into(),
            frame0,
            frame1,
            gt_flow: None,
            gt_occ: None,
            motion: None,
        }
    }

    pub fn height(&self) -> usize {
        self.frame0.height()
    }

    pub fn width(&self) -> usize {
        self.frame0.width()
    }

    /// Same record without labels.
    pub fn strip_labels(&self) -> Self {
        Self::unlabeled(self.id.clone(), self.frame0.clone(), self.frame1.clone())
    }
}

impl Validate for SampleRecord {
    fn validate(&self) -> Result<()> {
        self.frame0.validate()?;
        self.frame1.validate()?;
        if self.frame0.dims() != self.frame1.dims() {
            return Err(Error::invariant("frames share H, W, C", None));
        }
        let (h, w) = (self.height(), self.width());
        if let Some(f) = &self.gt_flow {
            f.validate()?;
            if f.height() != h || f.width() != w {
                return Err(Error::invariant("gt_flow matches frame H, W", vec![f.height(), f.width()]));
            }
        }
        if let Some(o) = &self.gt_occ {
            o.validate()?;
            if o.height() != h || o.width() != w {
                return Err(Error::invariant("gt_occ matches frame H, W", vec![o.height(), o.width()]));
            }
        }
        Ok(())
    }
}
