//! JSON-lines dataset manifests and directory-layout listing helpers.
//!
//! Each line describes one sample. Synthetic entries carry everything needed
//! to regenerate the pair:
//!
//! ```text
//! {"id":"s0000","kind":"translation","params":{"dx":3.5,"dy":-1.0},"texture_seed":17,"height":64,"width":64}
//! ```
//!
//! File entries point at images and optional ground truth; relative paths are
//! resolved against the manifest's directory:
//!
//! ```text
//! {"id":"alley_1/0001","frame0":"a.png","frame1":"b.png","flow":"a.flo","occ":"a_occ.png"}
//! ```
//!
//! Flow files ending in `.png` are read as KITTI 16-bit flow, anything else as `.flo`.
//! An entry may carry both forms; loading prefers regeneration.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_flo, read_frame_png, read_kitti_png, read_occ_png, synth_pair, SampleRecord, SyntheticMotionSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    #[serde(flatten)]
    pub spec: SyntheticMotionSpec,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FileSource {
    pub frame0: PathBuf,
    pub frame1: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occ: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub synthetic: Option<SyntheticSource>,
    pub files: Option<FileSource>,
}

fn entry_to_json(e: &ManifestEntry) -> serde_json::Value {
    let mut obj = serde_json::Map::new();
    obj.insert("id".into(), e.id.clone().into());
    for part in [
        e.synthetic.as_ref().map(|s| serde_json::to_value(s).expect("plain data")),
        e.files.as_ref().map(|f| serde_json::to_value(f).expect("plain data")),
    ]
    .into_iter()
    .flatten()
    {
        if let serde_json::Value::Object(m) = part {
            obj.extend(m);
        }
    }
    serde_json::Value::Object(obj)
}

fn entry_from_json(v: serde_json::Value, line: usize) -> Result<ManifestEntry> {
    let bad = |msg: String| Error::Format(format!("manifest line {line}: {msg}"));
    let obj = v.as_object().ok_or_else(|| bad("expected an object".into()))?;
    let id = obj
        .get("id")
        .and_then(|x| x.as_str())
        .ok_or_else(|| bad("missing string field `id`".into()))?
        .to_string();
    let synthetic = if obj.contains_key("kind") {
        Some(serde_json::from_value(v.clone()).map_err(|e| bad(e.to_string()))?)
    } else {
        None
    };
    let files = if obj.contains_key("frame0") {
        Some(serde_json::from_value(v.clone()).map_err(|e| bad(e.to_string()))?)
    } else {
        None
    };
    if synthetic.is_none() && files.is_none() {
        return Err(bad(format!("entry `{id}` has neither `kind` nor `frame0`")));
    }
    Ok(ManifestEntry { id, synthetic, files })
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, &entry_to_json(e)).expect("in-memory write");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: serde_json::Value =
                serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
            entry_from_json(v, i + 1)
        })
        .collect()
}

/// Materializes one entry; relative paths resolve against `base`.
pub fn load_entry(e: &ManifestEntry, base: &Path) -> Result<SampleRecord> {
    if let Some(s) = &e.synthetic {
        let mut r = synth_pair(s.spec, (s.height, s.width))?;
        r.id = e.id.clone();
        return Ok(r);
    }
    let f = e.files.as_ref().expect("entry has a source");
    let p = |x: &Path| if x.is_absolute() { x.to_path_buf() } else { base.join(x) };
    let frame0 = read_frame_png(p(&f.frame0))?;
    let frame1 = read_frame_png(p(&f.frame1))?.with_time(1.0);
    let gt_flow = match &f.flow {
        Some(fp) if fp.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) => Some(read_kitti_png(p(fp))?),
        Some(fp) => Some(read_flo(p(fp))?),
        None => None,
    };
    let gt_occ = f.occ.as_ref().map(|o| read_occ_png(p(o))).transpose()?;
    Ok(SampleRecord {
        id: e.id.clone(),
        frame0,
        frame1,
        gt_flow,
        gt_occ,
        motion: None,
    })
}

/// Reads a manifest and loads every record.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?.iter().map(|e| load_entry(e, base)).collect()
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for ent in rd {
        let p = ent.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Lists a Sintel-style training tree:
/// `<root>/training/<pass>/<scene>/frame_NNNN.png` with flow in
/// `<root>/training/flow/<scene>/frame_NNNN.flo` and, when present,
/// occlusion in `<root>/training/occlusions/<scene>/frame_NNNN.png`.
pub fn list_sintel(root: impl AsRef<Path>, pass: &str) -> Result<Vec<ManifestEntry>> {
    let train = root.as_ref().join("training");
    let pass_dir = train.join(pass);
    let rd = std::fs::read_dir(&pass_dir).map_err(|e| Error::io(&pass_dir, e))?;
    let mut scenes: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    scenes.sort();
    let mut out = Vec::new();
    for scene in scenes {
        let name = scene.file_name().expect("directory entry").to_string_lossy().into_owned();
        let frames = sorted_files(&scene, "png")?;
        for pair in frames.windows(2) {
            let stem = pair[0].file_stem().expect("file").to_string_lossy().into_owned();
            let flow = train.join("flow").join(&name).join(format!("{stem}.flo"));
            let occ = train.join("occlusions").join(&name).join(format!("{stem}.png"));
            out.push(ManifestEntry {
                id: format!("{name}/{stem}"),
                synthetic: None,
                files: Some(FileSource {
                    frame0: pair[0].clone(),
                    frame1: pair[1].clone(),
                    flow: flow.exists().then_some(flow),
                    occ: occ.exists().then_some(occ),
                }),
            });
        }
    }
    Ok(out)
}

/// Lists a KITTI-style training tree:
/// `<root>/training/image_2/NNNNNN_10.png` and `NNNNNN_11.png`, with sparse
/// flow in `<root>/training/flow_occ/NNNNNN_10.png` when present.
pub fn list_kitti(root: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let train = root.as_ref().join("training");
    let images = train.join("image_2");
    let mut out = Vec::new();
    for f0 in sorted_files(&images, "png")? {
        let stem = f0.file_stem().expect("file").to_string_lossy().into_owned();
        let Some(seq) = stem.strip_suffix("_10") else {
            continue;
        };
        let f1 = images.join(format!("{seq}_11.png"));
        if !f1.exists() {
            continue;
        }
        let flow = train.join("flow_occ").join(format!("{seq}_10.png"));
        out.push(ManifestEntry {
            id: seq.to_string(),
            synthetic: None,
            files: Some(FileSource {
                frame0: f0.clone(),
                frame1: f1,
                flow: flow.exists().then_some(flow),
                occ: None,
            }),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Motion;
    use crate::types::RngSeed;

    #[test]
    fn synthetic_entry_json_shape() {
        let e = ManifestEntry {
            id: "s0".into(),
            synthetic: Some(SyntheticSource {
                spec: SyntheticMotionSpec {
                    motion: Motion::Translation { dx: 1.5, dy: -2.0 },
                    texture_seed: RngSeed(4),
                },
                height: 16,
                width: 20,
            }),
            files: None,
        };
        let v = entry_to_json(&e);
        assert_eq!(v["kind"], "translation");
        assert_eq!(v["params"]["dx"], 1.5);
        assert_eq!(v["texture_seed"], 4);
        assert_eq!(entry_from_json(v, 1).unwrap(), e);
    }

    #[test]
    fn entry_without_source_is_rejected() {
        let v = serde_json::json!({"id": "x"});
        assert!(matches!(entry_from_json(v, 3), Err(Error::Format(_))));
    }
}
