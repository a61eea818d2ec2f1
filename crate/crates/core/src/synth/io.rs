use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::model::FeatureSequence;
use crate::objectives::DiarizationLabels;

pub const FEATURE_MAGIC: &[u8; 4] = b"DTFS";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FEATURE_DIR: &str = "feats";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the dataset directory.
    pub path: String,
    pub frames: usize,
    pub speakers: Vec<usize>,
    /// One transcript per speaker.
    pub transcripts: Vec<Vec<usize>>,
    pub labels: Option<DiarizationLabels>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub d_feat: usize,
    pub frame_shift_s: f64,
    pub vocab_size: usize,
    /// `asr` or a scenario code.
    pub kind: String,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub features: Vec<FeatureSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let (t, d) = (seq.len(), seq.dim());
    let mut out = Vec::with_capacity(16 + t * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in seq.frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses a feature file; `record` names the manifest entry in length errors.
pub fn decode_features(bytes: &[u8], path: &Path, record: &str) -> Result<FeatureSequence> {
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 {
        return Err(Error::Length {
            record: record.into(),
            detail: format!("header needs 16 bytes, file has {}", bytes.len()),
        });
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32_at(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let (t, d) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
    let want = 16 + t * d * 4;
    if bytes.len() != want {
        return Err(Error::Length {
            record: record.into(),
            detail: format!("header declares {t}x{d} frames ({want} bytes), file has {}", bytes.len()),
        });
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    FeatureSequence::new(Tensor::new(vec![t, d], data)?)
}

fn encode_labels(l: &DiarizationLabels) -> String {
    let mut s = format!("{}:", l.num_spk());
    let mut first = true;
    for (k, row) in l.activity.iter().enumerate() {
        let mut t = 0;
        while t < row.len() {
            if !row[t] {
                t += 1;
                continue;
            }
            let start = t;
            while t < row.len() && row[t] {
                t += 1;
            }
            if !first {
                s.push(',');
            }
            first = false;
            let _ = write!(s, "{k}@{start}-{t}");
        }
    }
    s
}

fn decode_labels(s: &str, frames: usize, shift: f64) -> std::result::Result<DiarizationLabels, String> {
    let (n, segs) = s.split_once(':').ok_or("labels need `num_spk:` prefix")?;
    let n: usize = n.parse().map_err(|_| format!("bad speaker count {n:?}"))?;
    let mut activity = vec![vec![false; frames]; n];
    for seg in segs.split(',').filter(|x| !x.is_empty()) {
        let parsed = seg.split_once('@').and_then(|(k, r)| {
            let (a, b) = r.split_once('-')?;
            Some((k.parse::<usize>().ok()?, a.parse::<usize>().ok()?, b.parse::<usize>().ok()?))
        });
        let (k, a, b) = parsed.ok_or_else(|| format!("bad segment {seg:?}"))?;
        if k >= n || a >= b || b > frames {
            return Err(format!("segment {seg:?} out of range"));
        }
        activity[k][a..b].iter_mut().for_each(|x| *x = true);
    }
    DiarizationLabels::new(activity, shift).map_err(|e| e.to_string())
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

pub fn format_manifest(m: &DatasetManifest) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "#seed={}", m.seed);
    let _ = writeln!(s, "#d_feat={}", m.d_feat);
    let _ = writeln!(s, "#frame_shift_s={}", m.frame_shift_s);
    let _ = writeln!(s, "#vocab_size={}", m.vocab_size);
    let _ = writeln!(s, "#kind={}", m.kind);
    for r in &m.records {
        let text: Vec<String> = r.transcripts.iter().map(|t| join(t, " ")).collect();
        let labels = r.labels.as_ref().map_or_else(|| "none".to_string(), encode_labels);
        let _ = writeln!(
            s,
            "id={}\tpath={}\tframes={}\tspeakers={}\ttext={}\tlabels={}",
            r.id,
            r.path,
            r.frames,
            join(&r.speakers, ","),
            text.join("|"),
            labels
        );
    }
    s
}

fn parse_list(s: &str, sep: char) -> Option<Vec<usize>> {
    s.split(sep).filter(|x| !x.is_empty()).map(|x| x.parse().ok()).collect()
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let err = |line: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        detail: format!("line {}: {detail}", line + 1),
    };
    let mut header = BTreeMap::new();
    let mut records = Vec::new();
    let mut shift = None;
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('#') {
            let (k, v) = h.split_once('=').ok_or_else(|| err(i, "header needs key=value".into()))?;
            if k == "frame_shift_s" {
                shift = Some(v.parse::<f64>().map_err(|_| err(i, format!("bad frame shift {v:?}")))?);
            }
            header.insert(k.to_string(), v.to_string());
            continue;
        }
        let mut fields = BTreeMap::new();
        for f in line.split('\t') {
            let (k, v) = f.split_once('=').ok_or_else(|| err(i, format!("field {f:?} needs key=value")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(i, format!("missing field `{k}`")));
        let frames: usize = get("frames")?.parse().map_err(|_| err(i, "bad frame count".into()))?;
        let speakers = parse_list(get("speakers")?, ',').ok_or_else(|| err(i, "bad speaker list".into()))?;
        let text = get("text")?;
        let transcripts = if text.is_empty() && speakers.len() <= 1 {
            vec![Vec::new(); speakers.len()]
        } else {
            text.split('|')
                .map(|t| parse_list(t, ' '))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err(i, "bad transcript".into()))?
        };
        let labels = match get("labels")? {
            "none" => None,
            l => {
                let sh = shift.ok_or_else(|| err(i, "frame_shift_s header must precede records".into()))?;
                Some(decode_labels(l, frames, sh).map_err(|e| err(i, e))?)
            }
        };
        records.push(ManifestRecord {
            id: get("id")?.to_string(),
            path: get("path")?.to_string(),
            frames,
            speakers,
            transcripts,
            labels,
        });
    }
    let head = |k: &str| {
        header.get(k).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: format!("missing header `{k}`"),
        })
    };
    let num = |k: &str| -> Result<u64> {
        head(k)?.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            detail: format!("header `{k}` is not an integer"),
        })
    };
    Ok(DatasetManifest {
        seed: num("seed")?,
        d_feat: num("d_feat")? as usize,
        frame_shift_s: shift.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: "missing header `frame_shift_s`".into(),
        })?,
        vocab_size: num("vocab_size")? as usize,
        kind: head("kind")?.clone(),
        records,
    })
}

pub fn feature_path(id: &str) -> String {
    format!("{FEATURE_DIR}/{id}.dtfs")
}

/// Writes `manifest.txt` and one feature file per record.
pub fn write_dataset(manifest: &DatasetManifest, features: &[FeatureSequence], dir: &Path) -> Result<()> {
    if manifest.records.len() != features.len() {
        return Err(Error::contract(format!(
            "{} records but {} feature sequences",
            manifest.records.len(),
            features.len()
        )));
    }
    fs::create_dir_all(dir.join(FEATURE_DIR)).map_err(|e| Error::io(dir, e))?;
    for (r, f) in manifest.records.iter().zip(features) {
        if r.frames != f.len() || f.dim() != manifest.d_feat {
            return Err(Error::Length {
                record: r.id.clone(),
                detail: format!("declared {}x{}, features are {}x{}", r.frames, manifest.d_feat, f.len(), f.dim()),
            });
        }
        let p = dir.join(&r.path);
        fs::write(&p, encode_features(f)).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, format_manifest(manifest)).map_err(|e| Error::io(&p, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = parse_manifest(&text, &mpath)?;
    let mut features = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let p = dir.join(&r.path);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let mut seq = decode_features(&bytes, &p, &r.id)?;
        if seq.len() != r.frames || seq.dim() != manifest.d_feat {
            return Err(Error::Length {
                record: r.id.clone(),
                detail: format!(
                    "manifest declares {}x{}, file holds {}x{}",
                    r.frames,
                    manifest.d_feat,
                    seq.len(),
                    seq.dim()
                ),
            });
        }
        seq.frame_shift_s = manifest.frame_shift_s;
        features.push(seq);
    }
    Ok(Dataset { manifest, features })
}
