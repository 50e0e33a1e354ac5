//! Pixel access for manifest records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::augment::FrameView;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::{FrameLabel, SYNTH_SCHEME};

/// Decoded images of every manifest record, indexed by record position.
///
/// `synth:<key>` references are rendered from the label sidecar; anything
/// else is a PNG path, relative paths resolved against `base_dir`.
#[derive(Debug, Clone)]
pub struct FrameStore {
    images: Vec<Image>,
    keys: Vec<String>,
}

impl FrameStore {
    pub fn load(
        manifest: &DatasetManifest,
        base_dir: Option<&Path>,
        labels: Option<&BTreeMap<String, FrameLabel>>,
    ) -> Result<Self> {
        let images = manifest
            .records()
            .par_iter()
            .map(|rec| {
                if let Some(key) = rec.image_ref.strip_prefix(SYNTH_SCHEME) {
                    let label = labels.and_then(|l| l.get(key)).ok_or_else(|| {
                        Error::Validation(format!(
                            "{} needs a label sidecar entry for key {key}",
                            rec.image_ref
                        ))
                    })?;
                    Ok(label.render()?.0)
                } else {
                    let mut p = PathBuf::from(&rec.image_ref);
                    if p.is_relative() {
                        if let Some(b) = base_dir {
                            p = b.join(p);
                        }
                    }
                    Image::load_png(&p)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let keys = manifest.records().iter().map(|r| r.key()).collect();
        Ok(FrameStore { images, keys })
    }

    pub fn from_images(manifest: &DatasetManifest, images: Vec<Image>) -> Result<Self> {
        if images.len() != manifest.len() {
            return Err(Error::Argument(format!(
                "{} images for {} records",
                images.len(),
                manifest.len()
            )));
        }
        let keys = manifest.records().iter().map(|r| r.key()).collect();
        Ok(FrameStore { images, keys })
    }

    pub fn key(&self, pos: usize) -> &str {
        &self.keys[pos]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, pos: usize) -> &Image {
        &self.images[pos]
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn view<'a>(&'a self, manifest: &'a DatasetManifest, pos: usize) -> FrameView<'a> {
        let rec = manifest.record(pos);
        FrameView {
            key: &self.keys[pos],
            image: &self.images[pos],
            landmarks: &rec.landmarks,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, CorpusSpec};

    #[test]
    fn synthetic_refs_render_and_png_refs_load() {
        let corpus = generate_corpus(&CorpusSpec {
            n_identities: 1,
            videos_per_id: 1,
            duration_s: 0.4,
            ..CorpusSpec::default()
        })
        .unwrap();
        let store = FrameStore::load(&corpus.manifest, None, Some(&corpus.labels)).unwrap();
        assert_eq!(store.len(), 2);
        assert!(FrameStore::load(&corpus.manifest, None, None).is_err());

        let dir = tempfile::tempdir().unwrap();
        store.image(0).save_png(&dir.path().join("f0.png")).unwrap();
        let mut rec = corpus.manifest.record(0).clone();
        rec.image_ref = "f0.png".into();
        let m = DatasetManifest::from_records(vec![rec]).unwrap();
        let loaded = FrameStore::load(&m, Some(dir.path()), None).unwrap();
        assert!(loaded.image(0).max_abs_diff(store.image(0)) <= 1.0 / 255.0);
    }
}
