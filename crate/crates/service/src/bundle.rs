//! JSON form of a session export: the session document plus every PNG it
//! references, base64-encoded under its relative path.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use teachkit_core::session::{SessionDocument, TeachingSet};
use teachkit_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub document: SessionDocument,
    pub files: BTreeMap<String, String>,
}

pub fn export_bundle(set: &TeachingSet) -> Result<ExportBundle> {
    let document = set.document();
    let mut files = BTreeMap::new();
    for (s, rec) in set.samples().zip(&document.samples) {
        files.insert(rec.frame.clone(), STANDARD.encode(s.frame.to_png()?));
        if let (Some(m), Some(p)) = (&s.object_mask, &rec.object_mask) {
            files.insert(p.clone(), STANDARD.encode(m.to_png()?));
        }
        if let (Some(m), Some(p)) = (&s.hand_mask, &rec.hand_mask) {
            files.insert(p.clone(), STANDARD.encode(m.to_png()?));
        }
    }
    Ok(ExportBundle { document, files })
}

pub fn import_bundle(bundle: &ExportBundle) -> Result<TeachingSet> {
    TeachingSet::from_document(bundle.document.clone(), |rel| {
        let b64 = bundle
            .files
            .get(rel)
            .ok_or_else(|| Error::InvalidArgument(format!("bundle lacks {rel}")))?;
        STANDARD
            .decode(b64)
            .map_err(|e| Error::InvalidArgument(format!("{rel}: {e}")))
    })
}
