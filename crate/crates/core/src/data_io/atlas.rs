use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Left,
    Right,
}

/// Named visual-cortex regions over one hemisphere's voxels. Regions may overlap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoiAtlas {
    pub hemisphere: Hemisphere,
    pub num_voxels: usize,
    pub regions: BTreeMap<String, Vec<usize>>,
}

#[derive(Deserialize)]
struct RawAtlas {
    hemisphere: Hemisphere,
    num_voxels: i64,
    #[serde(deserialize_with = "entries_in_order")]
    regions: Vec<(String, Vec<i64>)>,
}

// serde's map types silently keep the last duplicate key; keep every entry so
// duplicates can be reported.
fn entries_in_order<'de, D>(de: D) -> std::result::Result<Vec<(String, Vec<i64>)>, D::Error>
where
    D: Deserializer<'de>,
{
    struct Entries;

    impl<'de> Visitor<'de> for Entries {
        type Value = Vec<(String, Vec<i64>)>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a map of region name to voxel index list")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = Vec::new();
            while let Some(entry) = map.next_entry::<String, Vec<i64>>()? {
                out.push(entry);
            }
            Ok(out)
        }
    }

    de.deserialize_map(Entries)
}

impl RoiAtlas {
    pub fn new(
        hemisphere: Hemisphere,
        num_voxels: usize,
        regions: impl IntoIterator<Item = (String, Vec<usize>)>,
    ) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (name, mut voxels) in regions {
            if let Some(&bad) = voxels.iter().find(|&&v| v >= num_voxels) {
                return Err(Error::invalid(format!(
                    "region {name}: voxel index {bad} out of range for {num_voxels} voxels"
                )));
            }
            voxels.sort_unstable();
            voxels.dedup();
            if out.insert(name.clone(), voxels).is_some() {
                return Err(Error::invalid(format!("duplicate region name {name}")));
            }
        }
        Ok(RoiAtlas {
            hemisphere,
            num_voxels,
            regions: out,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawAtlas = serde_json::from_str(text)?;
        let num_voxels = usize::try_from(raw.num_voxels)
            .map_err(|_| Error::invalid(format!("num_voxels {} is negative", raw.num_voxels)))?;
        let regions = raw
            .regions
            .into_iter()
            .map(|(name, idx)| {
                let idx = idx
                    .into_iter()
                    .map(|i| {
                        usize::try_from(i).map_err(|_| {
                            Error::invalid(format!("region {name}: negative voxel index {i}"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((name, idx))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(raw.hemisphere, num_voxels, regions)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn region(&self, name: &str) -> Option<&[usize]> {
        self.regions.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

pub fn load_atlas(path: impl AsRef<Path>) -> Result<RoiAtlas> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RoiAtlas::from_json(&text)
}

pub fn save_atlas(atlas: &RoiAtlas, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, atlas.to_json()?).map_err(|e| Error::io(path, e))
}
