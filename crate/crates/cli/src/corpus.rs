//! Manifest scanning and seeded sampling of local descriptors.

use std::path::Path;

use anyhow::{bail, Context, Result};
use blcf::tensorio::{read_manifest, read_tensor, read_tensor_dims, ImageMeta};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ValidationError;

pub struct Corpus {
    pub entries: Vec<ImageMeta>,
    /// `(M, N)` of each entry's feature map.
    pub grids: Vec<(usize, usize)>,
    pub dim: usize,
}

impl Corpus {
    /// Reads the manifest and every tensor header. All maps must be 3-D with one common depth.
    pub fn scan(manifest: &Path) -> Result<Corpus> {
        let entries = read_manifest(manifest)?;
        if entries.is_empty() {
            bail!(ValidationError(format!(
                "{}: manifest lists no images",
                manifest.display()
            )));
        }
        let dims: Vec<Vec<usize>> = entries
            .par_iter()
            .map(|e| read_tensor_dims(&e.tensor_path).with_context(|| format!("image {}", e.image_id)))
            .collect::<Result<_>>()?;
        let mut grids = Vec::with_capacity(entries.len());
        let mut dim = None;
        for (entry, d) in entries.iter().zip(&dims) {
            let &[m, n, depth] = d.as_slice() else {
                bail!(ValidationError(format!(
                    "image {}: feature map must be M×N×D, got dims {d:?}",
                    entry.image_id
                )));
            };
            match dim {
                None => dim = Some((depth, &entry.image_id)),
                Some((expected, first)) if expected != depth => bail!(ValidationError(format!(
                    "image {}: descriptor dimension {depth} differs from {expected} (image {first})",
                    entry.image_id
                ))),
                Some(_) => {}
            }
            grids.push((m, n));
        }
        Ok(Corpus {
            grids,
            dim: dim.map(|d| d.0).unwrap_or(0),
            entries,
        })
    }

    pub fn total_locations(&self) -> usize {
        self.grids.iter().map(|(m, n)| m * n).sum()
    }

    /// Up to `cap` raw descriptors drawn uniformly without replacement, in corpus order.
    pub fn sample(&self, cap: usize, seed: u64) -> Result<Vec<f32>> {
        let total = self.total_locations();
        let mut picks: Vec<usize> = if total <= cap {
            (0..total).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, total, cap).into_vec()
        };
        picks.sort_unstable();

        let mut per_image: Vec<Vec<usize>> = vec![Vec::new(); self.entries.len()];
        let mut image = 0;
        let mut offset = 0;
        for p in picks {
            while p >= offset + self.grids[image].0 * self.grids[image].1 {
                offset += self.grids[image].0 * self.grids[image].1;
                image += 1;
            }
            per_image[image].push(p - offset);
        }

        let dim = self.dim;
        let chunks: Vec<Vec<f32>> = self
            .entries
            .par_iter()
            .zip(&per_image)
            .map(|(entry, locations)| {
                if locations.is_empty() {
                    return Ok(Vec::new());
                }
                let tensor = read_tensor(&entry.tensor_path).with_context(|| format!("image {}", entry.image_id))?;
                let data = tensor.data();
                Ok(locations
                    .iter()
                    .flat_map(|&l| data[l * dim..(l + 1) * dim].iter().copied())
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use blcf::tensorio::{write_manifest, write_tensor, Tensor};

    fn toy(dir: &Path, dims: &[[usize; 3]]) -> std::path::PathBuf {
        let mut entries = Vec::new();
        let mut next = 0.0f32;
        for (i, d) in dims.iter().enumerate() {
            let count = d.iter().product();
            let data: Vec<f32> = (0..count)
                .map(|_| {
                    next += 1.0;
                    next
                })
                .collect();
            let path = dir.join(format!("t{i}.blcf"));
            write_tensor(&path, &Tensor::new(d.to_vec(), data).unwrap()).unwrap();
            entries.push(ImageMeta {
                image_id: format!("img{i}"),
                width: 64,
                height: 64,
                tensor_path: path,
                saliency_path: None,
                image_path: None,
            });
        }
        let manifest = dir.join("m.jsonl");
        write_manifest(&manifest, &entries).unwrap();
        manifest
    }

    #[test]
    fn sample_all_and_capped() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy(dir.path(), &[[2, 2, 2], [1, 3, 2]]);
        let corpus = Corpus::scan(&manifest).unwrap();
        assert_eq!(corpus.dim, 2);
        assert_eq!(corpus.total_locations(), 7);
        let all = corpus.sample(100, 0).unwrap();
        assert_eq!(all, (1..=14).map(|v| v as f32).collect::<Vec<_>>());

        let some = corpus.sample(3, 9).unwrap();
        assert_eq!(some.len(), 6);
        assert_eq!(some, corpus.sample(3, 9).unwrap());
        for pair in some.chunks(2) {
            assert_eq!(pair[1], pair[0] + 1.0);
            assert_eq!(pair[0] as usize % 2, 1);
        }
    }

    #[test]
    fn mismatched_depth_names_image() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy(dir.path(), &[[2, 2, 2], [1, 3, 5]]);
        let err = Corpus::scan(&manifest).err().unwrap();
        assert!(format!("{err:#}").contains("img1"), "{err:#}");
    }
}
