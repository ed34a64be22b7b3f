//! Identity-folder datasets: `<root>/<identity>/<stem>.ppm` with `<stem>.wplus` beside it.

use std::fs;
use std::path::{Path, PathBuf};

use pidiff_core::checkpoint::Profile;
use pidiff_core::numerics::SeededRng;
use pidiff_core::trainer::{synthetic_samples, TrainSample};
use pidiff_core::wplus::{SyntheticIdentity, ToyEncoder};

use crate::error::{CliError, CliResult};
use crate::io::{load_wplus, read_ppm, save_wplus, write_bytes, write_ppm};

pub const IMAGE_EXT: &str = "ppm";
pub const WPLUS_EXT: &str = "wplus";

#[derive(Clone, Debug)]
pub struct IdentityFolder {
    pub name: String,
    pub stems: Vec<String>,
    pub samples: Vec<TrainSample>,
}

impl IdentityFolder {
    pub fn images(&self) -> Vec<pidiff_core::numerics::Tensor<f32>> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }
}

pub fn identity_label(i: usize) -> String {
    format!("id{i:03}")
}

/// Writes `identities × per_identity` renders with their W+ files.
pub fn write_synthetic(
    dir: &Path,
    identities: usize,
    per_identity: usize,
    seed: u64,
    profile: &Profile,
) -> CliResult<()> {
    if identities == 0 || per_identity == 0 {
        return Err(CliError::Usage(
            "synth-data needs at least one identity and one image".into(),
        ));
    }
    let enc = ToyEncoder::new(profile.rows, profile.latent_dim, profile.resolution);
    let mut rng = SeededRng::derive(seed, 0x5d47);
    let mut listing = String::from("identity,coarse,fine\n");
    for i in 0..identities {
        let label = identity_label(i);
        let id = SyntheticIdentity::random(&mut rng, &label);
        let folder = dir.join(&label);
        for (j, s) in synthetic_samples(&enc, &id, per_identity, rng.next_u64())
            .iter()
            .enumerate()
        {
            write_ppm(&folder.join(format!("img{j:02}.{IMAGE_EXT}")), &s.image)?;
            save_wplus(&folder.join(format!("img{j:02}.{WPLUS_EXT}")), &s.wplus)?;
        }
        let join = |v: &[f32]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        listing.push_str(&format!(
            "{label},{},{}\n",
            join(&id.coarse),
            join(&id.fine)
        ));
    }
    write_bytes(&dir.join("identities.csv"), listing.as_bytes())
}

fn sorted_entries(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        out.push(e.map_err(|e| CliError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn load_folder(
    dir: &Path,
    name: String,
    profile: &Profile,
    missing: &mut Vec<String>,
) -> CliResult<IdentityFolder> {
    let mut stems = Vec::new();
    let mut samples = Vec::new();
    for path in sorted_entries(dir)? {
        if has_ext(&path, "png") {
            return Err(CliError::Dataset(format!(
                "{}: png input is not supported, convert it to ppm",
                path.display()
            )));
        }
        if !has_ext(&path, IMAGE_EXT) {
            continue;
        }
        let wpath = path.with_extension(WPLUS_EXT);
        if !wpath.is_file() {
            missing.push(wpath.display().to_string());
            continue;
        }
        let image = read_ppm(&path)?;
        if image.shape()[1..] != [profile.resolution, profile.resolution] {
            return Err(CliError::Dataset(format!(
                "{}: image is {}x{}, profile {} expects {}x{}",
                path.display(),
                image.shape()[2],
                image.shape()[1],
                profile.name,
                profile.resolution,
                profile.resolution
            )));
        }
        let wplus = load_wplus(&wpath, profile)?;
        stems.push(
            path.file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        );
        samples.push(TrainSample { image, wplus });
    }
    Ok(IdentityFolder {
        name,
        stems,
        samples,
    })
}

/// Loads every identity under `root`. A root holding images directly is read
/// as a single identity named after the folder. Images without a W+ file are
/// reported together in one error.
pub fn load_dataset(root: &Path, profile: &Profile) -> CliResult<Vec<IdentityFolder>> {
    let entries = sorted_entries(root)?;
    let mut missing = Vec::new();
    let mut folders = Vec::new();
    if entries.iter().any(|p| p.is_file() && has_ext(p, IMAGE_EXT)) {
        let name = root
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        folders.push(load_folder(root, name, profile, &mut missing)?);
    } else {
        for dir in entries.iter().filter(|p| p.is_dir()) {
            let name = dir
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            folders.push(load_folder(dir, name, profile, &mut missing)?);
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Dataset(format!(
            "missing W+ files: {}",
            missing.join(", ")
        )));
    }
    if folders.is_empty() {
        return Err(CliError::Dataset(format!(
            "{}: no identity folders",
            root.display()
        )));
    }
    if let Some(empty) = folders.iter().find(|f| f.samples.is_empty()) {
        return Err(CliError::Dataset(format!(
            "identity {} has no images",
            empty.name
        )));
    }
    Ok(folders)
}

/// Picks one identity by name, or the only one present.
pub fn select_identity<'a>(
    folders: &'a [IdentityFolder],
    name: Option<&str>,
) -> CliResult<&'a IdentityFolder> {
    match name {
        Some(n) => folders.iter().find(|f| f.name == n).ok_or_else(|| {
            let names: Vec<&str> = folders.iter().map(|f| f.name.as_str()).collect();
            CliError::Dataset(format!(
                "identity {n:?} not found (have {})",
                names.join(", ")
            ))
        }),
        None if folders.len() == 1 => Ok(&folders[0]),
        None => Err(CliError::Usage(format!(
            "dataset holds {} identities, pick one with --identity",
            folders.len()
        ))),
    }
}
