//! Dataset directory format:
//!
//! | file          | content                                                   |
//! |---------------|-----------------------------------------------------------|
//! | `meta.json`   | [`DatasetMeta`]                                            |
//! | `users.jsonl` | one [`UserRecord`] per line, user-id order                 |
//! | `posts.jsonl` | one post (`post_id`, `user_id`, `tokens`) per line         |
//! | `images.bin`  | little-endian f32 pixels, post-id order, no header         |
//! | `images.idx`  | `post_id<TAB>byte_offset<TAB>byte_len` per post            |
//! | `edges.tsv`   | `u<TAB>v` per edge, `u < v`, sorted                        |
//! | `manifest.json` | SHA-256 digest and size of each file above               |

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{validate_dataset, Dataset, DatasetMeta, Post, UserRecord};
use crate::error::{Error, Result};
use crate::graph::SocialGraph;

pub const DATA_FILES: [&str; 6] = [
    "meta.json",
    "users.jsonl",
    "posts.jsonl",
    "images.bin",
    "images.idx",
    "edges.tsv",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<FileDigest>,
}

pub fn file_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileDigest> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileDigest {
        name: name.to_string(),
        bytes: bytes.len() as u64,
        sha256: file_digest(bytes),
    })
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).expect("records serialize");
        out.push(b'\n');
    }
    out
}

/// Write the dataset directory. The dataset is validated first.
pub fn save_dataset(ds: &Dataset, graph: &SocialGraph, dir: &Path) -> Result<Manifest> {
    let problems = validate_dataset(ds, graph);
    if let Some(first) = problems.first() {
        return Err(Error::Inconsistent(format!("{} violations, first: {first}", problems.len())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut files = Vec::new();
    let meta = serde_json::to_vec_pretty(&ds.meta).expect("meta serializes");
    files.push(write_file(dir, "meta.json", &meta)?);
    files.push(write_file(dir, "users.jsonl", &jsonl(&ds.users))?);
    files.push(write_file(dir, "posts.jsonl", &jsonl(&ds.posts))?);

    let mut images = Vec::with_capacity(ds.posts.len() * ds.meta.image_len() * 4);
    let mut idx = String::new();
    for p in &ds.posts {
        let off = images.len();
        for &x in &p.image {
            images.extend_from_slice(&x.to_le_bytes());
        }
        idx.push_str(&format!("{}\t{}\t{}\n", p.post_id, off, images.len() - off));
    }
    files.push(write_file(dir, "images.bin", &images)?);
    files.push(write_file(dir, "images.idx", idx.as_bytes())?);

    let mut edges = String::new();
    for &(u, v) in graph.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    files.push(write_file(dir, "edges.tsv", edges.as_bytes())?);

    let manifest = Manifest { files };
    let path = dir.join("manifest.json");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read(path: PathBuf) -> Result<Vec<u8>> {
    fs::read(&path).map_err(|e| Error::io(path, e))
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<Vec<T>> {
    BufReader::new(bytes)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Read a directory written by [`save_dataset`], checking digests, file
/// sizes and every dataset invariant.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, SocialGraph)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read(manifest_path.clone())?)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;

    let mut contents = Vec::with_capacity(DATA_FILES.len());
    for name in DATA_FILES {
        let path = dir.join(name);
        let bytes = read(path.clone())?;
        let entry = manifest
            .files
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::format(&manifest_path, format!("no entry for {name}")))?;
        if entry.sha256 != file_digest(&bytes) {
            return Err(Error::Digest(path));
        }
        contents.push((path, bytes));
    }
    let [meta_f, users_f, posts_f, images_f, idx_f, edges_f]: [(PathBuf, Vec<u8>); 6] =
        contents.try_into().expect("six files");

    let meta: DatasetMeta =
        serde_json::from_slice(&meta_f.1).map_err(|e| Error::format(&meta_f.0, e.to_string()))?;
    let users: Vec<UserRecord> = parse_lines(&users_f.0, &users_f.1)?;
    let mut posts: Vec<Post> = parse_lines(&posts_f.0, &posts_f.1)?;

    let img_bytes = meta.image_len() * 4;
    let expected = meta.n_posts * img_bytes;
    if images_f.1.len() != expected {
        return Err(Error::format(
            &images_f.0,
            format!("{} bytes, expected {expected}", images_f.1.len()),
        ));
    }
    let idx_text = String::from_utf8(idx_f.1).map_err(|e| Error::format(&idx_f.0, e.to_string()))?;
    let idx_lines: Vec<&str> = idx_text.lines().filter(|l| !l.is_empty()).collect();
    if idx_lines.len() != posts.len() {
        return Err(Error::format(&idx_f.0, format!("{} entries for {} posts", idx_lines.len(), posts.len())));
    }
    for (line_no, line) in idx_lines.iter().enumerate() {
        let fields: Vec<usize> = line
            .split('\t')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(&idx_f.0, format!("line {}: {e}", line_no + 1)))?;
        let [pid, off, len] = fields[..] else {
            return Err(Error::format(&idx_f.0, format!("line {}: expected 3 fields", line_no + 1)));
        };
        if len != img_bytes || off + len > images_f.1.len() {
            return Err(Error::format(&idx_f.0, format!("line {}: bad extent", line_no + 1)));
        }
        let post = posts
            .get_mut(pid)
            .ok_or_else(|| Error::format(&idx_f.0, format!("post {pid} does not exist")))?;
        post.image = images_f.1[off..off + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
    }

    let edges_text = String::from_utf8(edges_f.1).map_err(|e| Error::format(&edges_f.0, e.to_string()))?;
    let mut edges = Vec::new();
    for (i, line) in edges_text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let parsed: Option<(u32, u32)> = line
            .split_once('\t')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
        let (u, v) = parsed.ok_or_else(|| Error::format(&edges_f.0, format!("line {}: malformed", i + 1)))?;
        if u == v {
            return Err(Error::format(&edges_f.0, format!("line {}: self-loop on {u}", i + 1)));
        }
        edges.push((u, v));
    }
    let graph = SocialGraph::from_edges(meta.n_users, edges)
        .map_err(|e| Error::format(&edges_f.0, e.to_string()))?;

    let ds = Dataset { meta, users, posts };
    let problems = validate_dataset(&ds, &graph);
    if let Some(first) = problems.first() {
        return Err(Error::Inconsistent(format!("{} violations, first: {first}", problems.len())));
    }
    Ok((ds, graph))
}
