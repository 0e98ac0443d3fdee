//! Plain-text corpus and label files: UTF-8, one sentence per line,
//! space-separated tokens.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ter::Tag;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read(path)?
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

pub fn write_sentences<S: AsRef<[String]>>(path: &Path, sentences: &[S]) -> Result<()> {
    write_lines(path, sentences.iter().map(|s| s.as_ref().join(" ")))
}

pub fn read_hter(path: &Path) -> Result<Vec<f64>> {
    read(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| {
                Error::format("hter file", format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// One value per line with six decimals.
pub fn write_hter(path: &Path, values: &[f64]) -> Result<()> {
    write_lines(path, values.iter().map(|v| format!("{v:.6}")))
}

pub fn read_tags(path: &Path) -> Result<Vec<Vec<Tag>>> {
    read(path)?
        .lines()
        .map(|l| l.split_whitespace().map(str::parse).collect())
        .collect()
}

pub fn write_tags(path: &Path, tags: &[Vec<Tag>]) -> Result<()> {
    write_lines(
        path,
        tags.iter().map(|row| {
            row.iter()
                .map(Tag::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        }),
    )
}
