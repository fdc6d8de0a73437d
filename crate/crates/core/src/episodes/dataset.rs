use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Directory of class directories holding grayscale images.
    ImageTree,
    /// `userId,movieId,rating,timestamp` with a header line, keeping the
    /// most-rated movies and then the most active users.
    RatingsCsv { top_movies: usize, top_users: usize },
}

impl DatasetFormat {
    pub fn from_tag(tag: &str, top_movies: usize, top_users: usize) -> Result<Self> {
        match tag {
            "images" | "image_tree" => Ok(Self::ImageTree),
            "ratings" | "ratings_csv" => Ok(Self::RatingsCsv { top_movies, top_users }),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageClass {
    pub name: String,
    pub images: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageStore {
    pub side: usize,
    pub classes: Vec<ImageClass>,
}

impl ImageStore {
    /// Resolves a class-list file (one class name per line) to indices.
    pub fn split_from_list(&self, path: &Path) -> Result<Vec<usize>> {
        let by_name: HashMap<&str, usize> = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.as_str(), i))
            .collect();
        let text = fs::read_to_string(path)?;
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let name = line.trim();
            if name.is_empty() || name.starts_with('#') {
                continue;
            }
            let &i = by_name.get(name).ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("unknown class `{name}`"),
            })?;
            out.push(i);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRow {
    pub user: u64,
    pub movie: u64,
    pub rating: f64,
}

/// Filtered ratings with movies re-indexed densely.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingsTable {
    pub rows: Vec<RatingRow>,
    /// Dense movie index → original movie id.
    pub movie_ids: Vec<u64>,
    /// Per user: original id and `(dense movie index, rating)` history.
    pub users: Vec<(u64, Vec<(usize, f64)>)>,
}

impl RatingsTable {
    /// Keeps the `top_movies` most-rated movies, then the `top_users` users
    /// with most ratings among those. Ties go to the smaller id.
    pub fn from_rows(rows: Vec<RatingRow>, top_movies: usize, top_users: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyStore("no ratings".into()));
        }
        let mut movie_counts: HashMap<u64, usize> = HashMap::new();
        for r in &rows {
            *movie_counts.entry(r.movie).or_default() += 1;
        }
        let mut movies: Vec<(u64, usize)> = movie_counts.into_iter().collect();
        movies.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        movies.truncate(top_movies);
        movies.sort_by_key(|m| m.0);
        let movie_index: HashMap<u64, usize> = movies.iter().enumerate().map(|(i, m)| (m.0, i)).collect();

        let kept: Vec<RatingRow> = rows
            .into_iter()
            .filter(|r| movie_index.contains_key(&r.movie))
            .collect();
        let mut user_counts: HashMap<u64, usize> = HashMap::new();
        for r in &kept {
            *user_counts.entry(r.user).or_default() += 1;
        }
        let mut users: Vec<(u64, usize)> = user_counts.into_iter().collect();
        users.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        users.truncate(top_users);
        users.sort_by_key(|u| u.0);
        let user_index: HashMap<u64, usize> = users.iter().enumerate().map(|(i, u)| (u.0, i)).collect();

        let mut histories: Vec<(u64, Vec<(usize, f64)>)> = users.iter().map(|u| (u.0, Vec::new())).collect();
        let mut rows = Vec::new();
        for r in kept {
            if let Some(&u) = user_index.get(&r.user) {
                histories[u].1.push((movie_index[&r.movie], r.rating));
                rows.push(r);
            }
        }
        if rows.is_empty() {
            return Err(Error::EmptyStore("no ratings left after filtering".into()));
        }
        Ok(Self {
            rows,
            movie_ids: movies.into_iter().map(|m| m.0).collect(),
            users: histories,
        })
    }

    pub fn num_movies(&self) -> usize {
        self.movie_ids.len()
    }

    /// Rows as `(user index, dense movie index, rating)` for a subset of users.
    pub fn dense_rows(&self, users: &[usize]) -> Vec<(usize, usize, f64)> {
        users
            .iter()
            .enumerate()
            .flat_map(|(k, &u)| self.users[u].1.iter().map(move |&(m, r)| (k, m, r)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ItemStore {
    Images(ImageStore),
    Ratings(RatingsTable),
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<ItemStore> {
    match format {
        DatasetFormat::ImageTree => load_image_tree(path).map(ItemStore::Images),
        DatasetFormat::RatingsCsv { top_movies, top_users } => {
            let text = fs::read_to_string(path)?;
            let rows = parse_ratings_csv(&text)?;
            RatingsTable::from_rows(rows, top_movies, top_users).map(ItemStore::Ratings)
        }
    }
}

pub(crate) fn parse_ratings_csv(text: &str) -> Result<Vec<RatingRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Err(Error::EmptyStore("ratings file is empty".into())),
        Some((_, header)) if header.trim().is_empty() => return Err(Error::EmptyStore("ratings file is empty".into())),
        Some(_) => {}
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(err(format!("expected userId,movieId,rating[,timestamp], got `{line}`")));
        }
        let user = fields[0].parse::<u64>().map_err(|e| err(format!("userId: {e}")))?;
        let movie = fields[1].parse::<u64>().map_err(|e| err(format!("movieId: {e}")))?;
        let rating = fields[2].parse::<f64>().map_err(|e| err(format!("rating: {e}")))?;
        rows.push(RatingRow { user, movie, rating });
    }
    if rows.is_empty() {
        return Err(Error::EmptyStore("ratings file has no data rows".into()));
    }
    Ok(rows)
}

fn load_image_tree(root: &Path) -> Result<ImageStore> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    let mut side = None;
    let mut classes = Vec::new();
    for dir in class_dirs {
        let mut files: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut images = Vec::new();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Generation(format!("{}: {e}", f.display())))?
                .to_luma8();
            let (w, h) = img.dimensions();
            if w != h {
                return Err(Error::Generation(format!("{}: image is not square", f.display())));
            }
            match side {
                None => side = Some(w as usize),
                Some(s) if s != w as usize => {
                    return Err(Error::Generation(format!("{}: side {w} differs from {s}", f.display())))
                }
                _ => {}
            }
            images.push(img.into_raw().into_iter().map(|p| f64::from(p) / 255.0).collect());
        }
        if !images.is_empty() {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            classes.push(ImageClass { name, images });
        }
    }
    match side {
        Some(side) => Ok(ImageStore { side, classes }),
        None => Err(Error::EmptyStore(format!("no images under {}", root.display()))),
    }
}

/// Reads `id, v1..vd` rows after a header line; every row must have the same d.
pub fn load_embedding_table(path: &Path) -> Result<Vec<(u64, Vec<f64>)>> {
    let text = fs::read_to_string(path)?;
    parse_embedding_table(&text)
}

pub(crate) fn parse_embedding_table(text: &str) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let mut fields = line.split(',').map(str::trim);
        let id = fields
            .next()
            .unwrap_or_default()
            .parse::<u64>()
            .map_err(|e| err(format!("id: {e}")))?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("value: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if values.is_empty() => return Err(err("row has no values".into())),
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => return Err(err(format!("expected {d} values, got {}", values.len()))),
            _ => {}
        }
        out.push((id, values));
    }
    if out.is_empty() {
        return Err(Error::EmptyStore("embedding table has no rows".into()));
    }
    Ok(out)
}
