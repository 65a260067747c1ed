use serde::Serialize;
use std::fmt::Debug;
use std::io::Write;
use std::path::Path;
use tempfile::NamedTempFile;

pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// A CSV table with the schema comment line.
pub struct Table {
    text: String,
}

impl Table {
    pub fn new(schema: &str, columns: &[String]) -> Self {
        Self { text: format!("# schema=qp-transport/v1/{schema}\n{}\n", columns.join(",")) }
    }

    pub fn row(&mut self, cells: &[Cell]) {
        let line: Vec<String> = cells.iter().map(Cell::render).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub fn into_artifact(self, name: &str) -> Artifact {
        Artifact { name: name.into(), bytes: self.text.into_bytes() }
    }
}

pub enum Cell {
    F(f64),
    I(i128),
    S(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(x) => format!("{x:?}"),
            Cell::I(n) => n.to_string(),
            Cell::S(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    pub fn opt<T: Debug>(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, |x| Cell::S(format!("{x:?}")))
    }
}

pub fn json_artifact<T: Serialize>(name: &str, value: &T) -> Artifact {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    Artifact { name: name.into(), bytes }
}

/// Writes every artifact to a temporary file in `dir` first and renames them into place
/// only once all writes have succeeded.
pub fn commit(dir: &Path, artifacts: &[Artifact]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut staged = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let mut tmp = NamedTempFile::new_in(dir)?;
        tmp.write_all(&a.bytes)?;
        tmp.as_file().sync_all()?;
        staged.push((tmp, dir.join(&a.name)));
    }
    for (tmp, target) in staged {
        tmp.persist(target).map_err(|e| e.error)?;
    }
    Ok(())
}
