use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{read_bag, TileBag};
use crate::error::{Error, Result};
use crate::mtl::{Label, LabelSet, TaskKind, TaskSpec};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TASKS_FILE: &str = "tasks.json";
const FIXED_COLUMNS: [&str; 3] = ["slide_id", "path", "n_tiles"];

#[derive(Clone, Debug, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub labels: LabelSet,
    pub n_tiles: usize,
    /// Bag file, relative to the dataset root.
    pub path: PathBuf,
}

/// A dataset directory: `manifest.csv`, `tasks.json` and the bag files.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub tasks: Vec<TaskSpec>,
    pub records: Vec<SlideRecord>,
}

fn format_label(label: Option<Label>) -> String {
    match label {
        None => String::new(),
        Some(Label::Class(c)) => c.to_string(),
        Some(Label::Value(v)) => format!("{v:?}"),
    }
}

fn parse_label(field: &str, task: &TaskSpec, line: usize) -> Result<Option<Label>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    let bad = || Error::Data(format!("manifest line {line}: `{field}` is not a valid {} label", task.name));
    let label = match task.kind {
        TaskKind::Classification { .. } => Label::Class(field.parse().map_err(|_| bad())?),
        TaskKind::Regression => Label::Value(field.parse().map_err(|_| bad())?),
    };
    Ok(Some(label))
}

impl Dataset {
    pub fn manifest_text(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = FIXED_COLUMNS
            .iter()
            .copied()
            .chain(self.tasks.iter().map(|t| t.name.as_str()))
            .collect();
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![
                r.slide_id.clone(),
                r.path.to_string_lossy().into_owned(),
                r.n_tiles.to_string(),
            ];
            row.extend((0..self.tasks.len()).map(|i| format_label(r.labels.get(i))));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    /// Writes `manifest.csv` and `tasks.json` under the root.
    pub fn save_index(&self) -> Result<()> {
        let m = self.root.join(MANIFEST_FILE);
        fs::write(&m, self.manifest_text()?).map_err(|e| Error::io(&m, e))?;
        let t = self.root.join(TASKS_FILE);
        let json = serde_json::to_string_pretty(&self.tasks).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&t, json).map_err(|e| Error::io(&t, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let tpath = root.join(TASKS_FILE);
        let text = fs::read_to_string(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let tasks: Vec<TaskSpec> =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", tpath.display())))?;
        for t in &tasks {
            t.validate()?;
        }
        let mpath = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let records = parse_manifest(&text, &tasks)?;
        Ok(Self {
            root: root.to_path_buf(),
            tasks,
            records,
        })
    }

    pub fn bag_path(&self, record: &SlideRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Reads a slide's bag, checking the tile count and naming it after the
    /// record.
    pub fn read(&self, record: &SlideRecord) -> Result<TileBag> {
        let mut bag = read_bag(&self.bag_path(record))?;
        if bag.len() != record.n_tiles {
            return Err(Error::Data(format!(
                "slide `{}`: manifest says {} tiles, bag holds {}",
                record.slide_id,
                record.n_tiles,
                bag.len()
            )));
        }
        bag.slide_id.clone_from(&record.slide_id);
        Ok(bag)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("manifest: {e}"))
}

pub fn parse_manifest(text: &str, tasks: &[TaskSpec]) -> Result<Vec<SlideRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("manifest lacks column `{name}`")))
    };
    let (id_col, path_col, n_col) = (col("slide_id")?, col("path")?, col("n_tiles")?);
    let task_cols = tasks.iter().map(|t| col(&t.name)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let line = i + 2;
        let n_tiles = row[n_col]
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {line}: bad n_tiles `{}`", &row[n_col])))?;
        let labels = LabelSet(
            tasks
                .iter()
                .zip(&task_cols)
                .map(|(t, &c)| parse_label(&row[c], t, line))
                .collect::<Result<_>>()?,
        );
        labels.validate(tasks)?;
        out.push(SlideRecord {
            slide_id: row[id_col].to_string(),
            labels,
            n_tiles,
            path: PathBuf::from(&row[path_col]),
        });
    }
    Ok(out)
}
