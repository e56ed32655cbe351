//! CSV inputs and outputs. Floats are written in shortest round-trip form.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{Releve, TrophicTable};
use crate::error::{Error, Result};
use crate::metrics::format_f64;
use crate::numerics::Matrix;

pub(crate) fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

pub(crate) fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub(crate) fn parse_f64(field: &str, what: &str, path: &Path) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("{}: bad {what} value {field:?}", path.display())))
}

fn field<'r>(rec: &'r csv::StringRecord, i: usize, path: &Path) -> Result<&'r str> {
    rec.get(i)
        .ok_or_else(|| Error::Config(format!("{}: record has {} fields, need {}", path.display(), rec.len(), i + 1)))
}

fn column_index(header: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Config(format!("{}: missing column {name:?}", path.display())))
}

/// Sites with planar coordinates and one numeric column per variable:
/// `<id>,x_m,y_m,<column…>`. Used for cover and presence tables.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteTable {
    pub ids: Vec<String>,
    pub locations: Vec<(f64, f64)>,
    pub columns: Vec<String>,
    /// `sites × columns`.
    pub values: Matrix,
}

impl SiteTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = writer(path)?;
        let mut header = vec!["plot_id".to_string(), "x_m".into(), "y_m".into()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let (x, y) = self.locations[i];
            let mut rec = vec![id.clone(), format_f64(x), format_f64(y)];
            rec.extend(self.values.row(i).iter().map(|v| format_f64(*v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = reader(path)?;
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[1] != "x_m" || &header[2] != "y_m" {
            return Err(Error::Config(format!("{}: expected header <id>,x_m,y_m,…", path.display())));
        }
        let columns: Vec<String> = header.iter().skip(3).map(str::to_owned).collect();
        let mut ids = Vec::new();
        let mut locations = Vec::new();
        let mut data = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Config(format!("{}: ragged record {:?}", path.display(), &rec[0])));
            }
            ids.push(rec[0].to_owned());
            locations.push((parse_f64(&rec[1], "x_m", path)?, parse_f64(&rec[2], "y_m", path)?));
            for v in rec.iter().skip(3) {
                data.push(parse_f64(v, "table", path)?);
            }
        }
        let n = ids.len();
        let t = Self {
            ids,
            locations,
            values: Matrix::new(n, columns.len(), data)?,
            columns,
        };
        t.check_unique()?;
        Ok(t)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        match self.ids.iter().find(|id| !seen.insert(id.as_str())) {
            Some(dup) => Err(Error::DuplicateEntry(format!("site {dup:?}"))),
            None => Ok(()),
        }
    }

    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

/// `plot_id,class` with zero-based class indices.
pub fn write_labels(ids: &[String], classes: &[usize], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["plot_id", "class"])?;
    for (id, c) in ids.iter().zip(classes) {
        w.write_record([id.as_str(), &c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut r = reader(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = field(&rec, 0, path)?.to_owned();
        let c = field(&rec, 1, path)?
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{}: bad class for {id:?}", path.display())))?;
        out.push((id, c));
    }
    Ok(out)
}

/// Long-format relevés grouped by plot in first-appearance order, plus the
/// sorted class names that the returned class indices refer to.
pub fn read_releves(path: &Path) -> Result<(Vec<Releve>, Vec<String>)> {
    let mut r = reader(path)?;
    let header = r.headers()?.clone();
    let col = |name| column_index(&header, name, path);
    let (ip, ix, iy, ic, is, ib) = (
        col("plot_id")?,
        col("x_m")?,
        col("y_m")?,
        col("prodrome_class")?,
        col("species_id")?,
        col("bb_class")?,
    );
    struct Pending {
        plot_id: String,
        location: (f64, f64),
        class: String,
        species_covers: Vec<(String, String)>,
    }
    let mut plots: Vec<Pending> = Vec::new();
    let mut slot: BTreeMap<String, usize> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let plot = field(&rec, ip, path)?;
        let location = (
            parse_f64(field(&rec, ix, path)?, "x_m", path)?,
            parse_f64(field(&rec, iy, path)?, "y_m", path)?,
        );
        let class = field(&rec, ic, path)?;
        let k = *slot.entry(plot.to_owned()).or_insert_with(|| {
            plots.push(Pending {
                plot_id: plot.to_owned(),
                location,
                class: class.to_owned(),
                species_covers: Vec::new(),
            });
            plots.len() - 1
        });
        let p = &mut plots[k];
        if p.location != location || p.class != class {
            return Err(Error::Config(format!(
                "{}: plot {plot:?} has inconsistent location or class",
                path.display()
            )));
        }
        p.species_covers
            .push((field(&rec, is, path)?.to_owned(), field(&rec, ib, path)?.to_owned()));
    }
    let mut classes: Vec<String> = plots.iter().map(|p| p.class.clone()).collect();
    classes.sort();
    classes.dedup();
    let releves = plots
        .into_iter()
        .map(|p| Releve {
            class: classes.binary_search(&p.class).expect("collected above"),
            plot_id: p.plot_id,
            location: p.location,
            species_covers: p.species_covers,
        })
        .collect();
    Ok((releves, classes))
}

/// One row of `occurrences.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccurrenceRecord {
    pub species_id: String,
    pub x: f64,
    pub y: f64,
    pub label: u8,
    /// Joins the record to an embedding row; defaults to `"<x>_<y>"`.
    pub point_id: String,
}

pub fn point_key(x: f64, y: f64) -> String {
    format!("{}_{}", format_f64(x), format_f64(y))
}

/// `species_id,x_m,y_m,label[,point_id]`.
pub fn read_occurrences(path: &Path) -> Result<Vec<OccurrenceRecord>> {
    let mut r = reader(path)?;
    let header = r.headers()?.clone();
    let col = |name| column_index(&header, name, path);
    let (is, ix, iy, il) = (col("species_id")?, col("x_m")?, col("y_m")?, col("label")?);
    let ipt = header.iter().position(|h| h == "point_id");
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let x = parse_f64(field(&rec, ix, path)?, "x_m", path)?;
        let y = parse_f64(field(&rec, iy, path)?, "y_m", path)?;
        let label = match field(&rec, il, path)? {
            "1" => 1,
            "0" => 0,
            other => return Err(Error::Config(format!("{}: label must be 0 or 1, got {other:?}", path.display()))),
        };
        let point_id = match ipt {
            Some(i) => field(&rec, i, path)?.to_owned(),
            None => point_key(x, y),
        };
        out.push(OccurrenceRecord {
            species_id: field(&rec, is, path)?.to_owned(),
            x,
            y,
            label,
            point_id,
        });
    }
    Ok(out)
}

pub fn write_occurrences(records: &[OccurrenceRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["species_id", "x_m", "y_m", "label", "point_id"])?;
    for o in records {
        w.write_record([
            o.species_id.clone(),
            format_f64(o.x),
            format_f64(o.y),
            o.label.to_string(),
            o.point_id.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `sample_id,x_m,y_m,elevation_m,<group…>`; returns the table and group names.
pub fn read_soil(path: &Path) -> Result<(TrophicTable, Vec<String>)> {
    let mut r = reader(path)?;
    let header = r.headers()?.clone();
    let expected = ["sample_id", "x_m", "y_m", "elevation_m"];
    if header.len() <= expected.len() || header.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Config(format!(
            "{}: expected header sample_id,x_m,y_m,elevation_m,<groups…>",
            path.display()
        )));
    }
    let groups: Vec<String> = header.iter().skip(4).map(str::to_owned).collect();
    let (mut ids, mut locations, mut elevation, mut data) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Config(format!("{}: ragged record {:?}", path.display(), &rec[0])));
        }
        ids.push(rec[0].to_owned());
        locations.push((parse_f64(&rec[1], "x_m", path)?, parse_f64(&rec[2], "y_m", path)?));
        elevation.push(parse_f64(&rec[3], "elevation_m", path)?);
        for v in rec.iter().skip(4) {
            data.push(parse_f64(v, "abundance", path)?);
        }
    }
    let n = ids.len();
    Ok((
        TrophicTable {
            sample_ids: ids,
            locations,
            elevation,
            abundances: Matrix::new(n, groups.len(), data)?,
        },
        groups,
    ))
}

pub fn write_soil(table: &TrophicTable, groups: &[String], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["sample_id", "x_m", "y_m", "elevation_m"].map(String::from).to_vec();
    header.extend(groups.iter().cloned());
    w.write_record(&header)?;
    for i in 0..table.sample_ids.len() {
        let (x, y) = table.locations[i];
        let mut rec = vec![
            table.sample_ids[i].clone(),
            format_f64(x),
            format_f64(y),
            format_f64(table.elevation[i]),
        ];
        rec.extend(table.abundances.row(i).iter().map(|v| format_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
