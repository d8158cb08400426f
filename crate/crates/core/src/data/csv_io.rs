use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Dataset, FeatureSchema, Instance};

/// Reads a dataset file: header row of field names, then `label`, `scenario`
/// (1-based). Indices beyond a field's vocabulary map to bucket 0.
pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset, DataError> {
    read_csv(File::open(path)?, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let field_cols = schema
        .fields
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<Vec<_>, _>>()?;
    let label_col = column("label")?;
    let scenario_col = column("scenario")?;

    let mut instances = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let cell = |col: usize| record.get(col).map(str::trim).unwrap_or("");
        let parse = |col: usize, what: &str| -> Result<u64, DataError> {
            cell(col).parse::<u64>().map_err(|_| DataError::Parse {
                line,
                message: format!("non-integer {what} `{}`", cell(col)),
            })
        };
        let mut features = Vec::with_capacity(field_cols.len());
        for (f, &col) in schema.fields.iter().zip(&field_cols) {
            let v = parse(col, &format!("index for `{}`", f.name))?;
            features.push(if (v as usize) < f.vocab_size { v as u32 } else { 0 });
        }
        let label = match parse(label_col, "label")? {
            0 => 0,
            1 => 1,
            other => {
                return Err(DataError::Parse {
                    line,
                    message: format!("label {other} is not 0 or 1"),
                })
            }
        };
        let scenario = parse(scenario_col, "scenario")? as usize;
        if scenario < 1 || scenario > schema.scenarios {
            return Err(DataError::Parse {
                line,
                message: format!("scenario {scenario} outside [1, {}]", schema.scenarios),
            });
        }
        instances.push(Instance {
            features,
            label,
            scenario: scenario - 1,
        });
    }
    Ok(Dataset::new(instances))
}

pub fn write_csv<W: Write>(writer: W, dataset: &Dataset, schema: &FeatureSchema) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = schema.fields.iter().map(|f| f.name.as_str()).collect();
    header.extend(["label", "scenario"]);
    wtr.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for inst in dataset.iter() {
        row.clear();
        row.extend(inst.features.iter().map(u32::to_string));
        row.push(inst.label.to_string());
        row.push((inst.scenario + 1).to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
