//! Result tables as CSV.
//!
//! Per-table files have the columns `task,source_kind,target_kind,E_ori,E_sub,ratio`;
//! the combined file prepends a `table` column.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::artifacts::{load_finetune, load_records, load_run};
use super::stages::{pet_stem, Runner, TransferRecord};
use super::Stage;
use crate::error::Result;
use crate::pet::PetKind;
use crate::pipeline::ResultRow;
use crate::tasks::Mode;

pub const COLUMNS: [&str; 6] = ["task", "source_kind", "target_kind", "E_ori", "E_sub", "ratio"];

/// A named result table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub rows: Vec<ResultRow>,
}

fn fields(r: &ResultRow) -> [String; 6] {
    [
        r.task.clone(),
        r.source_kind.to_string(),
        r.target_kind.to_string(),
        r.e_ori.to_string(),
        r.e_sub.to_string(),
        r.ratio.to_string(),
    ]
}

pub fn write_table<W: Write>(table: &Table, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in &table.rows {
        w.write_record(fields(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_combined<W: Write>(tables: &[Table], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once("table").chain(COLUMNS))?;
    for t in tables {
        for r in &t.rows {
            w.write_record(std::iter::once(t.name.clone()).chain(fields(r)))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn e_ori(runner: &Runner, task: &str, kind: PetKind) -> Result<f64> {
    match kind {
        PetKind::FullFineTune => Ok(load_finetune(&runner.dir.join("finetune"), "delta")?.e_ori),
        k => Ok(runner.pet(task, k)?.e_ori),
    }
}

fn subspace_table(runner: &Runner, name: &str, runs_dir: &Path) -> Result<Table> {
    let mut rows = Vec::new();
    for t in &runner.test {
        for k in PetKind::PETS {
            let run = load_run(runs_dir, &pet_stem(t.id(), k))?;
            rows.push(ResultRow::new(t.id(), k, k, e_ori(runner, t.id(), k)?, run.e_sub)?);
        }
    }
    Ok(Table {
        name: name.to_string(),
        rows,
    })
}

/// Collects every table whose stage is part of the configured run.
pub fn collect_tables(runner: &Runner) -> Result<Vec<Table>> {
    let stages = &runner.cfg.stages;
    let (opt_name, transfer_name) = match runner.cfg.mode {
        Mode::Single => ("table1", "table2"),
        Mode::Multi => ("table3", "table4"),
    };
    let mut tables = Vec::new();
    if stages.contains(&Stage::SubspaceOpt) {
        tables.push(subspace_table(runner, opt_name, &runner.dir.join("runs"))?);
    }
    if stages.contains(&Stage::Transfer) {
        let records: Vec<TransferRecord> = load_records(&runner.dir, "transfer", "transfer")?;
        let rows = records
            .iter()
            .map(|r| ResultRow::new(&r.task, r.source, r.target, e_ori(runner, &r.task, r.target)?, r.e_transfer))
            .collect::<Result<_>>()?;
        tables.push(Table {
            name: transfer_name.to_string(),
            rows,
        });
    }
    if stages.contains(&Stage::SharedIntrinsic) {
        tables.push(subspace_table(runner, "shared-intrinsic", &runner.dir.join("shared/runs"))?);
    }
    if stages.contains(&Stage::FinetuneExt) {
        let rows = runner
            .matrix()?
            .iter()
            .map(|c| ResultRow::new(&c.task, c.source, c.target, e_ori(runner, &c.task, c.target)?, c.e_sub))
            .collect::<Result<_>>()?;
        tables.push(Table {
            name: "table5".to_string(),
            rows,
        });
    }
    Ok(tables)
}

/// Writes `report/<table>.csv` and `report/report.csv`.
pub fn write_reports(runner: &Runner) -> Result<Vec<Table>> {
    let tables = collect_tables(runner)?;
    let dir = runner.dir.join("report");
    fs::create_dir_all(&dir)?;
    for t in &tables {
        write_table(t, fs::File::create(dir.join(format!("{}.csv", t.name)))?)?;
    }
    write_combined(&tables, fs::File::create(dir.join("report.csv"))?)?;
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_csv_has_leading_table_column() {
        let row = ResultRow::new("t", PetKind::Adapter, PetKind::Lora, 0.8, 0.6).unwrap();
        let tables = vec![Table {
            name: "table2".into(),
            rows: vec![row.clone()],
        }];
        let mut buf = Vec::new();
        write_combined(&tables, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "table,task,source_kind,target_kind,E_ori,E_sub,ratio");
        assert_eq!(lines.next().unwrap(), format!("table2,t,adapter,lora,0.8,0.6,{}", row.ratio));

        let mut buf = Vec::new();
        write_table(&tables[0], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("task,source_kind,target_kind,E_ori,E_sub,ratio\n"));
    }
}
