use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::plot::{Chart, Series, Style};
use crate::ReportArgs;

/// Rows sharing one `field` value.
type Group<'a> = (String, Vec<&'a Vec<String>>);

/// Columns of a CSV file addressed by header name.
struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("parsing {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: no `{name}` column", self.path.display()))
    }

    fn num(&self, row: &[String], col: usize) -> Result<f64> {
        row[col]
            .trim()
            .parse()
            .with_context(|| format!("{}: bad number `{}`", self.path.display(), row[col]))
    }

    /// Rows grouped by the value of the `field` column, in first-seen order.
    fn by_field(&self) -> Result<Vec<Group<'_>>> {
        let c = self.col("field")?;
        let mut groups: Vec<Group> = Vec::new();
        for row in &self.rows {
            match groups.iter_mut().find(|(f, _)| *f == row[c]) {
                Some((_, g)) => g.push(row),
                None => groups.push((row[c].clone(), vec![row])),
            }
        }
        Ok(groups)
    }
}

pub(crate) fn report(args: ReportArgs) -> Result<()> {
    let eval_dir = args.eval_dir.unwrap_or_else(|| args.run_dir.join("eval"));
    let out = args.out.unwrap_or_else(|| args.run_dir.join("plots"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let mut save = |name: &str, chart: Chart| -> Result<()> {
        let path = out.join(name);
        std::fs::write(&path, chart.to_svg()).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
        Ok(())
    };

    let losses = args.run_dir.join("losses.csv");
    if losses.exists() {
        save("losses.svg", loss_chart(&Table::read(&losses)?)?)?;
    }
    let w1 = args.run_dir.join("wasserstein.csv");
    if w1.exists() {
        let t = Table::read(&w1)?;
        let (e, w) = (t.col("epoch")?, t.col("wasserstein")?);
        let pts = t.rows.iter().map(|r| Ok((t.num(r, e)?, t.num(r, w)?))).collect::<Result<_>>()?;
        let mut c = Chart::new("Wasserstein distance to the reference", "epoch", "W1").log_y();
        c.push(Series::new("generated vs reference", pts, Style::Line));
        save("wasserstein.svg", c)?;
    }
    if eval_dir.join("errors.csv").exists() {
        save("errors.svg", error_chart(&Table::read(&eval_dir.join("errors.csv"))?)?)?;
        save("summary.svg", summary_chart(&Table::read(&eval_dir.join("summary.csv"))?)?)?;
        for (field, chart) in moment_charts(&Table::read(&eval_dir.join("curves.csv"))?)? {
            save(&format!("moments-{field}.svg"), chart)?;
        }
        for (field, chart) in eigen_charts(&Table::read(&eval_dir.join("eigenvalues.csv"))?)? {
            save(&format!("eigenvalues-{field}.svg"), chart)?;
        }
    }
    if written.is_empty() {
        bail!(
            "nothing to plot: no losses.csv in {} and no errors.csv in {}",
            args.run_dir.display(),
            eval_dir.display()
        );
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

/// Per-epoch averages of the batch objectives.
fn loss_chart(t: &Table) -> Result<Chart> {
    let (e, enc, gen) = (t.col("epoch")?, t.col("encoder_objective")?, t.col("generator_objective")?);
    let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in &t.rows {
        let a = acc.entry(t.num(r, e)? as u64).or_default();
        a.0 += t.num(r, enc)?;
        a.1 += t.num(r, gen)?;
        a.2 += 1;
    }
    let mut c = Chart::new("Training objectives (epoch mean)", "epoch", "objective");
    c.push(Series::new(
        "encoder",
        acc.iter().map(|(&k, a)| (k as f64, a.0 / a.2 as f64)).collect(),
        Style::Line,
    ));
    c.push(Series::new(
        "generator",
        acc.iter().map(|(&k, a)| (k as f64, a.1 / a.2 as f64)).collect(),
        Style::Line,
    ));
    Ok(c)
}

fn error_chart(t: &Table) -> Result<Chart> {
    let (e, m, s) = (t.col("epoch")?, t.col("rel_err_mean")?, t.col("rel_err_std")?);
    let mut c = Chart::new("Relative L2 error per checkpoint", "epoch", "relative error").log_y();
    for (field, rows) in t.by_field()? {
        let pts = |col| rows.iter().map(|r| Ok((t.num(r, e)?, t.num(r, col)?))).collect::<Result<Vec<_>>>();
        c.push(Series::new(format!("{field} mean"), pts(m)?, Style::Line));
        c.push(Series::new(format!("{field} std"), pts(s)?, Style::Dashed));
    }
    Ok(c)
}

/// Error bars over checkpoints; x is the field index.
fn summary_chart(t: &Table) -> Result<Chart> {
    let cols = [
        t.col("rel_err_mean")?,
        t.col("rel_err_mean_sd")?,
        t.col("rel_err_std")?,
        t.col("rel_err_std_sd")?,
    ];
    let fields = t.by_field()?;
    let names: Vec<&str> = fields.iter().map(|(f, _)| f.as_str()).collect();
    let mut c = Chart::new(
        format!("Error over checkpoints, fields {}", names.join(", ")),
        "field index",
        "relative error",
    );
    for (label, (v, sd), shift) in [("mean", (cols[0], cols[1]), -0.1), ("std", (cols[2], cols[3]), 0.1)] {
        let mut pts = Vec::new();
        let mut err = Vec::new();
        for (i, (_, rows)) in fields.iter().enumerate() {
            pts.push((i as f64 + shift, t.num(rows[0], v)?));
            err.push(t.num(rows[0], sd)?);
        }
        c.push(Series::new(label, pts, Style::Markers).with_errors(err));
    }
    Ok(c)
}

fn moment_charts(t: &Table) -> Result<Vec<(String, Chart)>> {
    let x = t.col("x")?;
    let cols = [t.col("mean")?, t.col("std")?, t.col("reference_mean")?, t.col("reference_std")?];
    let mut out = Vec::new();
    for (field, rows) in t.by_field()? {
        let curve = |col| rows.iter().map(|r| Ok((t.num(r, x)?, t.num(r, col)?))).collect::<Result<Vec<_>>>();
        let mut c = Chart::new(format!("Mean and standard deviation of {field}"), "x", &field);
        c.push(Series::new("mean", curve(cols[0])?, Style::Line));
        c.push(Series::new("reference mean", curve(cols[2])?, Style::Dashed));
        c.push(Series::new("std", curve(cols[1])?, Style::Line));
        c.push(Series::new("reference std", curve(cols[3])?, Style::Dashed));
        out.push((field, c));
    }
    Ok(out)
}

fn eigen_charts(t: &Table) -> Result<Vec<(String, Chart)>> {
    let (i, g, r) = (t.col("index")?, t.col("generated")?, t.col("reference")?);
    let mut out = Vec::new();
    for (field, rows) in t.by_field()? {
        let pts = |col| rows.iter().map(|row| Ok((t.num(row, i)?, t.num(row, col)?))).collect::<Result<Vec<_>>>();
        let mut c = Chart::new(format!("Covariance eigenvalues of {field}"), "index", "eigenvalue").log_y();
        c.push(Series::new("generated", pts(g)?, Style::Markers));
        c.push(Series::new("reference", pts(r)?, Style::Markers));
        out.push((field, c));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> Table {
        let dir = std::env::temp_dir().join(format!("gea-report-{}-{}", std::process::id(), text.len()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.csv");
        std::fs::write(&p, text).unwrap();
        Table::read(&p).unwrap()
    }

    #[test]
    fn loss_chart_averages_batches() {
        let t = table("epoch,batch,encoder_objective,generator_objective\n1,0,1.0,4.0\n1,1,3.0,6.0\n2,0,0.5,1.0\n");
        let c = loss_chart(&t).unwrap();
        assert_eq!(c.series[0].points, vec![(1.0, 2.0), (2.0, 0.5)]);
        assert_eq!(c.series[1].points, vec![(1.0, 5.0), (2.0, 1.0)]);
    }

    #[test]
    fn groups_keep_file_order() {
        let t = table("x,field,mean,std,reference_mean,reference_std\n0,u,1,2,3,4\n0,k,1,2,3,4\n1,u,1,2,3,4\n");
        let g = t.by_field().unwrap();
        assert_eq!(g.iter().map(|(f, r)| (f.as_str(), r.len())).collect::<Vec<_>>(), vec![("u", 2), ("k", 1)]);
        assert_eq!(moment_charts(&t).unwrap().len(), 2);
    }

    #[test]
    fn missing_column_is_named() {
        let t = table("epoch,batch\n1,0\n");
        let e = loss_chart(&t).unwrap_err().to_string();
        assert!(e.contains("encoder_objective"), "{e}");
    }
}
