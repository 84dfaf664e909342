//! CSV and JSON persistence. Every CSV table has a JSON sidecar with the
//! same stem carrying the metadata needed to read it back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{Provenance, ReferencePosterior};
use crate::error::{precondition, Error, Result};
use crate::kernels::{ChainTrace, TraceMeta, TransformKind, TransformSeries, VariantId};
use crate::metrics::Table1Row;
use crate::model::{Dataset, ExpandedTheta, Theta};

pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&s)?)
}

/// Column names `alpha2, …, alpha{c−1}, beta1, …, betap`.
pub fn theta_columns(c: usize, p: usize) -> Vec<String> {
    (2..c).map(|j| format!("alpha{j}")).chain((1..=p).map(|k| format!("beta{k}"))).collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn parse(s: &str, path: &Path) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::Config(format!("{}: bad number '{s}': {e}", path.display())))
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let header = rd.headers()?.iter().map(str::to_string).collect();
    let rows = rd.records().map(|r| Ok(r?.iter().map(str::to_string).collect())).collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub c: usize,
    pub p: usize,
    pub seed: u64,
    pub theta0: Option<Theta>,
}

/// Writes `x1,…,xp,y` to `path` and the sidecar.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=data.p).map(|k| format!("x{k}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..data.n {
        let mut rec: Vec<String> = data.row(i).iter().map(|&v| num(v)).collect();
        rec.push(data.y[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_json(&sidecar(path), &DatasetMeta { n: data.n, c: data.c, p: data.p, seed: data.seed, theta0: data.true_theta.clone() })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = read_json(&sidecar(path))?;
    let (header, rows) = read_rows(path)?;
    precondition!(header.len() == meta.p + 1, "{}: expected {} columns", path.display(), meta.p + 1);
    let mut x = Vec::with_capacity(rows.len() * meta.p);
    let mut y = Vec::with_capacity(rows.len());
    for r in &rows {
        for v in &r[..meta.p] {
            x.push(parse(v, path)?);
        }
        y.push(r[meta.p].trim().parse::<usize>().map_err(|e| Error::Config(format!("{}: bad label: {e}", path.display())))?);
    }
    precondition!(y.len() == meta.n, "{}: sidecar says n={} but file has {} rows", path.display(), meta.n, y.len());
    Dataset::new(x, y, meta.c, meta.p, meta.theta0, meta.seed)
}

/// File name of replication `rep` of a chain.
pub fn trace_filename(variant: VariantId, n: usize, rep: usize) -> String {
    format!("{variant}_n{n}_r{rep}.csv")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub variant: VariantId,
    pub transforms: Vec<TransformKind>,
    pub meta: TraceMeta,
}

/// Writes `step, alpha…, beta…, g, <transform columns>`.
pub fn write_trace(path: &Path, trace: &ChainTrace) -> Result<()> {
    let (c, p) = (trace.meta.c, trace.meta.p);
    let mut header = vec!["step".to_string()];
    header.extend(theta_columns(c, p));
    header.push("g".into());
    for t in &trace.transforms {
        header.extend(t.kind.columns(c, p)?);
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for (i, s) in trace.params.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(s.theta.to_vec().into_iter().map(num));
        rec.push(num(s.g));
        for t in &trace.transforms {
            rec.extend(t.values[i].iter().map(|&v| num(v)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_json(
        &sidecar(path),
        &TraceSidecar { variant: trace.variant, transforms: trace.transforms.iter().map(|t| t.kind).collect(), meta: trace.meta.clone() },
    )
}

pub fn read_trace(path: &Path) -> Result<ChainTrace> {
    let side: TraceSidecar = read_json(&sidecar(path))?;
    let (c, p) = (side.meta.c, side.meta.p);
    let (header, rows) = read_rows(path)?;
    let d = c - 2 + p;
    let mut params = Vec::with_capacity(rows.len());
    let mut transforms: Vec<TransformSeries> = side.transforms.iter().map(|&kind| TransformSeries { kind, values: Vec::new() }).collect();
    let widths = side.transforms.iter().map(|t| t.dim(c, p)).collect::<Result<Vec<_>>>()?;
    precondition!(header.len() == 2 + d + widths.iter().sum::<usize>(), "{}: column count does not match sidecar", path.display());
    for r in &rows {
        let v = r[1..].iter().map(|s| parse(s, path)).collect::<Result<Vec<f64>>>()?;
        params.push(ExpandedTheta { theta: Theta::from_slice(c, &v[..d]), g: v[d] });
        let mut at = d + 1;
        for (t, &w) in transforms.iter_mut().zip(&widths) {
            t.values.push(v[at..at + w].to_vec());
            at += w;
        }
    }
    Ok(ChainTrace { variant: side.variant, params, transforms, meta: side.meta })
}

/// Everything in a reference posterior except the sample itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSidecar {
    pub n: usize,
    pub c: usize,
    pub p: usize,
    pub data_seed: u64,
    pub draws: usize,
    pub theta_hat: Vec<f64>,
    pub fisher: Vec<Vec<f64>>,
    pub bvm_mean: Vec<f64>,
    pub bvm_cov: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

pub fn write_reference(path: &Path, r: &ReferencePosterior) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(theta_columns(r.c, r.p))?;
    for row in &r.sample {
        w.write_record(row.iter().map(|&v| num(v)))?;
    }
    w.flush()?;
    write_json(
        &sidecar(path),
        &ReferenceSidecar {
            n: r.n,
            c: r.c,
            p: r.p,
            data_seed: r.data_seed,
            draws: r.sample.len(),
            theta_hat: r.theta_hat.clone(),
            fisher: r.fisher.clone(),
            bvm_mean: r.bvm_mean.clone(),
            bvm_cov: r.bvm_cov.clone(),
            provenance: r.provenance.clone(),
        },
    )
}

pub fn read_reference(path: &Path) -> Result<ReferencePosterior> {
    let side: ReferenceSidecar = read_json(&sidecar(path))?;
    let (header, rows) = read_rows(path)?;
    precondition!(header == theta_columns(side.c, side.p), "{}: unexpected columns {header:?}", path.display());
    let sample = rows.iter().map(|r| r.iter().map(|s| parse(s, path)).collect()).collect::<Result<Vec<Vec<f64>>>>()?;
    precondition!(sample.len() == side.draws, "{}: sidecar says {} draws, file has {}", path.display(), side.draws, sample.len());
    Ok(ReferencePosterior {
        n: side.n,
        c: side.c,
        p: side.p,
        data_seed: side.data_seed,
        sample,
        theta_hat: side.theta_hat,
        fisher: side.fisher,
        bvm_mean: side.bvm_mean,
        bvm_cov: side.bvm_cov,
        provenance: side.provenance,
    })
}

/// Writes `variant,c,n,D,se,label`.
pub fn write_table1(path: &Path, rows: &[Table1Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table1(path: &Path) -> Result<Vec<Table1Row>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    Ok(rd.deserialize().collect::<std::result::Result<Vec<Table1Row>, _>>()?)
}
