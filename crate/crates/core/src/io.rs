//! File formats: mesh and covariate CSVs, outcome and draw binaries,
//! key=value config files and the CSV reports.
//!
//! Outcomes from other imaging formats enter through [`OutcomeSource`]:
//! implement it for a reader and pass it to [`RegressionDataset::new`].
//!
//! [`RegressionDataset::new`]: crate::model::RegressionDataset::new

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::inference::{
    activation_from_band, pointwise_intervals, simultaneous_band, DiagnosticsReport, DrawsMeta, GofReport,
    PosteriorDraws, VarianceTrace, Variant,
};
use crate::model::{InMemoryOutcomes, OutcomeSource};
use crate::sphere::SphericalMesh;

const OUTCOME_MAGIC: &[u8; 4] = b"GPIS";
const DRAWS_MAGIC: &[u8; 4] = b"GPDR";
const VERSION: u32 = 1;
const OUTCOME_HEADER: u64 = 4 + 4 + 8 + 8;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::data(format!("bad {what} '{s}': {e}")))
}

// ---------------------------------------------------------------- config

/// Reads `key = value` lines; `#` starts a comment.
pub fn read_key_values(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = BTreeMap::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected key=value", path.display(), ln + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn write_key_values(path: impl AsRef<Path>, map: &BTreeMap<String, String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in map {
        writeln!(w, "{k} = {v}")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- mesh

/// Reads a `vertex,x,y,z[,region]` CSV. Rows may come in any order but
/// vertex ids must be exactly `0..M`.
pub fn read_mesh_csv(path: impl AsRef<Path>, radius: f64) -> Result<SphericalMesh> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers: Vec<String> =
        rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(|h| h.trim().to_string()).collect();
    let has_region = match headers.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["vertex", "x", "y", "z"] => false,
        ["vertex", "x", "y", "z", "region"] => true,
        _ => return Err(Error::Format(format!("{}: mesh header must be vertex,x,y,z[,region]", path.display()))),
    };
    let mut rows: Vec<(usize, [f64; 3], u32)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let id: usize = rec[0].trim().parse().map_err(|e| Error::data(format!("bad vertex id '{}': {e}", &rec[0])))?;
        let dir = [parse_f64(&rec[1], "x")?, parse_f64(&rec[2], "y")?, parse_f64(&rec[3], "z")?];
        let region = if has_region {
            rec[4].trim().parse().map_err(|e| Error::data(format!("bad region '{}': {e}", &rec[4])))?
        } else {
            0
        };
        rows.push((id, dir, region));
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(k, r)| r.0 != k) {
        return Err(Error::data("vertex ids must be dense 0..M-1 without duplicates"));
    }
    let mesh = SphericalMesh::new(rows.iter().map(|r| r.1).collect(), radius)?;
    if has_region {
        mesh.with_regions(rows.iter().map(|r| r.2).collect())
    } else {
        Ok(mesh)
    }
}

pub fn write_mesh_csv(path: impl AsRef<Path>, mesh: &SphericalMesh) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let regions = mesh.regions();
    let mut header = vec!["vertex", "x", "y", "z"];
    if regions.is_some() {
        header.push("region");
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, d) in mesh.directions().iter().enumerate() {
        let mut row = vec![i.to_string(), fmt(d[0]), fmt(d[1]), fmt(d[2])];
        if let Some(r) = regions {
            row.push(r[i].to_string());
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

// ---------------------------------------------------------------- covariates

/// Covariate table: ids in the first column, then `P` numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub ids: Vec<String>,
    pub names: Vec<String>,
    /// Row-major `N x P`.
    pub values: Vec<f64>,
}

impl Covariates {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn p(&self) -> usize {
        self.names.len()
    }

    /// Copy with a leading column of ones named `intercept`.
    pub fn with_intercept(&self) -> Covariates {
        let p = self.p();
        let values = self
            .values
            .chunks(p.max(1))
            .take(self.n())
            .flat_map(|row| std::iter::once(1.0).chain(row.iter().copied().take(p)))
            .collect();
        let mut names = vec!["intercept".to_string()];
        names.extend(self.names.iter().cloned());
        Covariates { ids: self.ids.clone(), names, values }
    }
}

pub fn read_covariates_csv(path: impl AsRef<Path>) -> Result<Covariates> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let names: Vec<String> =
        rdr.headers().map_err(|e| csv_err(path, e))?.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        ids.push(rec[0].trim().to_string());
        for (k, name) in names.iter().enumerate() {
            values.push(parse_f64(&rec[k + 1], name)?);
        }
    }
    Ok(Covariates { ids, names, values })
}

pub fn write_covariates_csv(path: impl AsRef<Path>, cov: &Covariates) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id".to_string()];
    header.extend(cov.names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let p = cov.p();
    for (i, id) in cov.ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(cov.values[i * p..(i + 1) * p].iter().map(|v| fmt(*v)));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- outcomes

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, out: &mut [f64]) -> Result<()> {
    let mut b = [0u8; 8];
    for v in out.iter_mut() {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(())
}

fn write_f64s(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("not a {what} file (bad magic)")));
    }
    let v = read_u32(r)?;
    if v != VERSION {
        return Err(Error::Format(format!("unsupported {what} version {v}")));
    }
    Ok(())
}

/// Writes `N x M` row-major outcomes in the binary layout.
pub fn write_outcomes_bin(path: impl AsRef<Path>, data: &[f64], n: usize, m: usize) -> Result<()> {
    if data.len() != n * m {
        return Err(Error::argument("outcome buffer does not match N x M"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(OUTCOME_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(m as u64).to_le_bytes())?;
    write_f64s(&mut w, data)?;
    w.flush()?;
    Ok(())
}

/// Binary outcome file read one image at a time.
#[derive(Debug, Clone)]
pub struct BinaryOutcomes {
    path: PathBuf,
    n: usize,
    m: usize,
}

impl BinaryOutcomes {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut f = File::open(&path)?;
        check_magic(&mut f, OUTCOME_MAGIC, "outcome")?;
        let n = read_u64(&mut f)? as usize;
        let m = read_u64(&mut f)? as usize;
        let expect = OUTCOME_HEADER + 8 * (n as u64) * (m as u64);
        let len = f.metadata()?.len();
        if len != expect {
            return Err(Error::Format(format!("outcome file is {len} bytes, header implies {expect}")));
        }
        Ok(BinaryOutcomes { path, n, m })
    }

    pub fn load(&self) -> Result<InMemoryOutcomes> {
        let mut data = vec![0.0; self.n * self.m];
        let mut r = BufReader::new(File::open(&self.path)?);
        r.seek(SeekFrom::Start(OUTCOME_HEADER))?;
        read_f64s(&mut r, &mut data)?;
        InMemoryOutcomes::new(data, self.n, self.m)
    }
}

impl OutcomeSource for BinaryOutcomes {
    fn n_images(&self) -> usize {
        self.n
    }

    fn n_vertices(&self) -> usize {
        self.m
    }

    fn for_each_image(&self, f: &mut dyn FnMut(usize, &[f64]) -> Result<()>) -> Result<()> {
        let mut r = BufReader::with_capacity(1 << 20, File::open(&self.path)?);
        r.seek(SeekFrom::Start(OUTCOME_HEADER))?;
        let mut buf = vec![0.0; self.m];
        for i in 0..self.n {
            read_f64s(&mut r, &mut buf)?;
            f(i, &buf)?;
        }
        Ok(())
    }
}

/// One image per row, no header.
pub fn read_outcomes_csv(path: impl AsRef<Path>) -> Result<InMemoryOutcomes> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
    let mut data = Vec::new();
    let mut m = None;
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if *m.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::data(format!("image {n} has {} values, expected {}", rec.len(), m.unwrap())));
        }
        for v in rec.iter() {
            data.push(parse_f64(v, "outcome")?);
        }
        n += 1;
    }
    InMemoryOutcomes::new(data, n, m.unwrap_or(0))
}

pub fn write_outcomes_csv(path: impl AsRef<Path>, data: &[f64], n: usize, m: usize) -> Result<()> {
    let path = path.as_ref();
    if data.len() != n * m {
        return Err(Error::argument("outcome buffer does not match N x M"));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
    for img in data.chunks(m.max(1)) {
        w.write_record(img.iter().map(|v| fmt(*v))).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Opens outcomes by content: the binary layout when the magic matches,
/// CSV otherwise. Binary files stream from disk.
pub fn open_outcomes(path: impl AsRef<Path>) -> Result<Box<dyn OutcomeSource>> {
    let path = path.as_ref();
    let mut magic = [0u8; 4];
    let is_bin = File::open(path)?.read_exact(&mut magic).is_ok() && &magic == OUTCOME_MAGIC;
    if is_bin {
        Ok(Box::new(BinaryOutcomes::open(path)?))
    } else {
        Ok(Box::new(read_outcomes_csv(path)?))
    }
}

/// Collects any source into memory.
pub fn collect_outcomes(source: &dyn OutcomeSource) -> Result<InMemoryOutcomes> {
    let (n, m) = (source.n_images(), source.n_vertices());
    let mut data = Vec::with_capacity(n * m);
    source.for_each_image(&mut |_, y| {
        data.extend_from_slice(y);
        Ok(())
    })?;
    InMemoryOutcomes::new(data, n, m)
}

// ---------------------------------------------------------------- draws

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Working => 0,
        Variant::Marginal => 1,
        Variant::Conditional => 2,
        Variant::Glm => 3,
        Variant::GlmPs => 4,
        Variant::Oracle => 5,
        Variant::LowRank => 6,
    }
}

fn variant_from_code(c: u8) -> Result<Variant> {
    Ok(match c {
        0 => Variant::Working,
        1 => Variant::Marginal,
        2 => Variant::Conditional,
        3 => Variant::Glm,
        4 => Variant::GlmPs,
        5 => Variant::Oracle,
        6 => Variant::LowRank,
        _ => return Err(Error::Format(format!("unknown variant code {c}"))),
    })
}

/// Draw file layout (little endian): magic, u32 version, u64 S, P, M,
/// chain count, chain lengths, u8 variant, u64 seed, u64 config hash,
/// `S·P·M` f64 draws, then a flag byte and `S·M` noise variances, then
/// a flag byte and per-draw `(τ², ξ, ζ²[P])` traces.
pub fn write_draws(path: impl AsRef<Path>, draws: &PosteriorDraws) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DRAWS_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [draws.n_draws(), draws.p(), draws.m(), draws.chain_lengths().len()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for &c in draws.chain_lengths() {
        w.write_all(&(c as u64).to_le_bytes())?;
    }
    w.write_all(&[variant_code(draws.meta.variant)])?;
    w.write_all(&draws.meta.seed.to_le_bytes())?;
    w.write_all(&draws.meta.config_hash.to_le_bytes())?;
    write_f64s(&mut w, draws.raw())?;
    match &draws.sigma2 {
        Some(s) => {
            w.write_all(&[1])?;
            write_f64s(&mut w, s)?;
        }
        None => w.write_all(&[0])?,
    }
    let full = draws.traces.len() == draws.n_draws();
    w.write_all(&[full as u8])?;
    if full {
        for t in &draws.traces {
            write_f64s(&mut w, &[t.tau2, t.xi])?;
            let mut z = t.zeta2.clone();
            z.resize(draws.p(), f64::NAN);
            write_f64s(&mut w, &z)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_draws(path: impl AsRef<Path>) -> Result<PosteriorDraws> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, DRAWS_MAGIC, "draws")?;
    let s = read_u64(&mut r)? as usize;
    let p = read_u64(&mut r)? as usize;
    let m = read_u64(&mut r)? as usize;
    let nc = read_u64(&mut r)? as usize;
    if nc == 0 || nc > s.max(1) || s.checked_mul(p).and_then(|v| v.checked_mul(m)).is_none() {
        return Err(Error::Format("corrupt draws header".into()));
    }
    let chains = (0..nc).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let meta =
        DrawsMeta { variant: variant_from_code(code[0])?, seed: read_u64(&mut r)?, config_hash: read_u64(&mut r)? };
    let mut beta = vec![0.0; s * p * m];
    read_f64s(&mut r, &mut beta)?;
    let mut draws = PosteriorDraws::new(p, m, beta, chains, meta)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    if flag[0] == 1 {
        let mut s2 = vec![0.0; s * m];
        read_f64s(&mut r, &mut s2)?;
        draws.sigma2 = Some(s2);
    }
    r.read_exact(&mut flag)?;
    if flag[0] == 1 {
        let mut buf = vec![0.0; 2 + p];
        for _ in 0..s {
            read_f64s(&mut r, &mut buf)?;
            draws.traces.push(VarianceTrace { tau2: buf[0], xi: buf[1], zeta2: buf[2..].to_vec() });
        }
    }
    Ok(draws)
}

// ---------------------------------------------------------------- reports

/// Per coefficient and vertex: mean, sd, 2.5/10/90/97.5% quantiles, the
/// simultaneous band at `band_level` and the activation label at `threshold`.
pub fn write_summary_csv(
    path: impl AsRef<Path>,
    draws: &PosteriorDraws,
    names: &[String],
    band_level: f64,
    threshold: f64,
) -> Result<()> {
    let path = path.as_ref();
    let (p, m) = (draws.p(), draws.m());
    let mean = draws.mean();
    let sd = draws.sd();
    let ci95 = pointwise_intervals(draws, 0.95)?;
    let ci80 = pointwise_intervals(draws, 0.8)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "coefficient",
        "vertex",
        "mean",
        "sd",
        "q2.5",
        "q10",
        "q90",
        "q97.5",
        "band_lo",
        "band_hi",
        "label",
    ])
    .map_err(|e| csv_err(path, e))?;
    for j in 0..p {
        let band = simultaneous_band(draws, j, band_level)?;
        let labels = activation_from_band(&band, threshold)?;
        let (lo, hi) = (band.lower(), band.upper());
        let name = names.get(j).cloned().unwrap_or_else(|| format!("beta{j}"));
        for s in 0..m {
            let k = j * m + s;
            let row = [
                name.clone(),
                s.to_string(),
                mean[k].to_string(),
                sd[k].to_string(),
                ci95.lo[k].to_string(),
                ci80.lo[k].to_string(),
                ci80.hi[k].to_string(),
                ci95.hi[k].to_string(),
                lo[s].to_string(),
                hi[s].to_string(),
                labels[s].name().to_string(),
            ];
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_gof_csv(path: impl AsRef<Path>, report: &GofReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "region",
        "vertices",
        "statistic",
        "observed",
        "predictive_mean",
        "predictive_sd",
        "discrepancy",
        "p_value",
        "ks",
        "rank",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in &report.regions {
        let rank = if r.label == report.worst {
            "worst"
        } else if r.label == report.best {
            "best"
        } else if r.label == report.median {
            "median"
        } else {
            ""
        };
        for st in &r.stats {
            let row = [
                r.label.to_string(),
                r.n_vertices.to_string(),
                st.name.to_string(),
                st.observed.to_string(),
                st.predictive_mean.to_string(),
                st.predictive_sd.to_string(),
                st.discrepancy.to_string(),
                st.p_value.to_string(),
                r.ks.to_string(),
                rank.to_string(),
            ];
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_diagnostics_csv(path: impl AsRef<Path>, report: &DiagnosticsReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["coefficient", "vertex", "rhat", "rhat_folded"]).map_err(|e| csv_err(path, e))?;
    for e in &report.entries {
        w.write_record([
            e.coefficient.to_string(),
            e.vertex.to_string(),
            e.rhat.to_string(),
            e.rhat_folded.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}
