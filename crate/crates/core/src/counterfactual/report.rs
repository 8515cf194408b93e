//! Tab-separated analysis reports with fixed column order.
//!
//! * `clusters.tsv`: cluster, code, size, share, major, mean_risk, observed_rate
//! * `upset/cluster_<index>.tsv`: one row per non-empty combination; columns
//!   cluster, code, one column per concept, count, share, positives, mean_risk
//! * `sanity.tsv`: cluster, code, base, estimated_rr, observed_rr, exposed_risk,
//!   reference_risk, exposed_n, reference_n, exposed_prevalence, reference_prevalence
//!
//! Missing values are written as `NA`.

use std::io::Write;
use std::path::Path;

use super::{Analysis, SanityReport, UpsetTable};
use crate::concept::ConceptSpec;
use crate::error::Result;

pub const CLUSTER_COLUMNS: [&str; 7] = ["cluster", "code", "size", "share", "major", "mean_risk", "observed_rate"];
pub const SANITY_COLUMNS: [&str; 11] = [
    "cluster",
    "code",
    "base",
    "estimated_rr",
    "observed_rr",
    "exposed_risk",
    "reference_risk",
    "exposed_n",
    "reference_n",
    "exposed_prevalence",
    "reference_prevalence",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn write_clusters(a: &Analysis, mut w: impl Write) -> Result<()> {
    writeln!(w, "{}", CLUSTER_COLUMNS.join("\t"))?;
    let mut rows: Vec<_> = a.clusters.iter().collect();
    rows.sort_by(|x, y| y.size.cmp(&x.size).then(x.cluster.cmp(&y.cluster)));
    for c in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.cluster.index(),
            c.cluster,
            c.size,
            c.share,
            c.major,
            c.mean_risk,
            c.observed_rate
        )?;
    }
    Ok(())
}

pub fn write_upset(t: &UpsetTable, specs: &[ConceptSpec], mut w: impl Write) -> Result<()> {
    let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    writeln!(w, "cluster\tcode\t{}\tcount\tshare\tpositives\tmean_risk", names.join("\t"))?;
    for c in &t.cells {
        let levels: Vec<String> = specs
            .iter()
            .zip(c.combination.values())
            .map(|(s, &v)| s.level_label(v))
            .collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            t.cluster.index(),
            t.cluster,
            levels.join("\t"),
            c.count,
            c.count as f64 / t.size as f64,
            c.positives,
            c.mean_risk
        )?;
    }
    Ok(())
}

pub fn write_sanity(s: &SanityReport, mut w: impl Write) -> Result<()> {
    writeln!(w, "{}", SANITY_COLUMNS.join("\t"))?;
    for r in &s.rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.cluster.index(),
            r.cluster,
            r.base.render(),
            r.estimated_rr,
            opt(r.observed_rr),
            r.exposed_risk,
            r.reference_risk,
            r.exposed_n,
            r.reference_n,
            r.exposed_prevalence,
            r.reference_prevalence
        )?;
    }
    Ok(())
}

/// Writes `clusters.tsv`, `sanity.tsv`, `sanity.json` and `upset/cluster_<index>.tsv`
/// under `dir`; returns the relative paths written.
pub fn write_reports(a: &Analysis, specs: &[ConceptSpec], dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir.join("upset"))?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        std::fs::write(dir.join(&name), bytes)?;
        written.push(name);
        Ok(())
    };
    let mut buf = Vec::new();
    write_clusters(a, &mut buf)?;
    put("clusters.tsv".into(), buf)?;
    let mut buf = Vec::new();
    write_sanity(&a.sanity, &mut buf)?;
    put("sanity.tsv".into(), buf)?;
    let json = serde_json::to_vec_pretty(&a.sanity).map_err(|e| crate::error::data_err(e.to_string()))?;
    put("sanity.json".into(), json)?;
    for t in &a.upsets {
        let mut buf = Vec::new();
        write_upset(t, specs, &mut buf)?;
        put(format!("upset/cluster_{}.tsv", t.cluster.index()), buf)?;
    }
    Ok(written)
}
