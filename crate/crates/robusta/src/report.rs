//! CSV outputs. Numbers are written with a fixed six-decimal format so that
//! files are byte-stable and parse back to the printed values.

use std::path::Path;

use robusta_core::metrics::{Curve, SafetyReport, VerifySummary};

use crate::error::{Error, Result};

pub const REPORT_HEADER: [&str; 11] = [
    "model",
    "dataset",
    "accuracy",
    "adv_error",
    "entropy",
    "drift",
    "smoothgrad2",
    "formal_verif",
    "crown_ibp",
    "del_auc",
    "ins_auc",
];

/// Extra column carried only by reports of runs that stopped early.
pub const PARTIAL_COLUMN: &str = "partial";

pub fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// `pass:0.735000` or `fail:0.120000`.
pub fn verify_cell(v: &VerifySummary) -> String {
    format!("{}:{}", if v.pass { "pass" } else { "fail" }, num(v.rate))
}

pub fn parse_verify_cell(s: &str) -> Option<VerifySummary> {
    let (flag, rate) = s.split_once(':')?;
    let pass = match flag {
        "pass" => true,
        "fail" => false,
        _ => return None,
    };
    Some(VerifySummary { rate: rate.parse().ok()?, pass })
}

/// Table builder that renders to CSV bytes.
pub struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header.iter().map(|h| h.as_ref())).expect("writing to memory");
        Table { writer }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        self.writer.write_record(cells.iter().map(|c| c.as_ref())).expect("writing to memory");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.writer.into_inner().expect("flushing memory writer")
    }

    pub fn write(self, path: &Path) -> Result<()> {
        write_file(path, &self.into_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn report_cells(r: &SafetyReport) -> Vec<String> {
    vec![
        r.model.clone(),
        r.dataset.clone(),
        num(r.accuracy),
        num(r.adv_error),
        num(r.entropy),
        num(r.drift),
        num(r.smoothgrad2),
        verify_cell(&r.formal_verif),
        verify_cell(&r.crown_ibp),
        num(r.del_auc),
        num(r.ins_auc),
    ]
}

/// The report table. When `partial` flags the models whose
/// evaluation failed, a marker column is appended and those rows carry the
/// cells computed before the failure.
pub fn report_table(rows: &[Vec<String>], partial: Option<&[bool]>) -> Table {
    let mut header: Vec<&str> = REPORT_HEADER.to_vec();
    if partial.is_some() {
        header.push(PARTIAL_COLUMN);
    }
    let mut t = Table::new(&header);
    for (i, r) in rows.iter().enumerate() {
        let mut cells = r.clone();
        cells.resize(REPORT_HEADER.len(), String::new());
        if let Some(p) = partial {
            cells.push(p[i].to_string());
        }
        t.row(&cells);
    }
    t
}

/// Numeric columns of a report row read back from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub accuracy: f64,
    pub adv_error: f64,
    pub entropy: f64,
    pub drift: f64,
    pub smoothgrad2: f64,
    pub formal_verif: VerifySummary,
    pub crown_ibp: VerifySummary,
    pub del_auc: f64,
    pub ins_auc: f64,
}

/// Parses a complete (non-partial) report CSV.
pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_report(&bytes, path)
}

pub fn parse_report(bytes: &[u8], path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let header = reader.headers().map_err(|e| Error::format(path, 0, e.to_string()))?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::format(path, 0, format!("unexpected report header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::format(path, e.position().map_or(0, |p| p.byte()), e.to_string()))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let f = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::format(path, offset, format!("column {} is not a number: `{}`", REPORT_HEADER[i], &rec[i])))
        };
        let v = |i: usize| {
            parse_verify_cell(&rec[i])
                .ok_or_else(|| Error::format(path, offset, format!("column {} is not a verify cell: `{}`", REPORT_HEADER[i], &rec[i])))
        };
        rows.push(ReportRow {
            model: rec[0].to_string(),
            dataset: rec[1].to_string(),
            accuracy: f(2)?,
            adv_error: f(3)?,
            entropy: f(4)?,
            drift: f(5)?,
            smoothgrad2: f(6)?,
            formal_verif: v(7)?,
            crown_ibp: v(8)?,
            del_auc: f(9)?,
            ins_auc: f(10)?,
        });
    }
    Ok(rows)
}

/// Long-format curve rows: one line per point.
pub fn curve_rows(t: &mut Table, model: &str, sample: usize, kind: &str, c: &Curve) {
    for (f, conf) in c.fractions.iter().zip(&c.confidences) {
        t.row(&[model.to_string(), sample.to_string(), kind.to_string(), num(*f), num(*conf)]);
    }
}

pub const CURVE_HEADER: [&str; 5] = ["model", "sample", "curve", "fraction", "confidence"];

#[cfg(test)]
mod tests {
    use super::*;
    use robusta_core::metrics::SampleCounts;

    fn sample() -> SafetyReport {
        SafetyReport {
            model: "simple_cnn".into(),
            dataset: "mnist".into(),
            accuracy: 0.98765,
            adv_error: 0.125,
            entropy: 4.25,
            drift: 1.5,
            smoothgrad2: 3.0,
            formal_verif: VerifySummary { rate: 0.4, pass: false },
            crown_ibp: VerifySummary { rate: 0.6, pass: true },
            del_auc: 0.2,
            ins_auc: 0.8,
            counts: SampleCounts::default(),
            config_digest: String::new(),
        }
    }

    #[test]
    fn header_is_exact() {
        let bytes = report_table(&[report_cells(&sample())], None).into_bytes();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "model,dataset,accuracy,adv_error,entropy,drift,smoothgrad2,formal_verif,crown_ibp,del_auc,ins_auc"
        );
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "simple_cnn,mnist,0.987650,0.125000,4.250000,1.500000,3.000000,fail:0.400000,pass:0.600000,0.200000,0.800000"
        );
    }

    #[test]
    fn round_trip_recovers_printed_values() {
        let r = sample();
        let bytes = report_table(&[report_cells(&r)], None).into_bytes();
        let rows = parse_report(&bytes, Path::new("mem")).unwrap();
        let back = &rows[0];
        assert_eq!(back.accuracy, num(r.accuracy).parse::<f64>().unwrap());
        assert_eq!(back.crown_ibp, r.crown_ibp);
        assert_eq!(back.formal_verif, r.formal_verif);
        let again = vec![
            back.model.clone(),
            back.dataset.clone(),
            num(back.accuracy),
            num(back.adv_error),
            num(back.entropy),
            num(back.drift),
            num(back.smoothgrad2),
            verify_cell(&back.formal_verif),
            verify_cell(&back.crown_ibp),
            num(back.del_auc),
            num(back.ins_auc),
        ];
        assert_eq!(report_table(&[again], None).into_bytes(), bytes);
    }

    #[test]
    fn partial_reports_carry_the_marker() {
        let text = String::from_utf8(
            report_table(&[report_cells(&sample()), vec!["mlp".into(), "mnist".into(), num(0.5)]], Some(&[false, true]))
                .into_bytes(),
        )
        .unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].ends_with(",partial"));
        assert!(lines[1].ends_with(",false"));
        assert_eq!(lines[2], "mlp,mnist,0.500000,,,,,,,,,true");
        assert!(parse_report(text.as_bytes(), Path::new("mem")).is_err());
    }
}
