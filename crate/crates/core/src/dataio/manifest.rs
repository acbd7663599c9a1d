//! Dataset manifests: a CSV whose header is `path` plus class names and
//! whose rows hold an image path (relative to the manifest) and one
//! attribute strength in [0, 1] per class.

use crate::error::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub strengths: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub dir: PathBuf,
    pub classes: Vec<String>,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Image paths resolve relative to the manifest's directory.
    pub fn resolve(&self, image_path: &str) -> PathBuf {
        let p = Path::new(image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

/// Parse manifest text; `line` numbers in errors are 1-based.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty manifest"))?;
    let mut cols = header.split(',').map(str::trim);
    match cols.next() {
        Some("path") => {}
        other => {
            return Err(parse_err(
                path,
                1,
                format!("header must start with 'path', got {other:?}"),
            ))
        }
    }
    let classes: Vec<String> = cols.map(str::to_string).collect();
    if classes.is_empty() || classes.iter().any(String::is_empty) {
        return Err(parse_err(path, 1, "header needs non-empty class names"));
    }

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let image = fields
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(path, lineno, "missing image path"))?;
        let mut strengths = Vec::with_capacity(classes.len());
        for (k, class) in classes.iter().enumerate() {
            let field = fields.next().ok_or_else(|| {
                parse_err(path, lineno, format!("missing strength for class '{class}'"))
            })?;
            let v: f64 = field.parse().map_err(|_| {
                parse_err(path, lineno, format!("bad strength '{field}' in column {}", k + 2))
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("strength {v} out of [0,1] for class '{class}'"),
                ));
            }
            strengths.push(v);
        }
        if fields.next().is_some() {
            return Err(parse_err(path, lineno, "too many columns"));
        }
        rows.push(ManifestRow {
            path: image.to_string(),
            strengths,
        });
    }
    Ok(Manifest {
        dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        classes,
        rows,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_manifest(&text, path)
}

pub fn manifest_to_string(classes: &[String], rows: &[ManifestRow]) -> String {
    let mut out = String::from("path");
    for c in classes {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for row in rows {
        out.push_str(&row.path);
        for s in &row.strengths {
            out.push(',');
            out.push_str(&s.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, classes: &[String], rows: &[ManifestRow]) -> Result<()> {
    std::fs::write(path, manifest_to_string(classes, rows))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Threshold strengths at 0.5 (inclusive). With `add_other` a trailing
/// class is appended, set exactly when every original strength is
/// below the threshold.
pub fn binarize_strengths(strengths: &[f64], add_other: bool) -> Vec<u8> {
    let mut labels: Vec<u8> = strengths.iter().map(|&s| u8::from(s >= 0.5)).collect();
    if add_other {
        labels.push(u8::from(strengths.iter().all(|&s| s < 0.5)));
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> &Path {
        Path::new(s)
    }

    #[test]
    fn parses_simple_manifest() {
        let m = parse_manifest("path,sunny,cloudy\nimg1.ppm,0.9,0.1\n", p("d/m.csv")).unwrap();
        assert_eq!(m.classes, vec!["sunny", "cloudy"]);
        assert_eq!(m.rows.len(), 1);
        assert_eq!(m.rows[0].strengths, vec![0.9, 0.1]);
        assert_eq!(m.resolve("img1.ppm"), PathBuf::from("d/img1.ppm"));
    }

    #[test]
    fn five_class_header() {
        let m = parse_manifest(
            "path,sunny,cloudy,foggy,rainy,snowy\na.ppm,1,0,0,0,0\n",
            p("m.csv"),
        )
        .unwrap();
        assert_eq!(m.classes.len(), 5);
    }

    #[test]
    fn out_of_range_strength_names_row() {
        let err = parse_manifest("path,a\nimg.ppm,1.2\n", p("m.csv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_column_rejected() {
        assert!(parse_manifest("path,a,b\nimg.ppm,0.5\n", p("m.csv")).is_err());
        assert!(parse_manifest("path,a\nimg.ppm,0.5,0.1\n", p("m.csv")).is_err());
        assert!(parse_manifest("nope,a\n", p("m.csv")).is_err());
    }

    #[test]
    fn round_trip_preserves_full_precision() {
        let rows = vec![
            ManifestRow {
                path: "x/y.ppm".into(),
                strengths: vec![0.1234567890123456, 1.0, 0.0],
            },
            ManifestRow {
                path: "z.ppm".into(),
                strengths: vec![f64::MIN_POSITIVE, 0.5, 0.4999999999999999],
            },
        ];
        let classes: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let text = manifest_to_string(&classes, &rows);
        let back = parse_manifest(&text, p("m.csv")).unwrap();
        assert_eq!(back.classes, classes);
        assert_eq!(back.rows, rows);
    }

    #[test]
    fn binarize_thresholds_at_half() {
        assert_eq!(binarize_strengths(&[0.7, 0.5, 0.49], false), vec![1, 1, 0]);
        assert_eq!(binarize_strengths(&[0.2, 0.3], true), vec![0, 0, 1]);
        assert_eq!(binarize_strengths(&[0.9, 0.1], true), vec![1, 0, 0]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        /// write(parse(text)) keeps every sample and strength exactly.
        #[test]
        fn prop_round_trip_any_strengths(
            rows in proptest::collection::vec(
                proptest::collection::vec(0.0f64..=1.0, 1..5),
                1..6,
            ),
        ) {
            let k = rows[0].len();
            let rows: Vec<ManifestRow> = rows
                .into_iter()
                .map(|mut s| {
                    s.resize(k, 0.0);
                    ManifestRow { path: "img.ppm".into(), strengths: s }
                })
                .collect();
            let classes: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
            let text = manifest_to_string(&classes, &rows);
            let back = parse_manifest(&text, p("m.csv")).unwrap();
            proptest::prop_assert_eq!(back.rows, rows);
        }
    }

    #[test]
    fn binarize_is_idempotent_on_binary_input() {
        for v in [[0.0, 1.0], [1.0, 1.0], [0.0, 0.0]] {
            let once = binarize_strengths(&v, false);
            let again =
                binarize_strengths(&once.iter().map(|&b| b as f64).collect::<Vec<_>>(), false);
            assert_eq!(once, again);
        }
    }
}
