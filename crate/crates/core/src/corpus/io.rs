//! Tab-separated dataset files.
//!
//! ```text
//! #study-dataset<TAB>version=1
//! student_id  item_id  timestamp  school_year  classroom_id  school_id  district_id  grade  metro_code  ses_band  reading_score
//! ...one row per interaction...
//! ```
//!
//! Rows of one student must agree on the student-level columns and list
//! the student's interactions in non-decreasing timestamp order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{CorpusError, Dataset, Interaction, StudentMetadata, StudentRecord};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &str = "#study-dataset";
const COLUMNS: [&str; 11] = [
    "student_id",
    "item_id",
    "timestamp",
    "school_year",
    "classroom_id",
    "school_id",
    "district_id",
    "grade",
    "metro_code",
    "ses_band",
    "reading_score",
];

pub fn write_dataset<W: Write>(dataset: &Dataset, out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "{MAGIC}\tversion={DATASET_VERSION}")?;
    writeln!(out, "{}", COLUMNS.join("\t"))?;
    for s in dataset.students() {
        for it in &s.interactions {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.student_id,
                it.item_id,
                it.timestamp,
                it.school_year,
                s.classroom_id,
                s.school_id,
                s.district_id,
                s.grade_level,
                s.metadata.metro,
                s.metadata.ses,
                s.metadata.reading_score
            )?;
        }
    }
    out.flush()
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> std::io::Result<()> {
    write_dataset(dataset, File::create(path)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CorpusError> {
    read_dataset(BufReader::new(File::open(path)?))
}

fn parse<T: std::str::FromStr>(field: &str, name: &str, line: usize) -> Result<T, CorpusError> {
    field.parse().map_err(|_| CorpusError::Parse {
        line,
        msg: format!("bad {name} {field:?}"),
    })
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset, CorpusError> {
    let mut lines = input.lines();
    let Some(first) = lines.next().transpose()? else {
        return Ok(Dataset::default());
    };
    match first.split_once('\t') {
        Some((MAGIC, v)) if v == format!("version={DATASET_VERSION}") => {}
        Some((MAGIC, v)) => return Err(CorpusError::Version(v.to_string())),
        _ => {
            return Err(CorpusError::Parse {
                line: 1,
                msg: "missing dataset header".into(),
            })
        }
    }
    match lines.next().transpose()? {
        None => return Ok(Dataset::default()),
        Some(h) if h == COLUMNS.join("\t") => {}
        Some(_) => {
            return Err(CorpusError::Parse {
                line: 2,
                msg: "unexpected column header".into(),
            })
        }
    }

    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut students: Vec<StudentRecord> = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 3;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != COLUMNS.len() {
            return Err(CorpusError::Parse {
                line: ln,
                msg: format!("expected {} fields, got {}", COLUMNS.len(), f.len()),
            });
        }
        let student_id: u64 = parse(f[0], "student_id", ln)?;
        let timestamp: i64 = parse(f[2], "timestamp", ln)?;
        if timestamp <= 0 {
            return Err(CorpusError::Parse {
                line: ln,
                msg: format!("timestamp must be positive, got {timestamp}"),
            });
        }
        let school_year: u8 = parse(f[3], "school_year", ln)?;
        if !(1..=2).contains(&school_year) {
            return Err(CorpusError::Parse {
                line: ln,
                msg: format!("school_year must be 1 or 2, got {school_year}"),
            });
        }
        let reading_score: f64 = parse(f[10], "reading_score", ln)?;
        if !reading_score.is_finite() {
            return Err(CorpusError::Parse {
                line: ln,
                msg: "reading_score must be finite".into(),
            });
        }
        let record = StudentRecord {
            student_id,
            classroom_id: parse(f[4], "classroom_id", ln)?,
            school_id: parse(f[5], "school_id", ln)?,
            district_id: parse(f[6], "district_id", ln)?,
            grade_level: parse(f[7], "grade", ln)?,
            metadata: StudentMetadata {
                metro: f[8].parse().map_err(|msg| CorpusError::Parse { line: ln, msg })?,
                ses: f[9].parse().map_err(|msg| CorpusError::Parse { line: ln, msg })?,
                reading_score,
            },
            interactions: Vec::new(),
        };
        let interaction = Interaction {
            student_id,
            item_id: parse(f[1], "item_id", ln)?,
            timestamp,
            school_year,
        };
        let slot = *index.entry(student_id).or_insert_with(|| {
            students.push(record.clone());
            students.len() - 1
        });
        let existing = &mut students[slot];
        if existing.classroom_id != record.classroom_id
            || existing.school_id != record.school_id
            || existing.district_id != record.district_id
            || existing.grade_level != record.grade_level
            || existing.metadata != record.metadata
        {
            return Err(CorpusError::Parse {
                line: ln,
                msg: format!("student {student_id} has inconsistent student-level fields"),
            });
        }
        if let Some(prev) = existing.interactions.last() {
            if prev.timestamp > timestamp {
                return Err(CorpusError::Parse {
                    line: ln,
                    msg: format!("timestamps of student {student_id} are not monotone"),
                });
            }
        }
        existing.interactions.push(interaction);
    }
    Dataset::new(students)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = "#study-dataset\tversion=1\nstudent_id\titem_id\ttimestamp\tschool_year\tclassroom_id\tschool_id\tdistrict_id\tgrade\tmetro_code\tses_band\treading_score\n";

    #[test]
    fn empty_file_is_empty_bundle() {
        assert_eq!(read_dataset("".as_bytes()).unwrap(), Dataset::default());
        assert_eq!(read_dataset(HEAD.as_bytes()).unwrap(), Dataset::default());
    }

    #[test]
    fn negative_timestamp_reports_line() {
        let text = format!("{HEAD}1\t5\t100\t1\t1\t1\t1\t3\turban\tA\t0.5\n1\t6\t-4\t1\t1\t1\t1\t3\turban\tA\t0.5\n");
        match read_dataset(text.as_bytes()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_version_and_non_monotone_rows() {
        let text = "#study-dataset\tversion=7\n";
        assert!(matches!(read_dataset(text.as_bytes()), Err(CorpusError::Version(_))));
        let text = format!("{HEAD}1\t5\t100\t1\t1\t1\t1\t3\turban\tA\t0.5\n1\t6\t50\t1\t1\t1\t1\t3\turban\tA\t0.5\n");
        assert!(matches!(read_dataset(text.as_bytes()), Err(CorpusError::Parse { line: 4, .. })));
        let text = format!("{HEAD}1\t5\t100\t1\t1\t1\t1\t3\turban\tA\t0.5\n1\t6\t150\t1\t2\t1\t1\t3\turban\tA\t0.5\n");
        assert!(matches!(read_dataset(text.as_bytes()), Err(CorpusError::Parse { line: 4, .. })));
    }
}
