//! Binary dataset files and CSV import.
//!
//! Layout (all little-endian): magic `DBDS`, version `u32`, then `N`, `T`,
//! `D`, `C` as `u32`, then `N·T·D` windows as `f32`, then `N` labels as `u16`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::ByteReader;
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DBDS";
pub const DATASET_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 24;

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for v in [ds.len(), ds.timesteps(), ds.features(), ds.num_classes()] {
        let v = u32::try_from(v).map_err(|_| Error::contract("dataset dimension exceeds u32"))?;
        w.write_all(&v.to_le_bytes())?;
    }
    for x in ds.windows().data() {
        w.write_all(&x.to_le_bytes())?;
    }
    for y in ds.labels() {
        w.write_all(&y.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: R, split: Split, provenance: &str) -> Result<Dataset> {
    let mut rd = ByteReader::new(r);
    let magic = rd.bytes::<4>()?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(0, format!("bad dataset magic {magic:?}")));
    }
    let version = rd.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported dataset version {version}"),
        ));
    }
    let n = rd.u32()? as usize;
    let t = rd.u32()? as usize;
    let d = rd.u32()? as usize;
    let c = rd.u32()? as usize;
    if n == 0 || t == 0 || d == 0 || c == 0 {
        return Err(Error::format(
            8,
            format!("zero dimension in header N={n} T={t} D={d} C={c}"),
        ));
    }
    let payload = n * t * d;
    let mut data = Vec::with_capacity(payload);
    for _ in 0..payload {
        data.push(rd.f32()?);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let off = rd.offset();
        let y = rd.u16()?;
        if y as usize >= c {
            return Err(Error::format(
                off,
                format!("label {y} outside class count {c}"),
            ));
        }
        labels.push(y);
    }
    rd.expect_end()?;
    debug_assert_eq!(
        rd.offset(),
        HEADER_BYTES + 4 * payload as u64 + 2 * n as u64
    );
    Dataset::new(
        Tensor::new(vec![n, t, d], data)?,
        labels,
        c,
        split,
        provenance,
    )
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads a dataset file. The split tag is inferred from the file stem
/// (`…test…` → test, otherwise train).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let split = if stem.contains("test") {
        Split::Test
    } else {
        Split::Train
    };
    read_dataset(
        BufReader::new(File::open(path)?),
        split,
        &path.display().to_string(),
    )
}

/// Imports one window per row: `T·D` values in time-major order followed by
/// an integer label. Lines starting with `#` are ignored; no header row.
pub fn import_csv(path: &Path, timesteps: usize, features: usize, split: Split) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let width = timesteps * features;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(format!("{} row {row}: {e}", path.display())))?;
        if rec.len() != width + 1 {
            return Err(Error::Config(format!(
                "{} row {row}: expected {} columns, found {}",
                path.display(),
                width + 1,
                rec.len()
            )));
        }
        for field in rec.iter().take(width) {
            let v: f32 = field.parse().map_err(|_| {
                Error::Config(format!("{} row {row}: bad value `{field}`", path.display()))
            })?;
            data.push(v);
        }
        let label: u16 = rec[width].parse().map_err(|_| {
            Error::Config(format!(
                "{} row {row}: bad label `{}`",
                path.display(),
                &rec[width]
            ))
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Empty(format!("{} has no rows", path.display())));
    }
    let c = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(1);
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, timesteps, features], data)?,
        labels,
        c,
        split,
        path.display().to_string(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthSpec};
    use proptest::prelude::*;

    fn bytes(ds: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset(ds, &mut buf).unwrap();
        buf
    }

    #[test]
    fn header_and_payload_length() {
        let spec = SynthSpec {
            train_per_class: 3,
            test_per_class: 2,
            ..SynthSpec::default()
        };
        let (train, _) = synth_generate(&spec).unwrap();
        let buf = bytes(&train);
        let (n, t, d) = (train.len(), train.timesteps(), train.features());
        assert_eq!(buf.len(), 24 + n * t * d * 4 + n * 2);
        assert_eq!(&buf[..4], b"DBDS");
        assert_eq!(
            u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize,
            n
        );
    }

    #[test]
    fn corrupted_magic_fails_at_zero() {
        let (train, _) = synth_generate(&SynthSpec::default()).unwrap();
        let mut buf = bytes(&train);
        buf[1] = b'X';
        assert!(matches!(
            read_dataset(&buf[..], Split::Train, "x"),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let (train, _) = synth_generate(&SynthSpec::default()).unwrap();
        let buf = bytes(&train);
        // header plus three whole floats and half of the fourth
        let cut = 24 + 12 + 2;
        match read_dataset(&buf[..cut], Split::Train, "x") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut as u64),
            other => panic!("unexpected {other:?}"),
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_dataset(&extra[..], Split::Train, "x").is_err());
    }

    #[test]
    fn csv_import() {
        let dir = std::env::temp_dir().join(format!("dbds-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.csv");
        std::fs::write(&path, "# two windows, T=2 D=1\n0.5,1.5,0\n-1,2,3\n").unwrap();
        let ds = import_csv(&path, 2, 1, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes(), 4);
        assert_eq!(ds.window(1), &[-1.0, 2.0]);
        std::fs::write(&path, "1,2\n").unwrap();
        assert!(import_csv(&path, 2, 1, Split::Train).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_byte_identical(seed in any::<u64>(), c in 2usize..5, t in 1usize..6, d in 1usize..4) {
            let spec = SynthSpec {
                n_classes: c, timesteps: t, features: d,
                train_per_class: 3, test_per_class: 1, seed, ..SynthSpec::default()
            };
            let (train, _) = synth_generate(&spec).unwrap();
            let buf = bytes(&train);
            let back = read_dataset(&buf[..], Split::Train, &train.provenance).unwrap();
            prop_assert_eq!(&back, &train);
            prop_assert_eq!(bytes(&back), buf);
        }
    }
}
