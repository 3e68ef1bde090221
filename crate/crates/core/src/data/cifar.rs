//! CIFAR-100 binary records: one coarse label byte, one fine label byte and
//! three 32×32 channel planes (R, G, B), 3074 bytes in total.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{Sample, Target};
use crate::error::{Error, Result};
use crate::tensor::Array;

pub const CIFAR_RECORD_BYTES: usize = 3074;
const PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CifarOptions {
    /// Stop after this many accepted samples.
    pub limit: Option<usize>,
    /// Keep only these fine labels.
    pub class_filter: Option<Vec<usize>>,
    /// Keep at most this many samples of each label.
    pub per_class_limit: Option<usize>,
    /// Relabel kept classes to their position in `class_filter`.
    pub remap: bool,
}

/// Pixels are scaled to `[0, 1]`; channel normalisation is a separate step.
pub fn load_cifar100_binary(path: impl AsRef<Path>, opts: &CifarOptions) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Data(format!(
            "{}: length {} is not a multiple of {CIFAR_RECORD_BYTES} (truncated record?)",
            path.display(),
            bytes.len()
        )));
    }
    if opts.remap && opts.class_filter.is_none() {
        return Err(Error::config("data.cifar.remap", "needs a class filter"));
    }
    let mut per_class: HashMap<usize, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if opts.limit.is_some_and(|l| out.len() >= l) {
            break;
        }
        let fine = rec[1] as usize;
        if fine >= 100 {
            return Err(Error::Data(format!("record {i}: fine label {fine} out of range")));
        }
        let label = match &opts.class_filter {
            Some(f) => match f.iter().position(|&c| c == fine) {
                Some(pos) if opts.remap => pos,
                Some(_) => fine,
                None => continue,
            },
            None => fine,
        };
        let seen = per_class.entry(fine).or_default();
        if opts.per_class_limit.is_some_and(|l| *seen >= l) {
            continue;
        }
        *seen += 1;
        let pixels: Vec<f64> = rec[2..2 + PIXELS].iter().map(|&b| b as f64 / 255.0).collect();
        out.push(Sample {
            unique_id: format!("cifar{i}"),
            sample_id: format!("cifar{i}"),
            input: Array::new(vec![3, 32, 32], pixels)?,
            target: Target::Class(label),
            fold: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(fine: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![0u8, fine];
        r.extend(std::iter::repeat(fill).take(PIXELS));
        r
    }

    fn write(records: &[Vec<u8>]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for r in records {
            f.write_all(r).unwrap();
        }
        f
    }

    #[test]
    fn single_record() {
        let f = write(&[record(42, 255)]);
        let s = load_cifar100_binary(f.path(), &CifarOptions::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].input.shape(), &[3, 32, 32]);
        assert_eq!(s[0].target, Target::Class(42));
        assert!(s[0].input.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut r = record(1, 0);
        r.pop();
        let f = write(&[r]);
        assert!(load_cifar100_binary(f.path(), &CifarOptions::default()).is_err());
    }

    #[test]
    fn filters_and_limits() {
        let recs: Vec<Vec<u8>> = (0..30).map(|i| record((i % 5) as u8, 7)).collect();
        let f = write(&recs);
        let limited = load_cifar100_binary(
            f.path(),
            &CifarOptions {
                limit: Some(7),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(limited.len(), 7);
        let filtered = load_cifar100_binary(
            f.path(),
            &CifarOptions {
                class_filter: Some(vec![3, 1]),
                per_class_limit: Some(2),
                remap: true,
                ..Default::default()
            },
        )
        .unwrap();
        let labels: Vec<Target> = filtered.iter().map(|s| s.target).collect();
        assert_eq!(
            labels,
            vec![Target::Class(1), Target::Class(0), Target::Class(1), Target::Class(0)]
        );
    }
}
