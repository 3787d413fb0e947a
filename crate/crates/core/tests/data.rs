//! Dataset files, the synthetic generator and its signal profile.

mod common;

use std::fs;

use rand::Rng;
use tcan::data::{generate_synthetic, load_dataset, read_records, write_dataset, Dataset, RecordFormat, Sample, SyntheticConfig};
use tcan::model::{InputWidths, Modality};
use tcan::{Error, Tensor};

fn corpus(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        n_samples: n,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn all(d: &Dataset) -> impl Iterator<Item = &Sample> {
    d.train.iter().chain(&d.val).chain(&d.test)
}

fn assert_bit_identical(a: &Dataset, b: &Dataset) {
    assert_eq!(a.widths, b.widths);
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (b.train.len(), b.val.len(), b.test.len()));
    for (x, y) in all(a).zip(all(b)) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.label.to_bits(), y.label.to_bits());
        for m in Modality::ALL {
            assert_eq!(x.features(m).dims(), y.features(m).dims());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x.features(m)), bits(y.features(m)), "{} {m}", x.id);
        }
    }
}

#[test]
fn both_formats_round_trip_bit_exactly() {
    let data = corpus(40, 3);
    for format in [RecordFormat::Json, RecordFormat::Binary] {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &data, format).unwrap();
        assert_eq!(manifest.widths(), data.widths);
        assert_bit_identical(&load_dataset(dir.path()).unwrap(), &data);
        let via_manifest = load_dataset(dir.path().join("dataset.json")).unwrap();
        assert_bit_identical(&via_manifest, &data);
    }
}

#[test]
fn empty_test_split_loads() {
    let data = generate_synthetic(&SyntheticConfig {
        n_samples: 10,
        test_fraction: 0.0,
        ..Default::default()
    })
    .unwrap();
    assert!(data.test.is_empty());
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data, RecordFormat::Json).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap().test.len(), 0);
}

#[test]
fn corrupt_record_names_the_sample() {
    let data = corpus(10, 4);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data, RecordFormat::Json).unwrap();
    let path = dir.path().join("train.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let victim = &data.train[2].id;
    let broken: Vec<String> = text
        .lines()
        .map(|line| {
            if line.contains(victim.as_str()) {
                // drop the last number of the first text row
                let start = line.find("\"text\":[[").unwrap() + 9;
                let end = start + line[start..].find(']').unwrap();
                let row = &line[start..end];
                let cut = row.rfind(',').unwrap();
                format!("{}{}{}", &line[..start], &row[..cut], &line[end..])
            } else {
                line.to_string()
            }
        })
        .collect();
    fs::write(&path, broken.join("\n") + "\n").unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains(victim.as_str()), "{err}");
}

#[test]
fn loader_errors_are_distinct() {
    let data = corpus(10, 5);

    let missing = tempfile::tempdir().unwrap();
    write_dataset(missing.path(), &data, RecordFormat::Json).unwrap();
    fs::remove_file(missing.path().join("val.jsonl")).unwrap();
    let e = load_dataset(missing.path()).unwrap_err();
    assert!(matches!(e, Error::MissingFile(_)), "{e:?}");

    let narrow = tempfile::tempdir().unwrap();
    let mut wrong = data.clone();
    wrong.widths = InputWidths {
        visual: data.widths.visual + 1,
        ..data.widths
    };
    write_dataset(narrow.path(), &wrong, RecordFormat::Json).unwrap();
    let e = load_dataset(narrow.path()).unwrap_err();
    assert!(matches!(e, Error::WidthMismatch { .. }), "{e:?}");

    let out_of_range = tempfile::tempdir().unwrap();
    write_dataset(out_of_range.path(), &data, RecordFormat::Json).unwrap();
    let path = out_of_range.path().join("test.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap();
    let label_start = first.find("\"label\":").unwrap() + 8;
    let label_end = label_start + first[label_start..].find(',').unwrap();
    let patched = format!("{}7.5{}", &first[..label_start], &first[label_end..]);
    fs::write(&path, text.replacen(first, &patched, 1)).unwrap();
    let e = load_dataset(out_of_range.path()).unwrap_err();
    assert!(matches!(e, Error::LabelOutOfRange { .. }), "{e:?}");
}

#[test]
fn truncated_binary_file_is_rejected() {
    let data = corpus(6, 6);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data, RecordFormat::Binary).unwrap();
    let path = dir.path().join("train.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_records(&path).is_err());
}

#[test]
fn same_seed_same_corpus() {
    assert_bit_identical(&corpus(30, 9), &corpus(30, 9));
    assert_ne!(corpus(30, 9).train[0].label, corpus(30, 10).train[0].label);
}

#[test]
fn thousand_generations_satisfy_sample_invariants() {
    let mut r = common::rng(77);
    for g in 0..1000 {
        let lo = [r.random_range(1..5), r.random_range(1..5), r.random_range(1..5)];
        let cfg = SyntheticConfig {
            n_samples: r.random_range(1..6),
            seed: g,
            snr: [r.random_range(0.01..10.0), r.random_range(0.01..10.0), r.random_range(0.01..10.0)],
            p_flip: [r.random_range(0.0..0.49), r.random_range(0.0..0.49), r.random_range(0.0..0.49)],
            burst_rate: r.random_range(0.0..=1.0),
            burst_scale: r.random_range(0.0..8.0),
            lengths: [(lo[0], lo[0] + r.random_range(0..6)), (lo[1], lo[1] + 7), (lo[2], lo[2] + 3)],
            widths: InputWidths {
                text: r.random_range(1..6),
                visual: r.random_range(1..6),
                acoustic: r.random_range(1..6),
            },
            val_fraction: r.random_range(0.0..0.5),
            test_fraction: r.random_range(0.0..0.5),
        };
        let data = generate_synthetic(&cfg).unwrap();
        assert_eq!(all(&data).count(), cfg.n_samples);
        for s in all(&data) {
            s.validate().unwrap();
            s.check_widths(cfg.widths).unwrap();
            assert!((-3.0..=3.0).contains(&s.label));
            for m in Modality::ALL {
                let (lo, hi) = cfg.lengths[m.index()];
                assert!((lo..=hi).contains(&s.len(m)));
                assert!(s.features(m).data().iter().all(|v| v.is_finite()));
            }
        }
    }
}

/// Mean-pooled features of one modality.
fn pooled(s: &Sample, m: Modality) -> Vec<f64> {
    let t = s.features(m);
    let (rows, cols) = (t.dims()[0], t.dims()[1]);
    let mut out = vec![0.0f64; cols];
    for row in t.data().chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += f64::from(*v) / rows as f64;
        }
    }
    out
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x
}

/// Fits a least-squares probe from pooled features (plus an optional
/// intercept) to the label on the training split and returns the accuracy
/// of its sign on the validation and test splits.
fn probe(data: &Dataset, m: Modality, intercept: bool) -> f64 {
    let features = |s: &Sample| {
        let mut f = pooled(s, m);
        if intercept {
            f.push(1.0);
        }
        f
    };
    let k = data.widths.get(m) + usize::from(intercept);
    let mut ata = vec![vec![0.0f64; k]; k];
    let mut atb = vec![0.0f64; k];
    for s in &data.train {
        let f = features(s);
        let target = f64::from(s.label);
        for i in 0..k {
            atb[i] += f[i] * target;
            for j in 0..k {
                ata[i][j] += f[i] * f[j];
            }
        }
    }
    for (i, row) in ata.iter_mut().enumerate() {
        row[i] += 1e-6;
    }
    let w = solve(ata, atb);
    let held_out: Vec<&Sample> = data.val.iter().chain(&data.test).collect();
    let hits = held_out
        .iter()
        .filter(|s| {
            let score: f64 = features(s).iter().zip(&w).map(|(a, b)| a * b).sum();
            (score > 0.0) == (s.label > 0.0)
        })
        .count();
    hits as f64 / held_out.len() as f64
}

fn probe_accuracy(data: &Dataset, m: Modality) -> f64 {
    probe(data, m, true)
}

fn probe_corpus(seed: u64, snr: [f32; 3], p_flip: [f32; 3]) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        n_samples: 800,
        seed,
        snr,
        p_flip,
        val_fraction: 0.25,
        test_fraction: 0.25,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn overwhelming_clean_text_is_linearly_separable() {
    let data = probe_corpus(1, [1e3, 1.0, 1.0], [0.0; 3]);
    // the generator has no offset, so the probe needs no intercept
    let acc = probe(&data, Modality::Text, false);
    assert!(acc >= 0.995, "text probe accuracy {acc}");
}

#[test]
fn default_profile_orders_the_modalities() {
    let (mut t, mut v, mut a) = (0.0, 0.0, 0.0);
    for seed in 0..5 {
        let data = probe_corpus(seed, [4.0, 1.0, 1.0], SyntheticConfig::default().p_flip);
        t += probe_accuracy(&data, Modality::Text) / 5.0;
        v += probe_accuracy(&data, Modality::Visual) / 5.0;
        a += probe_accuracy(&data, Modality::Acoustic) / 5.0;
    }
    assert!(t > v + 0.1 && t > a + 0.1, "text {t}, visual {v}, acoustic {a}");
    assert!((v - a).abs() < 0.05, "visual {v} vs acoustic {a}");
}

#[test]
fn probe_accuracy_rises_with_signal() {
    let mut previous = 0.0;
    for snr in [0.05f32, 0.2, 0.6, 2.0] {
        let mean: f64 = (0..5)
            .map(|seed| probe_accuracy(&probe_corpus(seed, [4.0, snr, 1.0], [0.0, 0.2, 0.2]), Modality::Visual))
            .sum::<f64>()
            / 5.0;
        assert!(mean > previous, "snr {snr}: {mean} after {previous}");
        previous = mean;
    }
}
