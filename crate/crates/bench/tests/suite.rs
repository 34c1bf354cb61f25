use mpda_bench::{run_suite, to_csv, SuiteConfig, CSV_HEADER};
use mpda_core::{Hyperparams, Method, SolveOptions};

#[test]
fn csv_rows_parse_back() {
    let config = SuiteConfig {
        hyper: Hyperparams { tau: 1e-8, ..Default::default() },
        solve: SolveOptions { base_min_dim: 8, ..Default::default() },
    };
    let methods = [Method::Mp, Method::MpMultigrid, Method::Var3d, Method::Exact];
    let rows = run_suite(&[16], &[0.1], &methods, &[0, 1], &config).unwrap();
    assert_eq!(rows.len(), 8);

    let text = to_csv(&rows).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 8 + methods.len());

    for (record, row) in records.iter().zip(&rows) {
        assert_eq!(&record[0], "run");
        assert_eq!(record[1].parse::<Method>().unwrap(), row.method);
        assert_eq!(record[8].parse::<f64>().unwrap(), row.rmse_truth);
        let oracle: f64 = record[9].parse().unwrap();
        assert_eq!(Some(oracle), row.rmse_oracle);
    }
    for (record, method) in records[8..].iter().zip(methods) {
        assert_eq!(&record[0], "mean");
        assert_eq!(record[1].parse::<Method>().unwrap(), method);
        assert_eq!(&record[4], "");
        assert_eq!(&record[7], "0/2 diverged");
        let expected: f64 = rows.iter().filter(|r| r.method == method).map(|r| r.rmse_truth).sum::<f64>() / 2.0;
        assert!((record[8].parse::<f64>().unwrap() - expected).abs() <= 1e-15);
    }
}
