//! Network-condition modeling: city RTT matrices, validator-to-city
//! assignment, and one-way delay injection.
//!
//! Delays are injected on two paths: in-process delay queues inside the
//! reference fabric (portable, used by the automated tests), and an emitted
//! traffic-control shell script for real deployments. The script is inert
//! text; nothing in the harness executes it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::InstanceId;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("latency matrix is empty")]
    Empty,
    #[error("latency matrix row {row}: expected {expected} values, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("latency matrix row {row}, column {col}: {reason}")]
    BadValue { row: usize, col: usize, reason: String },
    #[error("latency matrix row {row} is labelled `{found}`, expected `{expected}` (column order)")]
    LabelMismatch { row: usize, expected: String, found: String },
    #[error("latency matrix is asymmetric at ({row},{col}): {a} vs {b}")]
    Asymmetric { row: usize, col: usize, a: f64, b: f64 },
    #[error("latency matrix diagonal at ({0},{0}) must be zero")]
    NonzeroDiagonal(usize),
    #[error("cannot read latency matrix {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

/// Round-trip times between named cities, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyMatrix {
    pub cities: Vec<String>,
    pub rtt_ms: Vec<Vec<f64>>,
}

impl LatencyMatrix {
    /// Parses the CSV format: first row and first column carry city names.
    ///
    /// ```text
    /// ,amsterdam,tokyo
    /// amsterdam,0,230
    /// tokyo,230,0
    /// ```
    pub fn parse_csv(text: &str) -> Result<LatencyMatrix, MatrixError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(MatrixError::Empty)?;
        let cities: Vec<String> = header
            .split(',')
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        if cities.is_empty() {
            return Err(MatrixError::Empty);
        }
        let mut rtt_ms = Vec::with_capacity(cities.len());
        for (row, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let label = fields.next().unwrap_or("").trim().to_string();
            if row < cities.len() && label != cities[row] {
                return Err(MatrixError::LabelMismatch {
                    row,
                    expected: cities[row].clone(),
                    found: label,
                });
            }
            let values: Result<Vec<f64>, MatrixError> = fields
                .enumerate()
                .map(|(col, v)| {
                    v.trim().parse::<f64>().map_err(|_| MatrixError::BadValue {
                        row,
                        col,
                        reason: format!("cannot parse `{}`", v.trim()),
                    })
                })
                .collect();
            let values = values?;
            if values.len() != cities.len() {
                return Err(MatrixError::RaggedRow {
                    row,
                    expected: cities.len(),
                    found: values.len(),
                });
            }
            rtt_ms.push(values);
        }
        if rtt_ms.len() != cities.len() {
            return Err(MatrixError::RaggedRow {
                row: rtt_ms.len(),
                expected: cities.len(),
                found: 0,
            });
        }
        let matrix = LatencyMatrix { cities, rtt_ms };
        matrix.validate()?;
        Ok(matrix)
    }

    pub fn load(path: &Path) -> Result<LatencyMatrix, MatrixError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MatrixError::Io(path.to_path_buf(), e))?;
        Self::parse_csv(&text)
    }

    /// Symmetry, zero diagonal, and non-negativity.
    pub fn validate(&self) -> Result<(), MatrixError> {
        for (i, row) in self.rtt_ms.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(MatrixError::BadValue {
                        row: i,
                        col: j,
                        reason: format!("negative or non-finite rtt {v}"),
                    });
                }
                if i == j && v != 0.0 {
                    return Err(MatrixError::NonzeroDiagonal(i));
                }
                let mirrored = self.rtt_ms[j][i];
                if (v - mirrored).abs() > 1e-9 {
                    return Err(MatrixError::Asymmetric {
                        row: i,
                        col: j,
                        a: v,
                        b: mirrored,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_cities(&self) -> usize {
        self.cities.len()
    }

    pub fn rtt(&self, a: usize, b: usize) -> f64 {
        self.rtt_ms[a][b]
    }
}

/// City index for each validator: validator `i` maps to city
/// `(i - 1) mod n_cities`, round-robin.
pub fn assign_cities(n_validators: u32, matrix: &LatencyMatrix) -> Vec<usize> {
    (0..n_validators as usize)
        .map(|i| i % matrix.n_cities())
        .collect()
}

/// One-way delay between two validators under a city mapping: half the
/// round-trip time between their cities, zero within a city.
pub fn link_delay(
    a: InstanceId,
    b: InstanceId,
    mapping: &[usize],
    matrix: &LatencyMatrix,
) -> f64 {
    let ca = mapping[(a.get() - 1) as usize];
    let cb = mapping[(b.get() - 1) as usize];
    matrix.rtt(ca, cb) / 2.0
}

/// Precomputed one-way delays for every validator pair, indexed by
/// zero-based validator index. What the reference fabric consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkDelays {
    pub one_way_ms: Vec<Vec<u64>>,
}

impl LinkDelays {
    pub fn between(&self, a: InstanceId, b: InstanceId) -> u64 {
        self.one_way_ms[(a.get() - 1) as usize][(b.get() - 1) as usize]
    }

    pub fn max_delay(&self) -> u64 {
        self.one_way_ms
            .iter()
            .flat_map(|row| row.iter().copied())
            .max()
            .unwrap_or(0)
    }
}

/// Builds the per-pair one-way delay table for `n` validators.
pub fn build_link_delays(n_validators: u32, matrix: &LatencyMatrix) -> LinkDelays {
    let mapping = assign_cities(n_validators, matrix);
    let one_way_ms = (1..=n_validators)
        .map(|a| {
            (1..=n_validators)
                .map(|b| {
                    link_delay(
                        InstanceId::new(a).unwrap(),
                        InstanceId::new(b).unwrap(),
                        &mapping,
                        matrix,
                    )
                    .round() as u64
                })
                .collect()
        })
        .collect();
    LinkDelays { one_way_ms }
}

/// A (validator, host address) placement row, as much of the deployment plan
/// as script emission needs.
#[derive(Debug, Clone)]
pub struct PlacementRow {
    pub validator: InstanceId,
    pub host_address: String,
}

/// Emits a POSIX shell script installing per-destination delay qdiscs that
/// realize the one-way link delays on a real deployment.
///
/// Pure function of its inputs: identical inputs produce byte-identical
/// scripts. The script is never executed by the harness or its tests.
pub fn emit_netem_script(
    mapping: &[usize],
    matrix: &LatencyMatrix,
    placements: &[PlacementRow],
    device: &str,
) -> String {
    let mut out = String::new();
    out.push_str("#!/bin/sh\n");
    out.push_str("# Installs one-way inter-validator delays with tc/netem.\n");
    out.push_str("# Run the section for each host on that host, as root.\n");
    out.push_str("set -e\n");
    for source in placements {
        let _ = writeln!(
            out,
            "\n# --- host {} (validator {}) ---",
            source.host_address, source.validator
        );
        let _ = writeln!(
            out,
            "tc qdisc replace dev {device} root handle 1: prio bands {}",
            (placements.len() + 2).max(3)
        );
        let mut band = 2usize;
        for target in placements {
            if target.validator == source.validator {
                continue;
            }
            let delay = link_delay(source.validator, target.validator, mapping, matrix);
            let _ = writeln!(
                out,
                "# validator {} -> validator {}: {delay} ms one-way",
                source.validator, target.validator
            );
            if delay > 0.0 {
                let _ = writeln!(
                    out,
                    "tc qdisc replace dev {device} parent 1:{band} handle {band}0: netem delay {delay}ms"
                );
                let _ = writeln!(
                    out,
                    "tc filter add dev {device} parent 1: protocol ip u32 match ip dst {} flowid 1:{band}",
                    target.host_address
                );
            }
            band += 1;
        }
    }
    out
}

/// The bundled 32-city example matrix, with illustrative values.
pub fn example_cities_csv() -> &'static str {
    include_str!("../fixtures/cities32.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_CITY: &str = "\
,alpha,beta
alpha,0,80
beta,80,0
";

    fn id(v: u32) -> InstanceId {
        InstanceId::new(v).unwrap()
    }

    #[test]
    fn parses_two_city_fixture() {
        let m = LatencyMatrix::parse_csv(TWO_CITY).unwrap();
        assert_eq!(m.cities, ["alpha", "beta"]);
        assert_eq!(m.rtt(0, 1), 80.0);
    }

    #[test]
    fn validation_errors_carry_indices() {
        let asym = ",a,b\na,0,10\nb,20,0\n";
        match LatencyMatrix::parse_csv(asym).unwrap_err() {
            MatrixError::Asymmetric { row, col, .. } => assert_eq!((row, col).min((col, row)), (0, 1)),
            other => panic!("unexpected error {other}"),
        }

        let diag = ",a,b\na,5,10\nb,10,0\n";
        assert!(matches!(
            LatencyMatrix::parse_csv(diag).unwrap_err(),
            MatrixError::NonzeroDiagonal(0)
        ));

        let ragged = ",a,b\na,0\nb,0,0\n";
        assert!(matches!(
            LatencyMatrix::parse_csv(ragged).unwrap_err(),
            MatrixError::RaggedRow { row: 0, expected: 2, found: 1 }
        ));

        let negative = ",a,b\na,0,-3\nb,-3,0\n";
        assert!(matches!(
            LatencyMatrix::parse_csv(negative).unwrap_err(),
            MatrixError::BadValue { row: 0, col: 1, .. }
        ));
    }

    #[test]
    fn city_assignment_is_round_robin() {
        let m = LatencyMatrix::parse_csv(TWO_CITY).unwrap();
        // Wrap-around: validators 1,3 -> city 0; validator 2 -> city 1.
        assert_eq!(assign_cities(3, &m), vec![0, 1, 0]);
        assert_eq!(assign_cities(1, &m), vec![0]);

        // 32 validators over 32 cities form a bijection.
        let m32 = LatencyMatrix::parse_csv(example_cities_csv()).unwrap();
        assert_eq!(m32.n_cities(), 32);
        let mapping = assign_cities(32, &m32);
        let unique: std::collections::BTreeSet<_> = mapping.iter().collect();
        assert_eq!(unique.len(), 32);
        assert_eq!(mapping[0], 0);
    }

    #[test]
    fn link_delay_is_half_rtt_and_symmetric() {
        let m = LatencyMatrix::parse_csv(TWO_CITY).unwrap();
        let mapping = assign_cities(3, &m);
        assert_eq!(link_delay(id(1), id(3), &mapping, &m), 0.0); // same city
        assert_eq!(link_delay(id(1), id(2), &mapping, &m), 40.0); // 80 / 2
        assert_eq!(
            link_delay(id(1), id(2), &mapping, &m),
            link_delay(id(2), id(1), &mapping, &m)
        );
        let delays = build_link_delays(3, &m);
        assert_eq!(delays.between(id(1), id(2)), 40);
        assert_eq!(delays.max_delay(), 40);
    }

    #[test]
    fn netem_script_is_pure_and_plausible() {
        let m = LatencyMatrix::parse_csv(TWO_CITY).unwrap();
        let mapping = assign_cities(2, &m);
        let placements = vec![
            PlacementRow { validator: id(1), host_address: "10.0.0.1".into() },
            PlacementRow { validator: id(2), host_address: "10.0.0.2".into() },
        ];
        let a = emit_netem_script(&mapping, &m, &placements, "eth0");
        let b = emit_netem_script(&mapping, &m, &placements, "eth0");
        assert_eq!(a, b, "emission must be deterministic");
        assert!(a.contains("netem delay 40ms"));
        assert!(a.contains("ip dst 10.0.0.2"));
        assert!(a.starts_with("#!/bin/sh\n"));
    }

    #[test]
    fn bundled_example_matrix_is_valid() {
        let m = LatencyMatrix::parse_csv(example_cities_csv()).unwrap();
        assert_eq!(m.n_cities(), 32);
        m.validate().unwrap();
    }
}
