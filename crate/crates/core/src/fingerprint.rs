//! Fingerprints: mean and population standard deviation of the IPv4 total
//! length and the TCP window over non-overlapping windows of consecutive
//! packets from one device.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::PacketRecord;
use crate::mac::MacAddress;

pub const DEFAULT_WINDOW: usize = 5;

/// Column names of the four features, in vector order.
pub const FEATURE_NAMES: [&str; 4] = ["iplen_mu", "iplen_sigma", "tcpwin_mu", "tcpwin_sigma"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FingerprintError {
    #[error("window size must be at least 2, got {0}")]
    WindowTooSmall(usize),
    #[error("cannot fingerprint an empty window")]
    EmptyWindow,
    #[error("device label map is empty")]
    NoDevices,
    #[error("device {0} has an empty label")]
    EmptyLabel(MacAddress),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractionConfig {
    pub window_size: usize,
    /// Discard the trailing `n mod window_size` packets of each device.
    pub drop_remainder: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            window_size: DEFAULT_WINDOW,
            drop_remainder: true,
        }
    }
}

impl ExtractionConfig {
    pub fn new(window_size: usize) -> Result<Self, FingerprintError> {
        let config = Self {
            window_size,
            ..Self::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), FingerprintError> {
        if self.window_size < 2 {
            return Err(FingerprintError::WindowTooSmall(self.window_size));
        }
        Ok(())
    }
}

/// The four statistical features of one packet window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fingerprint {
    pub iplen_mu: f64,
    pub iplen_sigma: f64,
    pub tcpwin_mu: f64,
    pub tcpwin_sigma: f64,
}

impl Fingerprint {
    pub fn to_array(&self) -> [f64; 4] {
        [
            self.iplen_mu,
            self.iplen_sigma,
            self.tcpwin_mu,
            self.tcpwin_sigma,
        ]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            iplen_mu: v[0],
            iplen_sigma: v[1],
            tcpwin_mu: v[2],
            tcpwin_sigma: v[3],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && self.iplen_sigma >= 0.0
            && self.tcpwin_sigma >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub fingerprint: Fingerprint,
    pub label: String,
}

/// Mean and population σ of 16-bit samples.
///
/// Sums are accumulated exactly in integers, so the mean is the correctly
/// rounded quotient and the variance numerator `nΣx² − (Σx)²` is exact; it is
/// zero exactly when every sample is equal.
fn mean_and_sigma(values: impl Iterator<Item = u16>) -> (f64, f64) {
    let (mut n, mut sum, mut sum_sq) = (0u128, 0u128, 0u128);
    for v in values {
        let v = u128::from(v);
        n += 1;
        sum += v;
        sum_sq += v * v;
    }
    let numerator = n * sum_sq - sum * sum;
    let nf = n as f64;
    (sum as f64 / nf, (numerator as f64).sqrt() / nf)
}

/// Non-overlapping consecutive windows of `config.window_size` packets.
///
/// With `drop_remainder` unset, a trailing short window is kept as well.
pub fn window_packets<'a>(
    records: &'a [PacketRecord],
    config: &ExtractionConfig,
) -> Vec<&'a [PacketRecord]> {
    let chunks = records.chunks_exact(config.window_size);
    let remainder = chunks.remainder();
    let mut windows: Vec<_> = chunks.collect();
    if !config.drop_remainder && !remainder.is_empty() {
        windows.push(remainder);
    }
    windows
}

pub fn compute_fingerprint(window: &[PacketRecord]) -> Result<Fingerprint, FingerprintError> {
    if window.is_empty() {
        return Err(FingerprintError::EmptyWindow);
    }
    let (iplen_mu, iplen_sigma) = mean_and_sigma(window.iter().map(|p| p.ip_total_length));
    let (tcpwin_mu, tcpwin_sigma) = mean_and_sigma(window.iter().map(|p| p.tcp_window));
    Ok(Fingerprint {
        iplen_mu,
        iplen_sigma,
        tcpwin_mu,
        tcpwin_sigma,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceCount {
    pub mac: MacAddress,
    pub label: String,
    pub packets: u64,
    pub instances: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Extraction {
    /// Grouped by device in ascending MAC order, windows in stream order.
    pub instances: Vec<LabeledInstance>,
    /// One entry per labeled device, including devices with no packets.
    pub per_device: Vec<DeviceCount>,
    /// Packets whose source MAC has no label.
    pub unlabeled_packets: u64,
}

/// Fingerprints every labeled device found in a capture.
///
/// Each device's packets are taken in capture order and windowed on their
/// own, so other devices' traffic never affects a device's instances.
pub fn extract_instances(
    capture: &[PacketRecord],
    device_labels: &BTreeMap<MacAddress, String>,
    config: &ExtractionConfig,
) -> Result<Extraction, FingerprintError> {
    config.validate()?;
    if device_labels.is_empty() {
        return Err(FingerprintError::NoDevices);
    }
    if let Some((mac, _)) = device_labels.iter().find(|(_, l)| l.is_empty()) {
        return Err(FingerprintError::EmptyLabel(*mac));
    }

    let slot: HashMap<MacAddress, usize> = device_labels
        .keys()
        .enumerate()
        .map(|(i, m)| (*m, i))
        .collect();
    let mut streams: Vec<Vec<PacketRecord>> = vec![Vec::new(); device_labels.len()];
    let mut unlabeled_packets = 0u64;
    for record in capture {
        match slot.get(&record.src_mac) {
            Some(&i) => streams[i].push(*record),
            None => unlabeled_packets += 1,
        }
    }

    let labels: Vec<&String> = device_labels.values().collect();
    let per_device_instances: Vec<Vec<LabeledInstance>> = streams
        .par_iter()
        .zip(labels.par_iter())
        .map(|(stream, label)| {
            window_packets(stream, config)
                .into_iter()
                .map(|w| LabeledInstance {
                    fingerprint: compute_fingerprint(w).expect("windows are non-empty"),
                    label: (*label).clone(),
                })
                .collect()
        })
        .collect();

    let per_device = device_labels
        .iter()
        .zip(&streams)
        .zip(&per_device_instances)
        .map(|(((mac, label), stream), inst)| DeviceCount {
            mac: *mac,
            label: label.clone(),
            packets: stream.len() as u64,
            instances: inst.len() as u64,
        })
        .collect();

    Ok(Extraction {
        instances: per_device_instances.into_iter().flatten().collect(),
        per_device,
        unlabeled_packets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pkt(mac: u8, len: u16, win: u16) -> PacketRecord {
        PacketRecord {
            timestamp: 0.0,
            src_mac: MacAddress([2, 0, 0, 0, 0, mac]),
            ip_total_length: len,
            tcp_window: win,
        }
    }

    /// Naive two-pass recomputation in floating point.
    fn oracle(values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    fn close(a: f64, b: f64) -> bool {
        a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
    }

    #[test]
    fn zero_variance_window() {
        let w: Vec<_> = (0..5).map(|_| pkt(1, 60, 512)).collect();
        let fp = compute_fingerprint(&w).unwrap();
        assert_eq!(
            fp,
            Fingerprint {
                iplen_mu: 60.0,
                iplen_sigma: 0.0,
                tcpwin_mu: 512.0,
                tcpwin_sigma: 0.0
            }
        );
    }

    #[test]
    fn hand_computed_window() {
        let w: Vec<_> = [40, 60, 80, 100, 120]
            .iter()
            .map(|&l| pkt(1, l, 512))
            .collect();
        let fp = compute_fingerprint(&w).unwrap();
        // deviations -40,-20,0,20,40 -> squares sum 4000, /5 = 800
        assert_eq!(fp.iplen_mu, 80.0);
        assert!((fp.iplen_sigma - 28.284271247461902).abs() < 1e-12);
        assert_eq!(fp.iplen_sigma, 800f64.sqrt());
        assert_eq!((fp.tcpwin_mu, fp.tcpwin_sigma), (512.0, 0.0));
        let (m, s) = oracle(&[40.0, 60.0, 80.0, 100.0, 120.0]);
        assert!(close(fp.iplen_mu, m) && close(fp.iplen_sigma, s));
    }

    #[test]
    fn empty_window_is_an_error() {
        assert_eq!(compute_fingerprint(&[]), Err(FingerprintError::EmptyWindow));
    }

    #[test]
    fn window_counts_floor() {
        let recs: Vec<_> = (0..7).map(|i| pkt(1, 40 + i, 0)).collect();
        let cfg = ExtractionConfig::default();
        let w = window_packets(&recs, &cfg);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0], &recs[..5]);
        let keep = ExtractionConfig {
            drop_remainder: false,
            ..cfg
        };
        let w = window_packets(&recs, &keep);
        assert_eq!(w.len(), 2);
        assert_eq!(w[1], &recs[5..]);
    }

    #[test]
    fn window_size_one_rejected() {
        assert_eq!(
            ExtractionConfig::new(1),
            Err(FingerprintError::WindowTooSmall(1))
        );
        assert!(ExtractionConfig::new(2).is_ok());
    }

    #[test]
    fn one_device_ten_packets() {
        let recs: Vec<_> = (0..10).map(|i| pkt(1, 40 + i, 100)).collect();
        let labels: BTreeMap<_, _> = [(MacAddress([2, 0, 0, 0, 0, 1]), "cam".to_string())].into();
        let ex = extract_instances(&recs, &labels, &ExtractionConfig::default()).unwrap();
        assert_eq!(ex.instances.len(), 2);
        assert!(ex.instances.iter().all(|i| i.label == "cam"));
        assert_eq!(ex.per_device[0].packets, 10);
    }

    #[test]
    fn interleaved_devices_match_filter_then_window() {
        let macs = [1u8, 2, 2, 1, 1, 2, 1, 2, 1, 2];
        let recs: Vec<_> = macs
            .iter()
            .enumerate()
            .map(|(i, &m)| pkt(m, 40 + 10 * i as u16, i as u16))
            .collect();
        let labels: BTreeMap<_, _> = [
            (MacAddress([2, 0, 0, 0, 0, 1]), "a".to_string()),
            (MacAddress([2, 0, 0, 0, 0, 2]), "b".to_string()),
            (MacAddress([2, 0, 0, 0, 0, 3]), "absent".to_string()),
        ]
        .into();
        let ex = extract_instances(&recs, &labels, &ExtractionConfig::default()).unwrap();
        assert_eq!(ex.instances.len(), 2);
        for (inst, m) in ex.instances.iter().zip([1u8, 2]) {
            let own = crate::ingest::filter_by_mac(&recs, MacAddress([2, 0, 0, 0, 0, m]));
            assert_eq!(inst.fingerprint, compute_fingerprint(&own).unwrap());
        }
        assert_eq!(ex.per_device[2].instances, 0);
        assert_eq!(ex.per_device[2].packets, 0);
    }

    #[test]
    fn unlabeled_packets_are_counted() {
        let recs = vec![pkt(9, 40, 0), pkt(1, 40, 0)];
        let labels: BTreeMap<_, _> = [(MacAddress([2, 0, 0, 0, 0, 1]), "a".to_string())].into();
        let ex = extract_instances(&recs, &labels, &ExtractionConfig::default()).unwrap();
        assert_eq!(ex.unlabeled_packets, 1);
        assert!(extract_instances(&recs, &BTreeMap::new(), &ExtractionConfig::default()).is_err());
    }

    fn window_strategy() -> impl Strategy<Value = Vec<(u16, u16)>> {
        proptest::collection::vec((40u16..=u16::MAX, any::<u16>()), 5)
    }

    proptest! {
        #[test]
        fn matches_two_pass_oracle(w in window_strategy()) {
            let recs: Vec<_> = w.iter().map(|&(l, win)| pkt(1, l, win)).collect();
            let fp = compute_fingerprint(&recs).unwrap();
            let (m1, s1) = oracle(&w.iter().map(|p| p.0 as f64).collect::<Vec<_>>());
            let (m2, s2) = oracle(&w.iter().map(|p| p.1 as f64).collect::<Vec<_>>());
            prop_assert!(close(fp.iplen_mu, m1) && close(fp.iplen_sigma, s1));
            prop_assert!(close(fp.tcpwin_mu, m2) && close(fp.tcpwin_sigma, s2));
        }

        #[test]
        fn permutation_invariant(w in window_strategy(), seed in any::<u64>()) {
            let recs: Vec<_> = w.iter().map(|&(l, win)| pkt(1, l, win)).collect();
            let mut shuffled = recs.clone();
            crate::rng::Xoshiro256StarStar::seed_from_u64(seed).shuffle(&mut shuffled);
            prop_assert_eq!(compute_fingerprint(&recs).unwrap(), compute_fingerprint(&shuffled).unwrap());
        }

        #[test]
        fn bounds_and_zero_sigma(w in proptest::collection::vec((40u16..50, 0u16..3), 2..8)) {
            let recs: Vec<_> = w.iter().map(|&(l, win)| pkt(1, l, win)).collect();
            let fp = compute_fingerprint(&recs).unwrap();
            prop_assert!(fp.is_valid());
            let lens: Vec<u16> = w.iter().map(|p| p.0).collect();
            let wins: Vec<u16> = w.iter().map(|p| p.1).collect();
            let (lo, hi) = (*lens.iter().min().unwrap() as f64, *lens.iter().max().unwrap() as f64);
            prop_assert!(lo <= fp.iplen_mu && fp.iplen_mu <= hi);
            let (lo, hi) = (*wins.iter().min().unwrap() as f64, *wins.iter().max().unwrap() as f64);
            prop_assert!(lo <= fp.tcpwin_mu && fp.tcpwin_mu <= hi);
            prop_assert_eq!(fp.iplen_sigma == 0.0, lens.iter().all(|&l| l == lens[0]));
            prop_assert_eq!(fp.tcpwin_sigma == 0.0, wins.iter().all(|&x| x == wins[0]));
        }

        #[test]
        fn other_devices_never_change_instances(
            own in proptest::collection::vec((40u16..2000, any::<u16>()), 0..23),
            noise in proptest::collection::vec((0usize..100, 40u16..2000), 0..30),
            shift in 0.0f64..1e6,
        ) {
            let target = MacAddress([2, 0, 0, 0, 0, 1]);
            let labels: BTreeMap<_, _> = [(target, "dev".to_string())].into();
            let cfg = ExtractionConfig::default();
            let base: Vec<_> = own.iter().map(|&(l, w)| pkt(1, l, w)).collect();
            let alone = extract_instances(&base, &labels, &cfg).unwrap();
            prop_assert_eq!(alone.instances.len(), own.len() / 5);

            let mut mixed = base.clone();
            for &(pos, l) in &noise {
                let at = pos % (mixed.len() + 1);
                mixed.insert(at, pkt(7, l, 1));
            }
            for r in &mut mixed {
                r.timestamp += shift;
            }
            let with_noise = extract_instances(&mixed, &labels, &cfg).unwrap();
            prop_assert_eq!(alone.instances, with_noise.instances);
        }

        #[test]
        fn floor_count_identity(counts in proptest::collection::vec(0usize..40, 1..5), window in 2usize..9) {
            let mut recs = Vec::new();
            for (d, &c) in counts.iter().enumerate() {
                recs.extend((0..c).map(|_| pkt(d as u8, 40, 0)));
            }
            let labels: BTreeMap<_, _> = (0..counts.len())
                .map(|d| (MacAddress([2, 0, 0, 0, 0, d as u8]), format!("d{d}")))
                .collect();
            let ex = extract_instances(&recs, &labels, &ExtractionConfig::new(window).unwrap()).unwrap();
            for (dc, &c) in ex.per_device.iter().zip(&counts) {
                prop_assert_eq!(dc.instances as usize, c / window);
            }
            prop_assert_eq!(ex.instances.len(), counts.iter().map(|c| c / window).sum::<usize>());
        }
    }
}
