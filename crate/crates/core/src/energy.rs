//! Energy and communication footprint of meta-training plus decentralized
//! adaptation.
//!
//! ```text
//! E_ML  = gamma_dc * t0 * sum_i sum_k (B_a + beta B_b) / E_0          learning
//!       + t0 * sum_i sum_k 8 b_E / E_UL + K * 8 b_W / E_DL            communication
//! E_FL  = t_i * sum_k B_i / E_C                                       learning
//!       + 8 b_W * t_i * sum_k sum_{h in N_k} c(h, k)                  communication
//! c     = 1 / E_SL,  or 1 / E_UL + gamma_net / E_DL on relayed links
//! E     = E_ML + sum_i E_FL(t_i)
//! ```
//!
//! `E_ML` is zero at `t0 = 0`. Payloads are bytes (8 bits each, MB = 1e6 B),
//! efficiencies bit/J and grad/J.
//!
//! Closed forms and event-log replays both reduce to integer counts first and
//! share [`maml_from_counts`] and [`fl_from_counts`], so the two paths agree
//! bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consensus::{LinkKind, Topology};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const ML_LEARNING: &str = "ml.learning";
pub const ML_UPLINK: &str = "ml.uplink";
pub const ML_DOWNLINK: &str = "ml.downlink";
pub const FL_LEARNING: &str = "fl.learning";
pub const FL_SIDELINK: &str = "fl.sidelink";
pub const FL_FALLBACK: &str = "fl.fallback";

/// JSON form of an [`EnergyProfile`]. Compute efficiencies may be given
/// directly or through power and batch time as `1 / (P T)`; a direct value
/// wins when both are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileDoc {
    pub e_ul: f64,
    pub e_dl: f64,
    pub e_sl: f64,
    #[serde(default)]
    pub e_0: Option<f64>,
    #[serde(default)]
    pub e_c: Option<f64>,
    /// Data-center power (W) and batch time (s).
    #[serde(default)]
    pub p_0: Option<f64>,
    #[serde(default)]
    pub t_0: Option<f64>,
    /// Device power (W) and batch time (s).
    #[serde(default)]
    pub p_c: Option<f64>,
    #[serde(default)]
    pub t_c: Option<f64>,
    pub gamma_dc: f64,
    pub gamma_net: f64,
    pub beta: f64,
    pub model_bytes: u64,
    pub data_bytes: u64,
    pub batches_a: u64,
    pub batches_b: u64,
    pub batches_local: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile<T> {
    pub e_ul: T,
    pub e_dl: T,
    pub e_sl: T,
    pub e_0: T,
    pub e_c: T,
    pub gamma_dc: T,
    pub gamma_net: T,
    pub beta: T,
    pub model_bytes: u64,
    pub data_bytes: u64,
    pub batches_a: u64,
    pub batches_b: u64,
    pub batches_local: u64,
}

fn efficiency(direct: Option<f64>, power: Option<f64>, time: Option<f64>, field: &str) -> Result<f64> {
    match (direct, power, time) {
        (Some(e), _, _) => Ok(e),
        (None, Some(p), Some(t)) if p > 0.0 && t > 0.0 => Ok(1.0 / (p * t)),
        _ => Err(Error::config(
            field,
            "give the efficiency or a positive power and batch time",
        )),
    }
}

impl<T: Scalar> EnergyProfile<T> {
    pub fn from_doc(doc: &ProfileDoc) -> Result<Self> {
        let p = EnergyProfile {
            e_ul: T::lit(doc.e_ul),
            e_dl: T::lit(doc.e_dl),
            e_sl: T::lit(doc.e_sl),
            e_0: T::lit(efficiency(doc.e_0, doc.p_0, doc.t_0, "e_0")?),
            e_c: T::lit(efficiency(doc.e_c, doc.p_c, doc.t_c, "e_c")?),
            gamma_dc: T::lit(doc.gamma_dc),
            gamma_net: T::lit(doc.gamma_net),
            beta: T::lit(doc.beta),
            model_bytes: doc.model_bytes,
            data_bytes: doc.data_bytes,
            batches_a: doc.batches_a,
            batches_b: doc.batches_b,
            batches_local: doc.batches_local,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_doc(&self) -> ProfileDoc {
        ProfileDoc {
            e_ul: self.e_ul.as_f64(),
            e_dl: self.e_dl.as_f64(),
            e_sl: self.e_sl.as_f64(),
            e_0: Some(self.e_0.as_f64()),
            e_c: Some(self.e_c.as_f64()),
            p_0: None,
            t_0: None,
            p_c: None,
            t_c: None,
            gamma_dc: self.gamma_dc.as_f64(),
            gamma_net: self.gamma_net.as_f64(),
            beta: self.beta.as_f64(),
            model_bytes: self.model_bytes,
            data_bytes: self.data_bytes,
            batches_a: self.batches_a,
            batches_b: self.batches_b,
            batches_local: self.batches_local,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("e_ul", self.e_ul),
            ("e_dl", self.e_dl),
            ("e_sl", self.e_sl),
            ("e_0", self.e_0),
            ("e_c", self.e_c),
        ];
        for (name, v) in positive {
            if !(v > T::zero() && v.is_finite()) {
                return Err(Error::config(name, "efficiencies must be positive and finite"));
            }
        }
        for (name, v) in [
            ("gamma_dc", self.gamma_dc),
            ("gamma_net", self.gamma_net),
            ("beta", self.beta),
        ] {
            if !(v >= T::one() && v.is_finite()) {
                return Err(Error::config(name, "must be finite and at least 1"));
            }
        }
        if self.model_bytes == 0 || self.data_bytes == 0 {
            return Err(Error::config("model_bytes", "payloads must be positive"));
        }
        if self.batches_a == 0 || self.batches_b == 0 || self.batches_local == 0 {
            return Err(Error::config("batches_a", "batch counts must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(text)?)
    }

    /// A built-in name or a path to a JSON profile.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Err(Error::UnknownBuiltin(_)) => Self::from_json(&std::fs::read_to_string(Path::new(name_or_path))?),
            other => other,
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "table1" => Self::from_doc(&table1()),
            _ => Err(Error::UnknownBuiltin(name.into())),
        }
    }

    /// Same profile with new uplink and sidelink efficiencies.
    pub fn with_efficiencies(&self, e_ul: T, e_sl: T) -> Result<Self> {
        let p = EnergyProfile { e_ul, e_sl, ..*self };
        p.validate()?;
        Ok(p)
    }
}

/// Measured data-center and device parameters of the reference deployment.
/// Compute efficiencies are the measured values; the power and batch-time
/// entries are kept for reference and imply different efficiencies.
pub fn table1() -> ProfileDoc {
    ProfileDoc {
        e_ul: 200e3,
        e_dl: 200e3,
        e_sl: 500e3,
        e_0: Some(0.03),
        e_c: Some(0.16),
        p_0: Some(590.0),
        t_0: Some(0.020),
        p_c: Some(5.1),
        t_c: Some(0.4),
        gamma_dc: 1.67,
        gamma_net: 1.67,
        beta: 1.0,
        model_bytes: 5_600_000,
        data_bytes: 24_600_000,
        batches_a: 10,
        batches_b: 10,
        batches_local: 20,
    }
}

/// Mean adaptation rounds per task (ids 1..=6) after `t0` meta-rounds, as
/// reported for the reference deployment.
pub fn table2() -> Response<f64> {
    [
        (0, [380.1, 129.6, 93.7, 211.5, 24.2, 82.4]),
        (42, [29.7, 56.4, 70.9, 87.0, 70.4, 57.1]),
        (66, [178.8, 9.9, 14.3, 104.6, 9.8, 12.4]),
        (90, [84.9, 8.9, 15.6, 166.2, 11.3, 19.6]),
        (132, [11.6, 25.5, 25.1, 44.6, 23.1, 23.8]),
        (210, [6.7, 29.1, 16.5, 27.7, 32.0, 17.2]),
        (240, [2.7, 10.8, 9.1, 40.0, 21.8, 19.6]),
    ]
    .into_iter()
    .map(|(t0, r)| (t0, r.to_vec()))
    .collect()
}

/// Adaptation rounds per task, keyed by `t0`.
pub type Response<T> = BTreeMap<usize, Vec<T>>;

pub fn response_fixture(name: &str) -> Result<Response<f64>> {
    match name {
        "table2" => Ok(table2()),
        _ => Err(Error::UnknownBuiltin(name.into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport<T> {
    pub learning_j: T,
    pub communication_j: T,
    pub total_j: T,
    pub breakdown: BTreeMap<String, T>,
}

impl<T: Scalar> EnergyReport<T> {
    fn from_parts(learning: (&str, T), communication: &[(&str, T)]) -> Self {
        let communication_j = communication.iter().fold(T::zero(), |acc, &(_, v)| acc + v);
        let mut breakdown: BTreeMap<String, T> = communication.iter().map(|&(k, v)| (k.to_string(), v)).collect();
        breakdown.insert(learning.0.to_string(), learning.1);
        EnergyReport {
            learning_j: learning.1,
            communication_j,
            total_j: learning.1 + communication_j,
            breakdown,
        }
    }

    pub fn zero() -> Self {
        EnergyReport {
            learning_j: T::zero(),
            communication_j: T::zero(),
            total_j: T::zero(),
            breakdown: BTreeMap::new(),
        }
    }

    pub fn component(&self, key: &str) -> T {
        self.breakdown.get(key).copied().unwrap_or_else(T::zero)
    }
}

/// Integer tallies behind the meta-training bill.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MamlCounts {
    pub inner_batches: u64,
    pub outer_batches: u64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

pub fn maml_from_counts<T: Scalar>(c: &MamlCounts, p: &EnergyProfile<T>) -> EnergyReport<T> {
    let batches = T::count(c.inner_batches) + p.beta * T::count(c.outer_batches);
    EnergyReport::from_parts(
        (ML_LEARNING, p.gamma_dc * batches / p.e_0),
        &[
            (ML_UPLINK, T::count(8 * c.uplink_bytes) / p.e_ul),
            (ML_DOWNLINK, T::count(8 * c.downlink_bytes) / p.e_dl),
        ],
    )
}

/// Tallies behind one task's adaptation bill. Counts are real so fractional
/// mean round numbers can be priced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlCounts<T> {
    pub gradients: T,
    pub sidelink_bits: T,
    pub fallback_bits: T,
}

/// Per-bit energy of a relayed exchange: one uplink plus one downlink
/// through equipment with overhead `gamma_net`.
pub fn sidelink_fallback<T: Scalar>(p: &EnergyProfile<T>) -> T {
    T::one() / p.e_ul + p.gamma_net / p.e_dl
}

pub fn fl_from_counts<T: Scalar>(c: &FlCounts<T>, p: &EnergyProfile<T>) -> EnergyReport<T> {
    EnergyReport::from_parts(
        (FL_LEARNING, c.gradients / p.e_c),
        &[
            (FL_SIDELINK, c.sidelink_bits / p.e_sl),
            (FL_FALLBACK, c.fallback_bits * sidelink_fallback(p)),
        ],
    )
}

/// Closed-form meta-training bill. `collectors[i]` is the number of devices
/// contributing data for the i-th training task; `devices` is `K`.
pub fn maml_energy<T: Scalar>(
    t0: usize,
    collectors: &[usize],
    devices: usize,
    p: &EnergyProfile<T>,
) -> EnergyReport<T> {
    maml_from_counts(&maml_counts(t0, collectors, devices, p), p)
}

pub fn maml_counts<T>(t0: usize, collectors: &[usize], devices: usize, p: &EnergyProfile<T>) -> MamlCounts {
    if t0 == 0 {
        return MamlCounts::default();
    }
    let contributors: u64 = collectors.iter().map(|&n| n as u64).sum();
    let t0 = t0 as u64;
    MamlCounts {
        inner_batches: t0 * contributors * p.batches_a,
        outer_batches: t0 * contributors * p.batches_b,
        uplink_bytes: t0 * contributors * p.data_bytes,
        downlink_bytes: devices as u64 * p.model_bytes,
    }
}

/// Devices and directed model exchanges of one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLinks {
    pub devices: usize,
    pub sidelinks: usize,
    pub fallbacks: usize,
}

impl ClusterLinks {
    pub fn of(topo: &Topology, task: usize) -> Result<Self> {
        let cluster = topo.cluster(task)?;
        let mut out = ClusterLinks {
            devices: cluster.len(),
            sidelinks: 0,
            fallbacks: 0,
        };
        for &k in cluster {
            for &h in topo.neighbors(k) {
                match topo.link(h, k) {
                    Some(LinkKind::Sidelink) => out.sidelinks += 1,
                    Some(LinkKind::Fallback) => out.fallbacks += 1,
                    None => unreachable!("validated neighbours have links"),
                }
            }
        }
        Ok(out)
    }
}

/// Closed-form adaptation bill for `t_i` rounds.
pub fn fl_energy<T: Scalar>(t_i: T, cluster: &ClusterLinks, p: &EnergyProfile<T>) -> Result<EnergyReport<T>> {
    if !(t_i >= T::zero() && t_i.is_finite()) {
        return Err(Error::config("t_i", "round count must be finite and non-negative"));
    }
    let per_round_bits = |links: usize| T::count(8 * p.model_bytes * links as u64);
    let counts = FlCounts {
        gradients: t_i * T::count(cluster.devices as u64 * p.batches_local),
        sidelink_bits: t_i * per_round_bits(cluster.sidelinks),
        fallback_bits: t_i * per_round_bits(cluster.fallbacks),
    };
    Ok(fl_from_counts(&counts, p))
}

/// Sum of reports, keeping every breakdown key.
pub fn total_budget<T: Scalar>(maml: &EnergyReport<T>, fl: &[EnergyReport<T>]) -> EnergyReport<T> {
    let mut out = maml.clone();
    for r in fl {
        out.learning_j = out.learning_j + r.learning_j;
        out.communication_j = out.communication_j + r.communication_j;
        for (k, &v) in &r.breakdown {
            let slot = out.breakdown.entry(k.clone()).or_insert_with(T::zero);
            *slot = *slot + v;
        }
    }
    out.total_j = out.learning_j + out.communication_j;
    out
}

/// Deployment shape the energy model needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTopology {
    /// Contributing devices per training task.
    pub collectors: Vec<usize>,
    /// Total device count `K`.
    pub devices: usize,
    /// One entry per task, in task order.
    pub clusters: Vec<ClusterLinks>,
}

impl EnergyTopology {
    pub fn new(topo: &Topology, training_tasks: usize, collectors_per_task: usize) -> Result<Self> {
        Ok(EnergyTopology {
            collectors: vec![collectors_per_task; training_tasks],
            devices: topo.device_count(),
            clusters: topo.tasks().map(|t| ClusterLinks::of(topo, t)).collect::<Result<_>>()?,
        })
    }

    /// Six two-device sidelink clusters with one collector for each of three
    /// training tasks.
    pub fn reference() -> Self {
        let topo = Topology::builtin("pairs", 6).expect("built-in topology");
        Self::new(&topo, 3, 1).expect("built-in topology")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<T> {
    pub t0: usize,
    pub maml_j: T,
    pub fl_j: T,
    pub total_j: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable<T> {
    pub rows: Vec<SweepRow<T>>,
    /// Minimizing `t0`; ties resolve to the smallest.
    pub argmin: usize,
}

impl<T: Scalar> SweepTable<T> {
    pub fn row(&self, t0: usize) -> Option<&SweepRow<T>> {
        self.rows.iter().find(|r| r.t0 == t0)
    }
}

pub fn sweep_t0<T: Scalar>(
    response: &Response<T>,
    p: &EnergyProfile<T>,
    topo: &EnergyTopology,
) -> Result<SweepTable<T>> {
    if response.is_empty() {
        return Err(Error::EmptyData("t0 response".into()));
    }
    let mut rows = Vec::with_capacity(response.len());
    for (&t0, rounds) in response {
        if rounds.len() != topo.clusters.len() {
            return Err(Error::config(
                format!("response.{t0}"),
                format!("{} round counts for {} tasks", rounds.len(), topo.clusters.len()),
            ));
        }
        let maml = maml_energy(t0, &topo.collectors, topo.devices, p);
        let fl = rounds
            .iter()
            .zip(&topo.clusters)
            .map(|(&t, c)| fl_energy(t, c, p))
            .collect::<Result<Vec<_>>>()?;
        let total = total_budget(&maml, &fl);
        rows.push(SweepRow {
            t0,
            maml_j: maml.total_j,
            fl_j: total.total_j - maml.total_j,
            total_j: total.total_j,
        });
    }
    let mut argmin = rows[0].t0;
    let mut best = rows[0].total_j;
    for r in &rows[1..] {
        if r.total_j < best {
            best = r.total_j;
            argmin = r.t0;
        }
    }
    Ok(SweepTable { rows, argmin })
}

/// One entry of a simulator's energy log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerEvent {
    /// Gradient batches of one meta-round at the data center.
    DataCenterGradients { round: usize, inner: u64, outer: u64 },
    /// Fresh training data sent to the data center.
    Upload { device: usize, bytes: u64 },
    /// Meta-model broadcast to a device.
    Download { device: usize, bytes: u64 },
    /// Local gradient batches of one device in one adaptation round.
    LocalGradients { device: usize, count: u64 },
    ModelExchange {
        from: usize,
        to: usize,
        bytes: u64,
        link: LinkKind,
    },
}

/// Re-prices a meta-training log.
pub fn replay_maml<T: Scalar>(events: &[LedgerEvent], p: &EnergyProfile<T>) -> Result<EnergyReport<T>> {
    let mut c = MamlCounts::default();
    for e in events {
        match *e {
            LedgerEvent::DataCenterGradients { inner, outer, .. } => {
                c.inner_batches += inner;
                c.outer_batches += outer;
            }
            LedgerEvent::Upload { bytes, .. } => c.uplink_bytes += bytes,
            LedgerEvent::Download { bytes, .. } => c.downlink_bytes += bytes,
            other => return Err(Error::config("events", format!("{other:?} in a meta-training log"))),
        }
    }
    Ok(maml_from_counts(&c, p))
}

/// Re-prices one task's adaptation log.
pub fn replay_fl<T: Scalar>(events: &[LedgerEvent], p: &EnergyProfile<T>) -> Result<EnergyReport<T>> {
    let (mut grads, mut sl, mut fb) = (0u64, 0u64, 0u64);
    for e in events {
        match *e {
            LedgerEvent::LocalGradients { count, .. } => grads += count,
            LedgerEvent::ModelExchange { bytes, link, .. } => match link {
                LinkKind::Sidelink => sl += 8 * bytes,
                LinkKind::Fallback => fb += 8 * bytes,
            },
            other => return Err(Error::config("events", format!("{other:?} in an adaptation log"))),
        }
    }
    let counts = FlCounts {
        gradients: T::count(grads),
        sidelink_bits: T::count(sl),
        fallback_bits: T::count(fb),
    };
    Ok(fl_from_counts(&counts, p))
}
