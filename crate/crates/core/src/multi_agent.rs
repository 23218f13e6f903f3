//! Decentralised collaboration: submap databases, digest-based anti-entropy over a
//! simulated lossy network, and per-agent optimisation of the collective pose graph.

use crate::geometry::{Pose, Vec3};
use crate::pose_graph::{MapSurfel, OptimizeReport, PoseGraph, PoseGraphConfig, PoseGraphError, Submap, SubmapId};
use nalgebra::Matrix6;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("truncated submap record: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("length prefix {prefix} disagrees with record size {actual}")]
    LengthMismatch { prefix: usize, actual: usize },
}

const HEADER_BYTES: usize = 4 + 8 + 8 + 8 + 1 + 7 * 8 + 3 * 8 + (7 + 36) * 8;
const SURFEL_BYTES: usize = 9 * 8 + 4;

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn pose_tuple(p: &Pose) -> [f64; 7] {
    let q = p.quaternion().coords;
    [p.translation.x, p.translation.y, p.translation.z, q.x, q.y, q.z, q.w]
}

fn pose_from_tuple(v: &[f64]) -> Pose {
    Pose::from_quaternion(Vec3::new(v[0], v[1], v[2]), v[3], v[4], v[5], v[6])
}

/// Serialised size of a submap record including its length prefix.
pub fn encoded_len(s: &Submap) -> usize {
    4 + HEADER_BYTES + 4 + SURFEL_BYTES * s.surfels.len()
}

/// Little-endian record: `u32` length prefix, header, `u32` surfel count, surfels.
pub fn encode_submap(s: &Submap) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(s));
    out.extend_from_slice(&((encoded_len(s) - 4) as u32).to_le_bytes());
    out.extend_from_slice(&s.id.agent.to_le_bytes());
    out.extend_from_slice(&s.id.seq.to_le_bytes());
    put_f64s(&mut out, &[s.t0, s.t1]);
    out.push(s.odom_edge.is_some() as u8);
    put_f64s(&mut out, &pose_tuple(&s.base_pose));
    put_f64s(&mut out, s.up_local.as_slice());
    let (z, cov) = s.odom_edge.unwrap_or((Pose::identity(), Matrix6::zeros()));
    put_f64s(&mut out, &pose_tuple(&z));
    for r in 0..6 {
        for c in 0..6 {
            out.extend_from_slice(&cov[(r, c)].to_le_bytes());
        }
    }
    out.extend_from_slice(&(s.surfels.len() as u32).to_le_bytes());
    for m in &s.surfels {
        put_f64s(&mut out, m.position.as_slice());
        put_f64s(&mut out, m.normal.as_slice());
        put_f64s(&mut out, &[m.resolution, m.planarity, m.mean_time]);
        out.extend_from_slice(&m.point_count.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], WireError> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Truncated { need: self.pos + n, have: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s<const N: usize>(&mut self) -> Result<[f64; N], WireError> {
        let mut out = [0.0; N];
        for x in &mut out {
            *x = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        }
        Ok(out)
    }
}

/// Decodes one record; returns the submap and the number of bytes consumed.
pub fn decode_submap(buf: &[u8]) -> Result<(Submap, usize), WireError> {
    let mut r = Reader { buf, pos: 0 };
    let prefix = r.u32()? as usize;
    if buf.len() < 4 + prefix {
        return Err(WireError::Truncated { need: 4 + prefix, have: buf.len() });
    }
    let agent = r.u32()?;
    let seq = r.u64()?;
    let [t0, t1] = r.f64s::<2>()?;
    let has_odom = r.take(1)?[0] != 0;
    let base_pose = pose_from_tuple(&r.f64s::<7>()?);
    let up_local = Vec3::from(r.f64s::<3>()?);
    let z = pose_from_tuple(&r.f64s::<7>()?);
    let cov = Matrix6::from_row_slice(&r.f64s::<36>()?);
    let n = r.u32()? as usize;
    let expect = HEADER_BYTES + 4 + n * SURFEL_BYTES;
    if expect != prefix {
        return Err(WireError::LengthMismatch { prefix, actual: expect });
    }
    let mut surfels = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.f64s::<9>()?;
        surfels.push(MapSurfel {
            position: Vec3::new(v[0], v[1], v[2]),
            normal: Vec3::new(v[3], v[4], v[5]),
            resolution: v[6],
            planarity: v[7],
            mean_time: v[8],
            point_count: r.u32()?,
        });
    }
    let odom_edge = has_odom.then_some((z, cov));
    Ok((Submap { id: SubmapId { agent, seq }, t0, t1, base_pose, surfels, up_local, odom_edge }, r.pos))
}

pub type Digest = Vec<(u32, u64)>;

/// Submaps held by one agent, keyed by (agent, seq).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubmapDatabase {
    submaps: BTreeMap<SubmapId, Submap>,
}

impl SubmapDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a submap; returns false if it was already held. Submaps are immutable once stored.
    pub fn insert(&mut self, s: Submap) -> bool {
        if self.submaps.contains_key(&s.id) {
            return false;
        }
        self.submaps.insert(s.id, s);
        true
    }

    pub fn contains(&self, id: &SubmapId) -> bool {
        self.submaps.contains_key(id)
    }

    pub fn get(&self, id: &SubmapId) -> Option<&Submap> {
        self.submaps.get(id)
    }

    pub fn len(&self) -> usize {
        self.submaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.submaps.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &SubmapId> {
        self.submaps.keys()
    }

    /// Number of submaps of `agent` held contiguously from seq 0.
    pub fn watermark(&self, agent: u32) -> u64 {
        let mut n = 0;
        while self.submaps.contains_key(&SubmapId { agent, seq: n }) {
            n += 1;
        }
        n
    }

    /// The contiguous prefix of every agent, in (agent, seq) order.
    pub fn contiguous(&self) -> Vec<&Submap> {
        let wm: BTreeMap<u32, u64> = make_digest(self).into_iter().collect();
        self.submaps.values().filter(|s| wm.get(&s.id.agent).is_some_and(|w| s.id.seq < *w)).collect()
    }
}

/// Per-agent watermark vector, sorted by agent; agents with nothing contiguous are omitted.
pub fn make_digest(db: &SubmapDatabase) -> Digest {
    let agents: BTreeSet<u32> = db.submaps.keys().map(|k| k.agent).collect();
    agents.into_iter().map(|a| (a, db.watermark(a))).filter(|(_, w)| *w > 0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyncKind {
    Digest(Digest),
    Request(Vec<SubmapId>),
    Payload(Vec<Submap>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncMessage {
    pub from: u32,
    pub to: u32,
    pub kind: SyncKind,
}

impl SyncMessage {
    /// Serialised size: 9-byte envelope plus the body.
    pub fn size_bytes(&self) -> usize {
        9 + match &self.kind {
            SyncKind::Digest(d) => 4 + 12 * d.len(),
            SyncKind::Request(ids) => 4 + 12 * ids.len(),
            SyncKind::Payload(s) => 4 + s.iter().map(encoded_len).sum::<usize>(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            SyncKind::Digest(_) => "digest",
            SyncKind::Request(_) => "request",
            SyncKind::Payload(_) => "payload",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncConfig {
    /// Maximum submaps per payload message.
    pub max_batch: usize,
    /// Payload bytes an agent may send to one peer per round.
    pub bandwidth_per_round: usize,
    /// Rounds before an unacknowledged push or request is repeated.
    pub retry_rounds: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self { max_batch: 4, bandwidth_per_round: 4 << 20, retry_rounds: 3 }
    }
}

/// Ids held in `db` above the watermarks of `digest`.
pub fn missing_from(db: &SubmapDatabase, digest: &Digest) -> Vec<SubmapId> {
    let theirs: BTreeMap<u32, u64> = digest.iter().copied().collect();
    db.ids().filter(|id| id.seq >= theirs.get(&id.agent).copied().unwrap_or(0)).copied().collect()
}

/// Ids advertised by `digest` that `db` does not hold.
pub fn wanted_from(db: &SubmapDatabase, digest: &Digest) -> Vec<SubmapId> {
    digest.iter().flat_map(|&(agent, w)| (0..w).map(move |seq| SubmapId { agent, seq })).filter(|id| !db.contains(id)).collect()
}

/// Batches the held submaps among `ids` under the batch and bandwidth limits.
pub fn payloads(me: u32, peer: u32, db: &SubmapDatabase, ids: &[SubmapId], config: &SyncConfig) -> Vec<SyncMessage> {
    let mut batch = Vec::new();
    let mut budget = config.bandwidth_per_round;
    for id in ids {
        let Some(s) = db.get(id) else { continue };
        let n = encoded_len(s);
        if n > budget || batch.len() == config.max_batch.max(1) {
            break;
        }
        budget -= n;
        batch.push(s.clone());
    }
    if batch.is_empty() {
        return Vec::new();
    }
    vec![SyncMessage { from: me, to: peer, kind: SyncKind::Payload(batch) }]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub latency: f64,
    pub drop_probability: f64,
    /// Bytes per second.
    pub bandwidth: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self { latency: 0.05, drop_probability: 0.0, bandwidth: 1e8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEntry {
    pub round: usize,
    pub from: u32,
    pub to: u32,
    pub kind: &'static str,
    pub bytes: usize,
    pub dropped: bool,
}

/// Seeded lossy network with per-link FIFO delivery.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    links: BTreeMap<(u32, u32), LinkParams>,
    queues: BTreeMap<(u32, u32), VecDeque<(f64, SyncMessage)>>,
    busy_until: BTreeMap<(u32, u32), f64>,
    rng: ChaCha8Rng,
    pub transcript: Vec<TranscriptEntry>,
}

impl SimNetwork {
    pub fn new(seed: u64) -> Self {
        Self { links: BTreeMap::new(), queues: BTreeMap::new(), busy_until: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), transcript: Vec::new() }
    }

    /// Adds a bidirectional link.
    pub fn connect(&mut self, a: u32, b: u32, params: LinkParams) {
        self.links.insert((a, b), params);
        self.links.insert((b, a), params);
    }

    /// Fully connected network over `agents`.
    pub fn full(agents: &[u32], params: LinkParams, seed: u64) -> Self {
        let mut net = Self::new(seed);
        for (k, &a) in agents.iter().enumerate() {
            for &b in &agents[k + 1..] {
                net.connect(a, b, params);
            }
        }
        net
    }

    pub fn neighbours(&self, a: u32) -> Vec<u32> {
        self.links.keys().filter(|(x, _)| *x == a).map(|(_, y)| *y).collect()
    }

    /// Queues a message at time `now`; it may be dropped. Unknown links drop everything.
    pub fn send(&mut self, now: f64, round: usize, msg: SyncMessage) {
        let key = (msg.from, msg.to);
        let bytes = msg.size_bytes();
        let Some(link) = self.links.get(&key).copied() else {
            self.transcript.push(TranscriptEntry { round, from: msg.from, to: msg.to, kind: msg.kind_name(), bytes, dropped: true });
            return;
        };
        let dropped = self.rng.random::<f64>() < link.drop_probability;
        self.transcript.push(TranscriptEntry { round, from: msg.from, to: msg.to, kind: msg.kind_name(), bytes, dropped });
        if dropped {
            return;
        }
        let start = self.busy_until.get(&key).copied().unwrap_or(f64::NEG_INFINITY).max(now);
        let done = start + bytes as f64 / link.bandwidth;
        self.busy_until.insert(key, done);
        self.queues.entry(key).or_default().push_back((done + link.latency, msg));
    }

    /// Removes every message due by `now`, in (link, FIFO) order.
    pub fn deliver(&mut self, now: f64) -> Vec<SyncMessage> {
        let mut out = Vec::new();
        for q in self.queues.values_mut() {
            while q.front().is_some_and(|(t, _)| *t <= now) {
                out.push(q.pop_front().expect("front exists").1);
            }
        }
        out
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(|q| q.len()).sum()
    }
}

/// One collaborating agent with its retransmission bookkeeping.
#[derive(Debug, Clone)]
pub struct Agent {
    pub id: u32,
    pub db: SubmapDatabase,
    pushed: BTreeMap<(u32, SubmapId), usize>,
    requested: BTreeMap<SubmapId, usize>,
    missing_since: BTreeMap<SubmapId, usize>,
}

impl Agent {
    pub fn new(id: u32, own: impl IntoIterator<Item = Submap>) -> Self {
        let mut db = SubmapDatabase::new();
        for s in own {
            db.insert(s);
        }
        Self { id, db, pushed: BTreeMap::new(), requested: BTreeMap::new(), missing_since: BTreeMap::new() }
    }

    /// Answer to a peer digest: push what the peer lacks and has not been sent recently;
    /// request what the peer advertises once a push for it is overdue.
    pub fn sync_round(&mut self, peer: u32, digest: &Digest, round: usize, config: &SyncConfig) -> Vec<SyncMessage> {
        let retry = config.retry_rounds;
        let mut out = Vec::new();
        let mut want = Vec::new();
        for id in wanted_from(&self.db, digest) {
            let since = *self.missing_since.entry(id).or_insert(round);
            let fresh = self.requested.get(&id).is_some_and(|r| round < r + retry);
            if round >= since + retry && !fresh && want.len() < config.max_batch {
                self.requested.insert(id, round);
                want.push(id);
            }
        }
        if !want.is_empty() {
            out.push(SyncMessage { from: self.id, to: peer, kind: SyncKind::Request(want) });
        }
        let push: Vec<SubmapId> = missing_from(&self.db, digest)
            .into_iter()
            .filter(|id| self.pushed.get(&(peer, *id)).is_none_or(|r| round >= r + retry))
            .collect();
        for m in payloads(self.id, peer, &self.db, &push, config) {
            self.note_pushed(peer, &m, round);
            out.push(m);
        }
        out
    }

    fn note_pushed(&mut self, peer: u32, m: &SyncMessage, round: usize) {
        if let SyncKind::Payload(subs) = &m.kind {
            for s in subs {
                self.pushed.insert((peer, s.id), round);
            }
        }
    }

    pub fn handle(&mut self, msg: &SyncMessage, round: usize, config: &SyncConfig) -> Vec<SyncMessage> {
        match &msg.kind {
            SyncKind::Digest(d) => self.sync_round(msg.from, d, round, config),
            SyncKind::Request(ids) => {
                let out = payloads(self.id, msg.from, &self.db, ids, config);
                for m in &out {
                    self.note_pushed(msg.from, m, round);
                }
                out
            }
            SyncKind::Payload(subs) => {
                for s in subs {
                    self.missing_since.remove(&s.id);
                    self.requested.remove(&s.id);
                    self.db.insert(s.clone());
                }
                Vec::new()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncOutcome {
    /// First round after which all digests agree, if reached.
    pub converged_round: Option<usize>,
    pub rounds: usize,
    pub bytes_sent: usize,
    pub messages: usize,
}

/// Runs gossip rounds of `period` seconds until all digests agree and the network is quiet,
/// or `max_rounds` elapse.
pub fn run_sync(agents: &mut [Agent], net: &mut SimNetwork, config: &SyncConfig, period: f64, max_rounds: usize) -> SyncOutcome {
    let mut converged_round = None;
    let mut rounds = 0;
    let index: BTreeMap<u32, usize> = agents.iter().enumerate().map(|(k, a)| (a.id, k)).collect();
    for round in 0..max_rounds {
        let now = round as f64 * period;
        for msg in net.deliver(now) {
            if let Some(&k) = index.get(&msg.to) {
                for reply in agents[k].handle(&msg, round, config) {
                    net.send(now, round, reply);
                }
            }
        }
        rounds = round + 1;
        let d0 = make_digest(&agents[0].db);
        if agents.iter().all(|a| make_digest(&a.db) == d0) {
            converged_round = Some(round);
            break;
        }
        for a in agents.iter() {
            let digest = make_digest(&a.db);
            for peer in net.neighbours(a.id) {
                net.send(now, round, SyncMessage { from: a.id, to: peer, kind: SyncKind::Digest(digest.clone()) });
            }
        }
    }
    let bytes_sent = net.transcript.iter().map(|e| e.bytes).sum();
    SyncOutcome { converged_round, rounds, bytes_sent, messages: net.transcript.len() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveResult {
    pub graph: PoseGraph,
    pub report: OptimizeReport,
    /// Agents grouped by connected gauge component.
    pub components: Vec<Vec<u32>>,
}

/// Builds and optimises the pose graph of every contiguous submap held in `db`.
/// Submaps are ingested in (start time, agent, seq) order so identical databases give identical graphs.
pub fn collective_optimize(db: &SubmapDatabase, config: &PoseGraphConfig) -> Result<CollectiveResult, PoseGraphError> {
    let mut subs = db.contiguous();
    subs.sort_by(|a, b| a.t0.total_cmp(&b.t0).then(a.id.cmp(&b.id)));
    let mut graph = PoseGraph::new(config.clone());
    for s in subs {
        graph.ingest(s)?;
    }
    let report = graph.optimize()?;
    let components = graph
        .components()
        .iter()
        .map(|c| {
            let agents: BTreeSet<u32> = c.iter().flat_map(|n| graph.node(*n).expect("node").members.iter().map(|(s, _)| s.agent)).collect();
            agents.into_iter().collect()
        })
        .collect();
    Ok(CollectiveResult { graph, report, components })
}
