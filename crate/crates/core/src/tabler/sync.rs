//! Clock-offset recovery and coincidence matching between the two
//! detection streams.

use thiserror::Error;

use super::{DetectionEvent, Party, CALIBRATION_PS, PS_PER_MS, PS_PER_NS};

/// The 1 ms window must hold at least this many events to count as an edge.
const MIN_EDGE_EVENTS: usize = 5;
/// Cap on calibration events used for the cross-correlation refinement.
const MAX_REFINE_EVENTS: usize = 50_000;
/// Width of the sliding peak window in the cross-correlation.
const PEAK_WIDTH_PS: i64 = 6 * PS_PER_NS;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SyncError {
    #[error("no calibration edge found in the {0} stream")]
    EdgeNotFound(Party),
    #[error("no coincidences found within the search range")]
    NoCoincidences,
    #[error("invalid sync parameter: {0}")]
    InvalidParameter(String),
}

/// Maps an Alice timestamp to the corresponding instant on Bob's clock.
pub trait ClockMap {
    fn to_bob(&self, alice_ts: i64) -> i64;
}

/// Constant offset: `bob = alice + offset`.
impl ClockMap for i64 {
    fn to_bob(&self, alice_ts: i64) -> i64 {
        alice_ts + self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseClock {
    /// `(alice time, offset)` anchors, increasing in time.
    anchors: Vec<(i64, f64)>,
}

impl PiecewiseClock {
    pub fn constant(offset: i64) -> PiecewiseClock {
        PiecewiseClock {
            anchors: vec![(0, offset as f64)],
        }
    }

    pub fn from_anchors(mut anchors: Vec<(i64, f64)>) -> Result<PiecewiseClock, SyncError> {
        if anchors.is_empty() {
            return Err(SyncError::InvalidParameter("no clock anchors".into()));
        }
        anchors.sort_by_key(|a| a.0);
        anchors.dedup_by_key(|a| a.0);
        Ok(PiecewiseClock { anchors })
    }

    pub fn anchors(&self) -> &[(i64, f64)] {
        &self.anchors
    }

    pub fn offset_at(&self, alice_ts: i64) -> f64 {
        let a = &self.anchors;
        if a.len() == 1 {
            return a[0].1;
        }
        // Segment whose left anchor is the last one at or before `alice_ts`,
        // clamped so the ends extrapolate along the outermost segments.
        let idx = a.partition_point(|p| p.0 <= alice_ts).clamp(1, a.len() - 1);
        let (t0, o0) = a[idx - 1];
        let (t1, o1) = a[idx];
        o0 + (o1 - o0) * (alice_ts - t0) as f64 / (t1 - t0) as f64
    }
}

impl ClockMap for PiecewiseClock {
    fn to_bob(&self, alice_ts: i64) -> i64 {
        alice_ts + self.offset_at(alice_ts).round() as i64
    }
}

/// First timestamp whose following 1 ms holds more than ten times the
/// per-millisecond average of the preceding 10 ms.
pub fn find_calibration_edge(events: &[DetectionEvent]) -> Result<i64, SyncError> {
    let party = events.first().map_or(Party::Alice, |e| e.party);
    let mut hi = 0;
    let mut lo = 0;
    for (i, e) in events.iter().enumerate() {
        let t = e.timestamp;
        hi = hi.max(i);
        while hi < events.len() && events[hi].timestamp < t + PS_PER_MS {
            hi += 1;
        }
        while events[lo].timestamp < t - 10 * PS_PER_MS {
            lo += 1;
        }
        let ahead = hi - i;
        let behind = i - lo;
        // ahead / 1 ms > 10 * (behind / 10 ms)
        if ahead >= MIN_EDGE_EVENTS && ahead > behind {
            return Ok(t);
        }
    }
    Err(SyncError::EdgeNotFound(party))
}

fn median_sorted(v: &[i64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

/// Constant Bob-minus-Alice offset. The calibration edges give a coarse
/// value, refined by locating the densest `6 ns` cluster of timestamp
/// differences within `±search_range` over the calibration burst.
pub fn find_clock_offset(
    alice: &[DetectionEvent],
    bob: &[DetectionEvent],
    search_range: i64,
) -> Result<i64, SyncError> {
    if search_range <= 0 {
        return Err(SyncError::InvalidParameter("search range must be positive".into()));
    }
    let edge_a = find_calibration_edge(alice).map_err(|_| SyncError::EdgeNotFound(Party::Alice))?;
    let edge_b = find_calibration_edge(bob).map_err(|_| SyncError::EdgeNotFound(Party::Bob))?;
    let coarse = edge_b - edge_a;

    let mut diffs = Vec::new();
    let mut lo = 0;
    let start = alice.partition_point(|e| e.timestamp < edge_a);
    for a in alice[start..]
        .iter()
        .take_while(|e| e.timestamp < edge_a + CALIBRATION_PS)
        .take(MAX_REFINE_EVENTS)
    {
        let centre = a.timestamp + coarse;
        while lo < bob.len() && bob[lo].timestamp < centre - search_range {
            lo += 1;
        }
        diffs.extend(
            bob[lo..]
                .iter()
                .take_while(|b| b.timestamp <= centre + search_range)
                .map(|b| b.timestamp - centre),
        );
    }
    if diffs.is_empty() {
        return Err(SyncError::NoCoincidences);
    }
    diffs.sort_unstable();

    let (mut best_start, mut best_count) = (0, 0);
    let mut hi = 0;
    for i in 0..diffs.len() {
        while hi < diffs.len() && diffs[hi] <= diffs[i] + PEAK_WIDTH_PS {
            hi += 1;
        }
        if hi - i > best_count {
            best_count = hi - i;
            best_start = i;
        }
    }
    let fine = median_sorted(&diffs[best_start..best_start + best_count]);
    Ok(coarse + fine.round() as i64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingParams {
    /// Length of Alice-time covered by one anchor.
    pub segment_ps: i64,
    /// Half-width of the first-pass residual search around the prediction.
    pub search_half_width_ps: i64,
    /// Half-width of the second pass around the first-pass median.
    pub refine_half_width_ps: i64,
    /// Segments with fewer residuals leave no anchor.
    pub min_events: usize,
    /// Anchors used in the local linear fit that predicts the next segment.
    pub fit_anchors: usize,
}

impl Default for TrackingParams {
    fn default() -> Self {
        TrackingParams {
            segment_ps: 10 * PS_PER_MS,
            search_half_width_ps: 2_000 * PS_PER_NS,
            refine_half_width_ps: 3 * PS_PER_NS,
            min_events: 5,
            fit_anchors: 8,
        }
    }
}

/// Follows a drifting offset (clock skew) across the whole stream, starting
/// from a constant estimate valid near the calibration edge. Each segment's
/// median residual against a local linear prediction becomes an anchor of
/// a piecewise-linear clock map.
pub fn track_clock_offset(
    alice: &[DetectionEvent],
    bob: &[DetectionEvent],
    initial_offset: i64,
    params: &TrackingParams,
) -> Result<PiecewiseClock, SyncError> {
    if params.segment_ps <= 0 || params.search_half_width_ps <= 0 || params.refine_half_width_ps <= 0 {
        return Err(SyncError::InvalidParameter("tracking widths must be positive".into()));
    }
    let Some(first) = alice.first() else {
        return Ok(PiecewiseClock::constant(initial_offset));
    };
    let start = find_calibration_edge(alice).unwrap_or(first.timestamp);

    let mut anchors: Vec<(i64, f64)> = Vec::new();
    // Linear model offset(t) = base + slope * (t - origin).
    let (mut origin, mut base, mut slope) = (start, initial_offset as f64, 0.0);
    let predict = |origin: i64, base: f64, slope: f64, t: i64| base + slope * (t - origin) as f64;

    let mut ai = alice.partition_point(|e| e.timestamp < start);
    let mut lo = 0;
    let mut seg_start = start;
    let mut residuals: Vec<(i64, i64)> = Vec::new();
    while ai < alice.len() {
        let seg_end = seg_start + params.segment_ps;
        residuals.clear();
        while ai < alice.len() && alice[ai].timestamp < seg_end {
            let a = alice[ai].timestamp;
            let pred = a + predict(origin, base, slope, a).round() as i64;
            while lo < bob.len() && bob[lo].timestamp < pred - params.search_half_width_ps {
                lo += 1;
            }
            residuals.extend(
                bob[lo..]
                    .iter()
                    .take_while(|b| b.timestamp <= pred + params.search_half_width_ps)
                    .map(|b| (a, b.timestamp - pred)),
            );
            ai += 1;
        }
        seg_start = seg_end;
        if residuals.len() < params.min_events {
            continue;
        }
        let mut r: Vec<i64> = residuals.iter().map(|x| x.1).collect();
        r.sort_unstable();
        let coarse = median_sorted(&r);
        let close: Vec<(i64, i64)> = residuals
            .iter()
            .copied()
            .filter(|x| (x.1 as f64 - coarse).abs() <= params.refine_half_width_ps as f64)
            .collect();
        // Before the slope is known the residuals are smeared by the drift
        // over one segment; fall back to the wide median then.
        let used = if close.len() >= params.min_events { &close } else { &residuals };
        let mut rr: Vec<i64> = used.iter().map(|x| x.1).collect();
        rr.sort_unstable();
        let t_anchor = (used.iter().map(|x| x.0 as i128).sum::<i128>() / used.len() as i128) as i64;
        let offset = predict(origin, base, slope, t_anchor) + median_sorted(&rr);
        anchors.push((t_anchor, offset));

        let recent = &anchors[anchors.len().saturating_sub(params.fit_anchors)..];
        origin = recent[recent.len() - 1].0;
        base = recent[recent.len() - 1].1;
        if recent.len() >= 2 {
            let n = recent.len() as f64;
            let mt = recent.iter().map(|p| (p.0 - origin) as f64).sum::<f64>() / n;
            let mo = recent.iter().map(|p| p.1).sum::<f64>() / n;
            let sxx: f64 = recent.iter().map(|p| ((p.0 - origin) as f64 - mt).powi(2)).sum();
            let sxy: f64 = recent
                .iter()
                .map(|p| ((p.0 - origin) as f64 - mt) * (p.1 - mo))
                .sum();
            if sxx > 0.0 {
                slope = sxy / sxx;
                base = mo - slope * mt;
            }
        }
    }
    if anchors.is_empty() {
        return Err(SyncError::NoCoincidences);
    }
    PiecewiseClock::from_anchors(anchors)
}

/// Indices of one matched Alice/Bob detection pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coincidence {
    pub alice: usize,
    pub bob: usize,
}

/// Pairs detections that land within `window` of each other after mapping
/// Alice's time onto Bob's clock.
///
/// Candidate pairs fall into small connected clusters; inside each cluster
/// pairs are taken greedily by smallest `|Δt|`, ties going to the pair with
/// the earlier midpoint. Every event is used at most once and the output is
/// sorted by Alice index. Runs in a single merge pass over both streams.
pub fn match_coincidences<C: ClockMap + ?Sized>(
    alice: &[DetectionEvent],
    bob: &[DetectionEvent],
    clock: &C,
    window: i64,
) -> Vec<Coincidence> {
    let mut out = Vec::with_capacity(alice.len().min(bob.len()));
    // (|Δt|, midpoint key, alice index, bob index)
    let mut cluster: Vec<(i64, i64, usize, usize)> = Vec::new();
    let mut cluster_max_bob: Option<usize> = None;
    let mut lo = 0;

    for (ai, a) in alice.iter().enumerate() {
        let p = clock.to_bob(a.timestamp);
        while lo < bob.len() && bob[lo].timestamp < p - window {
            lo += 1;
        }
        // Later Alice events only reach Bob events at or after `lo`, so a
        // cluster whose Bob events all lie before it is complete.
        if cluster_max_bob.is_some_and(|m| lo > m) {
            resolve_cluster(&mut cluster, &mut out);
            cluster_max_bob = None;
        }
        let mut j = lo;
        while j < bob.len() && bob[j].timestamp <= p + window {
            let d = bob[j].timestamp - p;
            cluster.push((d.abs(), p + bob[j].timestamp, ai, j));
            cluster_max_bob = Some(cluster_max_bob.map_or(j, |m| m.max(j)));
            j += 1;
        }
    }
    resolve_cluster(&mut cluster, &mut out);
    out.sort_unstable();
    out
}

fn resolve_cluster(cluster: &mut Vec<(i64, i64, usize, usize)>, out: &mut Vec<Coincidence>) {
    match cluster.len() {
        0 => return,
        1 => {
            out.push(Coincidence {
                alice: cluster[0].2,
                bob: cluster[0].3,
            });
        }
        _ => {
            cluster.sort_unstable();
            let mut used_a: Vec<usize> = Vec::new();
            let mut used_b: Vec<usize> = Vec::new();
            for &(_, _, a, b) in cluster.iter() {
                if !used_a.contains(&a) && !used_b.contains(&b) {
                    used_a.push(a);
                    used_b.push(b);
                    out.push(Coincidence { alice: a, bob: b });
                }
            }
        }
    }
    cluster.clear();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(party: Party, ts: &[i64]) -> Vec<DetectionEvent> {
        ts.iter()
            .map(|&timestamp| DetectionEvent {
                timestamp,
                channel: 0,
                party,
                multi_photon: false,
            })
            .collect()
    }

    #[test]
    fn disjoint_ranges_match_nothing() {
        let a = stream(Party::Alice, &[0, 10, 20]);
        let b = stream(Party::Bob, &[1_000_000, 1_000_010]);
        assert!(match_coincidences(&a, &b, &0i64, 6_000).is_empty());
    }

    #[test]
    fn closest_wins_and_ties_go_early() {
        let a = stream(Party::Alice, &[1000]);
        let b = stream(Party::Bob, &[-2000, 1500, 2500]);
        assert_eq!(match_coincidences(&a, &b, &0i64, 6_000), vec![Coincidence { alice: 0, bob: 1 }]);
        let b = stream(Party::Bob, &[500, 1500]);
        assert_eq!(match_coincidences(&a, &b, &0i64, 6_000), vec![Coincidence { alice: 0, bob: 0 }]);
    }

    #[test]
    fn competing_alice_events_share_one_bob_event() {
        let a = stream(Party::Alice, &[0, 3000, 9000]);
        let b = stream(Party::Bob, &[2500, 8000]);
        let m = match_coincidences(&a, &b, &0i64, 6_000);
        assert_eq!(
            m,
            vec![Coincidence { alice: 1, bob: 0 }, Coincidence { alice: 2, bob: 1 }]
        );
    }

    #[test]
    fn piecewise_clock_interpolates_and_extrapolates() {
        let c = PiecewiseClock::from_anchors(vec![(0, 10.0), (100, 20.0), (200, 20.0)]).unwrap();
        assert_eq!(c.offset_at(50), 15.0);
        assert_eq!(c.offset_at(-100), 0.0);
        assert_eq!(c.offset_at(300), 20.0);
        assert_eq!(c.to_bob(150), 170);
        assert!(PiecewiseClock::from_anchors(vec![]).is_err());
    }

    #[test]
    fn edge_detection_finds_burst() {
        let mut ts: Vec<i64> = (0..20).map(|i| i * 3 * PS_PER_MS).collect();
        let edge = 100 * PS_PER_MS + 17;
        ts.extend((0..200).map(|i| edge + i * 50_000_000));
        ts.sort();
        assert_eq!(find_calibration_edge(&stream(Party::Bob, &ts)).unwrap(), edge);
        assert_eq!(find_calibration_edge(&[]), Err(SyncError::EdgeNotFound(Party::Alice)));
    }
}
