//! Temporal post-processing of frame-level estimates — source-count
//! smoothing, event segmentation, grid snapping with per-event medians —
//! and the evaluation metrics used to score tracks.

use crate::geom::{great_circle, wrap_degrees};
use crate::intensity::{DoaEstimate, DoaTrack, FrameDoa};
use crate::refine::rotational_mae;
use crate::{Error, Result};

/// Default sliding majority-vote window, in frames.
pub const DEFAULT_SMOOTH_WINDOW: usize = 11;
/// Default direction grid, in degrees.
pub const DEFAULT_DISCRETIZATION_DEG: f64 = 10.0;

/// Maximal run of frames with one constant, nonzero source count.
/// `start..end` is half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub start: usize,
    pub end: usize,
    pub noas: u8,
}

/// Sliding majority vote over per-frame source counts. The window must
/// be odd so the vote is centered; windows shrink at the edges. Vote
/// ties resolve toward the smaller count.
pub fn smooth_noas(raw: &[u8], window: usize) -> Result<Vec<u8>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::ShapeMismatch {
            expected: "an odd smoothing window of at least 1 frame".into(),
            got: format!("{window}"),
        });
    }
    let half = window / 2;
    let n = raw.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(n);
        let mut counts = [0usize; 256];
        for &v in &raw[lo..hi] {
            counts[v as usize] += 1;
        }
        let mut best = raw[t];
        let mut best_count = 0usize;
        for v in 0..256 {
            // Strict comparison keeps the smallest value on ties.
            if counts[v] > best_count {
                best_count = counts[v];
                best = v as u8;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Splits a count sequence into maximal constant nonzero runs.
pub fn segment_events(noas: &[u8]) -> Vec<Event> {
    let mut events = Vec::new();
    let mut start = 0usize;
    for t in 1..=noas.len() {
        if t == noas.len() || noas[t] != noas[start] {
            if noas[start] > 0 {
                events.push(Event { start, end: t, noas: noas[start] });
            }
            start = t;
        }
    }
    events
}

/// Snaps one angle in degrees to the grid, rounding halves away from
/// zero.
fn snap(deg: f64, grid: f64) -> f64 {
    (deg / grid).round() * grid
}

/// Azimuth snapping wraps before rounding, and a value that rounds up
/// to +180 wraps to -180 so the result stays in range and a second
/// application is a fixed point.
fn snap_azimuth(deg: f64, grid: f64) -> f64 {
    wrap_degrees(snap(wrap_degrees(deg), grid))
}

/// Lower-central median: the middle element of the sorted values, or
/// the lower of the two middle elements when the count is even.
fn median_lower(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Discretizes every track direction to a degree grid and replaces each
/// event's frames with the per-event, per-track median of the snapped
/// values (azimuth and elevation independently). Frames outside every
/// event come back with a count of zero and no directions; an event
/// track with no usable samples (all frames missing or degenerate)
/// yields a degenerate placeholder. Applying the function twice gives
/// the same result as applying it once.
pub fn postprocess_doa(track: &DoaTrack, events: &[Event], grid_deg: f64) -> Result<DoaTrack> {
    let n = track.n_frames();
    for e in events {
        if e.start >= e.end || e.end > n {
            return Err(Error::ShapeMismatch {
                expected: format!("events within 0..{n}"),
                got: format!("{}..{}", e.start, e.end),
            });
        }
    }
    let mut frames: Vec<FrameDoa> = (0..n).map(|_| FrameDoa { noas: 0, doas: Vec::new() }).collect();
    for e in events {
        let mut medians = Vec::with_capacity(e.noas as usize);
        for k in 0..e.noas as usize {
            let mut az = Vec::new();
            let mut el = Vec::new();
            for t in e.start..e.end {
                if let Some(d) = track.frames[t].doas.get(k) {
                    if !d.degenerate {
                        az.push(snap_azimuth(d.azimuth.to_degrees(), grid_deg));
                        el.push(snap(d.elevation.to_degrees(), grid_deg));
                    }
                }
            }
            if az.is_empty() {
                medians.push(DoaEstimate { azimuth: 0.0, elevation: 0.0, degenerate: true });
            } else {
                medians.push(DoaEstimate {
                    azimuth: median_lower(&mut az).to_radians(),
                    elevation: median_lower(&mut el).to_radians(),
                    degenerate: false,
                });
            }
        }
        for t in e.start..e.end {
            frames[t] = FrameDoa { noas: e.noas, doas: medians.clone() };
        }
    }
    Ok(DoaTrack { frames })
}

fn assignment_pairs(
    pred: &FrameDoa,
    truth: &FrameDoa,
    distance: impl Fn((f64, f64), (f64, f64)) -> f64,
) -> Vec<f64> {
    let p: Vec<(f64, f64)> = pred
        .doas
        .iter()
        .filter(|d| !d.degenerate)
        .map(|d| (d.azimuth, d.elevation))
        .collect();
    let t: Vec<(f64, f64)> = truth
        .doas
        .iter()
        .filter(|d| !d.degenerate)
        .map(|d| (d.azimuth, d.elevation))
        .collect();
    match (p.len(), t.len()) {
        (0, _) | (_, 0) => Vec::new(),
        (1, 1) => vec![distance(p[0], t[0])],
        (1, _) => vec![distance(p[0], t[0]).min(distance(p[0], t[1]))],
        (_, 1) => vec![distance(p[0], t[0]).min(distance(p[1], t[0]))],
        _ => {
            let straight = distance(p[0], t[0]) + distance(p[1], t[1]);
            let crossed = distance(p[0], t[1]) + distance(p[1], t[0]);
            if crossed < straight {
                vec![distance(p[0], t[1]), distance(p[1], t[0])]
            } else {
                vec![distance(p[0], t[0]), distance(p[1], t[1])]
            }
        }
    }
}

fn mean_error_deg(
    pred: &DoaTrack,
    truth: &DoaTrack,
    distance: impl Fn((f64, f64), (f64, f64)) -> f64 + Copy,
) -> Result<f64> {
    if pred.n_frames() != truth.n_frames() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} frames", truth.n_frames()),
            got: format!("{}", pred.n_frames()),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.frames.iter().zip(truth.frames.iter()) {
        if p.noas == 0 || t.noas == 0 {
            continue;
        }
        for d in assignment_pairs(p, t, distance) {
            sum += d;
            count += 1;
        }
    }
    Ok(if count > 0 { (sum / count as f64).to_degrees() } else { 0.0 })
}

/// Mean great-circle distance in degrees between matched directions,
/// over frames where both tracks report activity. Two-track frames use
/// the assignment with the smaller total distance; frames with
/// mismatched counts match the best available pair; degenerate
/// estimates are excluded. An input with nothing to match scores 0.
pub fn doa_error_deg(pred: &DoaTrack, truth: &DoaTrack) -> Result<f64> {
    mean_error_deg(pred, truth, great_circle)
}

/// Like [`doa_error_deg`] but with the loss-style distance, the sum of
/// the wrapped absolute azimuth and elevation errors.
pub fn doa_error_loss_deg(pred: &DoaTrack, truth: &DoaTrack) -> Result<f64> {
    mean_error_deg(pred, truth, |a, b| {
        let (d_az, d_el) = rotational_mae(a, b);
        d_az + d_el
    })
}

/// Fraction of frames whose predicted source count matches the truth,
/// among frames where the truth is active. Vacuously 1 when no frame
/// is active.
pub fn frame_recall(pred_noas: &[u8], truth_noas: &[u8]) -> Result<f64> {
    if pred_noas.len() != truth_noas.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} frames", truth_noas.len()),
            got: format!("{}", pred_noas.len()),
        });
    }
    let mut hits = 0usize;
    let mut active = 0usize;
    for (&p, &t) in pred_noas.iter().zip(truth_noas) {
        if t > 0 {
            active += 1;
            if p == t {
                hits += 1;
            }
        }
    }
    Ok(if active > 0 { hits as f64 / active as f64 } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn track_of(frames: Vec<(u8, Vec<(f64, f64)>)>) -> DoaTrack {
        DoaTrack {
            frames: frames
                .into_iter()
                .map(|(noas, dirs)| FrameDoa {
                    noas,
                    doas: dirs
                        .into_iter()
                        .map(|(az, el)| DoaEstimate {
                            azimuth: az.to_radians(),
                            elevation: el.to_radians(),
                            degenerate: false,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn smoothing_keeps_constant_sequences() {
        let x = vec![2u8; 9];
        assert_eq!(smooth_noas(&x, 5).unwrap(), x);
        let y = vec![0, 1, 2, 1, 0];
        assert_eq!(smooth_noas(&y, 1).unwrap(), y);
    }

    #[test]
    fn smoothing_removes_single_frame_glitches() {
        assert_eq!(smooth_noas(&[1, 1, 2, 1, 1], 3).unwrap(), vec![1, 1, 1, 1, 1]);
    }

    #[test]
    fn smoothing_matches_a_vote_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for window in [1usize, 3, 5, 11] {
            let x: Vec<u8> = (0..60).map(|_| rng.random_range(0..3)).collect();
            let got = smooth_noas(&x, window).unwrap();
            for t in 0..x.len() {
                let lo = t.saturating_sub(window / 2);
                let hi = (t + window / 2 + 1).min(x.len());
                let win = &x[lo..hi];
                let mut best = u8::MAX;
                let mut best_count = 0;
                for v in 0..=2u8 {
                    let c = win.iter().filter(|&&w| w == v).count();
                    if c > best_count || (c == best_count && v < best) {
                        best_count = c;
                        best = v;
                    }
                }
                assert_eq!(got[t], best, "frame {t} window {window}");
                assert!(x.contains(&got[t]));
            }
        }
        // Alternating counts: every tie resolves to the smaller value.
        let alt = vec![1u8, 2, 1, 2, 1, 2];
        let sm = smooth_noas(&alt, 3).unwrap();
        assert_eq!(sm[0], 1); // window {1,2} is a tie
        assert_eq!(sm[5], 1); // window {1,2} is a tie
    }

    #[test]
    fn even_or_zero_windows_are_rejected() {
        assert!(smooth_noas(&[1, 1], 2).is_err());
        assert!(smooth_noas(&[1, 1], 0).is_err());
    }

    #[test]
    fn segmentation_of_all_zeros_is_empty() {
        assert!(segment_events(&[0, 0, 0]).is_empty());
        assert!(segment_events(&[]).is_empty());
    }

    #[test]
    fn segmentation_splits_constant_runs() {
        let events = segment_events(&[0, 1, 1, 2, 2, 0]);
        assert_eq!(
            events,
            vec![Event { start: 1, end: 3, noas: 1 }, Event { start: 3, end: 5, noas: 2 }]
        );
    }

    #[test]
    fn segments_tile_the_nonzero_frames_exactly_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<u8> = (0..200).map(|_| rng.random_range(0..3)).collect();
        let events = segment_events(&x);
        let mut covered = vec![0usize; x.len()];
        for e in &events {
            assert!(e.start < e.end && e.end <= x.len());
            assert!(e.noas > 0);
            for t in e.start..e.end {
                assert_eq!(x[t], e.noas);
                covered[t] += 1;
            }
            // Maximality: the run cannot extend in either direction.
            if e.start > 0 {
                assert_ne!(x[e.start - 1], e.noas);
            }
            if e.end < x.len() {
                assert_ne!(x[e.end], e.noas);
            }
        }
        for (t, &c) in covered.iter().enumerate() {
            assert_eq!(c, usize::from(x[t] > 0), "frame {t}");
        }
    }

    #[test]
    fn snapping_rounds_to_the_grid() {
        let track = track_of(vec![(1, vec![(123.4, 37.6)])]);
        let events = [Event { start: 0, end: 1, noas: 1 }];
        let post = postprocess_doa(&track, &events, 10.0).unwrap();
        let d = &post.frames[0].doas[0];
        assert_relative_eq!(d.azimuth.to_degrees(), 120.0, epsilon = 1e-9);
        assert_relative_eq!(d.elevation.to_degrees(), 40.0, epsilon = 1e-9);
        // Halves round away from zero, both signs. Checked on the
        // degree-domain helpers: a radian roundtrip cannot represent an
        // exact half-grid value.
        assert_eq!(snap(125.0, 10.0), 130.0);
        assert_eq!(snap(-15.0, 10.0), -20.0);
        assert_eq!(snap_azimuth(125.0, 10.0), 130.0);
    }

    #[test]
    fn azimuths_that_round_to_the_antimeridian_wrap() {
        let track = track_of(vec![(1, vec![(179.9, 0.0)]), (1, vec![(-179.9, 0.0)])]);
        let events = [Event { start: 0, end: 2, noas: 1 }];
        let post = postprocess_doa(&track, &events, 10.0).unwrap();
        for f in &post.frames {
            assert_relative_eq!(f.doas[0].azimuth.to_degrees(), -180.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn event_frames_take_the_median_snapped_direction() {
        let track = track_of(vec![
            (1, vec![(11.0, 0.0)]),
            (1, vec![(9.0, 0.0)]),
            (1, vec![(21.0, 0.0)]),
        ]);
        let events = [Event { start: 0, end: 3, noas: 1 }];
        let post = postprocess_doa(&track, &events, 10.0).unwrap();
        for f in &post.frames {
            assert_eq!(f.noas, 1);
            assert_relative_eq!(f.doas[0].azimuth.to_degrees(), 10.0, epsilon = 1e-9);
        }
        // Even sample count: the lower central value.
        let track = track_of(vec![(1, vec![(10.0, 20.0)]), (1, vec![(20.0, 10.0)])]);
        let events = [Event { start: 0, end: 2, noas: 1 }];
        let post = postprocess_doa(&track, &events, 10.0).unwrap();
        assert_relative_eq!(post.frames[0].doas[0].azimuth.to_degrees(), 10.0, epsilon = 1e-9);
        assert_relative_eq!(post.frames[0].doas[0].elevation.to_degrees(), 10.0, epsilon = 1e-9);
    }

    #[test]
    fn postprocessing_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut frames = Vec::new();
        let mut noas = Vec::new();
        for _ in 0..40 {
            let z = rng.random_range(0..3u8);
            let dirs: Vec<(f64, f64)> = (0..z)
                .map(|_| (rng.random_range(-180.0..180.0), rng.random_range(-90.0..90.0)))
                .collect();
            frames.push((z, dirs));
            noas.push(z);
        }
        let track = track_of(frames);
        let events = segment_events(&noas);
        let once = postprocess_doa(&track, &events, 10.0).unwrap();
        let twice = postprocess_doa(&once, &events, 10.0).unwrap();
        assert_eq!(once.n_frames(), twice.n_frames());
        for (a, b) in once.frames.iter().zip(twice.frames.iter()) {
            assert_eq!(a.noas, b.noas);
            assert_eq!(a.doas.len(), b.doas.len());
            for (x, y) in a.doas.iter().zip(b.doas.iter()) {
                assert_eq!(x.azimuth, y.azimuth);
                assert_eq!(x.elevation, y.elevation);
                assert_eq!(x.degenerate, y.degenerate);
            }
        }
        // Discretization moves each angle by at most half a grid step.
        for (t, f) in once.frames.iter().enumerate() {
            for (k, d) in f.doas.iter().enumerate() {
                if let Some(orig) = track.frames[t].doas.get(k) {
                    let el_diff = (d.elevation - orig.elevation).abs().to_degrees();
                    // Medians may move further than rounding alone, but
                    // single-frame events keep the per-frame bound.
                    if events.iter().any(|e| e.end - e.start == 1 && (e.start..e.end).contains(&t)) {
                        assert!(el_diff <= 5.0 + 1e-9, "frame {t} track {k}: {el_diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn events_outside_the_track_are_rejected() {
        let track = track_of(vec![(1, vec![(0.0, 0.0)])]);
        let bad = [Event { start: 0, end: 2, noas: 1 }];
        assert!(postprocess_doa(&track, &bad, 10.0).is_err());
        let empty = [Event { start: 1, end: 1, noas: 1 }];
        assert!(postprocess_doa(&track, &empty, 10.0).is_err());
    }

    #[test]
    fn missing_track_samples_become_degenerate_placeholders() {
        // The event claims two sources but every frame only carries one.
        let track = track_of(vec![(1, vec![(30.0, 0.0)]), (1, vec![(30.0, 0.0)])]);
        let events = [Event { start: 0, end: 2, noas: 2 }];
        let post = postprocess_doa(&track, &events, 10.0).unwrap();
        for f in &post.frames {
            assert_eq!(f.noas, 2);
            assert!(!f.doas[0].degenerate);
            assert!(f.doas[1].degenerate);
        }
    }

    #[test]
    fn doa_error_is_zero_for_identical_tracks() {
        let t = track_of(vec![
            (1, vec![(10.0, 0.0)]),
            (2, vec![(40.0, 10.0), (-90.0, -20.0)]),
            (0, vec![]),
        ]);
        assert_eq!(doa_error_deg(&t, &t).unwrap(), 0.0);
        assert_eq!(doa_error_loss_deg(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn doa_error_measures_equatorial_offsets_exactly() {
        let truth = track_of(vec![(1, vec![(20.0, 0.0)]); 4]);
        let pred = track_of(vec![(1, vec![(30.0, 0.0)]); 4]);
        assert_relative_eq!(doa_error_deg(&pred, &truth).unwrap(), 10.0, epsilon = 1e-9);
        assert_relative_eq!(doa_error_loss_deg(&pred, &truth).unwrap(), 10.0, epsilon = 1e-9);
    }

    #[test]
    fn doa_error_ignores_track_labeling() {
        let truth = track_of(vec![(2, vec![(50.0, 10.0), (-120.0, -5.0)])]);
        let a = track_of(vec![(2, vec![(55.0, 10.0), (-115.0, -5.0)])]);
        let b = track_of(vec![(2, vec![(-115.0, -5.0), (55.0, 10.0)])]);
        let ea = doa_error_deg(&a, &truth).unwrap();
        let eb = doa_error_deg(&b, &truth).unwrap();
        assert_relative_eq!(ea, eb, max_relative = 1e-12);
        assert!(ea > 0.0);
    }

    #[test]
    fn doa_error_skips_degenerate_and_inactive_frames() {
        let truth = track_of(vec![(1, vec![(0.0, 0.0)]), (1, vec![(0.0, 0.0)])]);
        let mut pred = track_of(vec![(1, vec![(10.0, 0.0)]), (1, vec![(90.0, 0.0)])]);
        pred.frames[1].doas[0].degenerate = true;
        assert_relative_eq!(doa_error_deg(&pred, &truth).unwrap(), 10.0, epsilon = 1e-9);
        // Mismatched counts match the best available pair.
        let truth = track_of(vec![(2, vec![(0.0, 0.0), (90.0, 0.0)])]);
        let pred = track_of(vec![(1, vec![(85.0, 0.0)])]);
        assert_relative_eq!(doa_error_deg(&pred, &truth).unwrap(), 5.0, epsilon = 1e-9);
        // Nothing to match at all scores zero.
        let empty = track_of(vec![(0, vec![])]);
        assert_eq!(doa_error_deg(&empty, &truth).unwrap(), 0.0);
        // Length mismatch is an error.
        let longer = track_of(vec![(0, vec![]); 2]);
        assert!(doa_error_deg(&longer, &truth).is_err());
    }

    #[test]
    fn frame_recall_counts_active_frames_only() {
        assert_eq!(frame_recall(&[1, 2, 0], &[1, 2, 0]).unwrap(), 1.0);
        assert_eq!(frame_recall(&[2, 1], &[1, 2]).unwrap(), 0.0);
        assert_eq!(frame_recall(&[1, 1, 9, 1], &[1, 2, 0, 1]).unwrap(), 2.0 / 3.0);
        // Vacuously perfect when the truth is silent.
        assert_eq!(frame_recall(&[1, 2], &[0, 0]).unwrap(), 1.0);
        assert!(frame_recall(&[1], &[1, 2]).is_err());
    }
}
