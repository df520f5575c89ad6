use crate::error::{Error, Result};

/// Timestamped measurements of one modality, timestamps strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorStream {
    pub name: String,
    samples: Vec<(f64, Vec<f64>)>,
}

impl SensorStream {
    pub fn new(name: impl Into<String>, samples: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        let name = name.into();
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config(format!("stream `{name}` timestamps are not strictly increasing")));
        }
        Ok(Self { name, samples })
    }

    pub fn samples(&self) -> &[(f64, Vec<f64>)] {
        &self.samples
    }

    /// Index of the sample closest to `t`; ties go to the earlier sample.
    pub fn nearest(&self, t: f64) -> Option<usize> {
        if self.samples.is_empty() {
            return None;
        }
        let after = self.samples.partition_point(|(ts, _)| *ts < t);
        if after == 0 {
            return Some(0);
        }
        if after == self.samples.len() {
            return Some(after - 1);
        }
        let before = after - 1;
        let db = t - self.samples[before].0;
        let da = self.samples[after].0 - t;
        Some(if da < db { after } else { before })
    }
}

/// One synchronized tick: the chosen sample index and value of every stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub tick: usize,
    pub time: f64,
    pub indices: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

/// Frames at `t_k = k / rate_hz` for every `t_k < duration`.
pub fn resample(streams: &[SensorStream], rate_hz: f64, duration: f64) -> Result<Vec<Frame>> {
    if let Some(s) = streams.iter().find(|s| s.samples.is_empty()) {
        return Err(Error::MissingModality(s.name.clone()));
    }
    if !(rate_hz > 0.0) {
        return Err(Error::Config("resampling rate must be positive".into()));
    }
    let mut frames = Vec::new();
    let mut k = 0usize;
    loop {
        let time = k as f64 / rate_hz;
        if time >= duration - 1e-12 {
            break;
        }
        let indices: Vec<usize> = streams.iter().map(|s| s.nearest(time).expect("non-empty")).collect();
        let values = streams.iter().zip(&indices).map(|(s, &i)| s.samples[i].1.clone()).collect();
        frames.push(Frame { tick: k, time, indices, values });
        k += 1;
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(name: &str, times: &[f64]) -> SensorStream {
        SensorStream::new(name, times.iter().map(|&t| (t, vec![t])).collect()).unwrap()
    }

    fn brute(times: &[f64], t: f64) -> usize {
        let mut best = 0;
        for (i, &ts) in times.iter().enumerate() {
            if (ts - t).abs() < (times[best] - t).abs() {
                best = i;
            }
        }
        best
    }

    #[test]
    fn exact_ticks_select_themselves() {
        let times: Vec<f64> = (0..30).map(|k| k as f64 / 30.0).collect();
        let f = resample(&[stream("cam", &times)], 30.0, 1.0).unwrap();
        assert_eq!(f.len(), 30);
        for fr in &f {
            assert_eq!(fr.indices[0], fr.tick);
        }
    }

    #[test]
    fn mixed_rates_match_brute_force() {
        let a: Vec<f64> = (0..60).map(|k| k as f64 / 60.0 + 0.003).collect();
        let b: Vec<f64> = (0..25).map(|k| k as f64 / 25.0).collect();
        let f = resample(&[stream("a", &a), stream("b", &b)], 30.0, 1.0).unwrap();
        for fr in &f {
            assert_eq!(fr.indices, vec![brute(&a, fr.time), brute(&b, fr.time)]);
        }
    }

    #[test]
    fn single_measurement_everywhere() {
        let f = resample(&[stream("imu", &[0.37])], 30.0, 0.5).unwrap();
        assert!(f.iter().all(|fr| fr.indices == vec![0]));
    }

    #[test]
    fn empty_stream_is_missing() {
        let e = resample(&[stream("a", &[0.0]), stream("gripper", &[])], 30.0, 1.0);
        assert!(matches!(e, Err(Error::MissingModality(n)) if n == "gripper"));
    }

    #[test]
    fn tie_goes_to_earlier() {
        let s = stream("a", &[0.0, 0.5]);
        assert_eq!(s.nearest(0.25), Some(0));
    }

    #[test]
    fn unordered_rejected() {
        assert!(SensorStream::new("a", vec![(0.2, vec![]), (0.1, vec![])]).is_err());
    }

    proptest! {
        #[test]
        fn nearest_equals_brute_force(mut times in prop::collection::vec(0.0f64..2.0, 1..40), t in -0.5f64..2.5) {
            times.sort_by(f64::total_cmp);
            times.dedup();
            let s = stream("x", &times);
            prop_assert_eq!(s.nearest(t).unwrap(), brute(&times, t));
        }
    }
}
