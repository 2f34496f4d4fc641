//! Traffic tensors, file formats, sample windowing, splits, normalization
//! and the synthetic ring generator.

use std::fs;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::graph::{self, RoadNetwork};
use crate::{Error, Result};

pub const MINUTES_PER_DAY: u32 = 1440;

/// Dense `(time, node, channel)` flow values with a missing-value mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficTensor {
    steps: usize,
    nodes: usize,
    channels: usize,
    values: Vec<f64>,
    missing: Vec<bool>,
    interval_minutes: u32,
    start: NaiveDateTime,
}

impl TrafficTensor {
    /// `values` is time-major, channel-fastest. NaN entries become missing
    /// (stored as 0.0 with the mask set).
    pub fn new(
        steps: usize,
        nodes: usize,
        channels: usize,
        mut values: Vec<f64>,
        interval_minutes: u32,
        start: NaiveDateTime,
    ) -> Result<Self> {
        if values.len() != steps * nodes * channels {
            return Err(Error::shape(
                "TrafficTensor::new",
                format!("{} values for ({steps},{nodes},{channels})", values.len()),
            ));
        }
        if interval_minutes == 0 || MINUTES_PER_DAY % interval_minutes != 0 {
            return Err(Error::InvalidArgument(format!(
                "interval {interval_minutes} min does not divide a day"
            )));
        }
        let missing: Vec<bool> = values.iter().map(|v| v.is_nan()).collect();
        for (v, &m) in values.iter_mut().zip(&missing) {
            if m {
                *v = 0.0;
            }
        }
        Ok(Self {
            steps,
            nodes,
            channels,
            values,
            missing,
            interval_minutes,
            start,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn slots_per_day(&self) -> usize {
        (MINUTES_PER_DAY / self.interval_minutes) as usize
    }

    #[inline]
    fn offset(&self, t: usize, n: usize, c: usize) -> usize {
        (t * self.nodes + n) * self.channels + c
    }

    #[inline]
    pub fn get(&self, t: usize, n: usize, c: usize) -> f64 {
        self.values[self.offset(t, n, c)]
    }

    #[inline]
    pub fn is_missing(&self, t: usize, n: usize, c: usize) -> bool {
        self.missing[self.offset(t, n, c)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn missing_mask(&self) -> &[bool] {
        &self.missing
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::minutes(t as i64 * self.interval_minutes as i64)
    }

    /// 1 = Monday ... 7 = Sunday.
    pub fn week_index(&self, t: usize) -> u8 {
        self.timestamp(t).weekday().number_from_monday() as u8
    }

    pub fn day_slot(&self, t: usize) -> usize {
        let ts = self.timestamp(t);
        (ts.hour() * 60 + ts.minute()) as usize / self.interval_minutes as usize
    }

    pub fn time_slot(&self, t: usize) -> TimeSlot {
        TimeSlot {
            week_index: self.week_index(t),
            day_slot: self.day_slot(t),
            step: t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSlot {
    /// 1..=7, Monday first.
    pub week_index: u8,
    pub day_slot: usize,
    pub step: usize,
}

/// Per-step calendar information for one input window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeIndexMeta {
    pub slots: Vec<TimeSlot>,
    pub slots_per_day: usize,
}

impl TimeIndexMeta {
    pub fn new(slots: Vec<TimeSlot>, slots_per_day: usize) -> Result<Self> {
        for s in &slots {
            if !(1..=7).contains(&s.week_index) || s.day_slot >= slots_per_day {
                return Err(Error::InvalidArgument(format!(
                    "time slot {s:?} out of range for {slots_per_day} slots per day"
                )));
            }
        }
        Ok(Self {
            slots,
            slots_per_day,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// One input/target pair. Inputs are raw flow values; missing inputs are
/// carried as 0.0 with `input_missing` set.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub start: usize,
    pub input: Tensor,
    pub input_missing: Vec<bool>,
    pub target: Tensor,
    pub target_missing: Vec<bool>,
    pub meta: TimeIndexMeta,
}

fn slice_steps(tensor: &TrafficTensor, from: usize, len: usize) -> (Tensor, Vec<bool>) {
    let per_step = tensor.nodes * tensor.channels;
    let range = from * per_step..(from + len) * per_step;
    let t = Tensor::new(
        vec![len, tensor.nodes, tensor.channels],
        tensor.values[range.clone()].to_vec(),
    )
    .expect("slice shape matches its length");
    (t, tensor.missing[range].to_vec())
}

/// Stride-1 windows of `input_len` steps followed by `horizon` target steps.
pub fn make_samples(tensor: &TrafficTensor, input_len: usize, horizon: usize) -> Result<Vec<Sample>> {
    if input_len == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("input length and horizon must be positive".into()));
    }
    if tensor.steps < input_len + horizon {
        return Err(Error::Data(format!(
            "{} steps cannot hold a {input_len}+{horizon} window",
            tensor.steps
        )));
    }
    let count = tensor.steps - input_len - horizon + 1;
    let slots_per_day = tensor.slots_per_day();
    (0..count)
        .map(|start| {
            let (input, input_missing) = slice_steps(tensor, start, input_len);
            let (target, target_missing) = slice_steps(tensor, start + input_len, horizon);
            let meta = TimeIndexMeta::new(
                (start..start + input_len).map(|t| tensor.time_slot(t)).collect(),
                slots_per_day,
            )?;
            Ok(Sample {
                start,
                input,
                input_missing,
                target,
                target_missing,
                meta,
            })
        })
        .collect()
}

/// Edge-padded `window`-step histories ending at every input step.
///
/// Returns `(T, N, C, S)` values; each history only reads steps of the
/// given window (steps before the first are filled with the first value).
/// Missing values are carried forward from the previous step of the
/// history, or backward when a history starts with a gap.
pub fn delay_histories(input: &Tensor, missing: &[bool], window: usize) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 3 {
        return Err(Error::shape("delay_histories", format!("expected (T,N,C), got {shape:?}")));
    }
    if missing.len() != input.len() {
        return Err(Error::shape("delay_histories", "missing mask length differs".to_string()));
    }
    let (t_len, n_len, c_len) = (shape[0], shape[1], shape[2]);
    let data = input.data();
    // Fill missing entries along time first (forward, then backward for a
    // missing prefix) so every window sees the latest observed value.
    let mut filled = data.to_vec();
    for n in 0..n_len {
        for c in 0..c_len {
            let idx = |s: usize| (s * n_len + n) * c_len + c;
            let mut last: Option<f64> = None;
            let mut first_seen = None;
            for s in 0..t_len {
                if missing[idx(s)] {
                    if let Some(v) = last {
                        filled[idx(s)] = v;
                    }
                } else {
                    last = Some(data[idx(s)]);
                    first_seen.get_or_insert(s);
                }
            }
            let lead = first_seen.map_or(0.0, |s| data[idx(s)]);
            for s in 0..first_seen.unwrap_or(t_len) {
                filled[idx(s)] = lead;
            }
        }
    }
    let mut out = Vec::with_capacity(t_len * n_len * c_len * window);
    for t in 0..t_len {
        for n in 0..n_len {
            for c in 0..c_len {
                for k in 0..window {
                    let s = (t + k + 1).saturating_sub(window);
                    out.push(filled[(s * n_len + n) * c_len + c]);
                }
            }
        }
    }
    Tensor::new(vec![t_len, n_len, c_len, window], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const GRAPH: SplitRatios = SplitRatios {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    pub const GRID: SplitRatios = SplitRatios {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Chronological split sizes: validation and test take `floor(n * ratio)`,
/// training takes the rest.
pub fn split_sizes(count: usize, ratios: SplitRatios) -> Result<SplitSizes> {
    let sum = ratios.train + ratios.val + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.val, ratios.test].iter().any(|r| *r < 0.0) {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must sum to 1")));
    }
    let part = |r: f64| (count as f64 * r + 1e-9).floor() as usize;
    let val = part(ratios.val);
    let test = part(ratios.test);
    let train = count.saturating_sub(val + test);
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::InvalidArgument(format!(
            "split {ratios:?} of {count} samples leaves an empty part ({train}/{val}/{test})"
        )));
    }
    Ok(SplitSizes { train, val, test })
}

pub fn split<T>(mut samples: Vec<T>, ratios: SplitRatios) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let sizes = split_sizes(samples.len(), ratios)?;
    let test = samples.split_off(sizes.train + sizes.val);
    let val = samples.split_off(sizes.train);
    Ok((samples, val, test))
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose std was zero and got replaced by 1.
    pub std_replaced: Vec<bool>,
}

impl Scaler {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            std_replaced: vec![false; channels],
        }
    }

    /// Statistics over the non-missing values of time steps `0..end`.
    pub fn fit(tensor: &TrafficTensor, end: usize) -> Result<Self> {
        let end = end.min(tensor.steps);
        let c_len = tensor.channels;
        let mut sum = vec![0.0; c_len];
        let mut count = vec![0usize; c_len];
        for t in 0..end {
            for n in 0..tensor.nodes {
                for c in 0..c_len {
                    if !tensor.is_missing(t, n, c) {
                        sum[c] += tensor.get(t, n, c);
                        count[c] += 1;
                    }
                }
            }
        }
        if count.iter().any(|&k| k == 0) {
            return Err(Error::Data("a channel has no observed values in the training range".into()));
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
        let mut sq = vec![0.0; c_len];
        for t in 0..end {
            for n in 0..tensor.nodes {
                for c in 0..c_len {
                    if !tensor.is_missing(t, n, c) {
                        sq[c] += (tensor.get(t, n, c) - mean[c]).powi(2);
                    }
                }
            }
        }
        let mut std_replaced = vec![false; c_len];
        let std = sq
            .iter()
            .zip(&count)
            .enumerate()
            .map(|(c, (s, &k))| {
                let sd = (s / k as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    std_replaced[c] = true;
                    1.0
                }
            })
            .collect();
        Ok(Self {
            mean,
            std,
            std_replaced,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes a tensor whose last dimension is the channel axis.
    pub fn transform(&self, t: &Tensor) -> Result<Tensor> {
        self.map_channels(t, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, t: &Tensor) -> Result<Tensor> {
        self.map_channels(t, |v, m, s| v * s + m)
    }

    fn map_channels(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let c = self.channels();
        if t.shape().last() != Some(&c) {
            return Err(Error::shape(
                "Scaler",
                format!("last dim of {:?} is not {c}", t.shape()),
            ));
        }
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % c], self.std[i % c]))
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    }
}

/// Flow file: header `T,N,C`, then one line per step with `N*C` values,
/// channel-fastest. `NaN` marks missing values.
pub fn format_flow(tensor: &TrafficTensor) -> String {
    let mut out = format!("{},{},{}\n", tensor.steps, tensor.nodes, tensor.channels);
    let per_step = tensor.nodes * tensor.channels;
    for t in 0..tensor.steps {
        let row: Vec<String> = (t * per_step..(t + 1) * per_step)
            .map(|i| {
                if tensor.missing[i] {
                    "NaN".to_string()
                } else {
                    format!("{}", tensor.values[i])
                }
            })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_flow(text: &str, interval_minutes: u32, start: NaiveDateTime) -> Result<TrafficTensor> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("flow file is empty".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Data(format!("flow header `{header}` is not `T,N,C`")))?;
    let [steps, nodes, channels] = dims[..] else {
        return Err(Error::Data(format!("flow header `{header}` is not `T,N,C`")));
    };
    if steps == 0 || nodes == 0 || channels == 0 {
        return Err(Error::Data(format!("flow header `{header}` has a zero dimension")));
    }
    let per_step = nodes * channels;
    let mut values = Vec::with_capacity(steps * per_step);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let before = values.len();
        for tok in line.split(',') {
            let tok = tok.trim();
            let v = if tok.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                tok.parse::<f64>()
                    .map_err(|_| Error::Data(format!("flow row {i}: bad value `{tok}`")))?
            };
            values.push(v);
        }
        if values.len() - before != per_step {
            return Err(Error::Data(format!(
                "flow row {i}: expected {per_step} values, got {}",
                values.len() - before
            )));
        }
        rows += 1;
    }
    if rows != steps {
        return Err(Error::Data(format!("flow header promises {steps} rows, found {rows}")));
    }
    TrafficTensor::new(steps, nodes, channels, values, interval_minutes, start)
}

pub fn write_flow(path: impl AsRef<Path>, tensor: &TrafficTensor) -> Result<()> {
    fs::write(path.as_ref(), format_flow(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: impl AsRef<Path>, interval_minutes: u32, start: NaiveDateTime) -> Result<TrafficTensor> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse_flow(&text, interval_minutes, start)
}

pub fn load_graph_dataset(
    flow_file: impl AsRef<Path>,
    edge_file: impl AsRef<Path>,
    interval_minutes: u32,
    start: NaiveDateTime,
) -> Result<(TrafficTensor, RoadNetwork)> {
    let tensor = read_flow(flow_file, interval_minutes, start)?;
    let edges = graph::read_edge_list(edge_file)?;
    if let Some(&(s, d)) = edges
        .iter()
        .find(|&&(s, d)| s >= tensor.nodes || d >= tensor.nodes)
    {
        return Err(Error::Data(format!(
            "edge ({s},{d}) references a node beyond the flow file's {} nodes",
            tensor.nodes
        )));
    }
    let net = RoadNetwork::build_from_edge_list(tensor.nodes, &edges)?;
    Ok((tensor, net))
}

pub fn load_grid_dataset(
    flow_file: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    interval_minutes: u32,
    start: NaiveDateTime,
) -> Result<(TrafficTensor, RoadNetwork)> {
    let tensor = read_flow(flow_file, interval_minutes, start)?;
    if tensor.nodes != rows * cols {
        return Err(Error::Data(format!(
            "grid {rows}x{cols} needs {} nodes, flow file has {}",
            rows * cols,
            tensor.nodes
        )));
    }
    if tensor.channels != 2 {
        return Err(Error::Data(format!(
            "grid datasets carry inflow and outflow (2 channels), got {}",
            tensor.channels
        )));
    }
    let net = RoadNetwork::grid_to_graph(rows, cols)?;
    Ok((tensor, net))
}

/// Noise-free daily double-peak flow at a (possibly negative) step.
pub fn double_peak_profile(step: i64, interval_minutes: u32) -> f64 {
    let minutes = (step * interval_minutes as i64).rem_euclid(MINUTES_PER_DAY as i64) as f64;
    let hour = minutes / 60.0;
    let bump = |center: f64, width: f64, height: f64| {
        // wrap so the profile is smooth across midnight
        let mut d = (hour - center).abs();
        d = d.min(24.0 - d);
        height * (-(d * d) / (2.0 * width * width)).exp()
    };
    20.0 + bump(8.0, 1.5, 100.0) + bump(18.0, 2.0, 80.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub days: usize,
    pub interval_minutes: u32,
    pub delay_steps: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Monday 2024-01-01 00:00, the fixed start of every synthetic series.
pub fn synthetic_start() -> NaiveDateTime {
    chrono::NaiveDate::from_ymd_opt(2024, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid constant date")
}

/// Ring of `nodes`. Node 0 emits the double-peak profile plus Gaussian noise
/// (clamped at zero); node `i` repeats node `i-1` delayed by `delay_steps`,
/// noise included, so upstream history carries information about the
/// downstream future.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(TrafficTensor, RoadNetwork)> {
    if spec.nodes == 0 || spec.days == 0 {
        return Err(Error::InvalidArgument("synthetic data needs nodes and days".into()));
    }
    if spec.noise_sigma < 0.0 {
        return Err(Error::InvalidArgument("noise sigma must be non-negative".into()));
    }
    let steps = spec.days * (MINUTES_PER_DAY / spec.interval_minutes.max(1)) as usize;
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // the source series starts early enough to feed the last node at t = 0
    let lead = (spec.nodes - 1) * spec.delay_steps;
    let source: Vec<f64> = (0..steps + lead)
        .map(|k| {
            let clean = double_peak_profile(k as i64 - lead as i64, spec.interval_minutes);
            let eps = if spec.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (clean + eps).max(0.0)
        })
        .collect();
    let mut values = Vec::with_capacity(steps * spec.nodes);
    for t in 0..steps {
        for n in 0..spec.nodes {
            values.push(source[t + lead - n * spec.delay_steps]);
        }
    }
    let tensor = TrafficTensor::new(
        steps,
        spec.nodes,
        1,
        values,
        spec.interval_minutes,
        synthetic_start(),
    )?;
    Ok((tensor, RoadNetwork::ring(spec.nodes)?))
}

/// Ring of `nodes` with two "twin" nodes half the ring apart: node `n/2`
/// repeats node 0 (double-peak profile plus noise) delayed by
/// `delay_steps`. Every other node is a distractor with its own single-peak
/// profile of distinct height and peak hour, and independent noise of the
/// same `noise_sigma`. The twins are far apart in hops but alike in shape.
pub fn generate_twin_synthetic(spec: &SyntheticSpec) -> Result<(TrafficTensor, RoadNetwork)> {
    if spec.nodes < 4 || spec.days == 0 {
        return Err(Error::InvalidArgument("twin dataset needs at least 4 nodes and one day".into()));
    }
    if spec.noise_sigma < 0.0 {
        return Err(Error::InvalidArgument("noise sigma must be non-negative".into()));
    }
    let steps = spec.days * (MINUTES_PER_DAY / spec.interval_minutes.max(1)) as usize;
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |rng: &mut ChaCha8Rng| {
        if spec.noise_sigma > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        }
    };
    let lead = spec.delay_steps;
    let source: Vec<f64> = (0..steps + lead)
        .map(|k| (double_peak_profile(k as i64 - lead as i64, spec.interval_minutes) + draw(&mut rng)).max(0.0))
        .collect();
    let twin = spec.nodes / 2;
    let minutes = spec.interval_minutes as f64;
    let distractor = |n: usize, t: usize| {
        let hour = (t as f64 * minutes / 60.0) % 24.0;
        let center = (3.0 + 2.5 * n as f64) % 24.0;
        let mut d = (hour - center).abs();
        d = d.min(24.0 - d);
        10.0 + 30.0 * n as f64 * (-(d * d) / 8.0).exp()
    };
    let mut values = Vec::with_capacity(steps * spec.nodes);
    for t in 0..steps {
        for n in 0..spec.nodes {
            let v = if n == 0 {
                source[t + lead]
            } else if n == twin {
                source[t]
            } else {
                (distractor(n, t) + draw(&mut rng)).max(0.0)
            };
            values.push(v);
        }
    }
    let tensor = TrafficTensor::new(
        steps,
        spec.nodes,
        1,
        values,
        spec.interval_minutes,
        synthetic_start(),
    )?;
    Ok((tensor, RoadNetwork::ring(spec.nodes)?))
}
