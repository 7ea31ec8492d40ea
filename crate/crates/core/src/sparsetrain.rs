//! Dynamic sparse training of batch-norm scale factors.
//!
//! An L1 penalty on every batch-norm gamma is added to the detection loss;
//! the per-channel penalty rate starts uniform and, at a configurable
//! switch point, decays for a fraction of the channels so that the rest
//! keep being driven toward zero while accuracy-critical channels stop
//! shrinking.

use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::netgraph::WeightStore;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("sparse schedule: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SparseError>;

/// Which channels decay to the reduced rate at the switch point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecaySelection {
    /// Channels with the largest |gamma| stop being penalized; the
    /// remainder keeps shrinking toward zero.
    LargestGamma,
    /// Inverted rule, for ablation.
    SmallestGamma,
}

#[derive(Debug, Clone)]
pub struct SparseSchedule {
    /// Initial sparse rate applied to every channel.
    pub s0: f64,
    /// Fraction of total epochs after which the decay triggers.
    pub switch_fraction: f64,
    /// Fraction of channels that keep the initial rate.
    pub keep_fraction: f64,
    /// Rate multiplier for the decaying channels.
    pub decay_factor: f64,
    pub selection: DecaySelection,
}

impl Default for SparseSchedule {
    fn default() -> Self {
        SparseSchedule {
            s0: 0.00075,
            switch_fraction: 0.5,
            keep_fraction: 0.7,
            decay_factor: 0.01,
            selection: DecaySelection::LargestGamma,
        }
    }
}

impl SparseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.s0 < 0.0 {
            return Err(SparseError::Invalid(format!("s0 must be >= 0, got {}", self.s0)));
        }
        if !(0.0..1.0).contains(&self.switch_fraction) || self.switch_fraction <= 0.0 {
            return Err(SparseError::Invalid(format!(
                "switch_fraction must be in (0, 1), got {}",
                self.switch_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.keep_fraction) {
            return Err(SparseError::Invalid(format!(
                "keep_fraction must be in [0, 1], got {}",
                self.keep_fraction
            )));
        }
        if self.decay_factor <= 0.0 || self.decay_factor > 1.0 {
            return Err(SparseError::Invalid(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }

    /// First epoch at which the decayed rates apply.
    pub fn switch_epoch(&self, total_epochs: usize) -> usize {
        (self.switch_fraction * total_epochs as f64).round() as usize
    }
}

/// Per-channel sparse rates for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRateMap {
    pub rates: Vec<f64>,
}

/// Compute per-channel rates for an epoch.
///
/// Before the switch epoch every channel gets `s0`. From the switch epoch
/// on, the `1 - keep_fraction` share of channels selected from `gammas`
/// decays to `s0 * decay_factor`. The caller freezes the selection by
/// passing the gamma snapshot taken at the switch epoch for every later
/// call (the training loop does exactly that).
pub fn schedule_rates(
    sched: &SparseSchedule,
    epoch: usize,
    total_epochs: usize,
    gammas: &[f64],
) -> Result<ChannelRateMap> {
    sched.validate()?;
    if gammas.is_empty() {
        return Err(SparseError::Invalid("empty gamma vector".to_string()));
    }
    if epoch >= total_epochs {
        return Err(SparseError::Invalid(format!(
            "epoch {epoch} out of range for {total_epochs} total"
        )));
    }
    let n = gammas.len();
    if epoch < sched.switch_epoch(total_epochs) {
        return Ok(ChannelRateMap { rates: vec![sched.s0; n] });
    }
    let n_decay = ((1.0 - sched.keep_fraction) * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    match sched.selection {
        DecaySelection::LargestGamma => {
            order.sort_by(|&a, &b| gammas[b].abs().partial_cmp(&gammas[a].abs()).unwrap().then(a.cmp(&b)))
        }
        DecaySelection::SmallestGamma => {
            order.sort_by(|&a, &b| gammas[a].abs().partial_cmp(&gammas[b].abs()).unwrap().then(a.cmp(&b)))
        }
    }
    let mut rates = vec![sched.s0; n];
    for &c in order.iter().take(n_decay) {
        rates[c] = sched.s0 * sched.decay_factor;
    }
    Ok(ChannelRateMap { rates })
}

/// L1 penalty over gammas and its subgradient, with sign(0) = 0.
pub fn sparse_penalty(gammas: &[f64], rates: &ChannelRateMap) -> (f64, Vec<f64>) {
    debug_assert_eq!(gammas.len(), rates.rates.len());
    let mut penalty = 0.0;
    let mut grad = Vec::with_capacity(gammas.len());
    for (&g, &s) in gammas.iter().zip(&rates.rates) {
        penalty += s * g.abs();
        grad.push(s * g.signum() * if g == 0.0 { 0.0 } else { 1.0 });
    }
    (penalty, grad)
}

/// Histogram of the raw (signed) gamma values in 64 bins over their range.
pub fn gamma_histogram(store: &WeightStore) -> Vec<(f64, f64, usize)> {
    let values: Vec<f64> =
        store.all_gammas().iter().flat_map(|(_, g)| g.iter().copied()).collect();
    histogram_of(&values, 64)
}

pub fn histogram_of(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![(lo, hi, values.len())];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

/// Write the gamma histogram as CSV and a bar-chart SVG.
pub fn export_gamma_histogram(store: &WeightStore, csv_path: &Path, svg_path: &Path) -> Result<()> {
    let hist = gamma_histogram(store);
    let mut csv = String::from("bin_lo,bin_hi,count\n");
    for (lo, hi, c) in &hist {
        csv.push_str(&format!("{lo},{hi},{c}\n"));
    }
    std::fs::write(csv_path, csv)?;

    let (w, h, pad) = (640.0f64, 240.0f64, 30.0f64);
    let max_count = hist.iter().map(|(_, _, c)| *c).max().unwrap_or(1).max(1) as f64;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let plot_w = w - 2.0 * pad;
    let plot_h = h - 2.0 * pad;
    let n = hist.len().max(1) as f64;
    for (i, (_, _, c)) in hist.iter().enumerate() {
        let bh = plot_h * (*c as f64) / max_count;
        let x = pad + plot_w * i as f64 / n;
        let y = h - pad - bh;
        svg.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"#4477aa\"/>\n",
            plot_w / n - 1.0
        ));
    }
    if let (Some(first), Some(last)) = (hist.first(), hist.last()) {
        svg.push_str(&format!(
            "<text x=\"{pad}\" y=\"{:.2}\" font-size=\"11\">{:.4}</text>\n",
            h - pad + 14.0,
            first.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{:.4}</text>\n",
            w - pad,
            h - pad + 14.0,
            last.1
        ));
        svg.push_str(&format!(
            "<text x=\"{pad}\" y=\"18\" font-size=\"12\">gamma distribution ({} values)</text>\n",
            hist.iter().map(|(_, _, c)| c).sum::<usize>()
        ));
    }
    svg.push_str("</svg>\n");
    let mut f = std::fs::File::create(svg_path)?;
    f.write_all(svg.as_bytes())?;
    Ok(())
}

/// Sparse-train a network in place: detection loss plus the scheduled L1
/// gamma penalty, cosine-annealed SGD. Thin wrapper over the shared loop
/// so that `s0 = 0` reproduces plain training bit for bit.
pub fn train_sparse(
    net: &mut crate::network::Network,
    data: &crate::detectcore::Dataset,
    sched: &SparseSchedule,
    opts: &crate::trainer::TrainOpts,
) -> crate::trainer::Result<crate::trainer::FitResult> {
    sched.validate().map_err(crate::trainer::TrainError::Sparse)?;
    crate::trainer::fit(net, data, opts, crate::trainer::FitMode::Sparse(sched))
}

/// Mean |gamma| across the whole store.
pub fn mean_abs_gamma(store: &WeightStore) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (_, g) in store.all_gammas() {
        sum += g.iter().map(|v| v.abs()).sum::<f64>();
        n += g.len();
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(s0: f64) -> SparseSchedule {
        SparseSchedule { s0, ..SparseSchedule::default() }
    }

    #[test]
    fn before_switch_all_initial_rate() {
        let rates = schedule_rates(&sched(0.00075), 0, 200, &[1.0; 10]).unwrap();
        assert!(rates.rates.iter().all(|&r| r == 0.00075));
    }

    #[test]
    fn at_switch_seven_three_split() {
        // epoch 100 of 200, 10 channels: 7 keep 0.00075, 3 decay to 7.5e-6
        let gammas: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let rates = schedule_rates(&sched(0.00075), 100, 200, &gammas).unwrap();
        let kept = rates.rates.iter().filter(|&&r| r == 0.00075).count();
        let decayed = rates.rates.iter().filter(|&&r| (r - 7.5e-6).abs() < 1e-18).count();
        assert_eq!((kept, decayed), (7, 3));
        // the largest |gamma| channels decay
        assert!((rates.rates[9] - 7.5e-6).abs() < 1e-18);
        assert!((rates.rates[8] - 7.5e-6).abs() < 1e-18);
        assert!((rates.rates[7] - 7.5e-6).abs() < 1e-18);
        assert_eq!(rates.rates[0], 0.00075);
    }

    #[test]
    fn keep_fraction_one_is_constant_rate() {
        let s = SparseSchedule { keep_fraction: 1.0, ..sched(0.001) };
        let rates = schedule_rates(&s, 150, 200, &[0.5; 8]).unwrap();
        assert!(rates.rates.iter().all(|&r| r == 0.001));
    }

    #[test]
    fn empty_gammas_rejected() {
        assert!(schedule_rates(&sched(0.001), 0, 10, &[]).is_err());
    }

    #[test]
    fn rates_never_increase_across_epochs() {
        let gammas: Vec<f64> = (0..20).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        let s = sched(0.01);
        let mut prev: Option<Vec<f64>> = None;
        // freeze selection like the training loop: snapshot at switch
        let switch = s.switch_epoch(40);
        let snapshot = gammas.clone();
        for epoch in 0..40 {
            let g = if epoch < switch { &gammas } else { &snapshot };
            let rates = schedule_rates(&s, epoch, 40, g).unwrap().rates;
            if let Some(p) = &prev {
                for (r, pr) in rates.iter().zip(p) {
                    assert!(r <= pr);
                }
            }
            prev = Some(rates);
        }
    }

    #[test]
    fn penalty_direct_evaluation() {
        // gamma = [0.5, -0.2], uniform s = 0.001
        let rates = ChannelRateMap { rates: vec![0.001, 0.001] };
        let (p, g) = sparse_penalty(&[0.5, -0.2], &rates);
        assert!((p - 0.0007).abs() < 1e-15);
        assert!((g[0] - 0.001).abs() < 1e-18);
        assert!((g[1] + 0.001).abs() < 1e-18);
    }

    #[test]
    fn penalty_zero_conventions() {
        let rates = ChannelRateMap { rates: vec![0.001; 3] };
        let (p, g) = sparse_penalty(&[0.0, 0.0, 0.0], &rates);
        assert_eq!(p, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));

        let zero_rates = ChannelRateMap { rates: vec![0.0; 2] };
        let (p2, g2) = sparse_penalty(&[3.0, -4.0], &zero_rates);
        assert_eq!(p2, 0.0);
        assert!(g2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn penalty_subgradient_matches_finite_differences_away_from_zero() {
        let gammas = [0.4, -0.7, 0.02, -0.3, 1.3];
        let rates = ChannelRateMap { rates: vec![0.01, 0.02, 0.0, 0.005, 0.03] };
        let (_, grad) = sparse_penalty(&gammas, &rates);
        let h = 1e-6;
        for i in 0..gammas.len() {
            let mut up = gammas;
            up[i] += h;
            let mut down = gammas;
            down[i] -= h;
            let fd =
                (sparse_penalty(&up, &rates).0 - sparse_penalty(&down, &rates).0) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-9, "channel {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn penalty_positively_homogeneous() {
        let gammas = [0.4, -0.7, 0.3];
        let rates = ChannelRateMap { rates: vec![0.01, 0.02, 0.03] };
        let (p1, _) = sparse_penalty(&gammas, &rates);
        let scaled: Vec<f64> = gammas.iter().map(|g| g * 2.5).collect();
        let (p2, _) = sparse_penalty(&scaled, &rates);
        assert!((p2 - 2.5 * p1).abs() < 1e-12);
    }

    #[test]
    fn histogram_single_value_single_bin() {
        let h = histogram_of(&[1.0; 17], 64);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].2, 17);
    }

    #[test]
    fn histogram_two_values_two_equal_bins() {
        let mut values = vec![0.0; 8];
        values.extend(vec![1.0; 8]);
        let h = histogram_of(&values, 64);
        let nonzero: Vec<&(f64, f64, usize)> = h.iter().filter(|(_, _, c)| *c > 0).collect();
        assert_eq!(nonzero.len(), 2);
        assert_eq!(nonzero[0].2, 8);
        assert_eq!(nonzero[1].2, 8);
    }
}
