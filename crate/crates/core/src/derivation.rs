//! Sampling oracle relating the measured-value check to the true-value
//! physiological bound.
//!
//! True glucose and insulin values are drawn at random, measured values are
//! drawn inside the device error bounds around them, and the measured check
//! is compared with the true-value bound in both implication directions.
//! Counterexamples are counted and reported, never filtered out.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::DeviceErrorBounds;
use crate::invariant::{implementational_invariant_holds, sign_corrected_invariant_holds, InvariantInputs};

/// One drawn tuple of true and measured values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Sample {
    pub s: f64,
    pub b: f64,
    pub g_start_true: f64,
    pub g_end_true: f64,
    pub delta_iob_true: f64,
    pub sum_doses_true: f64,
    pub measured: InvariantInputs,
}

impl Sample {
    fn true_inputs(&self) -> InvariantInputs {
        InvariantInputs {
            g_start: self.g_start_true,
            g_end: self.g_end_true,
            delta_iob: self.delta_iob_true,
            sum_doses: self.sum_doses_true,
            ..self.measured
        }
    }

    /// True-value bound in the ratio form's sign convention:
    /// `S * (B*dt - dIOB + sum)`, compared with the signed observed change.
    pub fn ratio_true_bound_holds(&self) -> bool {
        let t = self.true_inputs();
        let calculated = t.s * (t.b * t.delta_t - t.delta_iob + t.sum_doses);
        calculated - (t.g_end - t.g_start) <= t.threshold
    }

    pub fn corrected_true_bound_holds(&self) -> bool {
        sign_corrected_invariant_holds(&self.true_inputs())
    }
}

pub fn draw_sample(rng: &mut ChaCha8Rng, bounds: &DeviceErrorBounds) -> Sample {
    let s = rng.gen_range(10.0..=150.0);
    let b = rng.gen_range(0.2..=3.0);
    let g_start_true: f64 = rng.gen_range(40.0..=400.0);
    let g_end_true = (g_start_true + rng.gen_range(-120.0..=120.0)).clamp(20.0, 600.0);
    let sum_doses_true: f64 = rng.gen_range(0.0..=4.0);
    let delta_iob_true = rng.gen_range(-3.0..=sum_doses_true);
    let mut noisy = |v: f64, e: f64| v * rng.gen_range(1.0 - e..=1.0 + e);
    let (ge, pe) = (bounds.cgm_relative_error, bounds.pump_relative_error);
    let measured = InvariantInputs {
        s,
        b,
        threshold: 30.0,
        delta_t: 0.5,
        g_start: noisy(g_start_true, ge),
        g_end: noisy(g_end_true, ge),
        delta_iob: noisy(delta_iob_true, pe),
        sum_doses: noisy(sum_doses_true, pe),
    };
    Sample { s, b, g_start_true, g_end_true, delta_iob_true, sum_doses_true, measured }
}

/// Counts for one pairing of a measured check with a true-value bound.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ImplicationCounts {
    pub both_hold: u64,
    pub both_violated: u64,
    /// The measured check holds while the true bound is violated.
    pub check_holds_bound_violated: u64,
    /// The measured check is violated while the true bound holds.
    pub check_violated_bound_holds: u64,
    pub examples_missed: Vec<Sample>,
    pub examples_false_alarm: Vec<Sample>,
}

impl ImplicationCounts {
    const MAX_EXAMPLES: usize = 3;

    fn add(&mut self, check: bool, bound: bool, sample: &Sample) {
        match (check, bound) {
            (true, true) => self.both_hold += 1,
            (false, false) => self.both_violated += 1,
            (true, false) => {
                self.check_holds_bound_violated += 1;
                if self.examples_missed.len() < Self::MAX_EXAMPLES {
                    self.examples_missed.push(*sample);
                }
            }
            (false, true) => {
                self.check_violated_bound_holds += 1;
                if self.examples_false_alarm.len() < Self::MAX_EXAMPLES {
                    self.examples_false_alarm.push(*sample);
                }
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.both_hold + self.both_violated + self.check_holds_bound_violated + self.check_violated_bound_holds
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DerivationReport {
    pub seed: u64,
    pub drawn: u64,
    /// Samples whose measured denominator is positive; the ratio counts
    /// cover only these.
    pub positive_denominator: u64,
    pub ratio: ImplicationCounts,
    pub sign_corrected: ImplicationCounts,
}

/// Draws samples until `samples` have a positive ratio denominator.
pub fn run_derivation_oracle(samples: u64, seed: u64, bounds: &DeviceErrorBounds) -> DerivationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DerivationReport { seed, ..Default::default() };
    while report.positive_denominator < samples {
        let sample = draw_sample(&mut rng, bounds);
        report.drawn += 1;
        report.sign_corrected.add(
            sign_corrected_invariant_holds(&sample.measured),
            sample.corrected_true_bound_holds(),
            &sample,
        );
        if sample.measured.denominator() <= 0.0 {
            continue;
        }
        report.positive_denominator += 1;
        report.ratio.add(implementational_invariant_holds(&sample.measured), sample.ratio_true_bound_holds(), &sample);
    }
    report
}

fn pct(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

fn section(out: &mut String, title: &str, check: &str, bound: &str, c: &ImplicationCounts) {
    let n = c.total();
    let _ = writeln!(out, "## {title}\n");
    let _ = writeln!(out, "- measured check: {check}");
    let _ = writeln!(out, "- true-value bound: {bound}");
    let _ = writeln!(out, "- samples: {n}\n");
    let _ = writeln!(out, "| outcome | count | share |");
    let _ = writeln!(out, "|---|---:|---:|");
    let rows = [
        ("both hold", c.both_hold),
        ("both violated", c.both_violated),
        ("check holds, bound violated (check does not imply bound)", c.check_holds_bound_violated),
        ("check violated, bound holds (bound does not imply check)", c.check_violated_bound_holds),
    ];
    for (label, v) in rows {
        let _ = writeln!(out, "| {label} | {v} | {:.3}% |", pct(v, n));
    }
    let _ = writeln!(out);
    for (label, ex) in
        [("check holds, bound violated", &c.examples_missed), ("check violated, bound holds", &c.examples_false_alarm)]
    {
        if ex.is_empty() {
            continue;
        }
        let _ = writeln!(out, "Examples ({label}):\n");
        let _ = writeln!(
            out,
            "| S | B | G0 true | G1 true | dIOB true | sum true | G0 meas | G1 meas | dIOB meas | sum meas |"
        );
        let _ = writeln!(out, "|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|");
        for s in ex {
            let m = &s.measured;
            let _ = writeln!(
                out,
                "| {:.1} | {:.2} | {:.1} | {:.1} | {:.3} | {:.3} | {:.1} | {:.1} | {:.3} | {:.3} |",
                s.s,
                s.b,
                s.g_start_true,
                s.g_end_true,
                s.delta_iob_true,
                s.sum_doses_true,
                m.g_start,
                m.g_end,
                m.delta_iob,
                m.sum_doses
            );
        }
        let _ = writeln!(out);
    }
}

impl DerivationReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Physiological check: sampling oracle report\n");
        let _ = writeln!(
            out,
            "Seed {}; {} tuples drawn, {} with a positive ratio denominator. True values: S in [10, 150], \
             B in [0.2, 3], start glucose in [40, 400], change in [-120, 120] (clamped to [20, 600]), \
             delivered insulin in [0, 4] U, IOB change in [-3, delivered]. Window 30 min, threshold 30 mg/dl. \
             Measured glucose lies within +/-10% of true, measured insulin within +/-1%.\n",
            self.seed, self.drawn, self.positive_denominator
        );
        let _ = writeln!(
            out,
            "Regenerate with `basalguard derivation-report --samples {} --seed {}`.\n",
            self.positive_denominator, self.seed
        );
        section(
            &mut out,
            "Ratio form",
            "S <= (0.9*G1 - 1.1*G0 + T) / (B*dt - 0.99*dIOB + 0.01*sum), positive denominator only",
            "S*(B*dt - dIOB + sum) - (G1 - G0) <= T",
            &self.ratio,
        );
        section(
            &mut out,
            "Sign-corrected form",
            "S*(B*dt + dIOB - sum) - (G1 - G0) <= T on measured values",
            "the same expression on true values",
            &self.sign_corrected,
        );
        out
    }
}
