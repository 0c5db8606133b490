//! Angular collision kernels `B(s)` on (−1,1) and their reduced form
//! `G(s) = 4π·B(1−2s)` on (0,1).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("argument {0} outside the open interval")]
    Domain(f64),
    #[error("invalid kernel parameter: {0}")]
    InvalidParameter(String),
    #[error("endpoint exponent {0} ≥ 1/2 admits no α0 ≤ 2")]
    Inadmissible(f64),
}

/// Functional form of an angular kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelForm {
    Constant {
        amplitude: f64,
    },
    /// `amplitude·(1−s)^(−1−nu_plus)·(1+s)^(−1−nu_minus)`
    EndpointPower {
        amplitude: f64,
        nu_plus: f64,
        nu_minus: f64,
    },
    /// Piecewise-linear in `s`, constant beyond the outermost nodes.
    Tabulated {
        nodes: Vec<f64>,
        values: Vec<f64>,
    },
}

/// A collision kernel with an optional cap `n`; the effective kernel is
/// `min{B(s), n}`. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelDescriptor", into = "KernelDescriptor")]
pub struct AngularKernel {
    form: KernelForm,
    cutoff: Option<f64>,
}

impl AngularKernel {
    pub fn constant(amplitude: f64) -> Result<Self, KernelError> {
        positive("amplitude", amplitude)?;
        Ok(Self {
            form: KernelForm::Constant { amplitude },
            cutoff: None,
        })
    }

    /// The constant kernel with `∫₀¹ G = 1`, i.e. amplitude `1/(4π)`.
    pub fn constant_normalized() -> Self {
        Self::constant(1.0 / (4.0 * PI)).expect("positive amplitude")
    }

    pub fn endpoint_power(amplitude: f64, nu_plus: f64, nu_minus: f64) -> Result<Self, KernelError> {
        positive("amplitude", amplitude)?;
        for nu in [nu_plus, nu_minus] {
            if !(nu >= 0.0) || !nu.is_finite() {
                return Err(KernelError::InvalidParameter(format!(
                    "endpoint exponent {nu} must be ≥ 0"
                )));
            }
            if nu >= 0.5 {
                return Err(KernelError::Inadmissible(nu));
            }
        }
        Ok(Self {
            form: KernelForm::EndpointPower {
                amplitude,
                nu_plus,
                nu_minus,
            },
            cutoff: None,
        })
    }

    pub fn tabulated(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self, KernelError> {
        if nodes.len() < 2 || nodes.len() != values.len() {
            return Err(KernelError::InvalidParameter(
                "tabulated kernel needs ≥ 2 nodes and one value per node".into(),
            ));
        }
        if nodes.iter().any(|s| !(*s > -1.0 && *s < 1.0)) {
            return Err(KernelError::InvalidParameter(
                "tabulated nodes must lie in (−1,1)".into(),
            ));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(KernelError::InvalidParameter(
                "tabulated nodes must be strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(KernelError::InvalidParameter(
                "tabulated values must be finite and ≥ 0".into(),
            ));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(KernelError::InvalidParameter(
                "tabulated kernel is identically zero".into(),
            ));
        }
        Ok(Self {
            form: KernelForm::Tabulated { nodes, values },
            cutoff: None,
        })
    }

    pub fn form(&self) -> &KernelForm {
        &self.form
    }

    pub fn cutoff(&self) -> Option<f64> {
        self.cutoff
    }

    /// Same kernel capped at `n`. Capping an already capped kernel keeps the
    /// smaller cap.
    pub fn truncate(&self, n: f64) -> Result<Self, KernelError> {
        positive("cutoff", n)?;
        let cap = self.cutoff.map_or(n, |c| c.min(n));
        Ok(Self {
            form: self.form.clone(),
            cutoff: Some(cap),
        })
    }

    /// Kernel multiplied by `factor` (amplitude, tabulated values and cap).
    pub fn scaled(&self, factor: f64) -> Result<Self, KernelError> {
        positive("scale factor", factor)?;
        let form = match &self.form {
            KernelForm::Constant { amplitude } => KernelForm::Constant {
                amplitude: amplitude * factor,
            },
            KernelForm::EndpointPower {
                amplitude,
                nu_plus,
                nu_minus,
            } => KernelForm::EndpointPower {
                amplitude: amplitude * factor,
                nu_plus: *nu_plus,
                nu_minus: *nu_minus,
            },
            KernelForm::Tabulated { nodes, values } => KernelForm::Tabulated {
                nodes: nodes.clone(),
                values: values.iter().map(|v| v * factor).collect(),
            },
        };
        Ok(Self {
            form,
            cutoff: self.cutoff.map(|c| c * factor),
        })
    }

    /// Effective kernel `B(s)` (capped when a cutoff is present).
    pub fn eval_b(&self, s: f64) -> Result<f64, KernelError> {
        if !(s > -1.0 && s < 1.0) {
            return Err(KernelError::Domain(s));
        }
        Ok(self.b_sides(1.0 - s, 1.0 + s))
    }

    /// Reduced kernel `G(s) = 4π·B(1−2s)` on (0,1).
    pub fn eval_g(&self, s: f64) -> Result<f64, KernelError> {
        if !(s > 0.0 && s < 1.0) {
            return Err(KernelError::Domain(s));
        }
        Ok(4.0 * PI * self.eval_b(1.0 - 2.0 * s)?)
    }

    /// `B` evaluated from the two distances `1−s` and `1+s` to the endpoints,
    /// which callers supply without cancellation.
    pub fn b_sides(&self, one_minus: f64, one_plus: f64) -> f64 {
        let raw = match &self.form {
            KernelForm::Constant { amplitude } => *amplitude,
            KernelForm::EndpointPower {
                amplitude,
                nu_plus,
                nu_minus,
            } => amplitude * one_minus.powf(-1.0 - nu_plus) * one_plus.powf(-1.0 - nu_minus),
            KernelForm::Tabulated { nodes, values } => {
                tabulated_value(nodes, values, 0.5 * (one_plus - one_minus))
            }
        };
        match self.cutoff {
            Some(cap) => raw.min(cap),
            None => raw,
        }
    }

    /// `G(s)` from `s` and `1−s`.
    #[inline]
    pub fn g_sides(&self, s: f64, one_minus_s: f64) -> f64 {
        4.0 * PI * self.b_sides(2.0 * s, 2.0 * one_minus_s)
    }

    /// True when the effective kernel is bounded (hence integrable).
    pub fn is_bounded(&self) -> bool {
        self.cutoff.is_some() || !matches!(self.form, KernelForm::EndpointPower { .. })
    }

    /// Infimum of admissible α0: `4·max(ν⁺, ν⁻)` for uncapped power kernels,
    /// 0 for bounded kernels.
    pub fn min_alpha0(&self) -> f64 {
        match (&self.form, self.cutoff) {
            (
                KernelForm::EndpointPower {
                    nu_plus, nu_minus, ..
                },
                None,
            ) => 4.0 * nu_plus.max(*nu_minus),
            _ => 0.0,
        }
    }

    /// Whether admissibility requires α strictly above [`Self::min_alpha0`].
    pub fn requires_strict_alpha(&self) -> bool {
        !self.is_bounded()
    }

    /// Largest endpoint exponent ν (0 for bounded kernels).
    pub fn max_nu(&self) -> f64 {
        0.25 * self.min_alpha0()
    }

    /// Exponents `(e₋, e₊)` with `B ~ (1+s)^{e₋}` at −1 and `B ~ (1−s)^{e₊}` at 1.
    pub fn b_endpoint_exponents(&self) -> (f64, f64) {
        match (&self.form, self.cutoff) {
            (
                KernelForm::EndpointPower {
                    nu_plus, nu_minus, ..
                },
                None,
            ) => (-1.0 - nu_minus, -1.0 - nu_plus),
            _ => (0.0, 0.0),
        }
    }

    /// Exponents `(e₀, e₁)` with `G ~ s^{e₀}` at 0 and `G ~ (1−s)^{e₁}` at 1.
    pub fn g_endpoint_exponents(&self) -> (f64, f64) {
        let (e_minus, e_plus) = self.b_endpoint_exponents();
        (e_plus, e_minus)
    }

    /// Points of (0,1) where `G` has a kink: tabulation nodes and cap crossings.
    pub fn g_breakpoints(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match &self.form {
            KernelForm::Constant { .. } => {}
            KernelForm::EndpointPower {
                amplitude,
                nu_plus,
                nu_minus,
            } => {
                if let Some(cap) = self.cutoff {
                    out.extend(power_cap_crossings(*amplitude, *nu_plus, *nu_minus, cap));
                }
            }
            KernelForm::Tabulated { nodes, values } => {
                for &s in nodes {
                    out.push(0.5 * (1.0 - s));
                }
                if let Some(cap) = self.cutoff {
                    for (w, v) in nodes.windows(2).zip(values.windows(2)) {
                        if (v[0] - cap) * (v[1] - cap) < 0.0 {
                            let s = w[0] + (cap - v[0]) * (w[1] - w[0]) / (v[1] - v[0]);
                            out.push(0.5 * (1.0 - s));
                        }
                    }
                }
            }
        }
        out.retain(|s| *s > 0.0 && *s < 1.0);
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    pub fn descriptor(&self) -> KernelDescriptor {
        self.clone().into()
    }

    /// Stable textual key used for memoization and equality by descriptor.
    pub fn key(&self) -> String {
        serde_json::to_string(&self.descriptor()).expect("descriptor serializes")
    }

    /// `(type, amplitude, nu_plus, nu_minus, cutoff)` for CSV output.
    pub fn descriptor_columns(&self) -> [String; 5] {
        let d = self.descriptor();
        let num = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        [
            d.kind.as_str().to_string(),
            num(d.amplitude),
            num(d.nu_plus),
            num(d.nu_minus),
            num(d.cutoff),
        ]
    }
}

fn positive(name: &str, v: f64) -> Result<(), KernelError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(KernelError::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

fn tabulated_value(nodes: &[f64], values: &[f64], s: f64) -> f64 {
    let n = nodes.len();
    if s <= nodes[0] {
        return values[0];
    }
    if s >= nodes[n - 1] {
        return values[n - 1];
    }
    let k = nodes.partition_point(|&x| x <= s) - 1;
    let t = (s - nodes[k]) / (nodes[k + 1] - nodes[k]);
    values[k] + t * (values[k + 1] - values[k])
}

/// Cap crossings of a power kernel in the reduced variable. `ln B` is convex
/// in `s`, so there are at most two, one on each side of the minimum.
fn power_cap_crossings(amplitude: f64, nu_plus: f64, nu_minus: f64, cap: f64) -> Vec<f64> {
    // In the reduced variable: B = amp·(2s)^{-1-ν⁺}·(2(1-s))^{-1-ν⁻}.
    let ln_b = |s: f64, t: f64| {
        amplitude.ln() - (1.0 + nu_plus) * (2.0 * s).ln() - (1.0 + nu_minus) * (2.0 * t).ln()
    };
    // minimum of ln B: (1+ν⁺)/s = (1+ν⁻)/(1-s)
    let s_star = (1.0 + nu_plus) / (2.0 + nu_plus + nu_minus);
    let ln_cap = cap.ln();
    if ln_b(s_star, 1.0 - s_star) >= ln_cap {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(2);
    // Bisect in the log of the distance to the respective endpoint.
    let solve = |near_zero: bool| {
        let endpoint_dist = if near_zero { s_star } else { 1.0 - s_star };
        let mut lo = -745.0f64;
        let mut hi = endpoint_dist.ln();
        let f = |u: f64| {
            let d = u.exp();
            if near_zero {
                ln_b(d, 1.0 - d) - ln_cap
            } else {
                ln_b(1.0 - d, d) - ln_cap
            }
        };
        if f(lo) <= 0.0 {
            return None;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let d = (0.5 * (lo + hi)).exp();
        Some(if near_zero { d } else { 1.0 - d })
    };
    out.extend(solve(true));
    out.extend(solve(false));
    out
}

/// Serialized kernel description as used in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDescriptor {
    #[serde(rename = "type")]
    pub kind: KernelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_plus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_minus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Constant,
    EndpointPower,
    Tabulated,
}

impl KernelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Constant => "constant",
            KernelKind::EndpointPower => "endpoint_power",
            KernelKind::Tabulated => "tabulated",
        }
    }
}

impl TryFrom<KernelDescriptor> for AngularKernel {
    type Error = KernelError;

    fn try_from(d: KernelDescriptor) -> Result<Self, Self::Error> {
        let missing = |what: &str| KernelError::InvalidParameter(format!("missing field `{what}`"));
        let base = match d.kind {
            KernelKind::Constant => {
                AngularKernel::constant(d.amplitude.ok_or_else(|| missing("amplitude"))?)?
            }
            KernelKind::EndpointPower => AngularKernel::endpoint_power(
                d.amplitude.ok_or_else(|| missing("amplitude"))?,
                d.nu_plus.unwrap_or(0.0),
                d.nu_minus.unwrap_or(0.0),
            )?,
            KernelKind::Tabulated => AngularKernel::tabulated(
                d.nodes.ok_or_else(|| missing("nodes"))?,
                d.values.ok_or_else(|| missing("values"))?,
            )?,
        };
        match d.cutoff {
            Some(n) => base.truncate(n),
            None => Ok(base),
        }
    }
}

impl From<AngularKernel> for KernelDescriptor {
    fn from(k: AngularKernel) -> Self {
        let mut d = KernelDescriptor {
            kind: KernelKind::Constant,
            amplitude: None,
            nu_plus: None,
            nu_minus: None,
            cutoff: k.cutoff,
            nodes: None,
            values: None,
        };
        match k.form {
            KernelForm::Constant { amplitude } => d.amplitude = Some(amplitude),
            KernelForm::EndpointPower {
                amplitude,
                nu_plus,
                nu_minus,
            } => {
                d.kind = KernelKind::EndpointPower;
                d.amplitude = Some(amplitude);
                d.nu_plus = Some(nu_plus);
                d.nu_minus = Some(nu_minus);
            }
            KernelForm::Tabulated { nodes, values } => {
                d.kind = KernelKind::Tabulated;
                d.nodes = Some(nodes);
                d.values = Some(values);
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn physical() -> AngularKernel {
        AngularKernel::endpoint_power(1.0, 0.25, 0.0).unwrap()
    }

    #[test]
    fn constant_value() {
        let k = AngularKernel::constant(1.0 / (4.0 * PI)).unwrap();
        assert_eq!(k.eval_b(0.0).unwrap(), 1.0 / (4.0 * PI));
        assert_eq!(k.eval_g(0.5).unwrap(), 4.0 * PI * (1.0 / (4.0 * PI)));
    }

    #[test]
    fn power_kernel_midpoint_and_cap() {
        let k = physical();
        assert_eq!(k.eval_b(0.0).unwrap(), 1.0);
        let capped = k.truncate(10.0).unwrap();
        // direct power evaluation far exceeds the cap
        assert!(0.001f64.powf(-1.25) / 1.999 > 10.0);
        assert_eq!(capped.eval_b(0.999).unwrap(), 10.0);
        assert_eq!(capped.eval_b(0.0).unwrap(), 1.0);
    }

    #[test]
    fn reduced_kernel_near_zero() {
        let k = physical();
        for s in [1e-3, 1e-5, 1e-7] {
            let g = k.eval_g(s).unwrap();
            let lead = 4.0 * PI * (2.0 * s).powf(-1.25) * (2.0 - 2.0 * s).powf(-1.0);
            assert!(((g - lead) / lead).abs() < 1e-9);
        }
    }

    #[test]
    fn mirrored_kernel_swaps_exponents() {
        let k = AngularKernel::endpoint_power(1.0, 0.3, 0.1).unwrap();
        let m = AngularKernel::endpoint_power(1.0, 0.1, 0.3).unwrap();
        for s in [0.1, 0.25, 0.4] {
            let a = k.eval_g(s).unwrap();
            let b = m.eval_g(1.0 - s).unwrap();
            assert!(((a - b) / a).abs() < 1e-13);
        }
    }

    #[test]
    fn domain_errors() {
        let k = AngularKernel::constant_normalized();
        assert!(matches!(k.eval_b(1.0), Err(KernelError::Domain(_))));
        assert!(matches!(k.eval_b(-1.5), Err(KernelError::Domain(_))));
        assert!(matches!(k.eval_g(0.0), Err(KernelError::Domain(_))));
    }

    #[test]
    fn admissibility_thresholds() {
        assert_eq!(AngularKernel::constant(2.0).unwrap().min_alpha0(), 0.0);
        assert_eq!(physical().min_alpha0(), 1.0);
        let k = AngularKernel::endpoint_power(1.0, 0.1, 0.0).unwrap();
        assert!((k.min_alpha0() - 0.4).abs() < 1e-15);
        assert!(matches!(
            AngularKernel::endpoint_power(1.0, 0.5, 0.0),
            Err(KernelError::Inadmissible(_))
        ));
        assert_eq!(physical().truncate(5.0).unwrap().min_alpha0(), 0.0);
    }

    #[test]
    fn truncation_composes_as_min() {
        let k = physical();
        let a = k.truncate(100.0).unwrap().truncate(10.0).unwrap();
        let b = k.truncate(10.0).unwrap();
        assert_eq!(a, b);
        let c = b.truncate(50.0).unwrap();
        assert_eq!(c, b);
        let constant = AngularKernel::constant(0.3).unwrap().truncate(1.0).unwrap();
        for s in [-0.9, 0.0, 0.7] {
            assert_eq!(constant.eval_b(s).unwrap(), 0.3);
        }
    }

    #[test]
    fn cap_crossings_solve_the_cap_equation() {
        let k = AngularKernel::endpoint_power(1.0, 0.25, 0.1).unwrap().truncate(1e3).unwrap();
        let bps = k.g_breakpoints();
        assert_eq!(bps.len(), 2);
        let raw = AngularKernel::endpoint_power(1.0, 0.25, 0.1).unwrap();
        for s in bps {
            let g = raw.g_sides(s, 1.0 - s);
            assert!(((g - 4.0 * PI * 1e3) / g).abs() < 1e-9, "s={s} g={g}");
        }
    }

    #[test]
    fn tabulated_interpolation() {
        let k = AngularKernel::tabulated(vec![-0.5, 0.0, 0.5], vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(k.eval_b(-0.9).unwrap(), 1.0);
        assert!((k.eval_b(-0.25).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(k.eval_b(0.9).unwrap(), 2.0);
        assert_eq!(k.min_alpha0(), 0.0);
        assert_eq!(k.g_breakpoints(), vec![0.25, 0.5, 0.75]);
    }

    #[test]
    fn descriptor_json() {
        let json = r#"{"type":"endpoint_power","amplitude":1.0,"nu_plus":0.25,"nu_minus":0.0,"cutoff":10.0}"#;
        let k: AngularKernel = serde_json::from_str(json).unwrap();
        assert_eq!(k, physical().truncate(10.0).unwrap());
        let back = serde_json::to_string(&k).unwrap();
        let again: AngularKernel = serde_json::from_str(&back).unwrap();
        assert_eq!(k, again);
        let bad = r#"{"type":"constant","amplitude":1.0,"amplitud":2.0}"#;
        assert!(serde_json::from_str::<AngularKernel>(bad).is_err());
        let inadmissible = r#"{"type":"endpoint_power","amplitude":1.0,"nu_plus":0.6}"#;
        assert!(serde_json::from_str::<AngularKernel>(inadmissible).is_err());
    }

    proptest! {
        #[test]
        fn capped_kernel_is_bounded(s in -0.999_999f64..0.999_999, cap in 0.1f64..1e4,
                                    nu_p in 0.0f64..0.49, nu_m in 0.0f64..0.49) {
            let k = AngularKernel::endpoint_power(1.0, nu_p, nu_m).unwrap().truncate(cap).unwrap();
            let b = k.eval_b(s).unwrap();
            prop_assert!(b >= 0.0 && b <= cap);
            prop_assert_eq!(k.min_alpha0(), 0.0);
        }

        #[test]
        fn g_is_b_reparameterized(s in 1e-9f64..(1.0 - 1e-9), nu_p in 0.0f64..0.49) {
            let k = AngularKernel::endpoint_power(0.7, nu_p, 0.1).unwrap();
            let g = k.eval_g(s).unwrap();
            let b = k.eval_b(1.0 - 2.0 * s).unwrap();
            prop_assert_eq!(g.to_bits(), (4.0 * PI * b).to_bits());
        }
    }
}
