//! Human-readable policy files.
//!
//! Every number is written as a hexadecimal float (`0x1.8p+1`), which
//! round-trips bit-exactly, followed by a comment with the decimal value.
//! Anything after `#` is ignored by the loader, which also accepts plain
//! decimal numbers.

use std::fmt::Write as _;
use std::path::Path;

use moie_core::policy::{MoiePolicy, PolicyTag, DEFAULT_TAU};
use moie_core::types::StateNormalizer;

pub const FORMAT_TAG: &str = "moie-policy v1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// `x` as a C99-style hexadecimal float; `inf`, `-inf` and `nan` otherwise.
pub fn format_hex(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mantissa = bits & ((1 << 52) - 1);
    if exp_bits == 0 && mantissa == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 { (0, -1022) } else { (1, exp_bits - 1023) };
    let digits = format!("{mantissa:013x}");
    let digits = digits.trim_end_matches('0');
    let exp_sign = if exp < 0 { '-' } else { '+' };
    if digits.is_empty() {
        format!("{sign}0x{lead}p{exp_sign}{}", exp.abs())
    } else {
        format!("{sign}0x{lead}.{digits}p{exp_sign}{}", exp.abs())
    }
}

/// `x * 2^e` without intermediate overflow or underflow.
fn scale_by_power_of_two(mut x: f64, mut e: i64) -> f64 {
    let pow = |e: i64| f64::from_bits(((e + 1023) as u64) << 52);
    while e > 1000 {
        x *= pow(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= pow(-1000);
        e += 1000;
    }
    x * pow(e)
}

/// Parses a hexadecimal float as written by [`format_hex`], or a decimal.
pub fn parse_number(text: &str) -> Option<f64> {
    let (negative, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.strip_prefix('+').unwrap_or(text)),
    };
    let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) else {
        return match body {
            "inf" => Some(if negative { f64::NEG_INFINITY } else { f64::INFINITY }),
            "nan" => Some(f64::NAN),
            _ if body.starts_with(|c: char| c.is_ascii_digit() || c == '.') => {
                text.parse::<f64>().ok()
            }
            _ => None,
        };
    };
    let (digits, exp) = match hex.find(['p', 'P']) {
        Some(i) => (&hex[..i], hex[i + 1..].parse::<i64>().ok()?),
        None => (hex, 0),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let all: String = [int_part, frac_part].concat();
    if all.len() > 28 || !all.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    let mantissa = u128::from_str_radix(&all, 16).ok()?;
    let magnitude = scale_by_power_of_two(mantissa as f64, exp - 4 * frac_part.len() as i64);
    Some(if negative { -magnitude } else { magnitude })
}

fn hex_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format_hex(*x)).collect::<Vec<_>>().join(" ")
}

fn decimal_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn numbers_line(out: &mut String, key: &str, xs: &[f64]) {
    let _ = writeln!(out, "{key} {}  # {}", hex_list(xs), decimal_list(xs));
}

pub fn policy_to_string(policy: &MoiePolicy) -> String {
    let mut out = String::new();
    out.push_str(
        "\
# Mixture of interpretable experts policy.
#
# IF the state is close to center[i] THEN act with action[i]. Closeness is
# phi_i = exp(-tau * |n(s) - n(center_i)|^2), where n(x) = (x - mean) / std
# uses the normalizer below. With w_i = weight_i * phi_i the mean action is
# sum_i w_i * action_i / (sum_i w_i + 1). The +1 is the default action, the
# zero vector, which takes over far from every center. Actions are drawn
# from a Gaussian around the mean with per-dimension std `sigma`.
#
# Numbers are hexadecimal floats; comments show the decimal values.
",
    );
    let _ = writeln!(out, "format {FORMAT_TAG}");
    let _ = writeln!(out, "tag {}", policy.tag.as_str());
    let _ = writeln!(out, "clusters {}", policy.k());
    let _ = writeln!(out, "dim_state {}", policy.dim_state());
    let _ = writeln!(out, "dim_action {}", policy.dim_action());
    numbers_line(&mut out, "tau", &[policy.tau]);
    let _ = writeln!(out, "normalizer_frozen {}", policy.normalizer.frozen);
    numbers_line(&mut out, "normalizer_mean", &policy.normalizer.mean);
    numbers_line(&mut out, "normalizer_std", &policy.normalizer.std);
    numbers_line(&mut out, "sigma", &policy.sigma);
    for i in 0..policy.k() {
        let _ = writeln!(out, "\nexpert {i}");
        let _ = writeln!(out, "active {}", policy.active[i]);
        numbers_line(&mut out, "weight", &[policy.weights[i]]);
        numbers_line(&mut out, "center", &policy.centers[i]);
        numbers_line(&mut out, "action", &policy.actions[i]);
    }
    out
}

pub fn save_policy(policy: &MoiePolicy, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, policy_to_string(policy))
}

pub fn load_policy(path: &Path) -> Result<MoiePolicy, LoadError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| LoadError::Io { path: path.display().to_string(), source })?;
    Ok(parse_policy(&text)?)
}

struct Line<'a> {
    number: usize,
    key: &'a str,
    rest: &'a str,
}

impl Line<'_> {
    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError { line: self.number, message: message.into() }
    }

    fn numbers(&self, expected: usize) -> Result<Vec<f64>, ParseError> {
        let xs = self
            .rest
            .split_whitespace()
            .map(|t| parse_number(t).ok_or_else(|| self.err(format!("`{t}` is not a number"))))
            .collect::<Result<Vec<_>, _>>()?;
        if xs.len() != expected {
            return Err(self.err(format!("`{}` needs {expected} numbers, found {}", self.key, xs.len())));
        }
        Ok(xs)
    }

    fn usize(&self) -> Result<usize, ParseError> {
        self.rest.parse().map_err(|_| self.err(format!("`{}` needs a nonnegative integer", self.key)))
    }

    fn bool(&self) -> Result<bool, ParseError> {
        match self.rest {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.err(format!("`{}` needs true or false", self.key))),
        }
    }
}

#[derive(Default)]
struct Expert {
    active: Option<bool>,
    weight: Option<f64>,
    center: Option<Vec<f64>>,
    action: Option<Vec<f64>>,
}

/// Parses a policy file. `format`, `clusters`, `dim_state`, `dim_action`,
/// `sigma` and every expert's `weight`, `center` and `action` are required;
/// the tag defaults to `standard`, `tau` to its default value, the
/// normalizer to the identity and `active` to true.
pub fn parse_policy(text: &str) -> Result<MoiePolicy, ParseError> {
    let lines: Vec<Line> = text
        .lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                return None;
            }
            let (key, rest) = content.split_once(char::is_whitespace).unwrap_or((content, ""));
            Some(Line { number: i + 1, key, rest: rest.trim() })
        })
        .collect();
    let end = text.lines().count() + 1;
    let mut it = lines.iter().peekable();

    let first = it.next().ok_or(ParseError { line: end, message: "empty policy file".into() })?;
    if first.key != "format" || first.rest != FORMAT_TAG {
        return Err(first.err(format!("expected `format {FORMAT_TAG}`")));
    }

    let mut header: Vec<(&Line, &str)> = Vec::new();
    while let Some(line) = it.next_if(|l| l.key != "expert") {
        if header.iter().any(|(_, k)| *k == line.key) {
            return Err(line.err(format!("duplicate key `{}`", line.key)));
        }
        header.push((line, line.key));
    }
    let find = |key: &str| header.iter().find(|(_, k)| *k == key).map(|(l, _)| *l);
    let require = |key: &str| find(key).ok_or(ParseError { line: end, message: format!("missing `{key}`") });
    for (line, key) in &header {
        const KNOWN: [&str; 10] = [
            "tag",
            "clusters",
            "dim_state",
            "dim_action",
            "tau",
            "normalizer_frozen",
            "normalizer_mean",
            "normalizer_std",
            "sigma",
            "format",
        ];
        if !KNOWN.contains(key) {
            return Err(line.err(format!("unknown key `{key}`")));
        }
    }

    let k = require("clusters")?.usize()?;
    let ds = require("dim_state")?.usize()?;
    let da = require("dim_action")?.usize()?;
    let tag = match find("tag") {
        Some(l) => PolicyTag::parse(l.rest).ok_or_else(|| l.err(format!("unknown tag `{}`", l.rest)))?,
        None => PolicyTag::Standard,
    };
    let tau = match find("tau") {
        Some(l) => l.numbers(1)?[0],
        None => DEFAULT_TAU,
    };
    let mut normalizer = StateNormalizer::unit(ds);
    if let Some(l) = find("normalizer_mean") {
        normalizer.mean = l.numbers(ds)?;
    }
    if let Some(l) = find("normalizer_std") {
        normalizer.std = l.numbers(ds)?;
    }
    normalizer.frozen = match find("normalizer_frozen") {
        Some(l) => l.bool()?,
        None => true,
    };
    let sigma = require("sigma")?.numbers(da)?;

    let mut experts: Vec<Expert> = Vec::with_capacity(k);
    while let Some(head) = it.next() {
        if head.key != "expert" {
            return Err(head.err(format!("expected `expert {}`", experts.len())));
        }
        if head.usize()? != experts.len() {
            return Err(head.err(format!("expected `expert {}`", experts.len())));
        }
        if experts.len() == k {
            return Err(head.err(format!("more than {k} experts")));
        }
        let mut e = Expert::default();
        while let Some(line) = it.next_if(|l| l.key != "expert") {
            let dup = || line.err(format!("duplicate key `{}`", line.key));
            match line.key {
                "active" if e.active.is_none() => e.active = Some(line.bool()?),
                "weight" if e.weight.is_none() => e.weight = Some(line.numbers(1)?[0]),
                "center" if e.center.is_none() => e.center = Some(line.numbers(ds)?),
                "action" if e.action.is_none() => e.action = Some(line.numbers(da)?),
                "active" | "weight" | "center" | "action" => return Err(dup()),
                other => return Err(line.err(format!("unknown expert key `{other}`"))),
            }
        }
        let missing = |what: &str| head.err(format!("expert {} has no `{what}`", experts.len()));
        if e.weight.is_none() {
            return Err(missing("weight"));
        }
        if e.center.is_none() {
            return Err(missing("center"));
        }
        if e.action.is_none() {
            return Err(missing("action"));
        }
        experts.push(e);
    }
    if experts.len() != k {
        return Err(ParseError { line: end, message: format!("expected {k} experts, found {}", experts.len()) });
    }

    let policy = MoiePolicy {
        active: experts.iter().map(|e| e.active.unwrap_or(true)).collect(),
        weights: experts.iter().map(|e| e.weight.unwrap_or(0.0)).collect(),
        centers: experts.iter_mut().map(|e| e.center.take().unwrap_or_default()).collect(),
        actions: experts.iter_mut().map(|e| e.action.take().unwrap_or_default()).collect(),
        sigma,
        tau,
        normalizer,
        tag,
    };
    policy.validate().map_err(|e| ParseError { line: end, message: e.to_string() })?;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_formatting_known_values() {
        assert_eq!(format_hex(1.0), "0x1p+0");
        assert_eq!(format_hex(3.0), "0x1.8p+1");
        assert_eq!(format_hex(0.5), "0x1p-1");
        assert_eq!(format_hex(-0.1), "-0x1.999999999999ap-4");
        assert_eq!(format_hex(0.0), "0x0p+0");
        assert_eq!(format_hex(-0.0), "-0x0p+0");
        assert_eq!(format_hex(f64::MIN_POSITIVE), "0x1p-1022");
        assert_eq!(format_hex(5e-324), "0x0.0000000000001p-1022");
        assert_eq!(format_hex(f64::MAX), "0x1.fffffffffffffp+1023");
        assert_eq!(format_hex(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn parse_accepts_hex_and_decimal() {
        assert_eq!(parse_number("0x1.8p+1"), Some(3.0));
        assert_eq!(parse_number("0x1.8p1"), Some(3.0));
        assert_eq!(parse_number("0X10"), Some(16.0));
        assert_eq!(parse_number("-0x.8p0"), Some(-0.5));
        assert_eq!(parse_number("2.5"), Some(2.5));
        assert_eq!(parse_number("-1e-3"), Some(-1e-3));
        assert_eq!(parse_number(".5"), Some(0.5));
        assert!(parse_number("0x").is_none());
        assert!(parse_number("0x1.g").is_none());
        assert!(parse_number("abc").is_none());
    }

    #[test]
    fn hex_round_trip_is_bit_exact_on_edge_cases() {
        for x in [0.0, -0.0, 1.0, f64::MIN_POSITIVE, 5e-324, 2.2e-308, f64::MAX, -f64::MAX, 0.1, 1.0 / 3.0] {
            let y = parse_number(&format_hex(x)).unwrap();
            assert_eq!(x.to_bits(), y.to_bits(), "{x:e}");
        }
        assert!(parse_number(&format_hex(f64::NAN)).unwrap().is_nan());
    }

    #[test]
    fn minimal_hand_written_file_loads() {
        let text = "format moie-policy v1\nclusters 1\ndim_state 2\ndim_action 1\nsigma 0.5\n\nexpert 0\nweight 1\ncenter 0 0\naction 2\n";
        let p = parse_policy(text).unwrap();
        assert_eq!(p.k(), 1);
        assert_eq!(p.tau, DEFAULT_TAU);
        assert_eq!(p.mean_action(&[0.0, 0.0]), vec![1.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "format moie-policy v1\nclusters 1\ndim_state 2\ndim_action 1\nsigma 0.5\nexpert 0\nweight 1\ncenter 0 zero\naction 2\n";
        assert_eq!(parse_policy(text).unwrap_err().line, 8);
        let text = "format moie-policy v1\nclusters 1\ndim_state 2\ndim_action 1\nsigma 0.5\nexpert 0\nweight 1\ncenter 0 0 0\naction 2\n";
        let err = parse_policy(text).unwrap_err();
        assert_eq!(err.line, 8);
        assert!(err.message.contains("needs 2 numbers"));
        let text = "format moie-policy v2\n";
        assert_eq!(parse_policy(text).unwrap_err().line, 1);
        let text = "# comment\n\nformat moie-policy v1\nbogus 3\n";
        assert_eq!(parse_policy(text).unwrap_err().line, 4);
    }

    #[test]
    fn missing_experts_are_reported_after_the_last_line() {
        let text = "format moie-policy v1\nclusters 2\ndim_state 1\ndim_action 1\nsigma 1\nexpert 0\nweight 1\ncenter 0\naction 1\n";
        let err = parse_policy(text).unwrap_err();
        assert_eq!(err.line, 10);
        assert!(err.message.contains("expected 2 experts"));
    }

    #[test]
    fn negative_weight_is_rejected() {
        let text = "format moie-policy v1\nclusters 1\ndim_state 1\ndim_action 1\nsigma 1\nexpert 0\nweight -1\ncenter 0\naction 1\n";
        assert!(parse_policy(text).is_err());
    }
}
