//! Text checkpoints of pseudo-label state with run-length-encoded masks.
//!
//! ```text
//! UMDA-PSEUDO 1
//! images <n>
//! image <id> <height> <width> <iteration> <last_update>
//! visible <run> <run> ...
//! thermal <run> <run> ...
//! ...
//! ```
//!
//! Runs alternate background/foreground over the row-major mask and always
//! start with a (possibly zero) background run, so an empty `2 x 3` mask is
//! `6` and `[0 1 1 0 0 1]` is `1 2 2 1`.

use std::fmt::Write as _;
use std::path::Path;

use super::{PixelMask, PseudoLabelState};
use crate::error::{Error, Result};

const HEADER: &str = "UMDA-PSEUDO 1";

fn encode(mask: &PixelMask) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &b in mask.bits() {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn decode(runs: &[usize], height: usize, width: usize) -> Option<PixelMask> {
    let mut bits = Vec::with_capacity(height * width);
    for (i, &run) in runs.iter().enumerate() {
        if i > 0 && run == 0 {
            return None;
        }
        bits.extend(std::iter::repeat_n(i % 2 == 1, run));
    }
    (bits.len() == height * width).then(|| PixelMask::from_bits(height, width, bits))
}

pub fn render_pseudo_states(states: &[PseudoLabelState]) -> String {
    let mut out = String::new();
    let runs = |m: &PixelMask| {
        encode(m)
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    };
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "images {}", states.len());
    for s in states {
        let _ = writeln!(
            out,
            "image {} {} {} {} {}",
            s.image_id,
            s.height(),
            s.width(),
            s.iteration,
            s.last_update
        );
        let _ = writeln!(out, "visible {}", runs(&s.visible));
        let _ = writeln!(out, "thermal {}", runs(&s.thermal));
    }
    out
}

pub fn parse_pseudo_states(text: &str, origin: &Path) -> Result<Vec<PseudoLabelState>> {
    let bad =
        |lineno: usize, msg: &str| Error::format(origin, format!("line {}: {msg}", lineno + 1));
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| {
            Error::format(origin, format!("unexpected end of file, expected {what}"))
        })
    };

    let (n0, header) = next("header")?;
    if header.trim() != HEADER {
        return Err(bad(n0, "not a pseudo-label checkpoint"));
    }
    let (n1, count_line) = next("image count")?;
    let count: usize = count_line
        .strip_prefix("images ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad(n1, "expected `images <n>`"))?;

    let mut states = Vec::with_capacity(count);
    for _ in 0..count {
        let (ni, image_line) = next("image record")?;
        let fields: Vec<&str> = image_line.split_whitespace().collect();
        let ["image", id, h, w, it, last] = fields[..] else {
            return Err(bad(
                ni,
                "expected `image <id> <h> <w> <iteration> <last_update>`",
            ));
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(ni, "malformed number"));
        let (h, w, iteration, last_update) = (num(h)?, num(w)?, num(it)?, num(last)?);

        let mut mask = |tag: &str| -> Result<PixelMask> {
            let (nm, line) = next(tag)?;
            let body = line
                .strip_prefix(tag)
                .ok_or_else(|| bad(nm, &format!("expected `{tag}` runs")))?;
            let runs: Vec<usize> = body
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| bad(nm, "malformed run length"))?;
            decode(&runs, h, w).ok_or_else(|| bad(nm, "runs do not cover the mask exactly"))
        };
        let visible = mask("visible")?;
        let thermal = mask("thermal")?;
        states.push(PseudoLabelState {
            image_id: id.to_string(),
            visible,
            thermal,
            iteration,
            last_update,
        });
    }
    if let Some((n, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(bad(n, &format!("unexpected trailing content {extra:?}")));
    }
    Ok(states)
}

pub fn save_pseudo_states(states: &[PseudoLabelState], path: &Path) -> Result<()> {
    if let Some(s) = states
        .iter()
        .find(|s| s.image_id.is_empty() || s.image_id.contains(char::is_whitespace))
    {
        return Err(Error::InvalidInput(format!(
            "image id {:?} cannot be stored in a pseudo-label checkpoint",
            s.image_id
        )));
    }
    std::fs::write(path, render_pseudo_states(states)).map_err(|e| Error::io(path, e))
}

pub fn load_pseudo_states(path: &Path) -> Result<Vec<PseudoLabelState>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pseudo_states(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_examples() {
        assert_eq!(encode(&PixelMask::zeros(2, 3)), vec![6]);
        let m = PixelMask::from_bits(2, 3, vec![false, true, true, false, false, true]);
        assert_eq!(encode(&m), vec![1, 2, 2, 1]);
        let starts_on = PixelMask::from_bits(1, 2, vec![true, false]);
        assert_eq!(encode(&starts_on), vec![0, 1, 1]);
    }

    #[test]
    fn rejects_bad_runs() {
        assert!(decode(&[3, 2], 2, 3).is_none());
        assert!(decode(&[1, 0, 5], 2, 3).is_none());
        let text = "UMDA-PSEUDO 1\nimages 1\nimage a 1 2 0 0\nvisible 3\nthermal 2\n";
        assert!(parse_pseudo_states(text, Path::new("x")).is_err());
        assert!(parse_pseudo_states("nope", Path::new("x")).is_err());
    }

    #[test]
    fn whitespace_ids_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let s = PseudoLabelState::empty("a b", 1, 1);
        assert!(save_pseudo_states(&[s], &dir.path().join("p.rle")).is_err());
    }

    fn arb_state() -> impl Strategy<Value = PseudoLabelState> {
        (1usize..7, 1usize..7, 0usize..5, "[a-z0-9_]{1,8}").prop_flat_map(|(h, w, k, id)| {
            (
                prop::collection::vec(any::<bool>(), h * w),
                prop::collection::vec(any::<bool>(), h * w),
                0..=k,
            )
                .prop_map(move |(v, t, last)| PseudoLabelState {
                    image_id: id.clone(),
                    visible: PixelMask::from_bits(h, w, v),
                    thermal: PixelMask::from_bits(h, w, t),
                    iteration: k,
                    last_update: last,
                })
        })
    }

    proptest! {
        #[test]
        fn text_round_trip(states in prop::collection::vec(arb_state(), 0..4)) {
            let text = render_pseudo_states(&states);
            prop_assert_eq!(parse_pseudo_states(&text, Path::new("x")).unwrap(), states);
        }
    }
}
