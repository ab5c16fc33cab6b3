use serde::{Deserialize, Serialize};

/// Per-head loss components; the joint loss is their plain sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub nrc: f64,
    pub ec: f64,
    pub rc: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.nrc + self.ec + self.rc
    }

    pub fn add(&mut self, other: &LossParts) {
        self.nrc += other.nrc;
        self.ec += other.ec;
        self.rc += other.rc;
    }

    pub fn scale(&mut self, s: f64) {
        self.nrc *= s;
        self.ec *= s;
        self.rc *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.nrc.is_finite() && self.ec.is_finite() && self.rc.is_finite()
    }
}

fn bce(p: f64, t: bool) -> f64 {
    if t {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Joint loss from head outputs given as probabilities.
///
/// `nrc` is `(y, t)`; `ec` pairs each scored context token with its target
/// and is averaged per token; `rc` is the relation distribution with the gold
/// class. The EC and RC terms only count for positive instances, so callers
/// pass `None` otherwise.
pub fn joint_loss(nrc: Option<(f64, bool)>, ec: Option<&[(f64, bool)]>, rc: Option<(&[f64], usize)>) -> LossParts {
    let nrc = nrc.map_or(0.0, |(y, t)| bce(y, t));
    let ec = match ec {
        Some(pairs) if !pairs.is_empty() => {
            pairs.iter().map(|&(p, t)| bce(p, t)).sum::<f64>() / pairs.len() as f64
        }
        _ => 0.0,
    };
    let rc = rc.map_or(0.0, |(p, r)| -p[r].ln());
    LossParts { nrc, ec, rc }
}
