//! Evaluation-model formulas.
//!
//! A small lme4/brms-style language:
//!
//! ```text
//! S ~ (gender + race + age_bin + Y)^2 + ln.diabp + (1 | (gender + race)^2)
//! sigma ~ gender + Y
//! ```
//!
//! `(a + b + c)^2` expands to all main effects and all pairwise products,
//! `a:b` is a single product, `(1 | expr)` adds a random intercept for every
//! factor or factor crossing produced by `expr`, and `0 +` drops the intercept.
//! A second `sigma ~ ...` formula (after `;` or a newline) makes the residual
//! scale log-linear in its terms. Names resolve against the dataset schema;
//! `Y` is the class label as a two-level factor.

mod design;
mod parse;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::inference::PriorConfig;

pub use design::{
    build_design, DesignMatrix, DesignRow, GroupDesign, ModelLayout, PredictorLayout,
};
pub use parse::{parse_formula, parse_model};

pub const LABEL_NAME: &str = "Y";

/// One fixed-effect term. Products have arity two at most.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Main(String),
    Product(String, String),
}

impl Term {
    pub fn order(&self) -> usize {
        match self {
            Term::Main(_) => 1,
            Term::Product(..) => 2,
        }
    }

    fn same_as(&self, other: &Term) -> bool {
        match (self, other) {
            (Term::Main(a), Term::Main(b)) => a == b,
            (Term::Product(a, b), Term::Product(c, d)) => (a == c && b == d) || (a == d && b == c),
            _ => false,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Main(a) => f.write_str(a),
            Term::Product(a, b) => write!(f, "{a}:{b}"),
        }
    }
}

/// Random intercepts for every level of one factor or of a two-factor crossing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomGroup {
    pub factors: Vec<String>,
}

impl RandomGroup {
    pub fn name(&self) -> String {
        self.factors.join(":")
    }
}

/// Right-hand side of one formula after expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub intercept: bool,
    pub terms: Vec<Term>,
    pub groups: Vec<RandomGroup>,
}

impl LinearPredictor {
    pub(crate) fn push_term(&mut self, term: Term) {
        if !self.terms.iter().any(|t| t.same_as(&term)) {
            self.terms.push(term);
        }
    }

    pub(crate) fn push_group(&mut self, group: RandomGroup) {
        let same = |g: &RandomGroup| {
            let mut a = g.factors.clone();
            let mut b = group.factors.clone();
            a.sort();
            b.sort();
            a == b
        };
        if !self.groups.iter().any(same) {
            self.groups.push(group);
        }
    }

    /// Every variable name the predictor refers to.
    pub fn names(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for t in &self.terms {
            match t {
                Term::Main(a) => out.push(a.as_str()),
                Term::Product(a, b) => {
                    out.push(a.as_str());
                    out.push(b.as_str());
                }
            }
        }
        for g in &self.groups {
            out.extend(g.factors.iter().map(String::as_str));
        }
        out
    }
}

impl fmt::Display for LinearPredictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        if !self.intercept {
            parts.push("0".into());
        } else if self.terms.is_empty() && self.groups.is_empty() {
            parts.push("1".into());
        }
        parts.extend(self.terms.iter().map(Term::to_string));
        parts.extend(self.groups.iter().map(|g| format!("(1 | {})", g.name())));
        f.write_str(&parts.join(" + "))
    }
}

/// A parsed evaluation model: mean predictor, optional log-scale predictor and
/// priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub mean: LinearPredictor,
    pub sigma: Option<LinearPredictor>,
    #[serde(default)]
    pub prior: PriorConfig,
}

impl ModelSpec {
    pub fn is_random_effects(&self) -> bool {
        !self.mean.groups.is_empty() || self.sigma.as_ref().is_some_and(|s| !s.groups.is_empty())
    }

    pub fn is_heteroscedastic(&self) -> bool {
        self.sigma.is_some()
    }

    /// Fixed-effects homoscedastic models admit the conjugate Gibbs sampler.
    pub fn is_conjugate(&self) -> bool {
        !self.is_random_effects() && !self.is_heteroscedastic()
    }

    pub fn with_prior(mut self, prior: PriorConfig) -> Self {
        self.prior = prior;
        self
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ {}", self.response, self.mean)?;
        if let Some(s) = &self.sigma {
            write!(f, "; sigma ~ {s}")?;
        }
        Ok(())
    }
}
