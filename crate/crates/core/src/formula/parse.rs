use super::{LinearPredictor, ModelSpec, RandomGroup, Term};
use crate::error::{Error, Result};
use crate::inference::PriorConfig;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(u32),
    Tilde,
    Plus,
    Colon,
    LParen,
    RParen,
    Caret,
    Bar,
    Sep,
    End,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        let simple = match c {
            '~' => Some(Tok::Tilde),
            '+' => Some(Tok::Plus),
            ':' => Some(Tok::Colon),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '^' => Some(Tok::Caret),
            '|' => Some(Tok::Bar),
            ';' | '\n' => Some(Tok::Sep),
            _ => None,
        };
        if let Some(t) = simple {
            out.push((pos, t));
            i += 1;
        } else if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].1.is_ascii_digit() {
                i += 1;
            }
            let s: String = chars[start..i].iter().map(|c| c.1).collect();
            let n = s.parse().map_err(|_| Error::Syntax {
                pos,
                message: format!("number `{s}` out of range"),
            })?;
            out.push((pos, Tok::Num(n)));
        } else if c.is_alphabetic() || c == '_' || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].1.is_alphanumeric() || matches!(chars[i].1, '_' | '.')) {
                i += 1;
            }
            out.push((pos, Tok::Ident(chars[start..i].iter().map(|c| c.1).collect())));
        } else {
            return Err(Error::Syntax {
                pos,
                message: format!("unknown operator `{c}`"),
            });
        }
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].1
    }

    fn pos(&self) -> usize {
        self.toks[self.at].0
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.at].1.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            pos: self.pos(),
            message: message.into(),
        })
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<()> {
        if *self.peek() == tok {
            self.next();
            Ok(())
        } else {
            self.err(format!("expected {what}, found {}", describe(self.peek())))
        }
    }

    fn ident(&mut self) -> Result<String> {
        match self.next() {
            Tok::Ident(s) => Ok(s),
            t => {
                self.at -= 1;
                self.err(format!("expected a variable name, found {}", describe(&t)))
            }
        }
    }

    /// `name` or `name:name`.
    fn product(&mut self) -> Result<Term> {
        let a = self.ident()?;
        if *self.peek() != Tok::Colon {
            return Ok(Term::Main(a));
        }
        self.next();
        let b = self.ident()?;
        if *self.peek() == Tok::Colon {
            return Err(Error::Unsupported("interactions of more than two variables".into()));
        }
        if a == b {
            return Ok(Term::Main(a));
        }
        Ok(Term::Product(a, b))
    }

    /// `term + term + ...` inside parentheses, with an optional `^k` after the
    /// closing parenthesis.
    fn grouped_sum(&mut self) -> Result<Vec<Term>> {
        self.expect(Tok::LParen, "`(`")?;
        let mut items = vec![self.product()?];
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.next();
                    items.push(self.product()?);
                }
                Tok::RParen => {
                    self.next();
                    break;
                }
                Tok::Bar => return Err(Error::Unsupported("nested `|` in a grouping term".into())),
                t => return self.err(format!("expected `+` or `)`, found {}", describe(t))),
            }
        }
        if *self.peek() != Tok::Caret {
            return Ok(items);
        }
        self.next();
        let power = match self.next() {
            Tok::Num(k) => k,
            _ => {
                self.at -= 1;
                return self.err("expected an integer power after `^`");
            }
        };
        match power {
            0 => self.err("power must be at least 1"),
            1 => Ok(items),
            2 => expand_pairs(items),
            _ => Err(Error::Unsupported(format!(
                "interaction order {power}; at most pairwise (^2) is supported"
            ))),
        }
    }

    fn random_group(&mut self, lp: &mut LinearPredictor) -> Result<()> {
        self.expect(Tok::LParen, "`(`")?;
        self.expect(Tok::Num(1), "`1`")?;
        self.expect(Tok::Bar, "`|`")?;
        loop {
            let terms = match self.peek() {
                Tok::LParen => self.grouped_sum()?,
                Tok::Ident(_) => vec![self.product()?],
                t => return self.err(format!("expected a grouping factor, found {}", describe(t))),
            };
            for t in terms {
                let factors = match t {
                    Term::Main(a) => vec![a],
                    Term::Product(a, b) => vec![a, b],
                };
                lp.push_group(RandomGroup { factors });
            }
            match self.peek() {
                Tok::Plus => {
                    self.next();
                }
                Tok::RParen => {
                    self.next();
                    return Ok(());
                }
                Tok::Bar => return Err(Error::Unsupported("nested `|` in a random-effects term".into())),
                t => return self.err(format!("expected `+` or `)`, found {}", describe(t))),
            }
        }
    }

    fn rhs(&mut self) -> Result<LinearPredictor> {
        let mut lp = LinearPredictor {
            intercept: true,
            terms: Vec::new(),
            groups: Vec::new(),
        };
        loop {
            match self.peek().clone() {
                Tok::Num(1) => {
                    self.next();
                    lp.intercept = true;
                }
                Tok::Num(0) => {
                    self.next();
                    lp.intercept = false;
                }
                Tok::Ident(_) => {
                    let t = self.product()?;
                    lp.push_term(t);
                }
                Tok::LParen if *self.peek2() == Tok::Num(1) => self.random_group(&mut lp)?,
                Tok::LParen => {
                    for t in self.grouped_sum()? {
                        lp.push_term(t);
                    }
                }
                t => return self.err(format!("expected a term, found {}", describe(&t))),
            }
            if *self.peek() == Tok::Plus {
                self.next();
            } else {
                break;
            }
        }
        Ok(lp)
    }

    fn formula(&mut self) -> Result<(String, LinearPredictor)> {
        let response = self.ident()?;
        self.expect(Tok::Tilde, "`~`")?;
        let lp = self.rhs()?;
        Ok((response, lp))
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Num(n) => format!("`{n}`"),
        Tok::Tilde => "`~`".into(),
        Tok::Plus => "`+`".into(),
        Tok::Colon => "`:`".into(),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::Caret => "`^`".into(),
        Tok::Bar => "`|`".into(),
        Tok::Sep => "end of formula".into(),
        Tok::End => "end of input".into(),
    }
}

fn expand_pairs(items: Vec<Term>) -> Result<Vec<Term>> {
    let mut names = Vec::with_capacity(items.len());
    for t in items {
        match t {
            Term::Main(a) => {
                if !names.contains(&a) {
                    names.push(a)
                }
            }
            Term::Product(..) => {
                return Err(Error::Unsupported(
                    "products inside (...)^2 would create three-way interactions".into(),
                ))
            }
        }
    }
    let mut out: Vec<Term> = names.iter().cloned().map(Term::Main).collect();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            out.push(Term::Product(names[i].clone(), names[j].clone()));
        }
    }
    Ok(out)
}

/// Parses `response ~ rhs`, optionally followed by `; sigma ~ rhs` (or the
/// sigma formula on its own line).
pub fn parse_formula(text: &str) -> Result<ModelSpec> {
    let mut p = Parser {
        toks: tokenize(text)?,
        at: 0,
    };
    while *p.peek() == Tok::Sep {
        p.next();
    }
    let (response, mean) = p.formula()?;
    if response == "sigma" {
        return p.err("the first formula must model the score, not `sigma`");
    }
    while *p.peek() == Tok::Sep {
        p.next();
    }
    let sigma = if *p.peek() == Tok::End {
        None
    } else {
        let (name, lp) = p.formula()?;
        if name != "sigma" {
            return p.err(format!("second formula must be `sigma ~ ...`, found `{name} ~`"));
        }
        Some(lp)
    };
    while *p.peek() == Tok::Sep {
        p.next();
    }
    if *p.peek() != Tok::End {
        return p.err(format!("unexpected {}", describe(p.peek())));
    }
    if !mean.intercept && mean.terms.is_empty() && mean.groups.is_empty() {
        return Err(Error::Syntax {
            pos: 0,
            message: "mean formula has neither an intercept nor any term".into(),
        });
    }
    Ok(ModelSpec {
        response,
        mean,
        sigma,
        prior: PriorConfig::default(),
    })
}

/// Builds a spec from separate mean and sigma formula strings, as they appear
/// in run configs.
pub fn parse_model(formula: &str, sigma_formula: Option<&str>) -> Result<ModelSpec> {
    match sigma_formula {
        None => parse_formula(formula),
        Some(s) => {
            let spec = parse_formula(formula)?;
            if spec.sigma.is_some() {
                return Err(Error::Config("sigma formula given twice".into()));
            }
            let sigma = parse_formula(&format!("{}\n{s}", spec_mean_text(&spec)))?.sigma;
            Ok(ModelSpec { sigma, ..spec })
        }
    }
}

fn spec_mean_text(spec: &ModelSpec) -> String {
    format!("{} ~ {}", spec.response, spec.mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn main(a: &str) -> Term {
        Term::Main(a.into())
    }

    fn prod(a: &str, b: &str) -> Term {
        Term::Product(a.into(), b.into())
    }

    #[test]
    fn simple_additive() {
        let spec = parse_formula("S ~ gender + Y").unwrap();
        assert_eq!(spec.response, "S");
        assert!(spec.mean.intercept);
        assert_eq!(spec.mean.terms, vec![main("gender"), main("Y")]);
        assert!(spec.sigma.is_none());
    }

    #[test]
    fn squared_group_expands_mains_and_pairs() {
        let spec = parse_formula("S ~ (a+b+c)^2").unwrap();
        assert_eq!(
            spec.mean.terms,
            vec![main("a"), main("b"), main("c"), prod("a", "b"), prod("a", "c"), prod("b", "c")]
        );
    }

    #[test]
    fn random_intercepts_over_crossings() {
        let spec = parse_formula("S ~ (1 | (gender+race)^2) + bmi").unwrap();
        let groups: Vec<String> = spec.mean.groups.iter().map(|g| g.name()).collect();
        assert_eq!(groups, ["gender", "race", "gender:race"]);
        assert_eq!(spec.mean.terms, vec![main("bmi")]);
        assert!(spec.is_random_effects());
    }

    #[test]
    fn appendix_models_parse() {
        let fixed_d = "S ~ (gender+race+age_bin+bmi_bin+Y)^2 + ln.diabp + ln.ppbp + ln.tc + ln.hdl\n\
                       sigma ~ gender + race + age_bin + bmi_bin + Y";
        let spec = parse_formula(fixed_d).unwrap();
        assert_eq!(spec.mean.terms.len(), 5 + 10 + 4);
        assert_eq!(spec.sigma.as_ref().unwrap().terms.len(), 5);
        let rand_b = parse_model(
            "S ~ (1 | (gender + race + age_bin + bmi_bin + Y)^2) + ln.diabp + ln.ppbp + ln.tc + ln.hdl",
            Some("sigma ~ (1 | (gender + race + age_bin + bmi_bin + Y)^2)"),
        )
        .unwrap();
        assert_eq!(rand_b.mean.groups.len(), 15);
        assert_eq!(rand_b.sigma.unwrap().groups.len(), 15);
    }

    #[test]
    fn intercept_controls() {
        assert!(!parse_formula("S ~ 0 + x").unwrap().mean.intercept);
        let spec = parse_formula("S ~ 1").unwrap();
        assert!(spec.mean.intercept && spec.mean.terms.is_empty());
        assert!(parse_formula("S ~ 0").is_err());
    }

    #[test]
    fn errors() {
        match parse_formula("S ~ a * b").unwrap_err() {
            Error::Syntax { pos, message } => {
                assert_eq!(pos, 6);
                assert!(message.contains("unknown operator"));
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            parse_formula("S ~ (1 | (a | b))").unwrap_err(),
            Error::Unsupported(_)
        ));
        assert!(matches!(parse_formula("S ~ (a+b+c)^3").unwrap_err(), Error::Unsupported(_)));
        assert!(matches!(parse_formula("S ~ a:b:c").unwrap_err(), Error::Unsupported(_)));
        assert!(matches!(parse_formula("S ~ (a + b").unwrap_err(), Error::Syntax { .. }));
        assert!(matches!(parse_formula("S ~ a; mu ~ b").unwrap_err(), Error::Syntax { .. }));
        assert!(matches!(parse_formula("S ~ a +").unwrap_err(), Error::Syntax { .. }));
    }

    #[test]
    fn duplicates_collapse() {
        let spec = parse_formula("S ~ a + (a + b)^2 + b:a").unwrap();
        assert_eq!(spec.mean.terms, vec![main("a"), main("b"), prod("a", "b")]);
    }

    proptest! {
        #[test]
        fn expansion_count(k in 1usize..=8) {
            let names: Vec<String> = (0..k).map(|i| format!("x{i}")).collect();
            let spec = parse_formula(&format!("S ~ ({})^2", names.join("+"))).unwrap();
            prop_assert_eq!(spec.mean.terms.len(), k + k * (k - 1) / 2);
            // brute-force enumeration of the unordered pairs
            let mut pairs = Vec::new();
            for a in &names {
                for b in &names {
                    if a < b {
                        pairs.push((a.clone(), b.clone()));
                    }
                }
            }
            let got: Vec<(String, String)> = spec.mean.terms.iter().filter_map(|t| match t {
                Term::Product(a, b) => Some((a.clone().min(b.clone()), a.clone().max(b.clone()))),
                _ => None,
            }).collect();
            prop_assert_eq!(got.len(), pairs.len());
            for p in &pairs {
                prop_assert!(got.contains(p));
            }
        }

        #[test]
        fn print_parse_round_trip(
            mains in prop::collection::vec(0usize..6, 0..5),
            squared in prop::collection::vec(0usize..6, 0..4),
            groups in prop::collection::vec(0usize..6, 0..3),
            hetero in any::<bool>(),
            intercept in any::<bool>(),
        ) {
            let name = |i: &usize| ["a", "b", "c", "ln.x", "Y", "g_1"][*i].to_string();
            let mut parts: Vec<String> = if intercept { vec![] } else { vec!["0".into()] };
            parts.extend(mains.iter().map(name));
            if squared.len() >= 2 {
                parts.push(format!("({})^2", squared.iter().map(name).collect::<Vec<_>>().join(" + ")));
            }
            parts.extend(groups.iter().map(|g| format!("(1 | {})", name(g))));
            if parts.iter().all(|p| p == "0") {
                parts.push("a".into());
            }
            let mut text = format!("S ~ {}", parts.join(" + "));
            if hetero {
                text.push_str("; sigma ~ a + Y");
            }
            let spec = parse_formula(&text).unwrap();
            let again = parse_formula(&spec.to_string()).unwrap();
            prop_assert_eq!(spec, again);
        }
    }
}
