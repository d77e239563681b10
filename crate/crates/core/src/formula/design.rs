use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use super::{LinearPredictor, ModelSpec, Term, LABEL_NAME};
use crate::dataset::{Attribute, EvalDataset, NamedRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Var {
    Attr(usize),
    Label,
    Cov(usize),
}

#[derive(Debug, Clone)]
enum Factor {
    Categorical { var: Var, first: u32, n_levels: u32 },
    Continuous(usize),
}

impl Factor {
    fn width(&self) -> usize {
        match *self {
            Factor::Categorical { first, n_levels, .. } => (n_levels - first) as usize,
            Factor::Continuous(_) => 1,
        }
    }

    /// The single non-zero entry of this factor's column block, if any.
    fn entry(&self, levels: &[u32], covs: &[f64], label: u8) -> Option<(usize, f64)> {
        match *self {
            Factor::Categorical { var, first, .. } => {
                let code = code_of(var, levels, label);
                (code >= first).then(|| ((code - first) as usize, 1.0))
            }
            Factor::Continuous(c) => Some((0, covs[c])),
        }
    }
}

fn code_of(var: Var, levels: &[u32], label: u8) -> u32 {
    match var {
        Var::Attr(a) => levels[a],
        Var::Label => u32::from(label),
        Var::Cov(_) => unreachable!("continuous variables have no level code"),
    }
}

/// One formula term: no factors for the intercept, one for a main effect,
/// two for a product.
#[derive(Debug, Clone)]
struct Block {
    factors: Vec<Factor>,
}

impl Block {
    fn width(&self) -> usize {
        self.factors.iter().map(Factor::width).product()
    }
}

#[derive(Debug, Clone)]
struct GroupLayout {
    name: String,
    vars: Vec<Var>,
    sizes: Vec<u32>,
    level_names: Vec<String>,
}

impl GroupLayout {
    fn level(&self, levels: &[u32], label: u8) -> u32 {
        self.vars
            .iter()
            .zip(&self.sizes)
            .fold(0, |acc, (&v, &size)| acc * size + code_of(v, levels, label))
    }
}

/// Column layout of one linear predictor against a dataset schema.
#[derive(Debug, Clone)]
pub struct PredictorLayout {
    blocks: Vec<Block>,
    column_names: Vec<String>,
    groups: Vec<GroupLayout>,
}

/// Fixed design row plus the random-intercept level of each group.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub fixed: Vec<f64>,
    pub groups: Vec<u32>,
}

/// Random-intercept design of one group: full one-column-per-level encoding,
/// stored as the level index of every record.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDesign {
    pub name: String,
    pub level_names: Vec<String>,
    pub levels: Vec<u32>,
}

impl GroupDesign {
    pub fn n_levels(&self) -> usize {
        self.level_names.len()
    }
}

/// Design of one linear predictor: a dense fixed-effect block followed by
/// random-intercept columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub fixed_names: Vec<String>,
    pub groups: Vec<GroupDesign>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_fixed(&self) -> usize {
        self.values.ncols()
    }

    pub fn ncols(&self) -> usize {
        self.n_fixed() + self.groups.iter().map(GroupDesign::n_levels).sum::<usize>()
    }

    /// All column names: fixed columns, then `group[level]` for every random
    /// intercept.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = self.fixed_names.clone();
        for g in &self.groups {
            names.extend(g.level_names.iter().map(|l| format!("{}[{l}]", g.name)));
        }
        names
    }

    /// Group index of every column (`None` for fixed columns).
    pub fn group_index(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.n_fixed()];
        for (i, g) in self.groups.iter().enumerate() {
            out.extend(std::iter::repeat_n(Some(i), g.n_levels()));
        }
        out
    }

    /// Materializes the random-intercept indicators next to the fixed block.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.nrows();
        let mut out = DMatrix::zeros(n, self.ncols());
        out.columns_mut(0, self.n_fixed()).copy_from(&self.values);
        let mut offset = self.n_fixed();
        for g in &self.groups {
            for (r, &l) in g.levels.iter().enumerate() {
                out[(r, offset + l as usize)] = 1.0;
            }
            offset += g.n_levels();
        }
        out
    }

    pub fn row(&self, n: usize) -> DesignRow {
        DesignRow {
            fixed: self.values.row(n).iter().copied().collect(),
            groups: self.groups.iter().map(|g| g.levels[n]).collect(),
        }
    }
}

struct Resolver<'a> {
    attrs: &'a [Attribute],
    covariates: &'a [String],
}

impl Resolver<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        if let Some(a) = self.attrs.iter().position(|a| a.name == name) {
            Ok(Var::Attr(a))
        } else if name == LABEL_NAME {
            Ok(Var::Label)
        } else if let Some(c) = self.covariates.iter().position(|c| c == name) {
            Ok(Var::Cov(c))
        } else {
            Err(Error::UnresolvedName(name.to_string()))
        }
    }

    fn levels(&self, var: Var) -> Vec<String> {
        match var {
            Var::Attr(a) => self.attrs[a].levels.clone(),
            Var::Label => vec!["0".into(), "1".into()],
            Var::Cov(_) => Vec::new(),
        }
    }

    fn name(&self, var: Var) -> &str {
        match var {
            Var::Attr(a) => &self.attrs[a].name,
            Var::Label => LABEL_NAME,
            Var::Cov(c) => &self.covariates[c],
        }
    }

    fn factor(&self, var: Var, full: bool) -> Factor {
        match var {
            Var::Cov(c) => Factor::Continuous(c),
            _ => Factor::Categorical {
                var,
                first: u32::from(!full),
                n_levels: self.levels(var).len() as u32,
            },
        }
    }

    fn factor_names(&self, f: &Factor) -> Vec<String> {
        match *f {
            Factor::Continuous(c) => vec![self.covariates[c].clone()],
            Factor::Categorical { var, first, .. } => self.levels(var)[first as usize..]
                .iter()
                .map(|l| format!("{}[{l}]", self.name(var)))
                .collect(),
        }
    }

    fn predictor(&self, lp: &LinearPredictor) -> Result<PredictorLayout> {
        let mut blocks = Vec::new();
        let mut column_names = Vec::new();
        if lp.intercept {
            blocks.push(Block { factors: Vec::new() });
            column_names.push("(Intercept)".to_string());
        }
        // without an intercept the first categorical main effect keeps all levels
        let mut full_available = !lp.intercept;
        for term in &lp.terms {
            let factors = match term {
                Term::Main(a) => {
                    let v = self.var(a)?;
                    let full = full_available && !matches!(v, Var::Cov(_));
                    if full {
                        full_available = false;
                    }
                    vec![self.factor(v, full)]
                }
                Term::Product(a, b) => vec![self.factor(self.var(a)?, false), self.factor(self.var(b)?, false)],
            };
            let names = match factors.as_slice() {
                [f] => self.factor_names(f),
                [f, g] => {
                    let (fa, ga) = (self.factor_names(f), self.factor_names(g));
                    fa.iter()
                        .flat_map(|x| ga.iter().map(move |y| format!("{x}:{y}")))
                        .collect()
                }
                _ => unreachable!(),
            };
            column_names.extend(names);
            blocks.push(Block { factors });
        }
        let mut groups = Vec::new();
        for g in &lp.groups {
            let vars: Vec<Var> = g.factors.iter().map(|f| self.var(f)).collect::<Result<_>>()?;
            if let Some(v) = vars.iter().find(|v| matches!(v, Var::Cov(_))) {
                return Err(Error::Unsupported(format!(
                    "random intercepts grouped by continuous covariate `{}`",
                    self.name(*v)
                )));
            }
            let level_lists: Vec<Vec<String>> = vars.iter().map(|&v| self.levels(v)).collect();
            let level_names = match level_lists.as_slice() {
                [a] => a.clone(),
                [a, b] => a.iter().flat_map(|x| b.iter().map(move |y| format!("{x}:{y}"))).collect(),
                _ => unreachable!(),
            };
            groups.push(GroupLayout {
                name: g.name(),
                sizes: level_lists.iter().map(|l| l.len() as u32).collect(),
                vars,
                level_names,
            });
        }
        Ok(PredictorLayout {
            blocks,
            column_names,
            groups,
        })
    }
}

impl PredictorLayout {
    pub fn n_fixed(&self) -> usize {
        self.column_names.len()
    }

    pub fn fixed_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_name(&self, g: usize) -> &str {
        &self.groups[g].name
    }

    pub fn group_levels(&self, g: usize) -> &[String] {
        &self.groups[g].level_names
    }

    pub fn intercept_column(&self) -> Option<usize> {
        self.blocks.iter().position(|b| b.factors.is_empty())
    }

    fn fill_fixed(&self, levels: &[u32], covs: &[f64], label: u8, out: &mut [f64]) {
        out.fill(0.0);
        let mut offset = 0;
        for block in &self.blocks {
            match block.factors.as_slice() {
                [] => out[offset] = 1.0,
                [f] => {
                    if let Some((i, v)) = f.entry(levels, covs, label) {
                        out[offset + i] = v;
                    }
                }
                [f, g] => {
                    if let (Some((i, u)), Some((j, v))) =
                        (f.entry(levels, covs, label), g.entry(levels, covs, label))
                    {
                        out[offset + i * g.width() + j] = u * v;
                    }
                }
                _ => unreachable!(),
            }
            offset += block.width();
        }
    }

    fn row(&self, levels: &[u32], covs: &[f64], label: u8) -> DesignRow {
        let mut fixed = vec![0.0; self.n_fixed()];
        self.fill_fixed(levels, covs, label, &mut fixed);
        DesignRow {
            fixed,
            groups: self.groups.iter().map(|g| g.level(levels, label)).collect(),
        }
    }

    pub fn design(&self, d: &EvalDataset) -> DesignMatrix {
        let n = d.len();
        let p = self.n_fixed();
        let mut values = DMatrix::zeros(n, p);
        let mut row = vec![0.0; p];
        for i in 0..n {
            self.fill_fixed(d.codes(i), d.covariates(i), d.label(i), &mut row);
            for (j, &v) in row.iter().enumerate() {
                values[(i, j)] = v;
            }
        }
        let groups = self
            .groups
            .iter()
            .map(|g| GroupDesign {
                name: g.name.clone(),
                level_names: g.level_names.clone(),
                levels: (0..n).map(|i| g.level(d.codes(i), d.label(i))).collect(),
            })
            .collect();
        DesignMatrix {
            values,
            fixed_names: self.column_names.clone(),
            groups,
        }
    }
}

/// A model spec compiled against a dataset schema.
#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub spec: ModelSpec,
    pub mean: PredictorLayout,
    pub sigma: Option<PredictorLayout>,
    attrs: Vec<Attribute>,
    covariates: Vec<String>,
    fingerprint: String,
}

impl ModelLayout {
    pub fn new(spec: &ModelSpec, d: &EvalDataset) -> Result<ModelLayout> {
        let r = Resolver {
            attrs: d.attributes(),
            covariates: d.covariate_names(),
        };
        let mean = r.predictor(&spec.mean)?;
        let sigma = spec.sigma.as_ref().map(|s| r.predictor(s)).transpose()?;
        let mut h = Sha256::new();
        h.update(spec.to_string().as_bytes());
        h.update(serde_json::to_vec(&spec.prior).expect("prior serializes"));
        for a in d.attributes() {
            h.update(b"\x00attr\x00");
            h.update(a.name.as_bytes());
            for l in &a.levels {
                h.update(b"\x00");
                h.update(l.as_bytes());
            }
        }
        for c in d.covariate_names() {
            h.update(b"\x00cov\x00");
            h.update(c.as_bytes());
        }
        let fingerprint = hex::encode(&h.finalize()[..16]);
        Ok(ModelLayout {
            spec: spec.clone(),
            mean,
            sigma,
            attrs: d.attributes().to_vec(),
            covariates: d.covariate_names().to_vec(),
            fingerprint,
        })
    }

    /// Hash of the spec, priors and dataset schema. Posterior draws carry it so
    /// they are never applied to an incompatible model.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn conforms(&self, d: &EvalDataset) -> bool {
        d.attributes() == self.attrs.as_slice() && d.covariate_names() == self.covariates.as_slice()
    }

    pub fn design(&self, d: &EvalDataset) -> Result<(DesignMatrix, Option<DesignMatrix>)> {
        if !self.conforms(d) {
            return Err(Error::Shape("dataset schema differs from the compiled model".into()));
        }
        Ok((self.mean.design(d), self.sigma.as_ref().map(|s| s.design(d))))
    }

    /// Design rows for a record described by names.
    pub fn predict_row(&self, record: &NamedRecord) -> Result<(DesignRow, Option<DesignRow>)> {
        let schema = EvalDataset::new(self.attrs.clone(), self.covariates.clone());
        let (levels, covs) = schema.encode(record)?;
        if record.label > 1 {
            return Err(Error::Validation {
                row: 0,
                message: format!("label {} is not 0 or 1", record.label),
            });
        }
        Ok((
            self.mean.row(&levels, &covs, record.label),
            self.sigma.as_ref().map(|s| s.row(&levels, &covs, record.label)),
        ))
    }
}

pub fn build_design(spec: &ModelSpec, d: &EvalDataset) -> Result<(DesignMatrix, Option<DesignMatrix>)> {
    ModelLayout::new(spec, d)?.design(d)
}
